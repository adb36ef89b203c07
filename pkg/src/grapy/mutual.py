"""Cross-dataset mutual learning: shared coarse levels, per-dataset fine branches.

One shared core (backbone plus pyramid Levels 1 and 2) is referenced, not
copied, by every dataset branch; each branch owns its main head, Level-3
pyramid weights and fused prediction head sized to its own fine label count.
A step on one dataset therefore updates the shared core and that branch
only. The multi-dataset objective is the sum of per-dataset two-branch
losses, realized either across round-robin steps or in a single accumulated
step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hierarchy import Taxonomy
from .model import (SGD, BackboneParams, ConvLayer, ModelParams, TrainConfig,
                    TrainLog, batch_loss, clip_gradients, forward, main_phase_lr,
                    train_step)
from .pyramid import GpmLevelParams, GpmParams
from .synthdata import Dataset, SampleBatch
from .tensor import Tape, Tensor, uniform_init


@dataclass
class SharedCore:
    """Parameters every branch references: backbone (optional) and Levels 1-2."""

    backbone: BackboneParams | None
    gpm_l1: GpmLevelParams
    gpm_l2: GpmLevelParams

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.backbone is not None:
            out.update(self.backbone.named("shared.backbone"))
        out.update(self.gpm_l1.named("shared.gpm.level1"))
        out.update(self.gpm_l2.named("shared.gpm.level2"))
        return out


@dataclass
class DatasetBranch:
    index: int                      # 1-based dataset index
    taxonomy: Taxonomy
    backbone: BackboneParams | None  # only set when the backbone is not shared
    main_head: ConvLayer
    gpm_l3: GpmLevelParams
    head: Tensor

    def named(self) -> dict[str, Tensor]:
        prefix = f"branch{self.index}"
        out: dict[str, Tensor] = {}
        if self.backbone is not None:
            out.update(self.backbone.named(f"{prefix}.backbone"))
        out.update(self.main_head.named(f"{prefix}.main_head"))
        out.update(self.gpm_l3.named(f"{prefix}.gpm.level3"))
        out[f"{prefix}.gpm.head"] = self.head
        return out


@dataclass
class MlModel:
    shared: SharedCore
    branches: list[DatasetBranch]
    loss_weight: float = 1.0
    pooling: str = "both"
    iterations: int = 3

    @classmethod
    def init(cls, seed_or_rng, taxonomies: list[Taxonomy], c_in: int = 3,
             width: int = 16, channels: int = 8, loss_weight: float = 1.0,
             pooling: str = "both", iterations: int = 3,
             share_backbone: bool = True, fresh_weights: bool = False) -> "MlModel":
        if len(taxonomies) < 2:
            raise ValueError("mutual learning needs at least 2 datasets")
        rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
               else np.random.default_rng(seed_or_rng))
        c_l = 2 * channels if pooling == "both" else channels
        fresh = iterations if fresh_weights else 0
        shared = SharedCore(
            backbone=BackboneParams.init(rng, c_in, width, channels) if share_backbone else None,
            gpm_l1=GpmLevelParams.init(rng, c_l, channels, fresh),
            gpm_l2=GpmLevelParams.init(rng, c_l, channels, fresh),
        )
        branches = []
        for d, tax in enumerate(taxonomies, start=1):
            bb = None if share_backbone else BackboneParams.init(rng, c_in, width, channels)
            main_head = ConvLayer.init(rng, 1, 1, channels, tax.k3)
            gpm_l3 = GpmLevelParams.init(rng, c_l, channels, fresh)
            head = uniform_init(rng, (1, 1, 4 * channels, tax.k3), 4 * channels)
            branches.append(DatasetBranch(d, tax, bb, main_head, gpm_l3, head))
        return cls(shared, branches, loss_weight, pooling, iterations)

    @property
    def share_backbone(self) -> bool:
        return self.shared.backbone is not None

    def branch(self, d: int) -> DatasetBranch:
        if not 1 <= d <= len(self.branches):
            raise ValueError(f"dataset index must be in [1, {len(self.branches)}], got {d}")
        return self.branches[d - 1]

    def branch_params(self, d: int) -> ModelParams:
        """A single-dataset view onto branch ``d``; shares storage, copies nothing."""
        br = self.branch(d)
        gpm = GpmParams(levels={1: self.shared.gpm_l1, 2: self.shared.gpm_l2,
                                3: br.gpm_l3},
                        head=br.head, pooling=self.pooling, iterations=self.iterations)
        backbone = self.shared.backbone if self.share_backbone else br.backbone
        return ModelParams(backbone=backbone, main_head=br.main_head, gpm=gpm,
                           loss_weight=self.loss_weight)

    def named(self) -> dict[str, Tensor]:
        out = self.shared.named()
        for br in self.branches:
            out.update(br.named())
        return out

    def step_params(self, d: int) -> dict[str, Tensor]:
        """Parameters an update on dataset ``d`` may touch: shared + branch d."""
        out = self.shared.named()
        out.update(self.branch(d).named())
        return out

    def taxonomy_names(self) -> str:
        return ",".join(br.taxonomy.dataset_name for br in self.branches)


def ml_forward(image, d: int, model: MlModel, gt_labels: np.ndarray | None = None,
               main_only: bool = False):
    """Forward through branch ``d``: shared Levels 1-2, branch-specific Level 3."""
    br = model.branch(d)
    return forward(image, model.branch_params(d), br.taxonomy,
                   gt_labels=gt_labels, main_only=main_only)


def ml_step(batch: SampleBatch, model: MlModel, opt: SGD, gt_masks: bool = False,
            main_only: bool = False, lr: float | None = None,
            clip_norm: float = 5.0) -> float:
    """One update from a single-dataset batch; gradients reach shared + branch d."""
    d = batch.dataset_index
    br = model.branch(d)
    return train_step(batch, model.branch_params(d), br.taxonomy, opt,
                      gt_masks=gt_masks, main_only=main_only, lr=lr,
                      clip_norm=clip_norm)


def ml_step_accumulated(batches: list[SampleBatch], model: MlModel, opt: SGD,
                        gt_masks: bool = False, lr: float | None = None,
                        clip_norm: float = 5.0):
    """One update from one batch per dataset; the loss is the exact sum of the
    per-dataset losses (returned alongside for the additivity check)."""
    with Tape() as tape:
        per_dataset = []
        total = None
        for batch in batches:
            params = model.branch_params(batch.dataset_index)
            term = batch_loss(batch, params, model.branch(batch.dataset_index).taxonomy,
                              gt_masks=gt_masks)
            per_dataset.append(float(term.data))
            total = term if total is None else total + term
    value = float(total.data)
    grad_map = tape.backward(total)
    name_of = {id(t): name for name, t in opt.params.items()}
    grads = {name_of[id(t)]: g for t, g in grad_map.items() if id(t) in name_of}
    opt.step(clip_gradients(grads, clip_norm), lr=lr)
    return value, per_dataset


class RoundRobinSampler:
    """Cycles datasets 1, 2, 3, 1, 2, ...; each dataset reshuffles independently."""

    def __init__(self, datasets: list[Dataset], rng: np.random.Generator, batch_size: int):
        self._datasets = datasets
        self._rng = rng
        self._batch_size = batch_size
        self._iters = [iter(()) for _ in datasets]
        self._cursor = 0

    def next_batch(self) -> SampleBatch:
        i = self._cursor
        self._cursor = (self._cursor + 1) % len(self._datasets)
        try:
            return next(self._iters[i])
        except StopIteration:
            self._iters[i] = self._datasets[i].batches(self._rng, self._batch_size,
                                                       dataset_index=i + 1)
            return next(self._iters[i])


@dataclass
class MlTrainConfig(TrainConfig):
    epochs_finetune: int = 10
    share_backbone: bool = True
    accumulate: bool = False

    def validate(self) -> None:
        super().validate()
        if self.epochs_finetune < 0:
            raise ValueError("finetune epochs must be >= 0")


def _steps_per_epoch(datasets: list[Dataset], batch_size: int) -> int:
    return sum(-(-len(ds) // batch_size) for ds in datasets)


def train_mutual(datasets: list[Dataset], cfg: MlTrainConfig,
                 log: TrainLog | None = None, finetune_on: int | None = None,
                 model: MlModel | None = None) -> MlModel:
    """Joint pretrain of all main branches, then joint two-branch training with
    round-robin dataset sampling, then optional fine-tuning on one dataset."""
    cfg.validate()
    log = log or TrainLog(None)
    if model is None:
        model = MlModel.init(np.random.default_rng(np.random.SeedSequence([cfg.seed, 0])),
                             [ds.taxonomy for ds in datasets], c_in=cfg.c_in,
                             width=cfg.width, channels=cfg.channels,
                             loss_weight=cfg.loss_weight, pooling=cfg.pooling,
                             iterations=cfg.iterations, share_backbone=cfg.share_backbone,
                             fresh_weights=cfg.fresh_weights)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    sampler = RoundRobinSampler(datasets, rng, cfg.batch_size)
    per_epoch = _steps_per_epoch(datasets, cfg.batch_size)
    step = 0
    epoch = 0

    def run_phase(epochs, opt, gt_masks, main_only, lr_for):
        nonlocal step, epoch
        for _ in range(epochs):
            lr = lr_for()
            for _ in range(per_epoch):
                batch = sampler.next_batch()
                loss = ml_step(batch, model, opt, gt_masks=gt_masks,
                               main_only=main_only, lr=lr, clip_norm=cfg.clip_norm)
                step += 1
                log.write(epoch, step, loss, lr,
                          dataset=model.branch(batch.dataset_index).taxonomy.dataset_name)
            epoch += 1

    # Phase 1: joint pretrain of backbone(s) + per-dataset main heads.
    pre_params = {n: t for n, t in model.named().items() if ".gpm." not in n}
    pre_opt = SGD(pre_params, cfg.lr, cfg.momentum)
    run_phase(cfg.epochs_pretrain, pre_opt, False, True, lambda: cfg.lr)

    # Phase 2: joint mutual training of everything.
    opt = SGD(model.named(), cfg.lr, cfg.momentum)
    if cfg.accumulate:
        for _ in range(cfg.epochs_main):
            lr = main_phase_lr(cfg)
            for _ in range(max(1, per_epoch // len(datasets))):
                group = [sampler.next_batch() for _ in range(len(datasets))]
                loss, _ = ml_step_accumulated(group, model, opt,
                                              gt_masks=cfg.gt_masks, lr=lr,
                                              clip_norm=cfg.clip_norm)
                step += 1
                log.write(epoch, step, loss, lr, dataset="all")
            epoch += 1
    else:
        run_phase(cfg.epochs_main, opt, cfg.gt_masks, False,
                  lambda: main_phase_lr(cfg))

    # Phase 3: optional fine-tune of shared core + target branch on one dataset.
    if finetune_on is not None and cfg.epochs_finetune > 0:
        d = finetune_on
        ft_opt = SGD(model.step_params(d), cfg.lr * cfg.lr_decay, cfg.momentum)
        ft_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
        for _ in range(cfg.epochs_finetune):
            for batch in datasets[d - 1].batches(ft_rng, cfg.batch_size, dataset_index=d):
                loss = ml_step(batch, model, ft_opt, gt_masks=cfg.gt_masks,
                               clip_norm=cfg.clip_norm)
                step += 1
                log.write(epoch, step, loss, cfg.lr * cfg.lr_decay,
                          dataset=model.branch(d).taxonomy.dataset_name)
            epoch += 1
    return model


def snapshot(named: dict[str, Tensor]) -> dict[str, bytes]:
    return {name: t.data.tobytes() for name, t in named.items()}


def audit_sharing(model: MlModel, datasets: list[Dataset], lr: float = 0.05,
                  batch_size: int = 2, seed: int = 0) -> tuple[bool, list[str]]:
    """Probe step per dataset: other branches must stay bitwise unchanged while
    at least one shared parameter moves. Returns (ok, report lines)."""
    report = []
    ok = True
    rng = np.random.default_rng(seed)
    for d in range(1, len(model.branches) + 1):
        before = {dd: snapshot(model.branch(dd).named()) for dd in
                  range(1, len(model.branches) + 1)}
        shared_before = snapshot(model.shared.named())
        batch = next(datasets[d - 1].batches(rng, batch_size, dataset_index=d))
        opt = SGD(model.step_params(d), lr, momentum=0.0)
        ml_step(batch, model, opt)
        shared_changed = snapshot(model.shared.named()) != shared_before
        if not shared_changed:
            ok = False
            report.append(f"step on dataset {d}: no shared parameter changed")
        for dd in range(1, len(model.branches) + 1):
            if dd == d:
                continue
            if snapshot(model.branch(dd).named()) != before[dd]:
                ok = False
                report.append(f"step on dataset {d}: branch {dd} parameters changed")
        report.append(f"step on dataset {d}: shared changed={shared_changed}, "
                      f"other branches untouched")
    return ok, report
