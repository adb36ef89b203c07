"""Graph pyramid: category pooling, attention reasoning, redistribution.

Three stacked levels run coarse to fine. At each level the current feature
map is pooled into one node per category (masked mean and channelwise max,
concatenated), the nodes attend to each other through a bottleneck
self-attention refined over several residual iterations, and the refined
node features are projected back to feature width and added onto each
category's pixels. The final prediction head sees the initial map
concatenated with all refined maps.

Category masks come from the per-pixel argmax of the main-branch prediction,
coarsened through the taxonomy; they are constants inside a training step
(argmax never joins the tape).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hierarchy import Taxonomy, coarsen
from .tensor import (Tensor, argmax_channel, broadcast_nodes, concat, conv2d,
                     masked_pool, matmul, softmax_channels, softmax_rows,
                     transpose, uniform_init)

GCR_ITERATIONS = 3


@dataclass
class NodeSet:
    """Per-level graph nodes: pooled features plus the masks that made them."""

    level: int
    features: Tensor          # (K_l, C_l)
    label_map: np.ndarray     # (H, W) category index per pixel at this level
    counts: np.ndarray        # (K_l,) pixels per category

    @property
    def occupancy(self) -> np.ndarray:
        return self.counts > 0

    @property
    def masks(self) -> np.ndarray:
        """Boolean (K_l, H, W) masks; exactly one is true per pixel."""
        k = self.features.shape[0]
        return self.label_map[None, :, :] == np.arange(k)[:, None, None]


@dataclass
class GpmLevelParams:
    """Per-level weights: two bottleneck projections and the output projection."""

    q1: Tensor
    q2: Tensor
    out_proj: Tensor
    extra: list[tuple[Tensor, Tensor]]  # fresh per-iteration (q1, q2), usually empty

    @classmethod
    def init(cls, rng: np.random.Generator, c_l: int, c_out: int,
             fresh_iterations: int = 0) -> "GpmLevelParams":
        bottleneck = max(1, c_l // 8)
        q1 = uniform_init(rng, (c_l, bottleneck), c_l)
        q2 = uniform_init(rng, (c_l, bottleneck), c_l)
        # zero-init so each level starts as an identity residual; the reasoning
        # iterations amplify node features ~2x each, and injecting that at a
        # random scale makes desk-scale training diverge
        out_proj = Tensor(np.zeros((c_l, c_out)), requires_grad=True)
        extra = [(uniform_init(rng, (c_l, bottleneck), c_l),
                  uniform_init(rng, (c_l, bottleneck), c_l))
                 for _ in range(max(0, fresh_iterations - 1))]
        return cls(q1, q2, out_proj, extra)

    def projections(self, iteration: int) -> tuple[Tensor, Tensor]:
        """Shared weights by default; per-iteration pairs when ``extra`` is filled."""
        if iteration == 0 or not self.extra:
            return self.q1, self.q2
        return self.extra[iteration - 1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.q1": self.q1, f"{prefix}.q2": self.q2,
               f"{prefix}.out_proj": self.out_proj}
        for i, (q1, q2) in enumerate(self.extra, start=2):
            out[f"{prefix}.q1_iter{i}"] = q1
            out[f"{prefix}.q2_iter{i}"] = q2
        return out


@dataclass
class GpmParams:
    """The whole pyramid: per-level weights plus the fused prediction head."""

    levels: dict[int, GpmLevelParams]
    head: Tensor              # (1, 1, (1 + n_levels) * C, K_3)
    pooling: str = "both"     # both | ave | max
    iterations: int = GCR_ITERATIONS

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, k3: int,
             pooling: str = "both", levels=(1, 2, 3), iterations: int = GCR_ITERATIONS,
             fresh_weights: bool = False) -> "GpmParams":
        if pooling not in ("both", "ave", "max"):
            raise ValueError(f"pooling must be both|ave|max, got {pooling!r}")
        levels = tuple(sorted(levels))
        if not levels or any(l not in (1, 2, 3) for l in levels):
            raise ValueError(f"levels must be a non-empty subset of (1, 2, 3), got {levels}")
        c_l = 2 * channels if pooling == "both" else channels
        fresh = iterations if fresh_weights else 0
        lv = {l: GpmLevelParams.init(rng, c_l, channels, fresh) for l in levels}
        head_in = (1 + len(levels)) * channels
        # zero-init: the head joins training after the backbone has grown large
        # activations; a random head starts saturated and destabilizes phase 2
        head = Tensor(np.zeros((1, 1, head_in, k3)), requires_grad=True)
        return cls(levels=lv, head=head, pooling=pooling, iterations=iterations)

    def named(self, prefix: str = "gpm") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for l in sorted(self.levels):
            out.update(self.levels[l].named(f"{prefix}.level{l}"))
        out[f"{prefix}.head"] = self.head
        return out


def masks_from_prediction(y: Tensor, taxonomy: Taxonomy, level: int) -> np.ndarray:
    """Category label map at ``level`` from the per-pixel argmax of ``y``.

    Never recorded on the tape: downstream ops treat the map as a constant.
    """
    fine = argmax_channel(y)
    return coarsen(fine, taxonomy, level)


def aggregate(f_prev: Tensor, label_map: np.ndarray, k: int, level: int,
              pooling: str = "both") -> NodeSet:
    """Pool the feature map into one node per category (masked mean + max)."""
    feats, counts = masked_pool(f_prev, label_map, k, mode=pooling)
    return NodeSet(level=level, features=feats, label_map=label_map, counts=counts)


def reason(features: Tensor, params: GpmLevelParams, iterations: int = GCR_ITERATIONS) -> Tensor:
    """Iterated residual self-attention over the node rows.

    Per iteration: scores = (v q1)(v q2)^T row-softmaxed into attention, the
    attended mix a v is added back onto v, and the sum feeds the next round.
    """
    v = features
    for it in range(iterations):
        q1, q2 = params.projections(it)
        scores = matmul(matmul(v, q1), transpose(matmul(v, q2)))
        attn = softmax_rows(scores)
        v = v + matmul(attn, v)
    return v


def attention_rows(features: Tensor, params: GpmLevelParams, iterations: int = GCR_ITERATIONS):
    """The per-iteration attention matrices (diagnostics; plain arrays)."""
    v = features
    mats = []
    for it in range(iterations):
        q1, q2 = params.projections(it)
        scores = matmul(matmul(v, q1), transpose(matmul(v, q2)))
        attn = softmax_rows(scores)
        mats.append(attn.data.copy())
        v = v + matmul(attn, v)
    return mats


def distribute(f_prev: Tensor, v_gcr: Tensor, out_proj: Tensor,
               label_map: np.ndarray) -> Tensor:
    """Project refined nodes back to feature width and add them on their pixels.

    Categories with no pixels distribute nothing by construction: no pixel
    carries their index.
    """
    w = matmul(v_gcr, out_proj)
    return f_prev + broadcast_nodes(w, label_map)


def level_forward(f_prev: Tensor, label_map: np.ndarray, k: int, level: int,
                  params: GpmLevelParams, pooling: str, iterations: int) -> Tensor:
    nodes = aggregate(f_prev, label_map, k, level, pooling)
    refined = reason(nodes.features, params, iterations)
    return distribute(f_prev, refined, params.out_proj, label_map)


def pyramid_forward(f: Tensor, y: Tensor, taxonomy: Taxonomy, params: GpmParams,
                    label_maps: dict[int, np.ndarray] | None = None):
    """Run the pyramid coarse to fine; returns (f_hat, y_hat).

    ``label_maps`` overrides the prediction-derived masks (used by the
    ground-truth-mask debug mode and by gradient checks, where masks must
    stay fixed).
    """
    maps = label_maps or {}
    f_l = f
    pyramid = [f]
    for level in sorted(params.levels):
        label_map = maps.get(level)
        if label_map is None:
            label_map = masks_from_prediction(y, taxonomy, level)
        f_l = level_forward(f_l, label_map, taxonomy.k_at(level), level,
                            params.levels[level], params.pooling, params.iterations)
        pyramid.append(f_l)
    f_hat = concat(pyramid, axis=2)
    y_hat = softmax_channels(conv2d(f_hat, params.head))
    return f_hat, y_hat


def gt_label_maps(q: np.ndarray, taxonomy: Taxonomy, levels) -> dict[int, np.ndarray]:
    """Coarsened ground-truth maps for every pyramid level (debug mask mode)."""
    return {level: coarsen(q, taxonomy, level) for level in levels}
