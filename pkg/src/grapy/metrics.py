"""Confusion matrices, mean IoU and mean accuracy at any hierarchy level."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .hierarchy import coarsen
from .model import ModelParams, forward
from .synthdata import Dataset
from .tensor import argmax_channel


class ConfusionMatrix:
    """K x K integer counts; rows are ground truth, columns are predictions."""

    def __init__(self, k: int, counts: np.ndarray | None = None):
        self.k = k
        self.counts = np.zeros((k, k), np.int64) if counts is None else counts

    def add(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        p, g = pred.reshape(-1), gt.reshape(-1)
        for name, arr in (("prediction", p), ("ground truth", g)):
            if arr.size and (arr.min() < 0 or arr.max() >= self.k):
                raise ValueError(f"{name} labels out of range [0, {self.k})")
        flat = np.bincount(g * self.k + p, minlength=self.k * self.k)
        self.counts += flat.reshape(self.k, self.k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.k != self.k:
            raise ValueError(f"cannot merge {other.k}-class into {self.k}-class matrix")
        self.counts += other.counts
        return self

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN for classes absent from both pred and gt."""
        diag = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=1) + self.counts.sum(axis=0) - np.diag(self.counts)
        out = np.full(self.k, np.nan)
        nz = union > 0
        out[nz] = diag[nz] / union[nz]
        return out

    def per_class_recall(self) -> np.ndarray:
        """Recall per class; NaN for classes with no ground-truth pixels."""
        diag = np.diag(self.counts).astype(np.float64)
        support = self.counts.sum(axis=1)
        out = np.full(self.k, np.nan)
        nz = support > 0
        out[nz] = diag[nz] / support[nz]
        return out

    def miou(self) -> float:
        """Mean IoU over classes present in prediction or ground truth."""
        iou = self.per_class_iou()
        valid = ~np.isnan(iou)
        if not valid.any():
            raise ValueError("no class has any pixels; mIoU undefined")
        return float(iou[valid].mean())

    def mean_accuracy(self, include_background: bool = True) -> float:
        """Mean per-class recall over classes with ground-truth support."""
        rec = self.per_class_recall()
        if not include_background:
            rec = rec[1:]
        valid = ~np.isnan(rec)
        if not valid.any():
            raise ValueError("no class has ground-truth pixels; mean accuracy undefined")
        return float(rec[valid].mean())


def _branches_of(params: ModelParams) -> list[str]:
    return ["main"] + (["gpm"] if params.gpm is not None else [])


def confusions(params: ModelParams, dataset: Dataset, workers: int = 1,
               gt_masks: bool = False) -> dict[str, dict[int, ConfusionMatrix]]:
    """One forward per sample, confusion matrices for every branch and level."""
    tax = dataset.taxonomy
    branches = _branches_of(params)

    def one(sample):
        out = forward(sample.image, params, tax,
                      gt_labels=sample.labels if gt_masks else None)
        preds = {"main": argmax_channel(out.y)}
        if out.y_hat is not None:
            preds["gpm"] = argmax_channel(out.y_hat)
        cms = {b: {} for b in preds}
        for b, pred in preds.items():
            for level in (1, 2, 3):
                cm = ConfusionMatrix(tax.k_at(level))
                cm.add(coarsen(pred, tax, level), coarsen(sample.labels, tax, level))
                cms[b][level] = cm
        return cms

    total = {b: {level: ConfusionMatrix(tax.k_at(level)) for level in (1, 2, 3)}
             for b in branches}

    def fold(cms):
        for b, levels in cms.items():
            for level, cm in levels.items():
                total[b][level].merge(cm)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for cms in pool.map(one, dataset.samples):
                fold(cms)
    else:
        for sample in dataset.samples:
            fold(one(sample))
    return total


def evaluate_at_level(params: ModelParams, dataset: Dataset, level: int,
                      branch: str = "gpm", workers: int = 1,
                      gt_masks: bool = False) -> tuple[float, float]:
    """(mIoU, mean accuracy) with predictions and ground truth coarsened to ``level``."""
    if level not in (1, 2, 3):
        raise ValueError(f"level must be 1, 2 or 3, got {level}")
    if branch not in ("main", "gpm"):
        raise ValueError(f"branch must be 'main' or 'gpm', got {branch!r}")
    if branch == "gpm" and params.gpm is None:
        raise ValueError("model has no pyramid branch; evaluate branch='main'")
    cm = confusions(params, dataset, workers, gt_masks)[branch][level]
    return cm.miou(), cm.mean_accuracy()


def evaluate_report(params: ModelParams, dataset: Dataset, workers: int = 1):
    """Metrics for both branches at all three levels plus the raw matrices."""
    cms = confusions(params, dataset, workers)
    report = {b: {level: (cms[b][level].miou(), cms[b][level].mean_accuracy())
                  for level in (1, 2, 3)}
              for b in cms}
    return report, cms


def report_text(report: dict, cms: dict, dataset: Dataset) -> str:
    """Human-readable metrics table with per-class rows at the finest level."""
    lines = [f"dataset {dataset.name} ({len(dataset)} samples, "
             f"taxonomy {dataset.taxonomy.dataset_name})"]
    width = max(len(n) for n in dataset.taxonomy.fine_labels)
    for branch, levels in report.items():
        lines.append(f"[{branch} branch]")
        cm = cms[branch][3]
        iou, rec = cm.per_class_iou(), cm.per_class_recall()
        for i, name in enumerate(dataset.taxonomy.fine_labels):
            f_iou = "   n/a" if np.isnan(iou[i]) else f"{iou[i]:.4f}"
            f_rec = "   n/a" if np.isnan(rec[i]) else f"{rec[i]:.4f}"
            lines.append(f"  {name:<{width}}  iou={f_iou}  recall={f_rec}")
        for level in (1, 2, 3):
            miou, macc = levels[level]
            lines.append(f"  level{level}: miou={miou:.4f} mean_accuracy={macc:.4f}")
    return "\n".join(lines) + "\n"


def report_kv(report: dict) -> str:
    """Machine-readable `key=value` lines."""
    lines = []
    for branch, levels in report.items():
        for level in (1, 2, 3):
            miou, macc = levels[level]
            lines.append(f"{branch}.level{level}.miou={miou:.6f}")
            lines.append(f"{branch}.level{level}.mean_accuracy={macc:.6f}")
    return "\n".join(lines) + "\n"
