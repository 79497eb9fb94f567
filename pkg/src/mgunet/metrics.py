"""Per-class Dice and pixel accuracy with table-style aggregation.

Empty-region conventions (documented in every report footer): a class absent
from both maps scores 1.0 for both metrics; a class absent from the truth
but predicted somewhere has undefined pixel accuracy and is excluded from PA
averaging (stored as NaN).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .pipeline import CLASS_NAMES, NUM_CLASSES

__all__ = ["dsc", "pixel_accuracy", "EvalReport", "evaluate",
           "sample_mean_dice", "summarize_runs"]

FOOTER = ("conventions: class empty in both maps -> 1.0; "
          "truth-empty but predicted -> excluded from PA averages")


def _check(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"metric inputs differ in shape: {pred.shape} vs {truth.shape}")
    return pred, truth


def dsc(pred, truth, cls: int) -> float:
    """Dice overlap 2|X & Y| / (|X| + |Y|); 1.0 when both regions are empty."""
    pred, truth = _check(pred, truth)
    x = pred == cls
    y = truth == cls
    nx = int(np.count_nonzero(x))
    ny = int(np.count_nonzero(y))
    if nx + ny == 0:
        return 1.0
    return 2.0 * np.count_nonzero(x & y) / (nx + ny)


def pixel_accuracy(pred, truth, cls: int):
    """True-positive rate |X & Y| / |Y|; None when undefined (|Y|=0, |X|>0)."""
    pred, truth = _check(pred, truth)
    x = pred == cls
    y = truth == cls
    ny = int(np.count_nonzero(y))
    if ny == 0:
        return 1.0 if not np.any(x) else None
    return np.count_nonzero(x & y) / ny


def sample_mean_dice(pred, truth, classes=range(1, NUM_CLASSES)) -> float:
    """Mean Dice over the tissue classes (1..10 by default)."""
    return float(np.mean([dsc(pred, truth, c) for c in classes]))


@dataclass
class EvalReport:
    per_sample_dsc: np.ndarray   # [n_samples, 11]
    per_sample_pa: np.ndarray    # [n_samples, 11], NaN where excluded
    sample_ids: list

    @property
    def dsc_mean(self):
        return self.per_sample_dsc.mean(axis=0)

    @property
    def dsc_std(self):
        return self.per_sample_dsc.std(axis=0)

    @property
    def pa_mean(self):
        with np.errstate(invalid="ignore"):
            return np.nanmean(self.per_sample_pa, axis=0)

    @property
    def pa_std(self):
        with np.errstate(invalid="ignore"):
            return np.nanstd(self.per_sample_pa, axis=0)

    @property
    def overall_dsc(self) -> float:
        """Mean over all tissue classes 1..10 (background excluded)."""
        return float(self.dsc_mean[1:].mean())

    @property
    def layer_dsc(self) -> float:
        """Mean over the nine tissue bands 1..9."""
        return float(self.dsc_mean[1:10].mean())

    @property
    def overall_pa(self) -> float:
        return float(self.pa_mean[1:].mean())

    @property
    def layer_pa(self) -> float:
        return float(self.pa_mean[1:10].mean())

    @property
    def per_sample_overall_dsc(self) -> np.ndarray:
        return self.per_sample_dsc[:, 1:].mean(axis=1)

    def to_tsv(self) -> str:
        lines = ["class\tdsc_mean\tdsc_std\tpa_mean\tpa_std"]
        for c in range(NUM_CLASSES):
            lines.append(f"{CLASS_NAMES[c]}\t{self.dsc_mean[c]:.6f}\t{self.dsc_std[c]:.6f}"
                         f"\t{self.pa_mean[c]:.6f}\t{self.pa_std[c]:.6f}")
        lines.append(f"Average\t{self.overall_dsc:.6f}\t\t{self.overall_pa:.6f}\t")
        lines.append(f"Layer\t{self.layer_dsc:.6f}\t\t{self.layer_pa:.6f}\t")
        lines.append(f"Disc\t{self.dsc_mean[10]:.6f}\t{self.dsc_std[10]:.6f}"
                     f"\t{self.pa_mean[10]:.6f}\t{self.pa_std[10]:.6f}")
        lines.append(f"# {FOOTER}")
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        head = f"{'class':<12s} {'DSC':>8s} {'±':>7s} {'PA':>8s} {'±':>7s}"
        rows = [head, "-" * len(head)]
        for c in range(NUM_CLASSES):
            rows.append(f"{CLASS_NAMES[c]:<12s} {self.dsc_mean[c]:8.4f} "
                        f"{self.dsc_std[c]:7.4f} {self.pa_mean[c]:8.4f} {self.pa_std[c]:7.4f}")
        rows.append("-" * len(head))
        rows.append(f"{'Average':<12s} {self.overall_dsc:8.4f} {'':7s} {self.overall_pa:8.4f}")
        rows.append(f"{'Layer':<12s} {self.layer_dsc:8.4f} {'':7s} {self.layer_pa:8.4f}")
        rows.append(f"{'Disc':<12s} {self.dsc_mean[10]:8.4f} {'':7s} {self.pa_mean[10]:8.4f}")
        rows.append(FOOTER)
        return "\n".join(rows)


def evaluate(model, samples) -> EvalReport:
    """Run ``model.predict`` over the samples and tabulate per-class metrics."""
    if not samples:
        raise DimensionError("evaluate: empty dataset")
    n = len(samples)
    d = np.zeros((n, NUM_CLASSES))
    p = np.zeros((n, NUM_CLASSES))
    ids = []
    for i, s in enumerate(samples):
        pred = model.predict(s.image)
        for c in range(NUM_CLASSES):
            d[i, c] = dsc(pred, s.label, c)
            pa = pixel_accuracy(pred, s.label, c)
            p[i, c] = np.nan if pa is None else pa
        ids.append(s.sample_id)
    return EvalReport(per_sample_dsc=d, per_sample_pa=p, sample_ids=ids)


def summarize_runs(values) -> tuple:
    """Mean and std across repeated runs of a scalar metric."""
    arr = np.asarray(list(values), dtype=np.float64)
    return float(arr.mean()), float(arr.std())
