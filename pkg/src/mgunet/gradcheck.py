"""Finite-difference verification of analytic gradients.

Central differences are compared coordinate-by-coordinate against the
gradients produced by the tape, with the relative error metric
|a - n| / max(1e-8, |a| + |n|).

Coordinates sitting within a step of a relu/max kink make the finite
difference itself meaningless, so two forward-only probes exclude them
instead of judging them:

* consistency: central differences at h and h/2 must agree at the tolerance
  (catches kinks between h/2 and h from the base point);
* second difference: |f(+h) - 2 f(0) + f(-h)| / 2h estimates the local
  slope jump (|ds|/2 at a kink, (h/2)|f''| when smooth); when it exceeds
  what the tolerance can absorb the finite difference cannot adjudicate
  (catches kinks arbitrarily close to the base point, which bias both
  central differences identically).

Both probes use forward evaluations only, so a wrong backward rule can
never cause a skip.  Smooth coordinates are judged against the
Richardson-extrapolated estimate (4*n2 - n1) / 3.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DeterminismError
from .tensor import Tape, Tensor, backward


@dataclass
class GradcheckResult:
    """Per-checked-tensor worst case over the sampled coordinates."""
    name: str
    max_rel_err: float
    worst_coord: tuple
    analytic: float
    numeric: float
    checked: int = 0
    skipped: int = 0


@dataclass
class GradcheckReport:
    tol: float
    h: float
    results: list[GradcheckResult] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.results), default=0.0)

    @property
    def checked(self) -> int:
        return sum(r.checked for r in self.results)

    @property
    def skipped(self) -> int:
        return sum(r.skipped for r in self.results)

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_err < self.tol

    def format(self) -> str:
        lines = [f"gradcheck  h={self.h:g}  tol={self.tol:g}"]
        for r in self.results:
            status = "ok" if r.max_rel_err < self.tol else "FAIL"
            lines.append(f"  {r.name:<44s} max_rel_err={r.max_rel_err:.3e} "
                         f"checked={r.checked} skipped={r.skipped} [{status}]")
        lines.append(f"  overall max_rel_err={self.max_rel_err:.3e} over {self.checked} "
                     f"coords ({self.skipped} near kinks)  "
                     f"{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def gradcheck(fragment, checked, samples: int = 50, h: float = 1e-5, tol: float = 1e-6,
              rng: np.random.Generator | None = None, names=None) -> GradcheckReport:
    """Check d(fragment)/d(checked tensors) against central differences.

    ``fragment`` is a no-argument callable returning a scalar Tensor; it must
    close over the tensors in ``checked`` and be deterministic (two forward
    evaluations are compared bitwise before differentiating).  For each
    checked tensor, ``samples`` coordinates are drawn (all of them when the
    tensor is smaller).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    checked = list(checked)
    if names is None:
        names = [getattr(t, "name", "") or f"tensor{i}" for i, t in enumerate(checked)]

    v1 = fragment().data.copy()
    v2 = fragment().data.copy()
    if v1.tobytes() != v2.tobytes():
        raise DeterminismError("fragment is not deterministic: two forward passes disagree")
    f0 = float(v1)

    for t in checked:
        t.grad = None
    with Tape():
        loss = fragment()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in checked]

    report = GradcheckReport(tol=tol, h=h)
    for t, a_full, name in zip(checked, analytic, names):
        flat = t.data.reshape(-1)
        n_coords = flat.size
        if n_coords <= samples:
            idx = np.arange(n_coords)
        else:
            idx = rng.choice(n_coords, size=samples, replace=False)
        worst = GradcheckResult(name=name, max_rel_err=0.0, worst_coord=(),
                                analytic=0.0, numeric=0.0)

        def probe(k, step):
            orig = flat[k]
            flat[k] = orig + step
            fp = float(fragment().data)
            flat[k] = orig - step
            fm = float(fragment().data)
            flat[k] = orig
            return fp, fm

        for k in idx:
            fp, fm = probe(k, h)
            fph, fmh = probe(k, h / 2.0)
            n1 = (fp - fm) / (2.0 * h)
            n2 = (fph - fmh) / h
            slope_jump = abs(fp - 2.0 * f0 + fm) / (2.0 * h)
            scale = max(1e-8, abs(n1) + abs(n2))
            if rel_err(n1, n2) >= tol or slope_jump >= tol * scale:
                worst.skipped += 1
                continue
            num = (4.0 * n2 - n1) / 3.0
            ana = float(a_full.reshape(-1)[k])
            e = rel_err(ana, num)
            worst.checked += 1
            if e >= worst.max_rel_err:
                worst.max_rel_err = e
                worst.worst_coord = tuple(np.unravel_index(int(k), t.data.shape))
                worst.analytic = ana
                worst.numeric = num
        report.results.append(worst)
    return report
