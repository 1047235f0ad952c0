"""Deep pyramid supervision loss, Dice metrics and the paired t-test."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .pyramid import ValidationError
from .tensor import PROB_FLOOR, DimensionError, Tensor, add, scale, weighted_nll


@dataclass(frozen=True)
class ClassWeights:
    background: float = 0.2
    foreground: float = 1.2

    def __post_init__(self):
        if not (self.background > 0 and self.foreground > 0):
            raise ValueError(f"class weights must be positive, got {self}")


def _levels(p) -> list[Tensor]:
    return list(p.levels) if hasattr(p, "levels") else list(p)


def scale_weight_map(mask: np.ndarray, weights: ClassWeights, dtype) -> np.ndarray:
    """Per-voxel, per-class weights ``w^c * y^c / N_s`` for one pyramid level."""
    n, _, h, w = mask.shape
    y = mask.astype(dtype)
    wmap = np.concatenate([weights.background * (1 - y), weights.foreground * y], axis=1)
    return wmap / (n * h * w)


def dps_loss(outputs, labels, weights: ClassWeights = ClassWeights()) -> Tensor:
    """Weighted cross-entropy averaged over scales.

    Each scale contributes its voxel-mean weighted cross-entropy; the total is
    the mean over scales. ``outputs`` holds 2-channel probability maps,
    ``labels`` binary single-channel masks, level by level.
    """
    outs = _levels(outputs)
    labs = _levels(labels)
    if len(outs) != len(labs) or not outs:
        raise DimensionError(f"dps_loss: {len(outs)} output scales vs {len(labs)} label scales")
    total = None
    for s, (p, y) in enumerate(zip(outs, labs)):
        ydata = y.data if isinstance(y, Tensor) else np.asarray(y)
        if p.shape[1] != 2 or ydata.shape[1] != 1 or p.shape[0] != ydata.shape[0] or p.shape[2:] != ydata.shape[2:]:
            raise DimensionError(f"dps_loss: scale {s} probability {p.shape} does not match label {ydata.shape}")
        if not np.all((ydata == 0) | (ydata == 1)):
            raise ValidationError(f"dps_loss: labels at scale {s} are not binary")
        term = weighted_nll(p, scale_weight_map(ydata, weights, p.dtype), PROB_FLOOR)
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / len(outs))


def _binary(x) -> np.ndarray:
    a = x.data if isinstance(x, Tensor) else np.asarray(x)
    return a > 0.5


def overlap_counts(pred, truth) -> tuple[int, int, int]:
    """Return ``(|P & T|, |P|, |T|)``."""
    p = _binary(pred)
    t = _binary(truth)
    if p.shape != t.shape:
        raise DimensionError(f"dice: shape mismatch {p.shape} vs {t.shape}")
    return int(np.count_nonzero(p & t)), int(np.count_nonzero(p)), int(np.count_nonzero(t))


def dice(pred, truth) -> float:
    """Dice coefficient of two binary masks; two empty masks score 1.0."""
    inter, np_, nt = overlap_counts(pred, truth)
    if np_ + nt == 0:
        return 1.0
    return 2.0 * inter / (np_ + nt)


def global_dice(cases: Iterable[tuple]) -> float:
    """Dice over voxel counts pooled across all cases."""
    inter = denom = 0
    seen = False
    for pred, truth in cases:
        i, a, b = overlap_counts(pred, truth)
        inter += i
        denom += a + b
        seen = True
    if not seen:
        raise ValueError("global_dice needs at least one case")
    return 1.0 if denom == 0 else 2.0 * inter / denom


@dataclass
class EvalReport:
    fold_id: int
    case_ids: list[str] = field(default_factory=list)
    per_case_dice: list[float] = field(default_factory=list)
    global_dice: float = float("nan")

    @property
    def average_dice(self) -> float:
        return float(np.mean(self.per_case_dice)) if self.per_case_dice else float("nan")

    @classmethod
    def from_cases(cls, fold_id: int, case_ids: Sequence[str], preds, truths) -> "EvalReport":
        preds = list(preds)
        truths = list(truths)
        return cls(
            fold_id=fold_id,
            case_ids=list(case_ids),
            per_case_dice=[dice(p, t) for p, t in zip(preds, truths)],
            global_dice=global_dice(zip(preds, truths)),
        )

    def write_csv(self, path) -> None:
        """``fold,case_id,dice`` rows, then ``summary,<average>,<global>``.

        ``path`` may also be an open text stream.
        """
        if hasattr(path, "write"):
            self._write_rows(path)
            return
        with Path(path).open("w", newline="") as fh:
            self._write_rows(fh)

    def _write_rows(self, fh) -> None:
        w = csv.writer(fh)
        w.writerow(["fold", "case_id", "dice"])
        for cid, d in zip(self.case_ids, self.per_case_dice):
            w.writerow([self.fold_id, cid, repr(float(d))])
        w.writerow(["summary", repr(self.average_dice), repr(float(self.global_dice))])

    @classmethod
    def read_csv(cls, path) -> "EvalReport":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["fold", "case_id", "dice"]:
            raise ValueError(f"{path}: not an evaluation report (bad header)")
        body = [r for r in rows[1:] if r and r[0] != "summary"]
        summary = [r for r in rows[1:] if r and r[0] == "summary"]
        fold = int(body[0][0]) if body else 0
        rep = cls(fold, [r[1] for r in body], [float(r[2]) for r in body])
        if summary:
            rep.global_dice = float(summary[0][2])
        return rep


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation (as reported in ablation tables)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


# ---------------------------------------------------------------------------
# paired t-test
# ---------------------------------------------------------------------------


class DegenerateSampleError(ValueError):
    """The differences have zero variance, so the t statistic is undefined."""


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x in (0.0, 1.0):
        return x
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: int) -> float:
    """Upper tail P(T > t) of Student's t distribution."""
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t))
    return tail if t >= 0 else 1.0 - tail


def paired_t_test(a: Sequence[float], b: Sequence[float], alternative: str = "two-sided") -> TTestResult:
    """Paired Student t-test on ``d = a - b`` with ``n - 1`` degrees of freedom.

    ``alternative`` is ``"two-sided"`` (default), ``"greater"`` (mean of a
    exceeds b) or ``"less"``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"paired_t_test: samples must be equal-length vectors, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("paired_t_test needs at least two pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise DegenerateSampleError("differences have zero variance")
    df = n - 1
    t = float(d.mean() / (sd / math.sqrt(n)))
    if alternative == "two-sided":
        p = min(1.0, 2.0 * student_t_sf(abs(t), df))
    elif alternative == "greater":
        p = student_t_sf(t, df)
    elif alternative == "less":
        p = student_t_sf(-t, df)
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
    return TTestResult(t, p, df)
