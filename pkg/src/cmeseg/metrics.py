"""Dice overlap, per-patient aggregation, Wilcoxon matched-pairs test.

The Wilcoxon exact path counts sign assignments through a subset-sum
recursion over doubled mid-ranks, which is equivalent to full
enumeration of the 2^n assignments (the test suite checks this against
a literal enumeration oracle).
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ExtentMismatch, LengthMismatch

EXACT_WILCOXON_LIMIT = 25


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Overlap coefficient 2|A n B| / (|A| + |B|); 1.0 when both empty."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ExtentMismatch(f"mask extents differ: {a.shape} vs {b.shape}")
    am = a != 0
    bm = b != 0
    total = int(am.sum()) + int(bm.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((am & bm).sum()) / total


def per_patient_means(per_image: Sequence[Tuple[str, float]]) -> Dict[str, float]:
    """Arithmetic mean of per-image values grouped by patient id."""
    if not per_image:
        raise LengthMismatch("no per-image values")
    sums: Dict[str, List[float]] = {}
    for pid, value in per_image:
        sums.setdefault(pid, []).append(value)
    return {pid: float(np.mean(vals)) for pid, vals in sums.items()}


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


@dataclass(frozen=True)
class WilcoxonResult:
    w: float
    n_effective: int
    p_value: float
    exact: bool


def wilcoxon_matched_pairs(x: Sequence[float], y: Sequence[float]) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped; |d| is mid-ranked on ties;
    W = min(W+, W-). For n <= 25 the p-value is exact:
    P(min(W+, W-) <= W_observed) under random sign flips. Larger n uses
    the normal approximation with tie-corrected variance and a
    continuity correction.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 1:
        raise LengthMismatch(f"need equal-length vectors, got {x.shape} "
                             f"and {y.shape}")
    d = x - y
    nz = d[d != 0]
    n = int(nz.size)
    if n == 0:
        return WilcoxonResult(0.0, 0, 1.0, True)
    ranks = _midranks(np.abs(nz))
    w_plus = float(ranks[nz > 0].sum())
    w_minus = float(ranks[nz < 0].sum())
    w = min(w_plus, w_minus)
    if n <= EXACT_WILCOXON_LIMIT:
        # doubled mid-ranks are integers; count subsets by sum
        r2 = np.rint(2 * ranks).astype(np.int64)
        total2 = int(r2.sum())
        counts = np.zeros(total2 + 1, dtype=np.float64)
        counts[0] = 1.0
        for r in r2:
            counts[r:] += counts[:counts.size - r].copy()
        w2 = int(round(2 * w))
        s = np.arange(total2 + 1)
        extreme = np.minimum(s, total2 - s) <= w2
        p = float(counts[extreme].sum() / 2.0 ** n)
        return WilcoxonResult(w, n, min(p, 1.0), True)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(((tie_counts ** 3) - tie_counts).sum()) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    z = (w - mean + 0.5) / math.sqrt(var)
    p = min(1.0, math.erfc(-z / math.sqrt(2.0)))
    return WilcoxonResult(w, n, p, False)


@dataclass
class EvalReport:
    per_image: List[Tuple[str, str, float]]  # (patient, image key, dice)
    per_patient: Dict[str, float]
    dice_mean: float
    dice_std: float
    inter_grader_per_patient: Optional[Dict[str, float]] = None
    inter_grader_mean: Optional[float] = None
    inter_grader_std: Optional[float] = None
    wilcoxon: Optional[WilcoxonResult] = None

    def to_text(self) -> str:
        lines = ["[overall]",
                 f"n_images={len(self.per_image)}",
                 f"dice_mean={self.dice_mean:.6f}",
                 f"dice_std={self.dice_std:.6f}",
                 "[per_image]"]
        for pid, key, val in self.per_image:
            lines.append(f"{pid}/{key}={val:.6f}")
        lines.append("[per_patient]")
        for pid, val in self.per_patient.items():
            lines.append(f"{pid}={val:.6f}")
        if self.inter_grader_mean is not None:
            lines.append("[inter_grader]")
            lines.append(f"dice_mean={self.inter_grader_mean:.6f}")
            lines.append(f"dice_std={self.inter_grader_std:.6f}")
        if self.wilcoxon is not None:
            lines.append("[wilcoxon]")
            lines.append(f"w={self.wilcoxon.w:.6f}")
            lines.append(f"n_effective={self.wilcoxon.n_effective}")
            lines.append(f"p_value={self.wilcoxon.p_value:.6f}")
            lines.append(f"exact={'true' if self.wilcoxon.exact else 'false'}")
        lines.append("")
        lines.append("# patient summary")
        header = f"{'patient':<12}{'n':>4}{'auto_vs_g1':>12}"
        if self.inter_grader_per_patient is not None:
            header += f"{'g2_vs_g1':>12}"
        lines.append(header)
        counts: Dict[str, int] = {}
        for pid, _, _ in self.per_image:
            counts[pid] = counts.get(pid, 0) + 1
        for pid, val in self.per_patient.items():
            row = f"{pid:<12}{counts[pid]:>4}{val:>12.4f}"
            if self.inter_grader_per_patient is not None:
                row += f"{self.inter_grader_per_patient[pid]:>12.4f}"
            lines.append(row)
        return "\n".join(lines) + "\n"


def build_report(auto_masks: Sequence[np.ndarray],
                 grader1_masks: Sequence[np.ndarray],
                 patient_ids: Sequence[str],
                 grader2_masks: Optional[Sequence[np.ndarray]] = None,
                 image_keys: Optional[Sequence[str]] = None) -> EvalReport:
    """Dice-vs-grader-1 statistics with the optional inter-method test.

    When grader-2 masks are supplied, the Wilcoxon matched-pairs test
    compares per-patient mean Dice of (auto vs grader 1) against
    (grader 2 vs grader 1), and inter-grader agreement is reported.
    Means are arithmetic; std is the population standard deviation.
    """
    n = len(auto_masks)
    if not (n == len(grader1_masks) == len(patient_ids)):
        raise LengthMismatch("auto masks, grader-1 masks and patient ids "
                             "must align")
    if grader2_masks is not None and len(grader2_masks) != n:
        raise LengthMismatch("grader-2 masks must align with the rest")
    if image_keys is None:
        image_keys = [str(i) for i in range(n)]
    per_image = [(patient_ids[i], image_keys[i],
                  dice(auto_masks[i], grader1_masks[i])) for i in range(n)]
    vals = np.array([v for _, _, v in per_image])
    patients = per_patient_means([(pid, v) for pid, _, v in per_image])
    report = EvalReport(per_image=per_image, per_patient=patients,
                        dice_mean=float(vals.mean()),
                        dice_std=float(vals.std()))
    if grader2_masks is not None:
        inter = [(patient_ids[i], dice(grader2_masks[i], grader1_masks[i]))
                 for i in range(n)]
        inter_vals = np.array([v for _, v in inter])
        inter_patients = per_patient_means(inter)
        report.inter_grader_per_patient = inter_patients
        report.inter_grader_mean = float(inter_vals.mean())
        report.inter_grader_std = float(inter_vals.std())
        pids = list(patients)
        report.wilcoxon = wilcoxon_matched_pairs(
            [patients[p] for p in pids], [inter_patients[p] for p in pids])
    return report
