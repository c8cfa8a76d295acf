"""Fully connected CRF refinement with mean-field inference.

Energy of a labeling x over N pixels:

    E(x) = sum_i psi_u(x_i)
         + sum_{i<j} mu(x_i, x_j) * sum_m w_m k_m(f_i, f_j)

with Gaussian kernels over pixel position (color-independent) and
position+intensity (color-dependent). Message passing is exact (dense
pair sums) below a pixel-count threshold and windowed at radius
3 * sigma_spatial above it. brute_force_map enumerates every labeling
for oracle-sized instances.
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from . import kernels as backend
from .errors import BadCertainty, NotNormalized, ShapeMismatch, TooLarge

ENUMERATION_LIMIT = 2 ** 20


@dataclass(frozen=True)
class PairwiseKernelSpec:
    """One Gaussian pairwise kernel: spatial-only or bilateral."""

    kind: str  # "spatial" | "bilateral"
    weight: float = 1.0
    sigma_spatial: float = 2.0
    sigma_intensity: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("spatial", "bilateral"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.weight < 0:
            raise ValueError("kernel weight must be >= 0")
        if self.sigma_spatial <= 0:
            raise ValueError("sigma_spatial must be positive")
        if self.kind == "bilateral" and not (self.sigma_intensity or 0) > 0:
            raise ValueError("bilateral kernels need sigma_intensity > 0")


def default_kernels() -> Tuple[PairwiseKernelSpec, ...]:
    """Color-independent sigma 2 plus color-dependent sigma 0.01, unit
    weights; the spatial sigma of the bilateral kernel reuses 2."""
    return (PairwiseKernelSpec("spatial", 1.0, 2.0),
            PairwiseKernelSpec("bilateral", 1.0, 2.0, 0.01))


def potts(k: int) -> np.ndarray:
    """Zero-diagonal, unit off-diagonal label compatibility."""
    return 1.0 - np.eye(k)


@dataclass
class CrfConfig:
    kernels: Tuple[PairwiseKernelSpec, ...] = field(
        default_factory=default_kernels)
    compatibility: Optional[np.ndarray] = None  # None -> Potts over K labels
    iterations: int = 10
    convergence_tol: float = 1e-6
    gt_certainty: float = 0.6
    exact_threshold: int = 1024  # max pixel count for dense pair sums

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.compatibility is not None:
            mu = np.asarray(self.compatibility, dtype=float)
            if mu.ndim != 2 or mu.shape[0] != mu.shape[1]:
                raise ValueError("compatibility must be a square matrix")
            if not np.allclose(mu, mu.T):
                raise ValueError("compatibility must be symmetric")
            self.compatibility = mu

    def mu(self, k: int) -> np.ndarray:
        if self.compatibility is None:
            return potts(k)
        if self.compatibility.shape != (k, k):
            raise ShapeMismatch(
                f"compatibility is {self.compatibility.shape}, need ({k},{k})")
        return self.compatibility


@dataclass
class UnaryField:
    """Per-pixel per-label potentials, (K, H, W), negative log scale."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[0] < 2:
            raise ShapeMismatch(
                f"unary field needs (K>=2, H, W), got {self.values.shape}")

    @property
    def num_labels(self):
        return self.values.shape[0]

    @property
    def plane(self):
        return self.values.shape[1:]


def unary_from_labels(labels: np.ndarray, certainty: float,
                      num_labels: int) -> UnaryField:
    """Potentials for a hard labeling with the given ground-truth certainty:
    -ln(certainty) on the assigned label, the rest sharing 1 - certainty.

    certainty = 1/K (every label equally likely) degenerates to uniform
    potentials and is allowed.
    """
    if not 1.0 / num_labels <= certainty < 1.0:
        raise BadCertainty(
            f"certainty must lie in [1/{num_labels}, 1), got {certainty}")
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeMismatch(f"labels must be (H, W), got {labels.shape}")
    hit = -math.log(certainty)
    miss = -math.log((1.0 - certainty) / (num_labels - 1))
    values = np.full((num_labels,) + labels.shape, miss)
    for lab in range(num_labels):
        values[lab][labels == lab] = hit
    return UnaryField(values)


def unary_from_probs(heatmap, floor: float = 1e-8) -> UnaryField:
    """-ln(p) potentials from a per-pixel class distribution (K, H, W)."""
    p = np.asarray(heatmap.data if hasattr(heatmap, "data") else heatmap,
                   dtype=np.float64)
    if p.ndim == 4 and p.shape[0] == 1:
        p = p[0]
    if p.ndim != 3:
        raise ShapeMismatch(f"heatmap must be (K, H, W), got {p.shape}")
    sums = p.sum(axis=0)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise NotNormalized(
            f"channel sums deviate from 1 by {np.abs(sums - 1.0).max():.2e}")
    return UnaryField(-np.log(np.maximum(p, floor)))


def kernel_value(spec: PairwiseKernelSpec, f_i, f_j) -> float:
    """Evaluate one Gaussian kernel on feature vectors (y, x, intensity)."""
    dy = float(f_i[0]) - float(f_j[0])
    dx = float(f_i[1]) - float(f_j[1])
    e = (dy * dy + dx * dx) / (2.0 * spec.sigma_spatial ** 2)
    if spec.kind == "bilateral":
        di = float(f_i[2]) - float(f_j[2])
        e += di * di / (2.0 * spec.sigma_intensity ** 2)
    return math.exp(-e)


def _kernel_arrays(specs: Sequence[PairwiseKernelSpec]):
    kinds = np.array([0 if s.kind == "spatial" else 1 for s in specs],
                     dtype=np.int8)
    weights = np.array([s.weight for s in specs], dtype=np.float64)
    inv_ss = np.array([1.0 / (2.0 * s.sigma_spatial ** 2) for s in specs])
    inv_sr = np.array([0.0 if s.sigma_intensity is None else
                       1.0 / (2.0 * s.sigma_intensity ** 2) for s in specs])
    return kinds, weights, inv_ss, inv_sr


def _intensity_plane(image, plane):
    if image is None:
        return np.zeros(plane, dtype=np.float64)
    img = np.asarray(image, dtype=np.float64)
    if img.shape != plane:
        raise ShapeMismatch(f"image extents {img.shape} != unary plane "
                            f"{plane}")
    return img


def gibbs_energy(unary: UnaryField, cfg: CrfConfig, image,
                 labeling: np.ndarray) -> float:
    """Exact energy of a labeling; O(N^2) pair sum, oracle-grade."""
    labeling = np.asarray(labeling)
    if labeling.shape != unary.plane:
        raise ShapeMismatch(f"labeling {labeling.shape} != unary plane "
                            f"{unary.plane}")
    k = unary.num_labels
    if labeling.min() < 0 or labeling.max() >= k:
        raise ShapeMismatch("labeling contains out-of-range labels")
    h, w = unary.plane
    flat = labeling.astype(np.int64).ravel()
    e_unary = float(
        np.take_along_axis(unary.values.reshape(k, -1), flat[None], 0).sum())
    ys, xs = np.divmod(np.arange(h * w, dtype=np.int64), w)
    intensity = _intensity_plane(image, unary.plane).ravel()
    kinds, weights, inv_ss, inv_sr = _kernel_arrays(cfg.kernels)
    e_pair = backend.crf_pairwise_energy(
        flat, ys.astype(np.float64), xs.astype(np.float64), intensity,
        cfg.mu(k), kinds, weights, inv_ss, inv_sr)
    return e_unary + e_pair


def _dense_pair_matrix(plane, intensity, specs):
    h, w = plane
    n = h * w
    ys, xs = np.divmod(np.arange(n, dtype=np.float64), w)
    d2 = (ys[:, None] - ys[None, :]) ** 2 + (xs[:, None] - xs[None, :]) ** 2
    total = np.zeros((n, n))
    flat = intensity.ravel()
    for s in specs:
        m = np.exp(-d2 / (2.0 * s.sigma_spatial ** 2))
        if s.kind == "bilateral":
            di = flat[:, None] - flat[None, :]
            m = m * np.exp(-(di * di) / (2.0 * s.sigma_intensity ** 2))
        total += s.weight * m
    np.fill_diagonal(total, 0.0)
    return total


def _spatial_table(spec):
    radius = max(1, int(math.ceil(3.0 * spec.sigma_spatial)))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    d2 = ax[:, None] ** 2 + ax[None, :] ** 2
    table = spec.weight * np.exp(-d2 / (2.0 * spec.sigma_spatial ** 2))
    table[radius, radius] = 0.0  # self-interaction excluded
    return table


def _messages_windowed(q, intensity, specs):
    msg = np.zeros_like(q)
    for s in specs:
        table = _spatial_table(s)
        if s.kind == "spatial":
            msg += backend.crf_spatial_messages(q, table)
        else:
            msg += backend.crf_bilateral_messages(
                q, intensity, table, 1.0 / (2.0 * s.sigma_intensity ** 2))
    return msg


def mean_field_infer(unary: UnaryField, cfg: CrfConfig, image=None,
                     on_iteration=None):
    """Mean-field fixed-point iteration; returns (Q, labeling).

    Q updates are double-buffered: every message in a sweep reads the
    previous iterate. Stops after cfg.iterations sweeps or when
    max |dQ| < cfg.convergence_tol. on_iteration(t, Q) is called after
    each sweep when given.
    """
    k = unary.num_labels
    h, w = unary.plane
    n = h * w
    intensity = _intensity_plane(image, unary.plane)
    mu = cfg.mu(k)
    dense = n <= cfg.exact_threshold
    pair = _dense_pair_matrix(unary.plane, intensity, cfg.kernels) if dense \
        else None

    neg_u = -unary.values
    q = _normalize_exp(neg_u)
    for t in range(cfg.iterations):
        if dense:
            msg = (pair @ q.reshape(k, n).T).T.reshape(k, h, w)
        else:
            msg = _messages_windowed(q, intensity, cfg.kernels)
        penalty = np.tensordot(mu, msg, axes=([1], [0]))
        q_new = _normalize_exp(neg_u - penalty)
        delta = float(np.abs(q_new - q).max())
        q = q_new
        if on_iteration is not None:
            on_iteration(t, q)
        if delta < cfg.convergence_tol:
            break
    return q, np.argmax(q, axis=0)


def _normalize_exp(neg_energy):
    e = np.exp(neg_energy - neg_energy.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def brute_force_map(unary: UnaryField, cfg: CrfConfig, image=None):
    """Exhaustive minimum-energy labeling (ties: lexicographically first).

    Enumerates all K^N labelings; refuses instances beyond 2^20.
    """
    k = unary.num_labels
    h, w = unary.plane
    n = h * w
    if k ** n > ENUMERATION_LIMIT:
        raise TooLarge(f"{k}^{n} labelings exceed the enumeration bound")
    intensity = _intensity_plane(image, unary.plane)
    pair = _dense_pair_matrix(unary.plane, intensity, cfg.kernels)
    pair_ut = np.triu(pair)  # sum over i < j only
    mu = cfg.mu(k)
    u = unary.values.reshape(k, n).T  # (N, K)

    best_energy = np.inf
    best = None
    total = k ** n
    chunk = 2048
    powers = k ** np.arange(n - 1, -1, -1, dtype=np.int64)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        labels = (idx[:, None] // powers[None, :]) % k  # lexicographic order
        e_un = np.take_along_axis(u, labels.T, axis=1).sum(axis=0)
        e_pw = (mu[labels[:, :, None], labels[:, None, :]]
                * pair_ut[None]).sum(axis=(1, 2))
        energies = e_un + e_pw
        j = int(np.argmin(energies))
        if energies[j] < best_energy:
            best_energy = float(energies[j])
            best = labels[j]
    return best.reshape(h, w)
