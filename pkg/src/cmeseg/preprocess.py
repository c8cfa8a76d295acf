"""Speckle denoising and retina-band cropping.

The denoiser is a first-stage block-matching collaborative filter:
similar patches are grouped, transformed (2-D DCT per patch, orthonormal
Haar across the group), hard-thresholded, inverted and aggregated with
per-pixel weight normalization. Groups are truncated to power-of-two
sizes for the full-depth Haar transform, and the group-DC coefficient is
exempt from thresholding so flat content is preserved exactly.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import fft as sfft
from scipy.ndimage import uniform_filter1d

from . import kernels as backend
from .errors import ImageTooSmall, NoRetinaFound, ShapeMismatch

REF_STRIDE = 4  # reference-patch grid step
PROFILE_SMOOTHING = 15  # moving-average length for the row profile
CROP_MARGIN = 16  # rows of padding around the detected band
MIN_PROFILE = 0.05  # below this, the scan is considered empty


@dataclass
class DenoiseConfig:
    patch_size: int = 8
    search_window: int = 16
    max_group: int = 16
    match_threshold: float = 0.02  # mean-squared distance on [0,1] values
    hard_threshold: Optional[float] = None  # None -> 2.7 * sigma estimate

    def __post_init__(self):
        if self.patch_size > self.search_window:
            raise ValueError("patch_size must not exceed search_window")
        if self.max_group < 1:
            raise ValueError("max_group must be >= 1")


def estimate_noise_sigma(image: np.ndarray) -> float:
    """Robust noise scale from finest-diagonal differences (MAD-based)."""
    d = np.asarray(image, dtype=np.float64)
    diff = d[1:, 1:] - d[:-1, :-1]
    return float(np.median(np.abs(diff)) / (0.6745 * np.sqrt(2.0)))


def _haar_forward(x):
    """Full-depth orthonormal Haar transform along axis 1 (power-of-2)."""
    n = x.shape[1]
    out = x.copy()
    while n > 1:
        a = (out[:, 0:n:2] + out[:, 1:n:2]) / np.sqrt(2.0)
        d = (out[:, 0:n:2] - out[:, 1:n:2]) / np.sqrt(2.0)
        out[:, :n // 2] = a
        out[:, n // 2:n] = d
        n //= 2
    return out


def _haar_inverse(c):
    n = c.shape[1]
    out = c.copy()
    m = 1
    while m < n:
        a = out[:, :m].copy()
        d = out[:, m:2 * m].copy()
        out[:, 0:2 * m:2] = (a + d) / np.sqrt(2.0)
        out[:, 1:2 * m:2] = (a - d) / np.sqrt(2.0)
        m *= 2
    return out


def _ref_grid(extent, patch):
    xs = list(range(0, extent - patch + 1, REF_STRIDE))
    if xs[-1] != extent - patch:
        xs.append(extent - patch)
    return np.asarray(xs, dtype=np.int64)


def denoise(image: np.ndarray, cfg: DenoiseConfig = None) -> np.ndarray:
    """First-stage collaborative filtering of a grayscale plane in [0,1]."""
    cfg = cfg or DenoiseConfig()
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D plane, got shape {img.shape}")
    h, w = img.shape
    p = cfg.patch_size
    if h < p or w < p:
        raise ImageTooSmall(f"image {h}x{w} smaller than patch size {p}")
    threshold = cfg.hard_threshold if cfg.hard_threshold is not None \
        else 2.7 * estimate_noise_sigma(img)

    ys = _ref_grid(h, p)
    xs = _ref_grid(w, p)
    ry, rx = [a.ravel() for a in np.meshgrid(ys, xs, indexing="ij")]
    half = (cfg.search_window - p) // 2
    offs = np.arange(-half, half + 1, dtype=np.int64)
    dy, dx = [a.ravel() for a in np.meshgrid(offs, offs, indexing="ij")]
    dist = backend.bm3d_block_distances(img, ry, rx, dy, dx, p)

    # measured distances between equally-noisy copies of the same content
    # sit on a 2 sigma^2 floor; matching compares the compensated value
    sigma = estimate_noise_sigma(img)
    effective = cfg.match_threshold + 2.0 * sigma * sigma

    # rank candidates per reference (self first, then by distance, stable)
    self_idx = int(np.flatnonzero((dy == 0) & (dx == 0))[0])
    dist[:, self_idx] = -1.0
    order = np.argsort(dist, axis=1, kind="stable")
    matched = np.take_along_axis(dist <= effective, order, axis=1)
    counts = matched.sum(axis=1)
    sizes = np.ones_like(counts)
    while True:  # largest power of two <= min(count, max_group)
        bigger = sizes * 2
        grow = (bigger <= np.minimum(counts, cfg.max_group))
        if not grow.any():
            break
        sizes = np.where(grow, bigger, sizes)

    num = np.zeros(h * w)
    den = np.zeros(h * w)
    for g in np.unique(sizes):
        sel = np.flatnonzero(sizes == g)
        cand = order[sel, :g]  # distances are finite wherever matched
        py = ry[sel, None] + dy[cand]
        px = rx[sel, None] + dx[cand]
        win_y = py[:, :, None, None] + np.arange(p)[None, None, :, None]
        win_x = px[:, :, None, None] + np.arange(p)[None, None, None, :]
        groups = img[win_y, win_x]  # (B, g, p, p)
        coeffs = sfft.dctn(groups, axes=(-2, -1), norm="ortho")
        coeffs = _haar_forward(coeffs)
        keep = np.abs(coeffs) >= threshold
        keep[:, 0, 0, 0] = True  # group DC survives
        coeffs = np.where(keep, coeffs, 0.0)
        nnz = keep.sum(axis=(1, 2, 3))
        wgt = 1.0 / np.maximum(nnz, 1)
        patches = sfft.idctn(_haar_inverse(coeffs), axes=(-2, -1),
                             norm="ortho")
        flat = (win_y * w + win_x).reshape(len(sel), g, p, p)
        np.add.at(num, flat.ravel(),
                  (wgt[:, None, None, None] * patches).ravel())
        np.add.at(den, flat.ravel(),
                  np.broadcast_to(wgt[:, None, None, None],
                                  flat.shape).ravel())
    out = num / den  # the reference grid covers every pixel
    return np.clip(out.reshape(h, w), 0.0, 1.0)


def crop_retina(image: np.ndarray) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Keep the row band holding the retina.

    The smoothed per-row mean-intensity profile is thresholded at half
    its maximum; the longest contiguous band above threshold, padded by
    a fixed margin, is returned along with its half-open row range so
    masks can be mapped back.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ShapeMismatch(f"expected a non-empty 2-D plane, got "
                            f"{img.shape}")
    profile = img.mean(axis=1)
    smooth = uniform_filter1d(profile, PROFILE_SMOOTHING, mode="nearest")
    peak = float(smooth.max())
    if peak < MIN_PROFILE:
        raise NoRetinaFound(f"row profile peak {peak:.4f} below "
                            f"{MIN_PROFILE}")
    above = smooth > 0.5 * peak
    best_len, best_start = 0, 0
    run_start = None
    for i, flag in enumerate(np.append(above, False)):
        if flag and run_start is None:
            run_start = i
        elif not flag and run_start is not None:
            if i - run_start > best_len:
                best_len, best_start = i - run_start, run_start
            run_start = None
    r0 = max(0, best_start - CROP_MARGIN)
    r1 = min(img.shape[0], best_start + best_len + CROP_MARGIN)
    return img[r0:r1].copy(), (r0, r1)


def gray_to_rgb(image: np.ndarray) -> np.ndarray:
    """Stack a grayscale plane into three identical channels (3, H, W)."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D plane, got {img.shape}")
    return np.stack([img, img, img], axis=0)
