"""Dataset ingestion, augmentation, and the train/validation split.

Directory layout: root/<patient-id>/<slice-index>/image.png plus
mask_g1.png (mandatory) and mask_g2.png (optional); 8-bit grayscale
PNGs, masks stored as {0, 255}.

Augmented samples are records (source + transform parameters) that
materialize lazily; every record's transform derives from (seed, index)
so the augmented set is byte-identical across runs and iteration
orders. The validation split operates on source images, never on
augmented descendants, so no variant of a validation image can leak
into training.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy.ndimage import map_coordinates

from .errors import (BadSpec, EmptyDataset, ExtentMismatch, MissingMask,
                     ShapeMismatch)
from .preprocess import gray_to_rgb


def load_gray(path) -> np.ndarray:
    """8-bit grayscale PNG as a float plane in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def save_gray(path, plane):
    arr = np.clip(np.asarray(plane, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def save_rgb(path, channels):
    """(3, H, W) float planes in [0,1] to an 8-bit RGB PNG."""
    arr = np.clip(np.asarray(channels, dtype=np.float64), 0.0, 1.0)
    rgb = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(rgb, mode="RGB").save(path)


def load_mask(path) -> np.ndarray:
    """Mask PNG ({0, 255} storage) mapped to a {0, 1} uint8 plane."""
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def save_mask(path, mask):
    Image.fromarray((np.asarray(mask) != 0).astype(np.uint8) * 255).save(path)


@dataclass(frozen=True)
class Sample:
    image_path: Path
    mask_g1_path: Path
    mask_g2_path: Optional[Path]
    patient_id: str
    slice_index: int

    @property
    def source_key(self) -> str:
        return f"{self.patient_id}/{self.slice_index}"

    def load_image(self) -> np.ndarray:
        return load_gray(self.image_path)

    def load_mask(self, grader: int = 1) -> np.ndarray:
        if grader == 1:
            return load_mask(self.mask_g1_path)
        if self.mask_g2_path is None:
            raise MissingMask(f"{self.source_key} has no grader-2 mask")
        return load_mask(self.mask_g2_path)


def load_manifest(root_dir) -> List[Sample]:
    """Scan the dataset tree; fails loudly on missing masks or extent
    mismatches. Non-integer slice directories are ignored."""
    root = Path(root_dir)
    if not root.is_dir():
        raise EmptyDataset(f"dataset root {root} does not exist")
    samples = []
    for pdir in sorted(p for p in root.iterdir() if p.is_dir()):
        slice_dirs = []
        for sdir in pdir.iterdir():
            if sdir.is_dir():
                try:
                    slice_dirs.append((int(sdir.name), sdir))
                except ValueError:
                    continue
        for idx, sdir in sorted(slice_dirs):
            image = sdir / "image.png"
            if not image.is_file():
                continue
            g1 = sdir / "mask_g1.png"
            if not g1.is_file():
                raise MissingMask(f"{image} has no grader-1 mask")
            g2 = sdir / "mask_g2.png"
            sample = Sample(image, g1, g2 if g2.is_file() else None,
                            pdir.name, idx)
            with Image.open(image) as im:
                extent = im.size
            for mpath in filter(None, (g1, sample.mask_g2_path)):
                with Image.open(mpath) as im:
                    if im.size != extent:
                        raise ExtentMismatch(
                            f"{mpath} is {im.size}, image is {extent}")
            samples.append(sample)
    if not samples:
        raise EmptyDataset(f"no samples under {root}")
    return samples


def write_manifest(samples: Sequence[Sample], path):
    lines = []
    for s in samples:
        g2 = s.mask_g2_path if s.mask_g2_path is not None else "-"
        lines.append(f"patient={s.patient_id} slice={s.slice_index} "
                     f"image={s.image_path} mask_g1={s.mask_g1_path} "
                     f"mask_g2={g2}")
    Path(path).write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------ augmentation

@dataclass(frozen=True)
class TransformParams:
    translate: Tuple[int, int] = (0, 0)
    angle: float = 0.0
    hflip: bool = False
    crop_fraction: float = 1.0
    crop_origin: Tuple[float, float] = (0.0, 0.0)  # fractional position

    @property
    def is_identity(self) -> bool:
        return (self.translate == (0, 0) and self.angle == 0.0
                and not self.hflip and self.crop_fraction >= 1.0)


@dataclass
class AugmentSpec:
    target_count: int = 2800
    max_translate: int = 24
    max_rotate: float = 10.0
    allow_hflip: bool = True
    crop_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.5 < self.crop_fraction <= 1.0:
            raise BadSpec(f"crop_fraction must lie in (0.5, 1], got "
                          f"{self.crop_fraction}")
        if self.max_translate < 0 or self.max_rotate < 0:
            raise BadSpec("transform magnitudes must be non-negative")


def apply_transform(image: np.ndarray, mask: np.ndarray,
                    t: Optional[TransformParams]):
    """Apply flip, rotation, translation, then crop-and-resize.

    The image resamples bilinearly, the mask nearest-neighbor so it
    stays binary. Identity parameters return exact copies.
    """
    if image.shape != mask.shape:
        raise ShapeMismatch(f"image {image.shape} vs mask {mask.shape}")
    if t is None or t.is_identity:
        return image.copy(), mask.copy()
    h, w = image.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    if t.crop_fraction < 1.0:
        ch = max(1, round(t.crop_fraction * h))
        cw = max(1, round(t.crop_fraction * w))
        oy = t.crop_origin[0] * (h - ch)
        ox = t.crop_origin[1] * (w - cw)
        yy = oy + (yy + 0.5) * ch / h - 0.5
        xx = ox + (xx + 0.5) * cw / w - 0.5
    yy = yy - t.translate[0]
    xx = xx - t.translate[1]
    if t.angle != 0.0:
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        rad = math.radians(t.angle)
        c, s = math.cos(rad), math.sin(rad)
        ry = c * (yy - cy) - s * (xx - cx) + cy
        rx = s * (yy - cy) + c * (xx - cx) + cx
        yy, xx = ry, rx
    if t.hflip:
        xx = (w - 1) - xx
    coords = np.stack([yy, xx])
    out_img = map_coordinates(image, coords, order=1, mode="constant",
                              cval=0.0)
    out_mask = map_coordinates(mask, coords, order=0, mode="constant",
                               cval=0).astype(np.uint8)
    return out_img, out_mask


@dataclass(frozen=True)
class AugmentedSample:
    """Lazily-materialized (possibly transformed) training sample."""

    source: Sample
    transform: Optional[TransformParams]
    index: int

    @property
    def source_key(self) -> str:
        return self.source.source_key

    def load_planes(self):
        img, mask = apply_transform(self.source.load_image(),
                                    self.source.load_mask(1), self.transform)
        return img, mask

    def load(self):
        """(1, 3, H, W) float image plus (H, W) uint8 mask."""
        img, mask = self.load_planes()
        return gray_to_rgb(img)[None], mask


def _draw_transform(rng, spec: AugmentSpec) -> TransformParams:
    dy = int(rng.integers(-spec.max_translate, spec.max_translate + 1))
    dx = int(rng.integers(-spec.max_translate, spec.max_translate + 1))
    angle = float(rng.uniform(-spec.max_rotate, spec.max_rotate))
    flip = bool(rng.integers(0, 2)) if spec.allow_hflip else False
    origin = (float(rng.random()), float(rng.random()))
    return TransformParams((dy, dx), angle, flip, spec.crop_fraction, origin)


def augment(samples: Sequence[Sample], spec: AugmentSpec) \
        -> List[AugmentedSample]:
    """Originals plus seeded random variants, exactly target_count records.

    Sources are cycled round-robin; each record's transform derives from
    (seed, record index) only.
    """
    n = len(samples)
    if n == 0:
        raise EmptyDataset("no samples to augment")
    if spec.target_count < n:
        raise BadSpec(f"target_count {spec.target_count} below source "
                      f"count {n}")
    records = [AugmentedSample(s, None, i) for i, s in enumerate(samples)]
    for i in range(n, spec.target_count):
        rng = np.random.default_rng([spec.seed, i])
        records.append(AugmentedSample(samples[(i - n) % n],
                                       _draw_transform(rng, spec), i))
    return records


def split(samples: Sequence, val_fraction: float = 0.2, seed: int = 0):
    """Seeded source-level partition: all variants of one source image
    land on the same side. Returns (train, val)."""
    if not 0 < val_fraction < 1:
        raise BadSpec(f"val_fraction must lie in (0, 1), got {val_fraction}")
    keys = []
    for s in samples:
        k = s.source_key
        if k not in keys:
            keys.append(k)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(keys))
    n_val = round(val_fraction * len(keys))
    val_keys = {keys[i] for i in order[:n_val]}
    train = [s for s in samples if s.source_key not in val_keys]
    val = [s for s in samples if s.source_key in val_keys]
    return train, val
