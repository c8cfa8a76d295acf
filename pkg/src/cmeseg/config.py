"""Pipeline configuration: one JSON file, strict keys, one top-level seed.

Schema (all keys optional; defaults shown in README.md):

    {
      "seed": 0,
      "dataset_root": "data/preprocessed",
      "output_dir": "out",
      "checkpoint": "out/checkpoint.ckpt",
      "val_fraction": 0.2,
      "soft_unary": false,
      "model":   {"width_scale": "1", "num_classes": 2},
      "train":   {... TrainConfig fields minus seed ...},
      "augment": {... AugmentSpec fields minus seed ...},
      "crf":     {"iterations", "convergence_tol", "gt_certainty",
                  "exact_threshold", "kernels": [{"kind", "weight",
                  "sigma_spatial", "sigma_intensity"}, ...]},
      "denoise": {... DenoiseConfig fields ...}
    }

Unknown keys anywhere are rejected. Every random choice in the pipeline
derives from the single top-level seed.
"""

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .crf import CrfConfig, PairwiseKernelSpec
from .dataset import AugmentSpec
from .errors import ConfigError
from .preprocess import DenoiseConfig
from .train import TrainConfig


def _strict(section, d, allowed):
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {unknown}")


def _build(section, d, cls, **extra):
    _strict(section, d, cls.__dataclass_fields__.keys())
    try:
        return cls(**d, **extra)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad {section} config: {e}") from e


@dataclass
class ModelConfig:
    width_scale: object = 1
    num_classes: int = 2

    def scale(self) -> Fraction:
        try:
            return Fraction(str(self.width_scale))
        except (ValueError, ZeroDivisionError) as e:
            raise ConfigError(f"bad width_scale {self.width_scale!r}: {e}") \
                from e


@dataclass
class PipelineConfig:
    seed: int = 0
    dataset_root: Optional[str] = None
    output_dir: str = "out"
    checkpoint: Optional[str] = None
    val_fraction: float = 0.2
    soft_unary: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    crf: CrfConfig = field(default_factory=CrfConfig)
    denoise: DenoiseConfig = field(default_factory=DenoiseConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        _strict("config", raw, ("seed", "dataset_root", "output_dir",
                                "checkpoint", "val_fraction", "soft_unary",
                                "model", "train", "augment", "crf",
                                "denoise"))
        seed = raw.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        model = _build("model", raw.get("model", {}), ModelConfig)
        model.scale()  # validate eagerly
        train = _build("train", raw.get("train", {}), TrainConfig, seed=seed)
        aug = _build("augment", raw.get("augment", {}), AugmentSpec,
                     seed=seed)
        crf_raw = dict(raw.get("crf", {}))
        kernels = crf_raw.pop("kernels", None)
        if kernels is not None:
            specs = []
            for i, k in enumerate(kernels):
                _strict(f"crf.kernels[{i}]", k,
                        ("kind", "weight", "sigma_spatial",
                         "sigma_intensity"))
                try:
                    specs.append(PairwiseKernelSpec(**k))
                except ValueError as e:
                    raise ConfigError(f"bad crf kernel {i}: {e}") from e
            crf_raw["kernels"] = tuple(specs)
        crf = _build("crf", crf_raw, CrfConfig)
        den = _build("denoise", raw.get("denoise", {}), DenoiseConfig)
        vf = raw.get("val_fraction", 0.2)
        if not 0 < vf < 1:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {vf}")
        return cls(seed=seed, dataset_root=raw.get("dataset_root"),
                   output_dir=raw.get("output_dir", "out"),
                   checkpoint=raw.get("checkpoint"),
                   val_fraction=vf,
                   soft_unary=bool(raw.get("soft_unary", False)),
                   model=model, train=train, augment=aug, crf=crf,
                   denoise=den)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        try:
            with open(path) as f:
                raw = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_dict(raw)

    def with_seed(self, seed: int) -> "PipelineConfig":
        raw_train = {k: getattr(self.train, k)
                     for k in TrainConfig.__dataclass_fields__}
        raw_train["seed"] = seed
        raw_aug = {k: getattr(self.augment, k)
                   for k in AugmentSpec.__dataclass_fields__}
        raw_aug["seed"] = seed
        clone = PipelineConfig(
            seed=seed, dataset_root=self.dataset_root,
            output_dir=self.output_dir, checkpoint=self.checkpoint,
            val_fraction=self.val_fraction, soft_unary=self.soft_unary,
            model=self.model, train=TrainConfig(**raw_train),
            augment=AugmentSpec(**raw_aug), crf=self.crf,
            denoise=self.denoise)
        return clone
