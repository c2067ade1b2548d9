"""Flat JSON configuration shared by every CLI command."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .correlation import ModelConfig
from .data import DEFAULT_CUT_AXIS, DataConfig
from .errors import ConfigError
from .losses import LossWeights


@dataclass
class TrainConfig:
    dataset: str = "data/train"
    eval_dataset: str | None = None
    out_dir: str = "runs/default"
    checkpoint: str | None = None
    # optimisation; full-scale values are batch 48 / 80 epochs (two-part
    # mating) and batch 32 / 120 epochs (multi-part)
    epochs: int = 80
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    checkpoint_interval: int = 1
    eval_interval: int = 0
    resume: bool = False
    d_steps: int = 1
    augment_rotations: bool = False
    # loss weights
    lambda_rot: float = 1.0
    lambda_trans: float = 1.0
    lambda_point: float = 10.0
    lambda_recon: float = 1.0
    lambda_embed: float = 0.1
    lambda_adv: float = 0.05
    # network
    f: int = 64
    k: int = 16
    n: int = 512
    channels: int = 21
    head_width: int = 256
    decoder_width: int = 512
    use_correlation: bool = True
    plain_linear: bool = False
    disc_points: int = 1024
    # evaluation
    tau: float = 0.01
    export_dir: str | None = None
    # dataset generation (full scale: 41,000 train / 3,100 test cuts)
    num_samples: int = 2000
    data_seed: int = 42
    min_parts: int = 2
    max_parts: int = 2
    shapes: tuple = ("sphere", "box")
    cut_types: tuple = ("planar",)
    whole_points: int = 1024
    part_points: int = 512
    min_part_points: int = 64
    translation_range: float = 0.5
    cut_axis: tuple | None = DEFAULT_CUT_AXIS
    # equivariance self-check
    check_rotations: int = 100
    check_sets: int = 10
    check_tolerance: float = 1e-4
    check_dtype: str = "float64"

    def __post_init__(self):
        for key in ("shapes", "cut_types", "cut_axis"):
            value = getattr(self, key)
            if isinstance(value, list):
                setattr(self, key, tuple(value))
        self.validate()

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.check_dtype not in ("float32", "float64"):
            raise ConfigError(f"check_dtype must be float32 or float64, got {self.check_dtype!r}")
        if self.k >= self.n:
            raise ConfigError(f"k={self.k} must be smaller than n={self.n}")
        self.loss_weights()  # raises on negative weights
        return self

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            rot=self.lambda_rot,
            trans=self.lambda_trans,
            point=self.lambda_point,
            recon=self.lambda_recon,
            embed=self.lambda_embed,
            adv=self.lambda_adv,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            f=self.f,
            k=self.k,
            n=self.n,
            channels=self.channels,
            head_width=self.head_width,
            decoder_width=self.decoder_width,
            use_correlation=self.use_correlation,
            plain_linear=self.plain_linear,
        )

    def data_config(self) -> DataConfig:
        return DataConfig(
            num_samples=self.num_samples,
            seed=self.data_seed,
            min_parts=self.min_parts,
            max_parts=self.max_parts,
            shapes=self.shapes,
            cut_types=self.cut_types,
            whole_points=self.whole_points,
            part_points=self.part_points,
            min_part_points=self.min_part_points,
            translation_range=self.translation_range,
            cut_axis=self.cut_axis,
        )

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None = None, overrides: dict | None = None) -> TrainConfig:
    """Read a JSON config (optional) and apply ``overrides`` on top."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            values = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    values.update(overrides or {})
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return TrainConfig(**values)
