"""Run configuration: model, training, augmentation, evaluation and data settings.

Every field has a default. A RunConfig round-trips through its YAML file form
and rejects unknown keys.
"""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from core.errors import DataError, InvalidArgumentError

FINAL_TAP = "final"
TAP_STAGES = ("block", "attn")


@dataclass(frozen=True)
class TapPoint:
    """Where a class token is read from.

    block is 1-based; stage "block" is after the block's MLP residual and
    "attn" after its attention residual. block None means the final norm.
    """
    block: int | None
    stage: str = "block"

    @property
    def is_final(self):
        return self.block is None

    def __str__(self):
        if self.is_final:
            return FINAL_TAP
        return str(self.block) if self.stage == "block" else f"{self.block}.{self.stage}"


def parse_tap(value, depth):
    """Parse 8, "8", "8.attn" or "final" into a TapPoint checked against depth."""
    if isinstance(value, TapPoint):
        tap = value
    elif isinstance(value, str) and value.strip().lower() in (FINAL_TAP, "final-norm", "norm"):
        tap = TapPoint(None)
    else:
        text = str(value).strip()
        block_text, _, stage = text.partition(".")
        try:
            block = int(block_text)
        except ValueError:
            raise InvalidArgumentError(f"cannot parse tap '{value}'") from None
        tap = TapPoint(block, stage or "block")
    if tap.stage not in TAP_STAGES:
        raise InvalidArgumentError(f"unknown tap stage '{tap.stage}' (expected one of {TAP_STAGES})")
    if not tap.is_final and not 1 <= tap.block <= depth:
        raise InvalidArgumentError(f"tap block {tap.block} out of range 1..{depth}")
    return tap


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    depth: int = 6
    embed_dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    alpha: float = 16.0
    score_tap: str | None = None
    loss_tap: str | None = None
    n_classes: int = 2
    dtype: str = "float64"
    ln_eps: float = 1e-6
    use_class: bool = True
    use_tap: bool = True
    use_apl: bool = True

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise InvalidArgumentError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise InvalidArgumentError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.depth < 1:
            raise InvalidArgumentError("depth must be at least 1")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise InvalidArgumentError(
                f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.alpha <= 0:
            raise InvalidArgumentError("alpha must be positive")
        if self.n_classes != 2:
            raise InvalidArgumentError("n_classes is fixed to 2 (Live/Spoof)")
        if self.dtype not in ("float32", "float64"):
            raise InvalidArgumentError(f"unsupported dtype '{self.dtype}'")
        if self.score_tap is not None:
            self.score_tap = str(parse_tap(self.score_tap, self.depth))
        if self.loss_tap is not None:
            self.loss_tap = str(parse_tap(self.loss_tap, self.depth))

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def n_patches(self):
        return self.grid ** 2

    @property
    def score_tap_point(self):
        if self.score_tap is None:
            return TapPoint(max(1, round(2 * self.depth / 3)))
        return parse_tap(self.score_tap, self.depth)

    @property
    def loss_tap_point(self):
        if self.loss_tap is None:
            return TapPoint(max(1, self.depth - 1))
        return parse_tap(self.loss_tap, self.depth)


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-4
    epochs: int = 200
    momentum: float = 0.9
    p_fas: float = 0.2
    p_pda: float = 0.2
    gate_threshold: float = 0.001
    seed: int | None = None

    def __post_init__(self):
        for name in ("p_fas", "p_pda"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidArgumentError(f"{name} must be in [0, 1], got {value}")
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise InvalidArgumentError("learning_rate, batch_size and epochs must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidArgumentError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass
class AugmentConfig:
    pda_patch_prob: float = 0.5
    p_flip: float = 0.5
    brightness: float = 0.2
    tremble_strength: tuple = (1, 5)
    lowres_factors: tuple = (2, 3, 4)
    color_shift: float = 0.1
    gamma_range: tuple = (1.2, 1.8)
    halftone_cell: tuple = (1, 3)
    specular_intensity: tuple = (0.2, 0.6)
    moire_amplitude: tuple = (0.05, 0.2)
    moire_freq: tuple = (3, 10)

    def __post_init__(self):
        for name in ("pda_patch_prob", "p_flip"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidArgumentError(f"{name} must be in [0, 1], got {value}")
        if not 0.0 <= self.color_shift <= 0.2:
            raise InvalidArgumentError("color_shift must be within [0, 0.2]")


@dataclass
class EvalConfig:
    calib_split: str = "test"
    normalization: str = "per_image"
    dataset_mean: tuple = (0.5, 0.5, 0.5)
    dataset_std: tuple = (0.25, 0.25, 0.25)

    def __post_init__(self):
        if self.calib_split not in ("calib", "test"):
            raise InvalidArgumentError(f"calib_split must be 'calib' or 'test', got '{self.calib_split}'")
        if self.normalization not in ("per_image", "dataset"):
            raise InvalidArgumentError(f"unknown normalization '{self.normalization}'")


@dataclass
class DataConfig:
    n_subjects: int = 20
    frames_per_subject: int = 6
    frames_per_video: int = 10
    protocol: str = "synthetic"
    fold: int = 0
    crop_margin: float = 0.0

    def __post_init__(self):
        if self.n_subjects < 1 or self.frames_per_subject < 1:
            raise InvalidArgumentError("n_subjects and frames_per_subject must be positive")
        if self.crop_margin < 0:
            raise InvalidArgumentError("crop_margin must be non-negative")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    @property
    def train_seed(self):
        return self.train.seed if self.train.seed is not None else derive_seed(self.seed, "train")

    def to_dict(self):
        return _to_plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        _reject_unknown(cls, data, "")
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in data:
                continue
            if f.name == "seed":
                kwargs["seed"] = int(data["seed"])
            else:
                kwargs[f.name] = _build(f.default_factory, data[f.name], f.name)
        return cls(**kwargs)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "augment": AugmentConfig,
             "eval": EvalConfig, "data": DataConfig}


def _to_plain(value):
    if isinstance(value, dict):
        return {k: _to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    return value


def _reject_unknown(cls, data, prefix):
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise InvalidArgumentError(f"unknown config key '{prefix}{key}'")


def _build(cls, data, section):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise InvalidArgumentError(f"config section '{section}' must be a mapping")
    _reject_unknown(cls, data, f"{section}.")
    defaults = cls()
    kwargs = {}
    for key, value in data.items():
        default = getattr(defaults, key)
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        elif isinstance(default, float) and isinstance(value, (int, str)) and not isinstance(value, bool):
            # YAML reads "1e-3" as a string
            try:
                value = float(value)
            except ValueError:
                raise InvalidArgumentError(f"{section}.{key} must be a number, got {value!r}") from None
        kwargs[key] = value
    return cls(**kwargs)


def load_config(path):
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(data or {})


def save_config(config, path):
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False), encoding="utf-8")


def apply_overrides(config, overrides):
    """Return a new RunConfig with "section.key=value" overrides applied (values parsed as YAML)."""
    data = config.to_dict()
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise InvalidArgumentError(f"override '{item}' is not of the form key=value")
        value = yaml.safe_load(raw)
        parts = key.strip().split(".")
        if len(parts) == 1 and parts[0] == "seed":
            data["seed"] = value
            continue
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise InvalidArgumentError(f"unknown config key '{key}'")
        data[parts[0]][parts[1]] = value
    return RunConfig.from_dict(data)


def config_hash(config):
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def derive_seed(seed, stream):
    """Derive a child seed from the root seed; ints are xor-ed, names hashed."""
    if isinstance(stream, int):
        return (int(seed) ^ stream) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(f"{int(seed)}:{stream}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
