import dataclasses
from dataclasses import dataclass, field
from enum import Enum, IntEnum

import numpy as np

from core.errors import ContractError, InvalidArgumentError


class Label(IntEnum):
    """Image/patch label; the integer value is the class index of the heads."""
    LIVE = 0
    SPOOF = 1

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise InvalidArgumentError(f"unknown label '{value}'") from None


class AttackType(str, Enum):
    NONE = "NONE"
    PRINT = "PRINT"
    DISPLAY = "DISPLAY"
    SYNTH_PRINT = "SYNTH_PRINT"
    SYNTH_DISPLAY = "SYNTH_DISPLAY"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().upper())
        except ValueError:
            raise InvalidArgumentError(f"unknown attack type '{value}'") from None


@dataclass(frozen=True, eq=False)
class Sample:
    image: object
    label: Label
    attack_type: AttackType = AttackType.NONE
    patch_labels: np.ndarray | None = None
    sample_id: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        label = Label.parse(self.label)
        attack = AttackType.parse(self.attack_type)
        if (label == Label.LIVE) != (attack == AttackType.NONE):
            raise ContractError(
                f"sample '{self.sample_id}': label {label.name} inconsistent with attack type {attack.value}")
        object.__setattr__(self, "label", label)
        object.__setattr__(self, "attack_type", attack)
        if self.patch_labels is not None:
            grid = np.array(self.patch_labels, dtype=np.int8, copy=True)
            if grid.ndim != 2:
                raise InvalidArgumentError("patch_labels must be a 2-D grid")
            grid.setflags(write=False)
            object.__setattr__(self, "patch_labels", grid)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def patch_label_vector(self, n_patches):
        """Raster-order patch labels; without a grid every patch inherits the image label."""
        if self.patch_labels is None:
            return np.full(n_patches, int(self.label), dtype=np.int64)
        flat = self.patch_labels.reshape(-1).astype(np.int64)
        if flat.size != n_patches:
            raise InvalidArgumentError(
                f"sample '{self.sample_id}' has {flat.size} patch labels, model expects {n_patches}")
        return flat
