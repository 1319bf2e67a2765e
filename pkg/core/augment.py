"""FAS-Aug artifact simulators, PDA Live Patch Mask, and photometric jitter.

Each simulator draws all of its random parameters first (``draw``) and then
renders deterministically (``render``), so an AugOutcome carries a complete
parameter record and can be reproduced exactly.
"""
import functools
import json
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy import ndimage

from core.config import AugmentConfig
from core.errors import ContractError, InvalidArgumentError
from core.imagecore import ColorSpace, make_rng, resize_bilinear, unit_image
from core.samples import AttackType, Label, Sample


class AugOp(str, Enum):
    A_TREMBLE = "A_TREMBLE"
    B_LOWRES = "B_LOWRES"
    C_COLORDIV = "C_COLORDIV"
    D_COLORDIST = "D_COLORDIST"
    E_HALFTONE_SFC = "E_HALFTONE_SFC"
    F_HALFTONE_BN = "F_HALFTONE_BN"
    G_SPECULAR = "G_SPECULAR"
    H_MOIRE = "H_MOIRE"
    NONE = "NONE"

    @property
    def letter(self):
        return self.value[0].lower() if self is not AugOp.NONE else ""


@dataclass(frozen=True, eq=False)
class AugOutcome:
    image: object
    label_after: Label
    attack_after: AttackType
    op_applied: AugOp
    params_used: dict = field(default_factory=dict)

    def to_record(self):
        return {
            "op_applied": self.op_applied.value,
            "label_after": self.label_after.name,
            "attack_after": self.attack_after.value,
            "params_used": self.params_used,
        }

    def to_json(self):
        return json.dumps(self.to_record(), sort_keys=True)

    def apply_to(self, sample):
        """The sample with this outcome's image and labels."""
        patch_labels = sample.patch_labels
        if patch_labels is not None and self.label_after == Label.SPOOF:
            patch_labels = np.full_like(patch_labels, int(Label.SPOOF))
        return sample.replace(image=self.image, label=self.label_after,
                              attack_type=self.attack_after, patch_labels=patch_labels)


def _require_unit(img):
    if img.color_space != ColorSpace.SRGB_UNIT:
        raise InvalidArgumentError("augmentations operate on SRGB_UNIT images")


def _box_blur(data, cell):
    if cell <= 1:
        return data
    if cell % 2 == 0:
        raise InvalidArgumentError(f"halftone cell must be odd, got {cell}")
    return ndimage.uniform_filter(data, size=(cell, cell, 1), mode="reflect")


class Simulator(ABC):
    op = AugOp.NONE
    rewrites_to = None
    # strength parameter name -> AugmentConfig field holding its range
    range_params = {}

    @abstractmethod
    def draw(self, rng, cfg):
        """Draw every random parameter; returns the keyword arguments of render."""

    @abstractmethod
    def render(self, img, **params):
        """Deterministic rendering given the drawn parameters."""

    def apply(self, img, rng, cfg=None):
        _require_unit(img)
        params = self.draw(rng, cfg or AugmentConfig())
        return self.render(img, **params), params

    def split_params(self, cfg, params):
        """Move strength parameters such as ``max_shift`` into a copy of cfg.

        Returns (cfg, rest); rest overrides the drawn values by name.
        """
        ranges = {self.range_params[k]: tuple(v) if isinstance(v, list) else v
                  for k, v in params.items() if k in self.range_params}
        rest = {k: v for k, v in params.items() if k not in self.range_params}
        return (replace(cfg, **ranges) if ranges else cfg), rest


class HandTremble(Simulator):
    op = AugOp.A_TREMBLE

    def draw(self, rng, cfg):
        lo, hi = cfg.tremble_strength
        strength = int(rng.integers(lo, hi + 1))
        return {"strength": strength, "angle": float(rng.uniform(0.0, np.pi))}

    def render(self, img, strength, angle):
        length = 2 * int(strength) + 1
        if length == 1:
            return img.with_data(img.data)
        kernel = np.zeros((length, length))
        center = strength
        for t in np.linspace(-strength, strength, 4 * length):
            y = int(np.rint(center + t * np.sin(angle)))
            x = int(np.rint(center + t * np.cos(angle)))
            kernel[y, x] = 1.0
        kernel /= kernel.sum()
        out = ndimage.convolve(img.data, kernel[:, :, None], mode="nearest")
        return unit_image(out)


class LowResolution(Simulator):
    op = AugOp.B_LOWRES

    def draw(self, rng, cfg):
        return {"factor": int(rng.choice(cfg.lowres_factors))}

    def render(self, img, factor):
        if factor <= 1:
            return img.with_data(img.data)
        small = resize_bilinear(img, max(1, img.height // factor), max(1, img.width // factor))
        return resize_bilinear(small, img.height, img.width)


class ColorDiversity(Simulator):
    op = AugOp.C_COLORDIV
    range_params = {"max_shift": "color_shift"}

    def draw(self, rng, cfg):
        return _draw_gain_offset(rng, cfg.color_shift)

    def render(self, img, gains, offsets):
        gains = np.asarray(gains, dtype=np.float64)
        offsets = np.asarray(offsets, dtype=np.float64)
        if np.all(gains == 1.0) and np.all(offsets == 0.0):
            return img.with_data(img.data)
        return unit_image(img.data * gains + offsets)


def _draw_gain_offset(rng, max_shift):
    if not 0.0 <= max_shift <= 0.2:
        raise InvalidArgumentError(f"max_shift must be within [0, 0.2], got {max_shift}")
    gains = rng.uniform(1.0 - max_shift, 1.0 + max_shift, size=3)
    offsets = rng.uniform(-max_shift, max_shift, size=3)
    return {"gains": gains.tolist(), "offsets": offsets.tolist()}


class ColorDistortion(Simulator):
    op = AugOp.D_COLORDIST
    rewrites_to = AttackType.SYNTH_PRINT
    range_params = {"gamma_range": "gamma_range"}

    def draw(self, rng, cfg):
        lo, hi = cfg.gamma_range
        return {"gammas": rng.uniform(lo, hi, size=3).tolist()}

    def render(self, img, gammas):
        gammas = np.asarray(gammas, dtype=np.float64)
        if np.all(gammas == 1.0):
            return img.with_data(img.data)
        return unit_image(np.power(img.data, gammas))


@functools.lru_cache(maxsize=16)
def hilbert_order(height, width):
    """(ys, xs) of an image's pixels in Hilbert-curve order."""
    n = 1
    while n < max(height, width):
        n *= 2
    d = np.arange(n * n, dtype=np.int64)
    x = np.zeros_like(d)
    y = np.zeros_like(d)
    t = d.copy()
    s = 1
    while s < n:
        rx = 1 & (t // 2)
        ry = 1 & (t ^ rx)
        flip = (ry == 0) & (rx == 1)
        x = np.where(flip, s - 1 - x, x)
        y = np.where(flip, s - 1 - y, y)
        swap = ry == 0
        x, y = np.where(swap, y, x), np.where(swap, x, y)
        x = x + s * rx
        y = y + s * ry
        t = t // 4
        s *= 2
    inside = (y < height) & (x < width)
    return y[inside], x[inside]


class HalftoneSFC(Simulator):
    op = AugOp.E_HALFTONE_SFC
    rewrites_to = AttackType.SYNTH_PRINT

    def draw(self, rng, cfg):
        return {"cell": int(rng.choice(cfg.halftone_cell))}

    def render(self, img, cell):
        ys, xs = hilbert_order(img.height, img.width)
        dots = np.zeros_like(img.data)
        for c in range(3):
            values = img.data[ys, xs, c].tolist()
            emitted = np.zeros(len(values))
            acc = 0.0
            for i, v in enumerate(values):
                acc += v
                if acc >= 0.5:
                    emitted[i] = 1.0
                    acc -= 1.0
            dots[ys, xs, c] = emitted
        return unit_image(_box_blur(dots, cell))


@functools.lru_cache(maxsize=4)
def blue_noise_mask(size=16, sigma=1.5, seed=0):
    """Void-and-cluster threshold ranks (0..size²-1) on a toroidal size x size tile."""
    rng = make_rng(seed)
    n = size * size

    def energy(pattern):
        return ndimage.gaussian_filter(pattern.astype(np.float64), sigma, mode="wrap")

    def tightest_cluster(pattern):
        return int(np.argmax(np.where(pattern, energy(pattern), -np.inf)))

    def largest_void(pattern):
        return int(np.argmin(np.where(pattern, np.inf, energy(pattern))))

    proto = np.zeros((size, size), dtype=bool)
    proto.flat[rng.choice(n, size=max(1, n // 10), replace=False)] = True
    for _ in range(4 * n):
        cluster = tightest_cluster(proto)
        proto.flat[cluster] = False
        void = largest_void(proto)
        proto.flat[void] = True
        if void == cluster:
            break

    ranks = np.zeros(n, dtype=np.int64)
    ones = int(proto.sum())
    pattern = proto.copy()
    for rank in range(ones - 1, -1, -1):
        cluster = tightest_cluster(pattern)
        pattern.flat[cluster] = False
        ranks[cluster] = rank
    pattern = proto.copy()
    for rank in range(ones, n // 2):
        void = largest_void(pattern)
        pattern.flat[void] = True
        ranks[void] = rank
    for rank in range(max(ones, n // 2), n):
        # minority pixels are now the zeros
        e = energy(~pattern)
        cluster = int(np.argmax(np.where(pattern, -np.inf, e)))
        pattern.flat[cluster] = True
        ranks[cluster] = rank
    return ranks.reshape(size, size)


class HalftoneBN(Simulator):
    op = AugOp.F_HALFTONE_BN
    rewrites_to = AttackType.SYNTH_PRINT
    mask_size = 16

    def draw(self, rng, cfg):
        cell = int(rng.choice(cfg.halftone_cell))
        oy, ox = (int(v) for v in rng.integers(0, self.mask_size, size=2))
        return {"cell": cell, "offset_y": oy, "offset_x": ox}

    def render(self, img, cell, offset_y, offset_x):
        ranks = blue_noise_mask(self.mask_size)
        thresholds = (ranks + 0.5) / ranks.size
        ys = (np.arange(img.height) + offset_y) % self.mask_size
        xs = (np.arange(img.width) + offset_x) % self.mask_size
        tiled = thresholds[ys[:, None], xs[None, :]][:, :, None]
        dots = (img.data > tiled).astype(np.float64)
        return unit_image(_box_blur(dots, cell))


class SpecularReflection(Simulator):
    op = AugOp.G_SPECULAR
    rewrites_to = AttackType.SYNTH_DISPLAY

    def draw(self, rng, cfg):
        lo, hi = cfg.specular_intensity
        return {
            "intensity": float(rng.uniform(lo, hi)),
            **_draw_highlight(rng),
        }

    def render(self, img, intensity, center_y, center_x, sigma_y, sigma_x, theta):
        if intensity == 0.0:
            return img.with_data(img.data)
        h, w = img.height, img.width
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        dy = yy - center_y * h
        dx = xx - center_x * w
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        blob = np.exp(-0.5 * ((u / (sigma_x * w)) ** 2 + (v / (sigma_y * h)) ** 2))
        return unit_image(img.data + intensity * blob[:, :, None])


def _draw_highlight(rng):
    center_y, center_x = rng.uniform(0.2, 0.8, size=2)
    sigma_y, sigma_x = rng.uniform(0.08, 0.3, size=2)
    return {
        "center_y": float(center_y), "center_x": float(center_x),
        "sigma_y": float(sigma_y), "sigma_x": float(sigma_x),
        "theta": float(rng.uniform(0.0, np.pi)),
    }


class Moire(Simulator):
    op = AugOp.H_MOIRE
    rewrites_to = AttackType.SYNTH_DISPLAY
    range_params = {"freq_range": "moire_freq"}

    def draw(self, rng, cfg):
        lo, hi = cfg.moire_amplitude
        return {"amplitude": float(rng.uniform(lo, hi)), **_draw_fringe(rng, cfg.moire_freq)}

    def render(self, img, amplitude, freq_y, freq_x, phase):
        if amplitude == 0.0:
            return img.with_data(img.data)
        h, w = img.height, img.width
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        fringe = 1.0 + amplitude * np.sin(2.0 * np.pi * (freq_x * xx / w + freq_y * yy / h) + phase)
        return unit_image(img.data * fringe[:, :, None])


def _draw_fringe(rng, freq_range):
    lo, hi = (int(v) for v in freq_range)
    freq_y = int(rng.integers(lo, hi + 1))
    freq_x = int(rng.integers(lo, hi + 1)) * int(rng.choice([-1, 1]))
    return {"freq_y": freq_y, "freq_x": freq_x, "phase": float(rng.uniform(0.0, 2.0 * np.pi))}


SIMULATORS = (
    HandTremble(), LowResolution(), ColorDiversity(), ColorDistortion(),
    HalftoneSFC(), HalftoneBN(), SpecularReflection(), Moire(),
)
SIMULATORS_BY_LETTER = {sim.op.letter: sim for sim in SIMULATORS}


def simulator(key):
    """Look a simulator up by letter ("a".."h") or AugOp name."""
    key = str(key).strip()
    if key.lower() in SIMULATORS_BY_LETTER:
        return SIMULATORS_BY_LETTER[key.lower()]
    for sim in SIMULATORS:
        if sim.op.value == key.upper():
            return sim
    raise InvalidArgumentError(f"unknown augmentation '{key}'")


# Entry points taking explicit strength parameters.

def hand_tremble(img, rng, strength):
    _require_unit(img)
    return SIMULATORS[0].render(img, strength=int(strength), angle=float(rng.uniform(0.0, np.pi)))


def low_resolution(img, rng, factor=None):
    _require_unit(img)
    if factor is None:
        factor = int(rng.choice((2, 3, 4)))
    return SIMULATORS[1].render(img, factor=int(factor))


def color_diversity(img, rng, max_shift):
    _require_unit(img)
    return SIMULATORS[2].render(img, **_draw_gain_offset(rng, max_shift))


def color_distortion(img, rng, gamma_range):
    _require_unit(img)
    lo, hi = gamma_range
    return SIMULATORS[3].render(img, gammas=rng.uniform(lo, hi, size=3).tolist())


def halftone_sfc(img, cell):
    _require_unit(img)
    return SIMULATORS[4].render(img, cell=int(cell))


def halftone_bn(img, rng, cell):
    _require_unit(img)
    oy, ox = (int(v) for v in rng.integers(0, HalftoneBN.mask_size, size=2))
    return SIMULATORS[5].render(img, cell=int(cell), offset_y=oy, offset_x=ox)


def specular_reflection(img, rng, intensity):
    _require_unit(img)
    if not 0.0 <= intensity <= 1.0:
        raise InvalidArgumentError(f"intensity must be in [0, 1], got {intensity}")
    return SIMULATORS[6].render(img, intensity=float(intensity), **_draw_highlight(rng))


def moire(img, rng, amplitude, freq_range):
    _require_unit(img)
    if not 0.0 <= amplitude <= 0.3:
        raise InvalidArgumentError(f"amplitude must be in [0, 0.3], got {amplitude}")
    return SIMULATORS[7].render(img, amplitude=float(amplitude), **_draw_fringe(rng, freq_range))


def _check_probability(name, p):
    if not 0.0 <= p <= 1.0:
        raise InvalidArgumentError(f"{name} must be in [0, 1], got {p}")


def rewrite_labels(sim, label, attack):
    if sim.rewrites_to is None:
        return label, attack
    return Label.SPOOF, sim.rewrites_to


def apply_fas_aug(sample, rng, p, cfg=None):
    """With probability p apply one of the eight simulators, chosen uniformly."""
    _check_probability("p", p)
    _require_unit(sample.image)
    if rng.random() >= p:
        return AugOutcome(sample.image, sample.label, sample.attack_type, AugOp.NONE, {})
    sim = SIMULATORS[int(rng.integers(len(SIMULATORS)))]
    image, params = sim.apply(sample.image, rng, cfg)
    label, attack = rewrite_labels(sim, sample.label, sample.attack_type)
    return AugOutcome(image, label, attack, sim.op, params)


def apply_pda(spoof, live, rng, p_patch, patch_size):
    """Live Patch Mask: swap spoof patches for co-located live ones with probability p_patch."""
    _check_probability("p_patch", p_patch)
    if spoof.label != Label.SPOOF:
        raise ContractError("PDA applies only to spoof base samples")
    if live.label != Label.LIVE:
        raise ContractError("PDA partner must be a live sample")
    a, b = spoof.image, live.image
    if a.shape != b.shape:
        raise InvalidArgumentError(f"PDA image sizes differ: {a.shape} vs {b.shape}")
    if a.height % patch_size or a.width % patch_size:
        raise InvalidArgumentError(f"patch size {patch_size} does not divide image {a.height}x{a.width}")
    gh, gw = a.height // patch_size, a.width // patch_size
    replaced = rng.random(gh * gw).reshape(gh, gw) < p_patch
    pixel_mask = np.kron(replaced, np.ones((patch_size, patch_size), dtype=bool))[:, :, None]
    image = a.with_data(np.where(pixel_mask, b.data, a.data))
    patch_labels = np.where(replaced, int(Label.LIVE), int(Label.SPOOF)).astype(np.int8)
    return spoof.replace(image=image, patch_labels=patch_labels)


def random_flip(sample, rng, p):
    """Horizontal mirror with probability p; patch labels are mirrored with the image."""
    _check_probability("p_flip", p)
    if p == 0.0 or rng.random() >= p:
        return sample
    image = sample.image.with_data(sample.image.data[:, ::-1])
    grid = None if sample.patch_labels is None else sample.patch_labels[:, ::-1]
    return sample.replace(image=image, patch_labels=grid)


def random_brightness(sample, rng, max_delta):
    """Scale all pixels by a factor drawn from [1 - max_delta, 1 + max_delta]."""
    if max_delta < 0:
        raise InvalidArgumentError("max_delta must be non-negative")
    if max_delta == 0.0:
        return sample
    scale = rng.uniform(1.0 - max_delta, 1.0 + max_delta)
    return sample.replace(image=unit_image(sample.image.data * scale))
