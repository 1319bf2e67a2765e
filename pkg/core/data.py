"""Manifests, frame sampling, protocol splits and the synthetic live/spoof corpus."""
import csv
import hashlib
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import expit

from core.augment import SIMULATORS_BY_LETTER
from core.config import AugmentConfig, derive_seed
from core.errors import ContractError, DataError, InvalidArgumentError
from core.imagecore import make_rng, read_image, resize_bilinear, unit_image, write_image
from core.protocols import load_protocol
from core.samples import AttackType, Label, Sample

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("path", "label", "attack_type", "subject_id", "session", "device", "video_id", "frame_index")
OPTIONAL_COLUMNS = ("instrument",)

# Spoof recipes as simulator letters, applied left to right.
PRINT_RECIPES = ("d+e", "d+f")
DISPLAY_RECIPES = ("h", "g+h")

# Artifacts are rendered stronger than the training-time augmentation defaults.
GENERATION_STRENGTH = AugmentConfig(
    halftone_cell=(1, 3),
    specular_intensity=(0.3, 0.6),
    moire_amplitude=(0.2, 0.3),
    moire_freq=(4, 10),
)

SESSION_LIGHT = {1: (1.0, 1.0, 1.0), 2: (0.85, 0.85, 0.92), 3: (1.05, 0.97, 0.88)}
N_SESSIONS = 3
N_DEVICES = 2


@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: Label
    attack_type: AttackType
    subject_id: str
    session: str
    device: str
    video_id: str
    frame_index: int
    instrument: str = ""

    def as_dict(self):
        return {
            "path": self.path,
            "label": self.label.name,
            "attack_type": self.attack_type.value,
            "subject_id": self.subject_id,
            "session": self.session,
            "device": self.device,
            "video_id": self.video_id,
            "frame_index": self.frame_index,
            "instrument": self.instrument,
        }


@dataclass(frozen=True)
class Manifest:
    rows: tuple
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def with_rows(self, rows):
        return Manifest(tuple(rows), self.root)

    def resolve(self, row):
        path = Path(row.path)
        return path if path.is_absolute() else self.root / path

    def count(self, label):
        return sum(1 for r in self.rows if r.label == label)


def _parse_row(raw, line, source):
    try:
        label = Label.parse(raw["label"])
        attack = AttackType.parse(raw["attack_type"])
        frame_index = int(raw["frame_index"])
    except (InvalidArgumentError, ValueError) as exc:
        raise DataError(f"{source}:{line}: {exc}") from exc
    if (label == Label.LIVE) != (attack == AttackType.NONE):
        raise ContractError(f"{source}:{line}: label {label.name} inconsistent with attack type {attack.value}")
    return ManifestRow(
        path=raw["path"], label=label, attack_type=attack,
        subject_id=raw["subject_id"], session=raw["session"], device=raw["device"],
        video_id=raw["video_id"], frame_index=frame_index, instrument=raw.get("instrument") or "",
    )


def read_manifest(path, check_paths=True):
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader, ()))
            body = list(reader)
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if header not in (MANIFEST_COLUMNS, MANIFEST_COLUMNS + OPTIONAL_COLUMNS):
        raise DataError(f"{path}: manifest header must be {','.join(MANIFEST_COLUMNS)}[,instrument]")
    rows = []
    for line, values in enumerate(body, start=2):
        if not values:
            continue
        if len(values) != len(header):
            raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(values)}")
        rows.append(_parse_row(dict(zip(header, values)), line, path))
    manifest = Manifest(tuple(rows), path.parent)
    if check_paths:
        for row in manifest:
            if not manifest.resolve(row).is_file():
                raise DataError(f"{path}: image '{row.path}' does not exist")
    logger.debug("Read manifest %s: %d rows", path, len(rows))
    return manifest


def write_manifest(manifest, path):
    path = Path(path)
    columns = MANIFEST_COLUMNS
    if any(r.instrument for r in manifest):
        columns = MANIFEST_COLUMNS + OPTIONAL_COLUMNS
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for row in manifest:
                record = row.as_dict()
                writer.writerow([record[c] for c in columns])
    except OSError as exc:
        raise DataError(f"cannot write manifest {path}: {exc}") from exc
    return path


def manifest_digest(path):
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc


def sample_frames(manifest, per_video, rng):
    """Uniformly choose min(per_video, available) frames of every video, without replacement."""
    if per_video < 1:
        raise InvalidArgumentError("per_video must be at least 1")
    videos = OrderedDict()
    for row in manifest:
        videos.setdefault(row.video_id, []).append(row)
    chosen = []
    for rows in videos.values():
        if len(rows) <= per_video:
            chosen.extend(rows)
            continue
        picks = np.sort(rng.choice(len(rows), size=per_video, replace=False))
        chosen.extend(rows[i] for i in picks)
    return manifest.with_rows(chosen)


def load_split(manifest, protocol, fold=0):
    """(train, calib, test) manifests of one protocol fold; calib is empty when undefined."""
    spec = load_protocol(protocol)
    f = spec.fold(fold)
    records = [row.as_dict() for row in manifest]

    def select(split_filter):
        return manifest.with_rows(row for row, rec in zip(manifest.rows, records) if split_filter.matches(rec))

    train, test = select(f.train), select(f.test)
    calib = select(f.calib) if f.calib is not None else manifest.with_rows(())
    for name, part in (("train", train), ("test", test)):
        if not len(part):
            raise InvalidArgumentError(f"protocol '{spec.name}' fold '{f.name}': {name} split is empty")
    if f.calib is not None and not len(calib):
        raise InvalidArgumentError(f"protocol '{spec.name}' fold '{f.name}': calib split is empty")
    overlap = {r.path for r in train} & {r.path for r in test}
    if overlap:
        raise ContractError(
            f"protocol '{spec.name}' fold '{f.name}': {len(overlap)} rows in both train and test, e.g. {min(overlap)}")
    logger.info("Split %s/%s: train=%d calib=%d test=%d", spec.name, f.name, len(train), len(calib), len(test))
    return train, calib, test


def crop_border(img, margin):
    """Remove a border of margin x face-box size (the crop is assumed to include it on every side)."""
    if margin <= 0:
        return img
    fraction = margin / (1.0 + 2.0 * margin)
    dy, dx = int(round(img.height * fraction)), int(round(img.width * fraction))
    if 2 * dy >= img.height or 2 * dx >= img.width:
        raise InvalidArgumentError(f"crop margin {margin} leaves no pixels")
    return img.with_data(img.data[dy:img.height - dy, dx:img.width - dx])


def load_samples(manifest, image_size, crop_margin=0.0):
    """Read, crop and resize every manifest row into a Sample."""
    samples = []
    for row in manifest:
        img = crop_border(read_image(manifest.resolve(row)), crop_margin)
        if img.shape[:2] != (image_size, image_size):
            img = resize_bilinear(img, image_size, image_size)
        metadata = {k: v for k, v in row.as_dict().items() if k not in ("path", "label", "attack_type")}
        samples.append(Sample(img, row.label, row.attack_type, sample_id=row.path, metadata=metadata))
    return samples


def draw_subject(rng):
    """Per-subject face parameters."""
    tone = rng.uniform(0.0, 1.0)
    return {
        "skin": np.array([0.45 + 0.4 * tone, 0.32 + 0.35 * tone, 0.25 + 0.3 * tone]),
        "background": rng.uniform(0.15, 0.6, size=3),
        "center": rng.uniform(0.47, 0.53, size=2),
        "axes": np.array([rng.uniform(0.32, 0.38), rng.uniform(0.24, 0.30)]),
        "eye_y": rng.uniform(-0.12, -0.06),
        "eye_dx": rng.uniform(0.09, 0.12),
        "eye_r": rng.uniform(0.035, 0.05),
        "mouth_y": rng.uniform(0.14, 0.2),
        "mouth_w": rng.uniform(0.07, 0.11),
    }


def _soft_ellipse(yy, xx, cy, cx, ay, ax, sharpness=8.0):
    r = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2
    return expit(sharpness * (1.0 - r))


def render_face(subject, size, rng, session=1, device=1):
    """Smooth face-like composition: shaded background, skin ellipse, eyes and mouth."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    cy, cx = subject["center"] + rng.normal(0.0, 0.01, size=2)
    ay, ax = subject["axes"]
    background = subject["background"][None, None, :] * (0.85 + 0.3 * yy)[:, :, None]
    face = subject["skin"][None, None, :] * (1.05 - 0.25 * (yy - cy))[:, :, None]
    img = background + (face - background) * _soft_ellipse(yy, xx, cy, cx, ay, ax)[:, :, None]
    eye_y = cy + subject["eye_y"]
    eye_col = np.array([0.15, 0.12, 0.1])
    for side in (-1.0, 1.0):
        eye = _soft_ellipse(yy, xx, eye_y, cx + side * subject["eye_dx"], subject["eye_r"] * 0.7, subject["eye_r"])
        img = img + (eye_col - img) * eye[:, :, None]
    mouth = _soft_ellipse(yy, xx, cy + subject["mouth_y"], cx, 0.025, subject["mouth_w"])
    img = img + (np.array([0.6, 0.25, 0.25]) - img) * mouth[:, :, None]
    img = img * np.asarray(SESSION_LIGHT[(session - 1) % N_SESSIONS + 1])
    blur = 0.3 * ((device - 1) % N_DEVICES)
    if blur > 0:
        img = ndimage.gaussian_filter(img, sigma=(blur, blur, 0), mode="nearest")
    img = img + rng.normal(0.0, 0.004, size=img.shape)
    return unit_image(img)


def render_spoof(live, recipe, rng, cfg=GENERATION_STRENGTH):
    """Pass a live image through the simulators named by a recipe such as "d+e"."""
    img = live
    params = {}
    for letter in recipe.split("+"):
        img, drawn = SIMULATORS_BY_LETTER[letter].apply(img, rng, cfg)
        params[letter] = drawn
    return img, params


def synth_dataset(n_subjects, frames_per_subject, rng, out_dir, image_size=32):
    """Write a synthetic corpus and its manifest; returns the manifest.

    Every live frame yields one print spoof and one display spoof, so the
    corpus holds n_subjects * frames_per_subject live rows and twice as many
    spoof rows. Session and device cycle over a 3 x 2 grid.
    """
    if n_subjects < 1 or frames_per_subject < 1:
        raise InvalidArgumentError("n_subjects and frames_per_subject must be positive")
    out_dir = Path(out_dir)
    root_seed = int(rng.integers(2 ** 63))
    rows = []
    try:
        for kind in ("live", "print", "display"):
            (out_dir / kind).mkdir(parents=True, exist_ok=True)
        for s in range(1, n_subjects + 1):
            subject = draw_subject(make_rng(derive_seed(root_seed, f"subject:{s}")))
            for f in range(frames_per_subject):
                session = 1 + f % N_SESSIONS
                device = 1 + (f // N_SESSIONS) % N_DEVICES
                frame_rng = make_rng(derive_seed(root_seed, f"frame:{s}:{f}"))
                live = render_face(subject, image_size, frame_rng, session, device)
                video = f"s{s:03d}_se{session}_d{device}"
                index = f // (N_SESSIONS * N_DEVICES)
                entries = [("live", Label.LIVE, AttackType.NONE, "", live)]
                for kind, attack, recipes in (("print", AttackType.PRINT, PRINT_RECIPES),
                                              ("display", AttackType.DISPLAY, DISPLAY_RECIPES)):
                    recipe = recipes[f % len(recipes)]
                    spoof, _ = render_spoof(live, recipe, frame_rng)
                    entries.append((kind, Label.SPOOF, attack, recipe, spoof))
                for kind, label, attack, recipe, img in entries:
                    rel = f"{kind}/s{s:03d}_f{f:03d}.png"
                    write_image(out_dir / rel, img)
                    rows.append(ManifestRow(
                        path=rel, label=label, attack_type=attack, subject_id=str(s),
                        session=str(session), device=str(device), video_id=f"{kind}_{video}",
                        frame_index=index, instrument=recipe,
                    ))
    except OSError as exc:
        raise DataError(f"cannot write synthetic corpus to {out_dir}: {exc}") from exc
    manifest = Manifest(tuple(rows), out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    logger.info("Synthesized %d live and %d spoof images in %s",
                manifest.count(Label.LIVE), manifest.count(Label.SPOOF), out_dir)
    return manifest
