"""Live reference bank and max-cosine scoring."""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from core.checkpoint import BANK_MAGIC, read_container, write_container
from core.config import EvalConfig, parse_tap
from core.errors import CheckpointError, ContractError, DataError, InvalidArgumentError, NumericError
from core.metrics import error_counts
from core.samples import Label
from core.vit import forward, normalize_images

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-6
SCORE_COLUMNS = ("sample_id", "score", "nearest_reference", "predicted")


@dataclass
class ReferenceBank:
    vectors: np.ndarray
    source_ids: list
    tap: str
    model_fingerprint: str = ""

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] < 1:
            raise InvalidArgumentError("a reference bank needs at least one row")
        if len(self.source_ids) != vectors.shape[0]:
            raise InvalidArgumentError(f"{vectors.shape[0]} rows but {len(self.source_ids)} source ids")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
            raise InvalidArgumentError("reference rows must be unit-normalized")
        self.vectors = vectors
        self.source_ids = [str(s) for s in self.source_ids]

    @classmethod
    def from_vectors(cls, vectors, source_ids=None, tap="final", model_fingerprint=""):
        """Bank from raw feature rows; rows are unit-normalized here."""
        vectors = np.asarray(vectors, dtype=np.float64)
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise NumericError("zero-norm reference vector", tensor="vectors")
        if source_ids is None:
            source_ids = [f"ref{i}" for i in range(len(vectors))]
        return cls(vectors / norms, list(source_ids), str(tap), model_fingerprint)

    @property
    def size(self):
        return self.vectors.shape[0]

    def extended(self, vectors, source_ids):
        extra = ReferenceBank.from_vectors(vectors, source_ids, self.tap, self.model_fingerprint)
        return ReferenceBank(np.vstack([self.vectors, extra.vectors]), self.source_ids + extra.source_ids,
                             self.tap, self.model_fingerprint)


@dataclass
class ScoreReport:
    sample_id: str
    score: float
    nearest_reference: str
    predicted: Label | None = None
    degenerate: bool = False
    label: Label | None = None
    attack_type: object = None
    extra: dict = field(default_factory=dict)

    def with_threshold(self, threshold):
        predicted = Label.LIVE if self.score >= threshold else Label.SPOOF
        return ScoreReport(self.sample_id, self.score, self.nearest_reference, predicted,
                           self.degenerate, self.label, self.attack_type, self.extra)


def encode_class_tokens(model, images, taps, eval_config=None, batch_size=32):
    """Class tokens at each tap for SRGB_UNIT images: {str(tap): (N, dim) array}."""
    eval_config = eval_config or EvalConfig()
    taps = [parse_tap(t, model.config.depth) for t in taps]
    chunks = {str(t): [] for t in taps}
    model.eval()
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            acts = forward(model, normalize_images(images[start:start + batch_size], eval_config))
            for tap in taps:
                chunks[str(tap)].append(acts.class_token(tap).double().cpu().numpy())
    return {key: np.concatenate(parts) for key, parts in chunks.items()}


def build_bank(model, live_samples, eval_config=None, tap=None, model_fingerprint=""):
    """Unit-normalized class tokens of live samples at the score tap."""
    live_samples = list(live_samples)
    if not live_samples:
        raise InvalidArgumentError("cannot build a reference bank from no samples")
    for sample in live_samples:
        if sample.label != Label.LIVE:
            raise ContractError(f"reference bank accepts only live samples, got spoof '{sample.sample_id}'")
    tap = parse_tap(tap if tap is not None else model.config.score_tap_point, model.config.depth)
    tokens = encode_class_tokens(model, [s.image for s in live_samples], [tap], eval_config)[str(tap)]
    bank = ReferenceBank.from_vectors(tokens, [s.sample_id for s in live_samples], str(tap), model_fingerprint)
    logger.info("Built reference bank: %d rows at tap %s", bank.size, tap)
    return bank


def score_vectors(bank, queries, sample_ids=None):
    """Max cosine similarity of each query row against the bank."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[1] != bank.vectors.shape[1]:
        raise InvalidArgumentError(f"query dim {queries.shape[1]} does not match bank dim {bank.vectors.shape[1]}")
    if sample_ids is None:
        sample_ids = [f"q{i}" for i in range(len(queries))]
    norms = np.linalg.norm(queries, axis=1)
    reports = []
    for sample_id, q, norm in zip(sample_ids, queries, norms):
        if norm == 0:
            logger.warning("zero-norm query '%s' scored -1", sample_id)
            reports.append(ScoreReport(sample_id, -1.0, "", degenerate=True))
            continue
        sims = bank.vectors @ (q / norm)
        best = int(np.argmax(sims))
        reports.append(ScoreReport(sample_id, float(sims[best]), bank.source_ids[best]))
    return reports


def score_batch(model, bank, samples, eval_config=None, threshold=None):
    """Score samples; ground truth is copied onto each report."""
    samples = list(samples)
    if not samples:
        return []
    tap = parse_tap(bank.tap, model.config.depth)
    tokens = encode_class_tokens(model, [s.image for s in samples], [tap], eval_config)[str(tap)]
    reports = score_vectors(bank, tokens, [s.sample_id for s in samples])
    for report, sample in zip(reports, samples):
        report.label = sample.label
        report.attack_type = sample.attack_type
    if threshold is not None:
        reports = [r.with_threshold(threshold) for r in reports]
    return reports


def score(model, bank, sample, eval_config=None, threshold=None):
    return score_batch(model, bank, [sample], eval_config, threshold)[0]


def select_threshold(live_scores, spoof_scores):
    """Threshold where FAR and FRR meet.

    Candidates are the observed scores and the midpoints between neighbours.
    Minimizes |FAR - FRR|, then FAR, then theta. Comparison uses integer
    counts so ties are exact.
    """
    live = np.asarray(live_scores, dtype=np.float64).reshape(-1)
    spoof = np.asarray(spoof_scores, dtype=np.float64).reshape(-1)
    if live.size == 0 or spoof.size == 0:
        raise InvalidArgumentError("threshold selection needs live and spoof scores")
    observed = np.unique(np.concatenate([live, spoof]))
    candidates = np.unique(np.concatenate([observed, (observed[:-1] + observed[1:]) / 2]))
    fa, fr = error_counts(live, spoof, candidates)
    # |fa/Ns - fr/Nl| scaled by Ns*Nl stays integral
    gap = np.abs(fa.astype(np.int64) * live.size - fr.astype(np.int64) * spoof.size)
    best = np.lexsort((candidates, fa, gap))[0]
    return float(candidates[best])


def calibrate(model, bank, calib, test, eval_config):
    """Score the test split and pick the FAR = FRR threshold on the split named by eval_config.calib_split.

    Returns (test_reports, live_scores, spoof_scores, threshold); the score
    lists are those the threshold was chosen on.
    """
    test_reports = score_batch(model, bank, test, eval_config)
    reference = test_reports
    if eval_config.calib_split == "calib":
        if not calib:
            raise InvalidArgumentError("calib_split is 'calib' but the split is empty or undefined")
        reference = score_batch(model, bank, calib, eval_config)
    live = [r.score for r in reference if r.label == Label.LIVE]
    spoof = [r.score for r in reference if r.label == Label.SPOOF]
    return test_reports, live, spoof, select_threshold(live, spoof)


def threshold_record(live_scores, spoof_scores, threshold, calib_split):
    fa, fr = error_counts(live_scores, spoof_scores, [threshold])
    return {
        "threshold": float(threshold),
        "far": int(fa[0]) / len(spoof_scores),
        "frr": int(fr[0]) / len(live_scores),
        "calib_split": calib_split,
        "n_live": len(live_scores),
        "n_spoof": len(spoof_scores),
    }


def save_bank(bank, path):
    record = {"source_ids": bank.source_ids, "tap": bank.tap, "model_fingerprint": bank.model_fingerprint}
    write_container(path, BANK_MAGIC, record, {"vectors": bank.vectors})
    return Path(path)


def load_bank(path):
    record, tensors = read_container(path, BANK_MAGIC)
    if "vectors" not in tensors:
        raise CheckpointError("missing tensor", tensor="vectors")
    try:
        return ReferenceBank(tensors["vectors"], record["source_ids"], record["tap"],
                             record.get("model_fingerprint", ""))
    except KeyError as exc:
        raise CheckpointError(f"bank record lacks {exc}") from exc
    except InvalidArgumentError as exc:
        raise CheckpointError(str(exc), tensor="vectors") from exc


def write_scores(reports, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORE_COLUMNS)
        for r in reports:
            predicted = "" if r.predicted is None else r.predicted.name
            writer.writerow([r.sample_id, repr(float(r.score)), r.nearest_reference, predicted])
    return path


def read_scores(path):
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read scores {path}: {exc}") from exc
    reports = []
    for i, row in enumerate(rows, start=2):
        try:
            predicted = Label.parse(row["predicted"]) if row["predicted"] else None
            reports.append(ScoreReport(row["sample_id"], float(row["score"]), row["nearest_reference"], predicted))
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path}:{i}: malformed score row: {exc}") from exc
    return reports
