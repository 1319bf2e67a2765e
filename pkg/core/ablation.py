"""Ablation harnesses: score tap, loss tap, loss terms and augmentation.

Each harness runs over the folds of the configured protocol and reports ACER
(and APCER/BPCER) as mean and population std across folds, one row per setting.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from core.config import FINAL_TAP, apply_overrides, parse_tap
from core.engine import load_fold_samples
from core.errors import InvalidArgumentError
from core.metrics import aggregate_folds, compute_metrics
from core.protocols import load_protocol
from core.samples import Label
from core.scoring import build_bank, calibrate
from core.trainer import fit

logger = logging.getLogger(__name__)

MODES = ("score-tap", "loss-tap", "loss-terms", "augment")

# Tap and loss-term ablations train without FAS-Aug and PDA.
NO_AUGMENTATION = ["train.p_fas=0", "train.p_pda=0"]
SCORE_TAP_TRAINING = ["model.use_tap=false", *NO_AUGMENTATION]

LOSS_TERM_SETS = {
    "class": {"use_class": True, "use_tap": False, "use_apl": False},
    "class+apl": {"use_class": True, "use_tap": False, "use_apl": True},
    "class+tap": {"use_class": True, "use_tap": True, "use_apl": False},
    "class+tap+apl": {"use_class": True, "use_tap": True, "use_apl": True},
}

AUGMENT_SETS = {
    "none": {"p_fas": 0.0, "p_pda": 0.0},
    "fas-aug": {"p_pda": 0.0},
    "pda": {"p_fas": 0.0},
    "fas-aug+pda": {},
}

FEATURE_VARIANTS = {
    "final": {"score_tap": FINAL_TAP, "use_tap": False},
    "intermediate": {},
}


@dataclass
class AblationTable:
    mode: str
    protocol: str
    rows: list = field(default_factory=list)

    def add(self, setting, reports):
        summary = aggregate_folds(reports)
        self.rows.append({"setting": str(setting), **summary})
        logger.info("%s %s: ACER %.4f +/- %.4f over %d fold(s)", self.mode, setting,
                    summary["acer"]["mean"], summary["acer"]["std"], summary["folds"])

    def to_record(self):
        return {"mode": self.mode, "protocol": self.protocol, "rows": self.rows}

    def to_text(self):
        header = f"{self.mode:<22}{'APCER (%)':>18}{'BPCER (%)':>18}{'ACER (%)':>18}"
        lines = [f"protocol: {self.protocol}", header, "-" * len(header)]
        for row in self.rows:
            cells = [f"{row[m]['mean'] * 100:.2f} ± {row[m]['std'] * 100:.2f}" for m in ("apcer", "bpcer", "acer")]
            lines.append(f"{row['setting']:<22}" + "".join(f"{c:>18}" for c in cells))
        return "\n".join(lines)


def evaluate_fold(model, train, calib, test, config, tap=None):
    """Bank from the live training samples at tap, threshold at FAR = FRR, metrics on test."""
    live = [s for s in train if s.label == Label.LIVE]
    bank = build_bank(model, live, config.eval, tap=tap)
    test_reports, _, _, threshold = calibrate(model, bank, calib, test, config.eval)
    return compute_metrics(test_reports, threshold, with_curve=False)


def _folds(config, folds):
    spec = load_protocol(config.data.protocol)
    return list(range(spec.n_folds)) if folds is None else list(folds)


def _settings_overrides(section, values):
    return [f"{section}.{k}={'final' if v == FINAL_TAP else v}" for k, v in values.items()]


def ablate_score_taps(config, manifest, taps, folds=None):
    """Train once per fold, then rebuild the bank and rescore at every tap plus the final norm."""
    depth = config.model.depth
    points = [parse_tap(t, depth) for t in taps]
    if not any(p.is_final for p in points):
        points.append(parse_tap(FINAL_TAP, depth))
    config = apply_overrides(config, SCORE_TAP_TRAINING)
    per_tap = {str(p): [] for p in points}
    for fold in _folds(config, folds):
        train, calib, test = load_fold_samples(config, manifest, fold)
        model = fit(train, config).model
        for point in points:
            per_tap[str(point)].append(evaluate_fold(model, train, calib, test, config, tap=point))
    table = AblationTable("score-tap", str(config.data.protocol))
    for key, reports in per_tap.items():
        table.add(key, reports)
    return table


def _retrain_table(mode, config, manifest, settings, folds):
    table = AblationTable(mode, str(config.data.protocol))
    fold_ids = _folds(config, folds)
    for name, overrides in settings:
        cfg = apply_overrides(config, overrides)
        reports = []
        for fold in fold_ids:
            train, calib, test = load_fold_samples(cfg, manifest, fold)
            reports.append(evaluate_fold(fit(train, cfg).model, train, calib, test, cfg))
        table.add(name, reports)
    return table


def ablate_loss_taps(config, manifest, taps, folds=None):
    """Retrain once per loss tap; scoring stays at the configured score tap."""
    depth = config.model.depth
    settings = []
    for t in taps:
        point = parse_tap(t, depth)
        settings.append((str(point), [f"model.loss_tap={point}", "model.use_tap=true", *NO_AUGMENTATION]))
    return _retrain_table("loss-tap", config, manifest, settings, folds)


def ablate_loss_terms(config, manifest, term_sets=None, folds=None):
    names = list(term_sets or LOSS_TERM_SETS)
    for name in names:
        if name not in LOSS_TERM_SETS:
            raise InvalidArgumentError(f"unknown loss-term set '{name}' (expected one of {list(LOSS_TERM_SETS)})")
    settings = [(name, _settings_overrides("model", LOSS_TERM_SETS[name]) + NO_AUGMENTATION) for name in names]
    return _retrain_table("loss-terms", config, manifest, settings, folds)


def ablate_augmentation(config, manifest, folds=None):
    """FAS-Aug / PDA on and off, for final-norm scoring without the tap loss and for intermediate features."""
    settings = []
    for variant, model_values in FEATURE_VARIANTS.items():
        for aug_name, train_values in AUGMENT_SETS.items():
            overrides = _settings_overrides("model", model_values) + _settings_overrides("train", train_values)
            settings.append((f"{variant}/{aug_name}", overrides))
    return _retrain_table("augment", config, manifest, settings, folds)


def augmentation_benefit(config, manifest, seeds=(0, 1, 2, 3, 4), fold=0):
    """Median test ACER with and without FAS-Aug+PDA across seeds.

    The status is PASS when augmentation does not hurt the median and WARN
    otherwise; a WARN is reported, never raised.
    """
    acers = {"with": [], "without": []}
    for seed in seeds:
        for key, overrides in (("with", []), ("without", NO_AUGMENTATION)):
            cfg = apply_overrides(config, [f"seed={seed}", *overrides])
            train, calib, test = load_fold_samples(cfg, manifest, fold)
            metrics = evaluate_fold(fit(train, cfg).model, train, calib, test, cfg)
            acers[key].append(metrics.acer)
    median_with = float(np.median(acers["with"]))
    median_without = float(np.median(acers["without"]))
    status = "PASS" if median_with <= median_without else "WARN"
    if status == "WARN":
        logger.warning("Augmentation did not lower median ACER (%.4f vs %.4f)", median_with, median_without)
    return {
        "protocol": str(config.data.protocol),
        "seeds": list(seeds),
        "acer_with": acers["with"],
        "acer_without": acers["without"],
        "median_with": median_with,
        "median_without": median_without,
        "status": status,
    }


def run_ablation(mode, config, manifest, taps=None, folds=None):
    if mode == "score-tap":
        return ablate_score_taps(config, manifest, taps or [config.model.score_tap_point], folds)
    if mode == "loss-tap":
        return ablate_loss_taps(config, manifest, taps or [config.model.loss_tap_point], folds)
    if mode == "loss-terms":
        return ablate_loss_terms(config, manifest, folds=folds)
    if mode == "augment":
        return ablate_augmentation(config, manifest, folds)
    raise InvalidArgumentError(f"unknown ablation mode '{mode}' (expected one of {MODES})")
