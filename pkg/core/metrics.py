"""Presentation-attack error rates.

R_i = 1 when sample i is classified Spoof (score below the threshold).
APCER is the worst per-attack-type acceptance rate, BPCER the live rejection
rate and ACER their mean. Rates are exact counts divided once.
"""
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from core.errors import ContractError, InvalidArgumentError
from core.samples import AttackType, Label

METRIC_NAMES = ("apcer", "bpcer", "acer")


@dataclass
class MetricsReport:
    per_attack_apcer: dict
    apcer: float
    bpcer: float
    acer: float
    threshold: float
    counts: dict
    curve: list = field(default_factory=list)

    def to_record(self):
        return {
            "apcer": self.apcer,
            "bpcer": self.bpcer,
            "acer": self.acer,
            "per_attack_apcer": dict(self.per_attack_apcer),
            "threshold": self.threshold,
            "counts": self.counts,
            "curve": [list(point) for point in self.curve],
        }

    @classmethod
    def from_record(cls, record):
        return cls(
            per_attack_apcer=dict(record["per_attack_apcer"]),
            apcer=record["apcer"],
            bpcer=record["bpcer"],
            acer=record["acer"],
            threshold=record["threshold"],
            counts=record["counts"],
            curve=[tuple(point) for point in record.get("curve", [])],
        )

    def to_table(self):
        lines = [f"{'metric':<22}{'value':>10}", "-" * 32]
        for attack, value in sorted(self.per_attack_apcer.items()):
            lines.append(f"{'APCER ' + attack:<22}{value * 100:>9.2f}%")
        lines.append(f"{'APCER':<22}{self.apcer * 100:>9.2f}%")
        lines.append(f"{'BPCER':<22}{self.bpcer * 100:>9.2f}%")
        lines.append(f"{'ACER':<22}{self.acer * 100:>9.2f}%")
        lines.append(f"{'threshold':<22}{self.threshold:>10.6f}")
        n_pa = ", ".join(f"{k}={v}" for k, v in sorted(self.counts["N_PA"].items()))
        lines.append(f"N_PA: {n_pa}; N_BF: {self.counts['N_BF']}")
        return "\n".join(lines)


def _check_truth(label, attack):
    label = Label.parse(label)
    attack = AttackType.parse(attack)
    if label == Label.SPOOF and attack == AttackType.NONE:
        raise ContractError("spoof sample with attack type NONE")
    if label == Label.LIVE and attack != AttackType.NONE:
        raise ContractError(f"live sample with attack type {attack.value}")
    return label, attack


def compute_metrics(reports, threshold, with_curve=True):
    """MetricsReport for scored samples carrying ground-truth label and attack type."""
    accepted = Counter()
    totals = Counter()
    live_total = live_rejected = 0
    live_scores, spoof_scores = [], []
    for report in reports:
        label, attack = _check_truth(report.label, report.attack_type)
        spoof_predicted = report.score < threshold
        if label == Label.LIVE:
            live_total += 1
            live_rejected += int(spoof_predicted)
            live_scores.append(report.score)
        else:
            totals[attack.value] += 1
            accepted[attack.value] += int(not spoof_predicted)
            spoof_scores.append(report.score)
    if live_total == 0 or not totals:
        raise InvalidArgumentError("metrics need at least one live and one spoof sample")
    per_attack = {attack: accepted[attack] / n for attack, n in totals.items()}
    apcer = max(per_attack.values())
    bpcer = live_rejected / live_total
    return MetricsReport(
        per_attack_apcer=per_attack,
        apcer=apcer,
        bpcer=bpcer,
        acer=(apcer + bpcer) / 2,
        threshold=float(threshold),
        counts={"N_PA": dict(totals), "N_BF": live_total},
        curve=far_frr_curve(live_scores, spoof_scores) if with_curve else [],
    )


def _as_scores(scores, name):
    arr = np.asarray(scores, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise InvalidArgumentError(f"{name} scores are empty")
    return arr


def error_counts(live_scores, spoof_scores, thresholds):
    """Integer counts (spoof >= theta, live < theta) for each threshold."""
    live = np.sort(_as_scores(live_scores, "live"))
    spoof = np.sort(_as_scores(spoof_scores, "spoof"))
    thresholds = np.asarray(thresholds, dtype=np.float64)
    false_accepts = spoof.size - np.searchsorted(spoof, thresholds, side="left")
    false_rejects = np.searchsorted(live, thresholds, side="left")
    return false_accepts, false_rejects


def far_frr_curve(live_scores, spoof_scores):
    """(theta, FAR, FRR) at every distinct observed score, ascending in theta."""
    live = _as_scores(live_scores, "live")
    spoof = _as_scores(spoof_scores, "spoof")
    thetas = np.unique(np.concatenate([live, spoof]))
    fa, fr = error_counts(live, spoof, thetas)
    return [(float(t), int(a) / spoof.size, int(r) / live.size) for t, a, r in zip(thetas, fa, fr)]


def aggregate_folds(reports):
    """Mean and population std of each metric across folds."""
    reports = list(reports)
    if not reports:
        raise InvalidArgumentError("no fold reports to aggregate")
    summary = {}
    for name in METRIC_NAMES:
        values = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        summary[name] = {"mean": float(values.mean()), "std": float(values.std())}
    summary["folds"] = len(reports)
    return summary
