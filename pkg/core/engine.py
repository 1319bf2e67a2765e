import json
import logging
from dataclasses import dataclass
from pathlib import Path

from core.checkpoint import file_digest, load_checkpoint, save_checkpoint
from core.config import config_hash, derive_seed
from core.data import (load_samples, load_split, manifest_digest, read_manifest, sample_frames,
                       synth_dataset)
from core.errors import ContractError, InvalidArgumentError, StageError
from core.imagecore import make_rng
from core.metrics import compute_metrics
from core.samples import Label
from core.scoring import build_bank, calibrate, load_bank, read_scores, save_bank, threshold_record, write_scores
from core.trainer import fit

logger = logging.getLogger(__name__)

STAGES = ("synth", "train", "bank", "score", "eval")


@dataclass(frozen=True)
class RunPaths:
    out_dir: Path

    @property
    def data_dir(self):
        return self.out_dir / "data"

    @property
    def manifest(self):
        return self.data_dir / "manifest.csv"

    @property
    def checkpoint(self):
        return self.out_dir / "model.fasv"

    @property
    def bank(self):
        return self.out_dir / "bank.fasb"

    @property
    def scores(self):
        return self.out_dir / "scores.csv"

    @property
    def threshold(self):
        return self.out_dir / "threshold.json"

    @property
    def metrics_json(self):
        return self.out_dir / "metrics.json"

    @property
    def metrics_table(self):
        return self.out_dir / "metrics.txt"

    @property
    def far_frr_svg(self):
        return self.out_dir / "far_frr.svg"

    @property
    def train_log(self):
        return self.out_dir / "train_log.csv"

    @property
    def loss_svg(self):
        return self.out_dir / "train_loss.svg"

    @property
    def summary(self):
        return self.out_dir / "summary.json"


def run_seeds(config):
    return {
        "root": config.seed,
        "synth": derive_seed(config.seed, "synth"),
        "frames": derive_seed(config.seed, "frames"),
        "init": derive_seed(config.seed, "init"),
        "train": config.train_seed,
    }


def load_fold_samples(config, manifest_path, fold):
    """(train, calib, test) sample lists of one protocol fold; frames sampled per video."""
    manifest = read_manifest(manifest_path)
    manifest = sample_frames(manifest, config.data.frames_per_video, make_rng(run_seeds(config)["frames"]))
    parts = load_split(manifest, config.data.protocol, fold)
    return tuple(load_samples(p, config.model.image_size, config.data.crop_margin) for p in parts)


def attach_ground_truth(reports, manifest):
    """Copy label and attack type from manifest rows (matched by path) onto score reports."""
    truth = {row.path: row for row in manifest}
    for report in reports:
        row = truth.get(report.sample_id)
        if row is None:
            raise ContractError(f"scored sample '{report.sample_id}' is not in the manifest")
        report.label = row.label
        report.attack_type = row.attack_type
    return reports


def write_json(path, record):
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


class PipelineEngine:
    """
    Runs synth -> train -> bank -> score -> eval, each stage reading the previous
    stage's artifacts from the output directory.
    """

    def __init__(self, config, out_dir, manifest=None, callback=None):
        self.config = config
        self.paths = RunPaths(Path(out_dir))
        self.external_manifest = Path(manifest) if manifest else None
        self.callback = callback
        self.results = {}
        self._splits = None

    def log(self, msg, progress=None):
        logger.info(msg)
        if self.callback:
            try:
                if progress is not None:
                    self.callback(msg, progress)
                else:
                    self.callback(msg)
            except Exception:
                pass

    @property
    def manifest_path(self):
        return self.external_manifest or self.paths.manifest

    def run(self, stages=STAGES):
        self.paths.out_dir.mkdir(parents=True, exist_ok=True)
        for i, name in enumerate(stages):
            self.log(f"Stage {name} ({i + 1}/{len(stages)})...", i / len(stages))
            self.run_stage(name)
        summary = self.summary()
        write_json(self.paths.summary, summary)
        self.log("Pipeline complete.", 1.0)
        return summary

    def run_stage(self, name):
        if name not in STAGES:
            raise InvalidArgumentError(f"unknown stage '{name}' (expected one of {STAGES})")
        try:
            result = getattr(self, f"stage_{name}")()
        except Exception as exc:
            logger.error("Stage '%s' failed: %s", name, exc)
            raise StageError(name, exc) from exc
        self.results[name] = result
        return result

    def splits(self):
        if self._splits is None:
            self._splits = load_fold_samples(self.config, self.manifest_path, self.config.data.fold)
        return self._splits

    def stage_synth(self):
        if self.external_manifest is not None:
            self.log(f"Using manifest {self.external_manifest}; synthesis skipped.")
            return {"skipped": True}
        cfg = self.config
        manifest = synth_dataset(cfg.data.n_subjects, cfg.data.frames_per_subject,
                                 make_rng(run_seeds(cfg)["synth"]), self.paths.data_dir, cfg.model.image_size)
        self._splits = None
        return {"rows": len(manifest), "live": manifest.count(Label.LIVE), "spoof": manifest.count(Label.SPOOF)}

    def stage_train(self):
        from visuals import plot_loss_history, save_svg

        train, _, _ = self.splits()
        state = fit(train, self.config, callback=self.callback, log_path=self.paths.train_log)
        save_checkpoint(state.model, self.paths.checkpoint)
        save_svg(plot_loss_history(state.history), self.paths.loss_svg)
        return {"epochs": state.epoch, "final_loss": state.history[-1]["l_overall"],
                "augmentation_enabled": state.augmentation_enabled}

    def _load_model(self):
        return load_checkpoint(self.paths.checkpoint, self.config.model)

    def stage_bank(self):
        model = self._load_model()
        train, _, _ = self.splits()
        live = [s for s in train if s.label == Label.LIVE]
        bank = build_bank(model, live, self.config.eval, model_fingerprint=file_digest(self.paths.checkpoint))
        save_bank(bank, self.paths.bank)
        return {"rows": bank.size, "tap": bank.tap}

    def stage_score(self):
        cfg = self.config
        model = self._load_model()
        bank = load_bank(self.paths.bank)
        if bank.model_fingerprint != file_digest(self.paths.checkpoint):
            raise ContractError("reference bank was built from a different checkpoint")
        _, calib, test = self.splits()
        test_reports, live, spoof, threshold = calibrate(model, bank, calib, test, cfg.eval)
        write_scores([r.with_threshold(threshold) for r in test_reports], self.paths.scores)
        write_json(self.paths.threshold, threshold_record(live, spoof, threshold, cfg.eval.calib_split))
        return {"threshold": threshold, "scored": len(test_reports)}

    def stage_eval(self):
        from visuals import plot_far_frr, save_svg

        threshold = json.loads(self.paths.threshold.read_text(encoding="utf-8"))["threshold"]
        reports = attach_ground_truth(read_scores(self.paths.scores), read_manifest(self.manifest_path, False))
        metrics = compute_metrics(reports, threshold)
        write_json(self.paths.metrics_json, metrics.to_record())
        self.paths.metrics_table.write_text(metrics.to_table() + "\n", encoding="utf-8")
        save_svg(plot_far_frr(metrics.curve, threshold), self.paths.far_frr_svg)
        return metrics

    def summary(self):
        cfg = self.config
        record = {
            "config": cfg.to_dict(),
            "config_hash": config_hash(cfg),
            "seeds": run_seeds(cfg),
            "protocol": cfg.data.protocol,
            "fold": cfg.data.fold,
            "hashes": {},
            "stages": {k: v for k, v in self.results.items() if isinstance(v, dict)},
        }
        for name, path in (("manifest", self.manifest_path), ("checkpoint", self.paths.checkpoint),
                           ("bank", self.paths.bank)):
            if path.exists():
                record["hashes"][name] = (manifest_digest if name == "manifest" else file_digest)(path)
        metrics = self.results.get("eval")
        if metrics is not None:
            record["metrics"] = {k: v for k, v in metrics.to_record().items() if k != "curve"}
        return record
