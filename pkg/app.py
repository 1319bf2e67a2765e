"""Command-line entry point: synth, augment, train, bank, score, eval, ablate, pipeline, grad-check.

Every subcommand takes --config (YAML run config) and any number of
--set section.key=value overrides; dedicated flags are applied last and win.
Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric failure.
"""
import argparse
import json
import logging
import re
import sys
from pathlib import Path

import yaml

from core import (
    AttackType,
    AugOutcome,
    Label,
    PipelineEngine,
    RunConfig,
    Sample,
    apply_overrides,
    apply_pda,
    attach_ground_truth,
    augmentation_benefit,
    build_bank,
    calibrate,
    compute_metrics,
    derive_seed,
    exit_code_for,
    file_digest,
    fit,
    grad_check,
    load_bank,
    load_checkpoint,
    load_config,
    load_fold_samples,
    make_rng,
    read_image,
    read_manifest,
    read_scores,
    rewrite_labels,
    run_ablation,
    save_bank,
    save_checkpoint,
    simulator,
    synth_dataset,
    threshold_record,
    write_image,
    write_json,
    write_scores,
)
from core.ablation import MODES
from core.engine import STAGES
from core.errors import ContractError, InvalidArgumentError

logger = logging.getLogger("fas")

GRAD_CHECK_TOLERANCE = 1e-4


def parse_params(text):
    """"k=v,k2=[1,2]" -> dict; values are parsed as YAML, commas inside brackets are kept."""
    params = {}
    if not text:
        return params
    for item in re.split(r",(?![^\[]*\])", text):
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise InvalidArgumentError(f"parameter '{item}' is not of the form key=value")
        params[key.strip()] = yaml.safe_load(raw)
    return params


def resolve_config(args):
    config = load_config(args.config) if args.config else RunConfig()
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    for flag, key in (("protocol", "data.protocol"), ("fold", "data.fold"), ("calib", "eval.calib_split"),
                      ("epochs", "train.epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return apply_overrides(config, overrides)


def cmd_synth(args, config):
    data = config.data
    manifest = synth_dataset(args.subjects or data.n_subjects, args.frames or data.frames_per_subject,
                             make_rng(derive_seed(config.seed, "synth")), args.out, config.model.image_size)
    print(f"wrote {len(manifest)} rows ({manifest.count(Label.LIVE)} live, "
          f"{manifest.count(Label.SPOOF)} spoof) to {Path(args.out) / 'manifest.csv'}")
    return 0


def cmd_augment(args, config):
    image = read_image(args.input)
    rng = make_rng(args.seed if args.seed is not None else config.seed)
    params = parse_params(args.params)
    label, attack = Label.parse(args.label), AttackType.parse(args.attack)
    if args.op.lower() == "pda":
        if not args.live:
            raise InvalidArgumentError("pda needs --live with the partner live image")
        p_patch = float(params.pop("p_patch", config.augment.pda_patch_prob))
        patch_size = int(params.pop("patch_size", config.model.patch_size))
        if params:
            raise InvalidArgumentError(f"unknown pda parameter '{next(iter(params))}'")
        spoof = Sample(image, label, attack)
        mixed = apply_pda(spoof, Sample(read_image(args.live), Label.LIVE), rng, p_patch, patch_size)
        write_image(args.output, mixed.image)
        record = {"op_applied": "PDA", "label_after": mixed.label.name, "attack_after": mixed.attack_type.value,
                  "params_used": {"p_patch": p_patch, "patch_size": patch_size,
                                  "patch_labels": mixed.patch_labels.tolist()}}
        print(json.dumps(record, sort_keys=True))
        return 0
    sim = simulator(args.op)
    Sample(image, label, attack)
    aug_config, params = sim.split_params(config.augment, params)
    drawn = sim.draw(rng, aug_config)
    unknown = set(params) - set(drawn)
    if unknown:
        raise InvalidArgumentError(f"unknown parameter '{sorted(unknown)[0]}' for {sim.op.value}")
    drawn.update(params)
    label, attack = rewrite_labels(sim, label, attack)
    outcome = AugOutcome(sim.render(image, **drawn), label, attack, sim.op, drawn)
    write_image(args.output, outcome.image)
    print(outcome.to_json())
    return 0


def cmd_train(args, config):
    from visuals import plot_loss_history, save_svg

    train, _, _ = load_fold_samples(config, args.data, config.data.fold)
    state = fit(train, config, log_path=args.log)
    save_checkpoint(state.model, args.out)
    if args.plot:
        save_svg(plot_loss_history(state.history), args.plot)
    print(f"trained {state.epoch} epochs, final l_overall={state.history[-1]['l_overall']:.6f}; "
          f"checkpoint {args.out}")
    return 0


def cmd_bank(args, config):
    model = load_checkpoint(args.checkpoint, config.model)
    train, _, _ = load_fold_samples(config, args.data, config.data.fold)
    live = [s for s in train if s.label == Label.LIVE]
    bank = build_bank(model, live, config.eval, tap=args.tap, model_fingerprint=file_digest(args.checkpoint))
    save_bank(bank, args.out)
    print(f"bank of {bank.size} rows at tap {bank.tap}; wrote {args.out}")
    return 0


def cmd_score(args, config):
    model = load_checkpoint(args.checkpoint, config.model)
    bank = load_bank(args.bank)
    if bank.model_fingerprint and bank.model_fingerprint != file_digest(args.checkpoint):
        raise ContractError("reference bank was built from a different checkpoint")
    _, calib, test = load_fold_samples(config, args.data, config.data.fold)
    reports, live, spoof, threshold = calibrate(model, bank, calib, test, config.eval)
    write_scores([r.with_threshold(threshold) for r in reports], args.out)
    record = threshold_record(live, spoof, threshold, config.eval.calib_split)
    if args.threshold_out:
        write_json(args.threshold_out, record)
    print(json.dumps(record, sort_keys=True))
    return 0


def _threshold_arg(value):
    path = Path(value)
    if path.exists():
        return float(json.loads(path.read_text(encoding="utf-8"))["threshold"])
    try:
        return float(value)
    except ValueError:
        raise InvalidArgumentError(f"--threshold takes a number or a threshold JSON file, got '{value}'") from None


def cmd_eval(args, config):
    threshold = _threshold_arg(args.threshold)
    reports = attach_ground_truth(read_scores(args.scores), read_manifest(args.data, check_paths=False))
    metrics = compute_metrics(reports, threshold)
    if args.out:
        write_json(args.out, metrics.to_record())
    if args.plot:
        from visuals import plot_far_frr, save_svg

        save_svg(plot_far_frr(metrics.curve, threshold), args.plot)
    print(metrics.to_table())
    return 0


def cmd_ablate(args, config):
    if args.benefit:
        record = augmentation_benefit(config, args.data, seeds=tuple(range(args.benefit)), fold=config.data.fold)
        text = (f"median ACER with augmentation {record['median_with']:.4f}, "
                f"without {record['median_without']:.4f}: {record['status']}")
    else:
        folds = [int(f) for f in args.folds.split(",")] if args.folds else None
        taps = args.taps.split(",") if args.taps else None
        table = run_ablation(args.mode, config, args.data, taps=taps, folds=folds)
        record, text = table.to_record(), table.to_text()
    if args.out:
        write_json(args.out, record)
    print(text)
    return 0


def cmd_pipeline(args, config):
    stages = tuple(args.stages.split(",")) if args.stages else STAGES
    summary = PipelineEngine(config, args.out, manifest=args.data).run(stages)
    metrics = summary.get("metrics")
    if metrics:
        print(f"ACER {metrics['acer'] * 100:.2f}% (APCER {metrics['apcer'] * 100:.2f}%, "
              f"BPCER {metrics['bpcer'] * 100:.2f}%) at threshold {metrics['threshold']:.6f}")
    print(f"summary written to {Path(args.out) / 'summary.json'}")
    return 0


def cmd_grad_check(args, config):
    report = grad_check(seed=args.seed if args.seed is not None else config.seed, n_samples=args.samples,
                        floor=args.floor, max_per_tensor=args.max_per_tensor)
    print(json.dumps(report.to_record(), sort_keys=True))
    if report.max_rel_error >= args.tolerance:
        logger.error("max relative error %.3e exceeds %.1e (%s)", report.max_rel_error, args.tolerance,
                     report.worst[0])
        return 4
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (defaults apply for missing keys)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--seed", type=int, help="root seed")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")

    split = argparse.ArgumentParser(add_help=False)
    split.add_argument("--data", required=True, help="manifest CSV")
    split.add_argument("--protocol", help="protocol file or shipped protocol name")
    split.add_argument("--fold", type=int, help="protocol fold index")

    parser = argparse.ArgumentParser(prog="fas", description="Intermediate-feature ViT face anti-spoofing toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic live/print/display corpus")
    p.add_argument("--out", required=True, help="output directory (images + manifest.csv)")
    p.add_argument("--subjects", type=int, help="number of subjects")
    p.add_argument("--frames", type=int, help="live frames per subject")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", parents=[common], help="apply one simulator (a..h) or PDA to an image")
    p.add_argument("--op", required=True, help="a..h, an AugOp name, or pda")
    p.add_argument("--in", dest="input", required=True, help="input PNG/PPM")
    p.add_argument("--out", dest="output", required=True, help="output PNG/PPM")
    p.add_argument("--params", help="k=v,... overriding drawn parameters")
    p.add_argument("--label", default="LIVE", help="label of the input image")
    p.add_argument("--attack", default="NONE", help="attack type of the input image")
    p.add_argument("--live", help="partner live image for pda")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", parents=[common, split], help="train a model on a protocol's train split")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-epoch loss CSV")
    p.add_argument("--plot", help="loss curve SVG")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bank", parents=[common, split], help="build the live reference bank")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tap", help="tap point (block, block.attn or final); default is the score tap")
    p.add_argument("--out", required=True, help="bank path")
    p.set_defaults(func=cmd_bank)

    p = sub.add_parser("score", parents=[common, split], help="score the test split and select the threshold")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--calib", choices=("calib", "test"), help="split the threshold is chosen on")
    p.add_argument("--out", required=True, help="scores CSV")
    p.add_argument("--threshold-out", help="threshold JSON")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", parents=[common], help="APCER/BPCER/ACER from a scores CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--data", required=True, help="manifest CSV with ground truth")
    p.add_argument("--threshold", required=True, help="threshold value or threshold JSON")
    p.add_argument("--out", help="metrics JSON")
    p.add_argument("--plot", help="FAR/FRR SVG")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common, split], help="tap, loss-term and augmentation ablations")
    p.add_argument("--mode", choices=MODES, default="score-tap")
    p.add_argument("--taps", help="comma-separated taps, e.g. 4,5,6 or 5.attn")
    p.add_argument("--folds", help="comma-separated fold indices (default: all)")
    p.add_argument("--benefit", type=int, metavar="N_SEEDS",
                   help="instead, report the median ACER with and without augmentation over N seeds")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="table JSON")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("pipeline", parents=[common], help="synth -> train -> bank -> score -> eval")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--data", help="existing manifest (skips synthesis)")
    p.add_argument("--protocol")
    p.add_argument("--fold", type=int)
    p.add_argument("--calib", choices=("calib", "test"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--stages", help=f"comma-separated subset of {','.join(STAGES)}")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of l_overall on a tiny model")
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--max-per-tensor", type=int, help="check at most this many elements per tensor")
    p.add_argument("--tolerance", type=float, default=GRAD_CHECK_TOLERANCE)
    p.add_argument("--floor", type=float, default=1e-3, help="denominator floor of the relative error")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s - %(levelname)s - %(message)s")
    try:
        config = resolve_config(args)
        return args.func(args, config)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        logger.debug("command failed", exc_info=True)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
