"""Command-line entry point: ``hiertail <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 data or model
inconsistency.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from hiertail import verify as verify_mod
from hiertail.ahl import loss_config
from hiertail.config import ConfigError, ExperimentConfig, resolve_config
from hiertail.hierarchy import (
    MAPPING_FILES,
    HierarchyError,
    LabelHierarchy,
    build_hierarchy,
    write_hierarchy,
)
from hiertail.ingest import IngestError, load_snapshot, parse_checkins, prepare_dataset, save_snapshot
from hiertail.metrics import EmptySplit, EvalReport
from hiertail.synth import InfeasibleConfig, SynthConfig, generate_corpus
from hiertail.trainer import (
    CheckpointError,
    EmptyTrainSplit,
    TrainConfig,
    evaluate_model,
    format_epoch_log,
    load_checkpoint,
    save_checkpoint,
    train,
    weight_summary,
)

log = logging.getLogger("hiertail")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DATA = 0, 2, 3, 4


class DataMismatch(Exception):
    pass


# -- helpers ----------------------------------------------------------------


def _prepare_output(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.txt").write_text(cfg.dump(), encoding="utf-8")
    return out


def _require(cfg: ExperimentConfig, *keys: str) -> None:
    missing = [k for k in keys if getattr(cfg, k) is None]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")
    for k in keys:
        if not Path(getattr(cfg, k)).exists():
            raise ConfigError(f"{k}: path {getattr(cfg, k)} does not exist")


def _synth_config(cfg: ExperimentConfig) -> SynthConfig:
    return SynthConfig(
        n_users=cfg.n_users, n_locations=cfg.n_locations, n_categories=cfg.n_categories,
        n_activities=cfg.n_activities, n_needs=cfg.n_needs, zipf_exponent=cfg.zipf_exponent,
        checkins_min=cfg.checkins_min, checkins_max=cfg.checkins_max, days=cfg.days,
        need_bias=cfg.need_bias, seed=cfg.seed,
    )


def _train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
        adam_betas=(cfg.beta1, cfg.beta2), seed=cfg.seed, loss=cfg.loss_mode, tau=cfg.tau,
        dim=cfg.dim, level_weights=cfg.level_weights,
    )


def _build_inputs(cfg: ExperimentConfig):
    """Run ingest on the raw data and align the hierarchy with the surviving locations."""
    _require(cfg, "data", "loc2cat", "cat2act", "act2need")
    records = parse_checkins(cfg.data, cfg.data_format)
    dataset = prepare_dataset(records, min_visits=cfg.min_visits, min_checkins=cfg.min_checkins)
    full = build_hierarchy(cfg.loc2cat, cfg.cat2act, cfg.act2need)
    if full.depth != len(cfg.level_weights):
        raise ConfigError(f"level_weights has {len(cfg.level_weights)} entries for {full.depth} levels")
    try:
        hierarchy = full.restrict(dataset.loc_ids)
    except HierarchyError as exc:
        raise DataMismatch(f"check-in locations missing from loc2cat: {exc}") from None
    return dataset, hierarchy


def _load_run_inputs(out: Path, cfg: ExperimentConfig):
    """Dataset and hierarchy saved by ``train``, or rebuilt from the config."""
    snap, hdir = out / "dataset", out / "hierarchy"
    if (snap / "records.bin").exists() and all((hdir / f).exists() for f in MAPPING_FILES):
        dataset = load_snapshot(snap)
        hierarchy = build_hierarchy(*(hdir / f for f in MAPPING_FILES))
        return dataset, hierarchy
    return _build_inputs(cfg)


def _run_training(cfg: ExperimentConfig, out: Path, timing: bool = False):
    dataset, hierarchy = _build_inputs(cfg)
    save_snapshot(dataset, out / "dataset")
    write_hierarchy(hierarchy, out / "hierarchy")
    tcfg = _train_config(cfg)
    result = train(dataset, hierarchy, tcfg, timing=timing)
    save_checkpoint(out / "checkpoint.htl", result.params, result.weights)
    (out / "epochs.tsv").write_text(format_epoch_log(result.log), encoding="utf-8")
    meta = {
        "format": "HTL1",
        "config": tcfg.to_dict(),
        "loss": asdict(loss_config(tcfg.loss, tcfg.tau)),
        "gumbel_at_eval": False,
        "best_epoch": result.best_epoch,
        "epoch_log": result.log,
        "n_locations": dataset.n_locations,
        "n_users": dataset.n_users,
        "class_counts": list(hierarchy.class_counts),
        "dataset": dataset.stats(),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return dataset, hierarchy, result


def _write_report(report: EvalReport, out: Path, name: str = "report") -> None:
    (out / f"{name}.json").write_text(report.to_json(), encoding="utf-8")
    (out / f"{name}.tsv").write_text(report.to_tsv(), encoding="utf-8")


def _evaluate_checkpoint(cfg: ExperimentConfig, out: Path, checkpoint: Path, split: str,
                         oracle: bool = False) -> EvalReport:
    params, weights = load_checkpoint(checkpoint)
    dataset, hierarchy = _load_run_inputs(out, cfg)
    if params.n_locations != dataset.n_locations or params.n_users != dataset.n_users:
        raise DataMismatch(
            f"checkpoint has |P|={params.n_locations}, |U|={params.n_users}; "
            f"dataset has |P|={dataset.n_locations}, |U|={dataset.n_users}"
        )
    if tuple(t.size for t in weights.theta) != hierarchy.class_counts:
        raise DataMismatch("checkpoint weights do not match the hierarchy")
    report = evaluate_model(params, dataset, hierarchy, split, cfg.ks, cfg.threads, oracle=oracle)
    report.meta.update({"split": split, "checkpoint": str(checkpoint), "oracle": oracle})
    return report


# -- subcommands ------------------------------------------------------------


def cmd_synth(cfg: ExperimentConfig, args) -> int:
    out = _prepare_output(cfg)
    try:
        paths = generate_corpus(_synth_config(cfg), out)
    except InfeasibleConfig as exc:
        raise ConfigError(str(exc)) from None
    for key, path in paths.items():
        print(f"{key}\t{path}")
    return EXIT_OK


def cmd_ingest(cfg: ExperimentConfig, args) -> int:
    _require(cfg, "data")
    out = _prepare_output(cfg)
    records = parse_checkins(cfg.data, cfg.data_format, strict=not args.lenient)
    dataset = prepare_dataset(records, min_visits=cfg.min_visits, min_checkins=cfg.min_checkins)
    save_snapshot(dataset, out / "dataset")
    print(json.dumps(dataset.stats(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_build_hierarchy(cfg: ExperimentConfig, args) -> int:
    _require(cfg, "loc2cat", "cat2act", "act2need")
    out = _prepare_output(cfg)
    h = build_hierarchy(cfg.loc2cat, cfg.cat2act, cfg.act2need)
    summary = {
        "levels": [{"level": lv.index, "classes": lv.class_count} for lv in h.levels],
        "nodes": h.n_nodes,
        "leaves": h.n_leaves,
    }
    (out / "hierarchy.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    for lv in h.levels:
        print(f"level {lv.index}\t{lv.class_count} classes")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = _prepare_output(cfg)
    if args.timing:
        logging.getLogger("hiertail").setLevel(logging.INFO)
    _, _, result = _run_training(cfg, out, timing=args.timing)
    sys.stdout.write(format_epoch_log(result.log))
    print(f"best epoch {result.best_epoch}; checkpoint {out / 'checkpoint.htl'}")
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    out = _prepare_output(cfg)
    checkpoint = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.htl"
    report = _evaluate_checkpoint(cfg, out, checkpoint, args.split, oracle=args.oracle)
    _write_report(report, out)
    print(report.format_table())
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    out = _prepare_output(cfg)
    variants = ["ce", "ahl", "no_exploitation", "no_exploration", "no_gumbel", "no_adaptive"]
    rows = []
    for variant in variants:
        sub = ExperimentConfig(**{**asdict(cfg), "output_dir": str(out / variant),
                                  "loss": "ce" if variant == "ce" else "ahl",
                                  "ablate": None if variant in ("ce", "ahl") else variant})
        sub_out = _prepare_output(sub)
        _run_training(sub, sub_out)
        report = _evaluate_checkpoint(sub, sub_out, sub_out / "checkpoint.htl", args.split)
        _write_report(report, sub_out)
        rows.append((variant, report))
    k = 5 if 5 in cfg.ks else cfg.ks[0]
    lines = [f"{'variant':<16}{'total':>9}{'head':>9}{'tail':>9}   (MRR@{k})"]
    for variant, report in rows:
        m = report.mrr[k]
        lines.append(f"{variant:<16}{m['total']:>9.4f}{m['head']:>9.4f}{m['tail']:>9.4f}")
    text = "\n".join(lines) + "\n"
    (out / "ablation.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, args) -> int:
    hierarchy = None
    if cfg.loc2cat and cfg.cat2act and cfg.act2need:
        _require(cfg, "loc2cat", "cat2act", "act2need")
        hierarchy = build_hierarchy(cfg.loc2cat, cfg.cat2act, cfg.act2need)
    results = verify_mod.run_all(hierarchy, instances=args.instances, seed=cfg.seed)
    ok = True
    for name, passed, detail in results:
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
    return EXIT_OK if ok else EXIT_DATA


def cmd_report(cfg: ExperimentConfig, args) -> int:
    for path in args.reports:
        report = EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        print(f"== {path}")
        print(report.format_table())
        print()
    if args.checkpoint:
        _, weights = load_checkpoint(args.checkpoint)
        print("adaptive weights per level (softplus(theta))")
        print(f"{'level':>5}{'nodes':>7}{'mean':>9}{'std':>9}{'min':>9}{'max':>9}")
        for row in weight_summary(weights):
            print(f"{row['level']:>5}{row['nodes']:>7}{row['mean']:>9.4f}{row['std']:>9.4f}"
                  f"{row['min']:>9.4f}{row['max']:>9.4f}")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------

_OVERRIDES = {
    # flag dest -> (type, help)
    "data": (str, "check-in file (csv or jsonl)"),
    "data_format": (str, "csv or jsonl (default: from suffix)"),
    "loc2cat": (str, "location -> category mapping file"),
    "cat2act": (str, "category -> activity mapping file"),
    "act2need": (str, "activity -> need mapping file"),
    "output_dir": (str, "output directory (created if absent)"),
    "seed": (int, "random seed (overrides config and HIERTAIL_SEED)"),
    "min_visits": (int, "minimum visits per location"),
    "min_checkins": (int, "minimum check-ins per user"),
}
_TRAIN_OVERRIDES = {
    "epochs": (int, "training epochs"),
    "batch_size": (int, "minibatch size"),
    "learning_rate": (float, "Adam learning rate"),
    "tau": (float, "Gumbel-softmax temperature"),
    "dim": (int, "embedding dimension"),
    "loss": (str, "ahl or ce"),
    "ablate": (str, "no_exploitation | no_exploration | no_gumbel | no_adaptive"),
    "threads": (int, "evaluation threads"),
}
_SYNTH_OVERRIDES = {
    "n_users": (int, "number of users"),
    "n_locations": (int, "number of locations"),
    "n_categories": (int, "number of categories"),
    "n_activities": (int, "number of activities"),
    "n_needs": (int, "number of needs"),
    "zipf_exponent": (float, "Zipf exponent s"),
    "need_bias": (float, "probability of drawing from the user's favourite need"),
    "checkins_min": (int, "minimum check-ins per user"),
    "checkins_max": (int, "maximum check-ins per user"),
    "days": (int, "time span in days"),
}


def _add_overrides(parser: argparse.ArgumentParser, table: dict) -> None:
    for dest, (typ, help_) in table.items():
        parser.add_argument("--" + dest.replace("_", "-"), dest=dest, type=typ, default=None, help=help_)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiertail", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_, *tables):
        p = sub.add_parser(name, help=help_)
        p.add_argument("-c", "--config", help="key = value configuration file")
        _add_overrides(p, _OVERRIDES)
        for table in tables:
            _add_overrides(p, table)
        p.set_defaults(func=func)
        return p

    command("synth", cmd_synth, "generate a synthetic corpus and hierarchy", _SYNTH_OVERRIDES)
    p = command("ingest", cmd_ingest, "filter, segment and split check-ins")
    p.add_argument("--lenient", action="store_true", help="skip malformed rows instead of failing")
    command("build-hierarchy", cmd_build_hierarchy, "validate mapping files")
    p = command("train", cmd_train, "train a model", _TRAIN_OVERRIDES)
    p.add_argument("--timing", action="store_true", help="log wall-clock time per epoch")
    p = command("evaluate", cmd_evaluate, "evaluate a checkpoint", _TRAIN_OVERRIDES)
    p.add_argument("--checkpoint", help="checkpoint path (default: OUTPUT_DIR/checkpoint.htl)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--oracle", action="store_true", help="debug: score the true location highest")
    p = command("ablate", cmd_ablate, "train and evaluate CE, AHL and every ablation", _TRAIN_OVERRIDES)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p = command("verify", cmd_verify, "finite-difference and oracle checks")
    p.add_argument("--instances", type=int, default=200, help="random instances per check")
    p = command("report", cmd_report, "print saved reports and weight distributions")
    p.add_argument("reports", nargs="*", help="report.json files")
    p.add_argument("--checkpoint", help="checkpoint whose adaptive weights to summarise")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    keys = set(_OVERRIDES) | set(_TRAIN_OVERRIDES) | set(_SYNTH_OVERRIDES)
    overrides = {k: getattr(args, k) for k in keys if hasattr(args, k)}
    try:
        cfg = resolve_config(args.config, overrides)
        return args.func(cfg, args)
    except (ConfigError, InfeasibleConfig) as exc:
        print(f"hiertail: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"hiertail: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DataMismatch, IngestError, HierarchyError, CheckpointError, EmptyTrainSplit,
            EmptySplit, ValueError) as exc:
        print(f"hiertail: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
