"""``xrc`` command line: prepare -> plan -> train -> evaluate -> report, plus standalone metrics.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from types import SimpleNamespace

from xrc.common import CLASSES, ConfigError, DataError, XrcError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
CONFIG_NAME = "config.txt"

log = logging.getLogger("xrc")


def load_config(args):
    from xrc.trainer import TrainingConfig

    cfg = TrainingConfig()
    path = args.config
    if path is None and (Path(args.out_dir) / CONFIG_NAME).is_file():
        path = Path(args.out_dir) / CONFIG_NAME
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = TrainingConfig.from_file(path, cfg)
    return cfg.with_overrides(args.set or [])


def _folds(args, cfg) -> list[int]:
    folds = args.folds or list(range(1, cfg.n_folds + 1))
    bad = [f for f in folds if not 1 <= f <= cfg.n_folds]
    if bad:
        raise ConfigError(f"fold(s) {bad} outside 1..{cfg.n_folds}")
    return folds


def _specs(args, cfg):
    if args.networks:
        cfg = cfg.with_overrides({"networks": args.networks})
    return cfg.specs()


# --- commands --------------------------------------------------------------


def cmd_prepare(args) -> int:
    from xrc.data_ingest import build_manifest, ingest_cohen, ingest_rsna, split_table, write_manifest
    from xrc.synthetic import dataset_paths, synthetic_counts, write_synthetic_sources
    from xrc.trainer import fold_split_seed

    cfg = load_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.synthetic is not None:
        if args.synthetic < 3:
            raise ConfigError("--synthetic needs at least 3 images")
        counts = synthetic_counts(args.synthetic)
        from xrc.common import ClassLabel

        n_cohen = min(cfg.shared_pneumonia + 1, counts[ClassLabel.PNEUMONIA])
        paths = write_synthetic_sources(out / "synthetic-data", counts, n_cohen, size=args.synthetic_size, seed=cfg.seed)
    else:
        root = args.data_dir or os.environ.get("XRC_DATA_DIR")
        paths = dataset_paths(root) if root else {}
        for key in ("cohen_metadata", "cohen_images", "rsna_labels", "rsna_dicom"):
            if getattr(args, key) is not None:
                paths[key] = Path(getattr(args, key))
        missing = [k for k in ("cohen_metadata", "cohen_images", "rsna_labels", "rsna_dicom") if k not in paths or not paths[k].exists()]
        if missing:
            raise DataError(f"dataset inputs missing: {', '.join(missing)} (set --data-dir, XRC_DATA_DIR or the per-source flags)")

    records = ingest_cohen(paths["cohen_metadata"], paths["cohen_images"], exclude_lateral=args.exclude_lateral)
    png_dir = None if args.keep_dicom else out / "rsna-png"
    records += ingest_rsna(paths["rsna_labels"], paths["rsna_dicom"], png_dir=png_dir, workers=args.workers)
    manifest = build_manifest(records, cfg.split_spec, fold_split_seed(cfg.seed, 1))
    write_manifest(manifest, out / "manifest.csv")
    cfg.write(out / CONFIG_NAME)

    print(f"{'Dataset':<22}{'COVID-19':>10}{'Pneumonia':>11}{'Normal':>9}")
    order = (CLASSES[2], CLASSES[1], CLASSES[0])
    for name, counts in split_table(manifest):
        print(f"{name:<22}" + "".join(f"{counts[c]:>{w}}" for c, w in zip(order, (10, 11, 9))))
    print(f"manifest: {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_plan(args) -> int:
    from xrc.data_ingest import read_manifest
    from xrc.trainer import prepare_fold

    cfg = load_config(args)
    out = Path(args.out_dir)
    mpath = out / "manifest.csv"
    if not mpath.is_file():
        raise DataError(f"{mpath} not found; run `xrc prepare` first")
    manifest = read_manifest(mpath)
    summaries = {}
    for fold in _folds(args, cfg):
        fm, plan = prepare_fold(manifest, cfg, fold, out)
        summaries[str(fold)] = plan.summary()
        print(f"fold {fold}: {len(plan.phases)} phases x {len(plan.phases[0])} images, union {len(plan.union())}, "
              f"validation {len(fm.validation)}")
    (out / "plan_summary.json").write_text(json.dumps(summaries, indent=2, sort_keys=True) + "\n")
    cfg.write(out / CONFIG_NAME)
    return EXIT_OK


def cmd_train(args) -> int:
    from xrc.phase_sampler import phase_schedule

    cfg = load_config(args)
    specs = _specs(args, cfg)
    folds = _folds(args, cfg)
    if args.dry_run:
        sched = phase_schedule(cfg.n_phases, cfg.epochs_per_phase)
        for fold in folds:
            for spec in specs:
                print(f"fold {fold} {spec.name} (batch {cfg.batch_size_for(spec)}):")
                for phase, epochs in sched:
                    print(f"  phase {phase}: epochs {epochs[0]}-{epochs[-1]}")
        print(f"total epochs per fold and network: {sched[-1][1][-1]}")
        return EXIT_OK

    from xrc.trainer import ExperimentError, ImageCache, load_fold, train_fold

    out = Path(args.out_dir)
    for fold in folds:
        fm, plan = load_fold(out, fold)
        cache = {}
        for spec in specs:
            c = cache.setdefault(spec.input_resolution, ImageCache(fm, spec.input_resolution))
            try:
                _, tlog = train_fold(fm, plan, spec, cfg, out_dir=out / f"fold{fold}" / spec.name, cache=c)
            except XrcError as exc:
                raise ExperimentError(fold, spec.name, exc) from exc
            last = tlog.records[-1]
            print(f"fold {fold} {spec.name}: {len(tlog)} epochs, final loss {last.loss:.4f}, train acc {last.train_acc:.3f}")
    return EXIT_OK


def _write_index(out: Path, cfg) -> None:
    runs = sorted({(int(p.parent.parent.name.removeprefix("fold")), p.parent.name)
                   for p in out.glob("fold*/*/predictions.csv")})
    summaries = {}
    if (out / "plan_summary.json").is_file():
        summaries = json.loads((out / "plan_summary.json").read_text())
    index = {"config_digest": cfg.digest(), "runs": [{"fold": f, "network": n} for f, n in runs],
             "plan_summaries": summaries}
    (out / "bundle.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def cmd_evaluate(args) -> int:
    from xrc.evaluator import MetricsReport, confusion_from_predictions, format_report, write_prediction_log
    from xrc.model_zoo import load_checkpoint
    from xrc.trainer import ExperimentError, ImageCache, evaluate_fold, load_fold

    cfg = load_config(args)
    out = Path(args.out_dir)
    for fold in _folds(args, cfg):
        fm, _ = load_fold(out, fold)
        cache = {}
        for spec in _specs(args, cfg):
            d = out / f"fold{fold}" / spec.name
            if not (d / "final.json").is_file():
                raise DataError(f"no trained checkpoint at {d}; run `xrc train` first")
            try:
                ckpt = load_checkpoint(d / "final")
                c = cache.setdefault(spec.input_resolution, ImageCache(fm, spec.input_resolution))
                preds = evaluate_fold(ckpt, fm, cfg, c)
            except XrcError as exc:
                raise ExperimentError(fold, spec.name, exc) from exc
            write_prediction_log(preds, d / "predictions.csv")
            report = MetricsReport.from_confusion(confusion_from_predictions(preds), fold, spec.name)
            (d / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
            print(format_report(report))
    _write_index(out, cfg)
    return EXIT_OK


def cmd_report(args) -> int:
    from xrc.evaluator import MetricsReport, confusion_from_predictions, emit_reports, read_prediction_log

    out = Path(args.out_dir)
    logs = sorted(out.glob("fold*/*/predictions.csv"))
    if not logs:
        raise DataError(f"no prediction logs under {out}; run `xrc evaluate` first")
    reports = []
    for p in logs:
        fold = int(p.parent.parent.name.removeprefix("fold"))
        reports.append(MetricsReport.from_confusion(confusion_from_predictions(read_prediction_log(p)), fold, p.parent.name))

    summaries = {}
    if (out / "plan_summary.json").is_file():
        summaries = {int(k): v for k, v in json.loads((out / "plan_summary.json").read_text()).items()}
    bundle = SimpleNamespace(reports=reports, plan_summaries=summaries)
    report_dir = Path(args.report_dir) if args.report_dir else out / "report"
    paths = emit_reports(bundle, report_dir)
    for name in ("counts", "metrics", "report"):
        print(f"{name}: {paths[name]}")
    print(f"plots: {sum(1 for k in paths if k.startswith('cm_'))}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    from xrc.evaluator import MetricsReport, confusion_from_predictions, format_report, read_prediction_log

    path = Path(args.predictions)
    if not path.is_file():
        raise DataError(f"prediction log not found: {path}")
    preds = read_prediction_log(path)
    if not preds:
        raise DataError(f"{path} has no predictions")
    report = MetricsReport.from_confusion(confusion_from_predictions(preds), args.fold, args.network)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        print(format_report(report))
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def _fold_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated fold numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", default="runs/xrc", help="run directory (created if absent)")
    common.add_argument("--config", type=Path, help="flat key = value config file (default: <out-dir>/config.txt if present)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")

    folds = argparse.ArgumentParser(add_help=False)
    folds.add_argument("--folds", type=_fold_list, help="comma-separated fold numbers (default: all)")

    nets = argparse.ArgumentParser(add_help=False)
    nets.add_argument("--networks", help="comma-separated subset of a,b,concatenated (default: config)")

    parser = argparse.ArgumentParser(prog="xrc", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="ingest both sources and write the split manifest")
    p.add_argument("--data-dir", type=Path, help="dataset root with the conventional layout (default: $XRC_DATA_DIR)")
    p.add_argument("--cohen-metadata", type=Path, help="Cohen metadata.csv")
    p.add_argument("--cohen-images", type=Path, help="Cohen image folder")
    p.add_argument("--rsna-labels", type=Path, help="RSNA stage_2_detailed_class_info.csv")
    p.add_argument("--rsna-dicom", type=Path, help="RSNA DICOM folder")
    p.add_argument("--synthetic", type=int, metavar="N", help="generate an N-image synthetic corpus instead of reading real data")
    p.add_argument("--synthetic-size", type=int, default=64, help="synthetic image side in pixels (default 64)")
    p.add_argument("--exclude-lateral", action="store_true", help="drop Cohen images with a lateral view")
    p.add_argument("--keep-dicom", action="store_true", help="do not convert RSNA DICOMs to PNG")
    p.add_argument("--workers", type=int, default=1, help="parallel DICOM decoders")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("plan", parents=[common, folds], help="build per-fold splits and phase plans")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", parents=[common, folds, nets], help="train every selected network per fold")
    p.add_argument("--dry-run", action="store_true", help="print the phase/epoch schedule and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common, folds, nets], help="predict validation images, write prediction logs")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="write counts/metrics tables, report.json and plots")
    p.add_argument("--report-dir", type=Path, help="default: <out-dir>/report")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("metrics", help="metrics from a standalone prediction log")
    p.add_argument("predictions", type=Path, help="CSV with image_id,true_label,predicted_label[,p_*]")
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--network", default="external")
    p.add_argument("--json", action="store_true", help="print the structured report instead of a table")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_metrics)
    return parser


def _exit_code(exc: BaseException) -> int:
    cause = getattr(exc, "cause", None)
    if cause is not None:
        return _exit_code(cause)
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    return EXIT_RUNTIME


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except XrcError as exc:
        print(f"xrc {args.command}: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except Exception as exc:  # last resort: report, never a traceback dump on users
        log.debug("unhandled", exc_info=True)
        print(f"xrc {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
