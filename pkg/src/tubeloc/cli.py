"""``tubeloc`` command line.

Exit codes: 0 success, 1 validation error (bad config, flags or inputs),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from tubeloc import pipeline, svm
from tubeloc.config import ConfigError, RunConfig, load_config, parse_assignments, read_config_file

log = logging.getLogger("tubeloc")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML or JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed (required where results are stochastic)")
    p.add_argument("--jobs", type=int, help="worker process cap")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tubeloc", description="Weakly-supervised action localization with human tubes.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic benchmark")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=["bench-v1", "lockin"], default="bench-v1")

    p = sub.add_parser("extract-tubes", help="human tubes per shot")
    _common(p)
    p.add_argument("--video-manifest", required=True)
    p.add_argument("--field", help="override field spec, e.g. grid:grids/{video_id}.tlsg")
    p.add_argument("--out", required=True)
    p.add_argument("--max-tubes", type=int)
    p.add_argument("--suppression-iou", type=float)
    p.add_argument("--split")

    p = sub.add_parser("fit-codebooks", help="PCA + GMM codebooks per channel")
    _common(p)
    p.add_argument("--video-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--K", type=int)
    p.add_argument("--pca-factor", type=int)
    p.add_argument("--split", default="train")

    p = sub.add_parser("encode-tubes", help="Fisher-vector tube descriptors")
    _common(p)
    p.add_argument("--video-manifest", required=True)
    p.add_argument("--tubes", required=True)
    p.add_argument("--codebooks", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="multi-fold MIL per class")
    _common(p)
    p.add_argument("--mode", choices=["mil", "two-stage"])
    p.add_argument("--classes", help="comma-separated class names (default: all)")
    p.add_argument("--folds", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--C", type=float)
    p.add_argument("--tubes", required=True)
    p.add_argument("--descriptors", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gt", help="tube ground truth for the CorLoc trace")
    p.add_argument("--segments-gt", help="temporal ground truth (two-stage mode)")
    p.add_argument("--video-manifest", help="needed by two-stage mode")
    p.add_argument("--codebooks", help="needed by two-stage mode")
    p.add_argument("--theta", type=float)
    p.add_argument("--split", default="train")

    p = sub.add_parser("detect", help="sliding-window detection inside tubes")
    _common(p)
    p.add_argument("--models", required=True)
    p.add_argument("--video-manifest", required=True)
    p.add_argument("--codebooks", required=True)
    p.add_argument("--field")
    p.add_argument("--tubes", help="reuse extracted tubes instead of tracking again")
    p.add_argument("--windows", help="default, daly, full or a file of lengths")
    p.add_argument("--alpha", type=float)
    p.add_argument("--stride", type=int)
    p.add_argument("--shots", help="shot file (overrides the manifest reference)")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")

    p = sub.add_parser("eval", help="localization metrics")
    _common(p)
    p.add_argument("--detections", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--metric", action="append", choices=list(pipeline.METRICS))
    p.add_argument("--theta", type=float)
    p.add_argument("--mode", choices=["trimmed", "st", "daly"])
    p.add_argument("--out", required=True)
    p.add_argument("--curves", help="directory for curve CSVs")
    p.add_argument("--tubes", help="proposals for recall")
    p.add_argument("--tube-gt", help="tube ground truth for recall (default: --gt)")
    p.add_argument("--models", help="models directory holding CorLoc traces")
    p.add_argument("--video-manifest", help="restrict ground truth to these videos")
    p.add_argument("--split")

    p = sub.add_parser("report", help="tables and curves of a finished run")
    _common(p)
    p.add_argument("run_dir")
    p.add_argument("--diff", help="second run directory to compare against")
    p.add_argument("--out")

    p = sub.add_parser("run", help="the whole pipeline")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--video-manifest", help="use an existing manifest instead of generating data")

    p = sub.add_parser("dump-model", help="print a model as text")
    p.add_argument("model")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def _flags(args) -> dict:
    """Command-line layer of the config: --set overrides plus named flags."""
    flags = parse_assignments(getattr(args, "set", []))
    if getattr(args, "seed", None) is not None:
        flags["seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        flags["jobs"] = args.jobs
    mapping = {"max_tubes": ("tracker", "max_tubes"), "suppression_iou": ("tracker", "suppression_iou"),
               "K": ("codebooks", "K"), "pca_factor": ("codebooks", "pca_factor"), "mode": None,
               "folds": ("mil", "folds"), "iters": ("mil", "iterations"), "C": ("mil", "C"),
               "windows": ("detect", "windows"), "alpha": ("detect", "alpha"), "stride": ("detect", "stride"),
               "theta": ("eval", "theta")}
    for name, dst in mapping.items():
        v = getattr(args, name, None)
        if v is None:
            continue
        if name == "mode":
            dst = ("mil", "mode") if args.command == "train" else ("eval", "mode")
        flags.setdefault(dst[0], {})[dst[1]] = v
    if getattr(args, "classes", None):
        flags.setdefault("mil", {})["classes"] = [c for c in args.classes.split(",") if c]
    if args.command == "run" and args.video_manifest:
        flags["manifest"] = args.video_manifest
    return flags


NEEDS_SEED = {"synth-gen", "extract-tubes", "fit-codebooks", "train", "detect", "run"}


def _bare_world(raw: dict) -> bool:
    from dataclasses import fields

    return not set(raw) <= {f.name for f in fields(RunConfig)}


def _config(args) -> RunConfig:
    path = args.config or os.environ.get("TUBELOC_CONFIG")
    flags = _flags(args)
    if args.command == "synth-gen" and path is not None:
        raw = read_config_file(path)
        if _bare_world(raw):
            # a world file: its keys form the [world] table
            flags = {**flags, "world": {**raw, **flags.get("world", {})}}
            if "seed" not in flags and "seed" in raw:
                flags["seed"] = raw["seed"]
            path = None
    cfg = load_config(path, flags, validate=False)
    if args.command in NEEDS_SEED or cfg.seed is not None:
        cfg.validate()
    return cfg


def _cmd_synth_gen(args, cfg: RunConfig) -> None:
    from tubeloc import synth

    world = {}
    if args.preset == "lockin":
        world = synth._config_json(synth.lockin_benchmark())
    world.update(cfg.world or {})
    world["seed"] = cfg.seed
    try:
        synth.WorldConfig.from_dict(world).validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    print(pipeline.synth_gen(world, args.out))


def _cmd_extract(args, cfg):
    tubes = pipeline.extract_stage(args.video_manifest, args.out, pipeline.tracker_config(cfg), cfg.jobs,
                                   args.split, args.field)
    print(f"{len(tubes)} tubes -> {args.out}")


def _cmd_fit(args, cfg):
    c = cfg.codebooks
    books = pipeline.fit_codebooks_stage(args.video_manifest, args.out, int(c.K), int(cfg.seed), int(c.pca_factor),
                                         int(c.max_iter), int(c.max_samples), args.split)
    print(f"codebooks ({books.dim}-d descriptors) -> {args.out}")


def _cmd_encode(args, cfg):
    X = pipeline.encode_stage(args.video_manifest, args.tubes, args.codebooks, args.out)
    print(f"{X.shape[0]} x {X.shape[1]} descriptors -> {args.out}")


def _cmd_train(args, cfg):
    from tubeloc.evaluation import read_gt

    gt = read_gt(args.gt) if args.gt else []
    seg = read_gt(args.segments_gt) if args.segments_gt else []
    if cfg.mil.mode == "two-stage" and not (seg and args.video_manifest and args.codebooks):
        raise ConfigError("two-stage mode needs --segments-gt, --video-manifest and --codebooks")
    summary = pipeline.train_stage(args.tubes, args.descriptors, args.labels, args.out, pipeline.mil_config(cfg),
                                   cfg.mil.mode, cfg.mil.classes or None, gt, cfg.eval.theta, cfg.eval.recall_mode,
                                   seg, args.video_manifest, args.codebooks, args.split)
    for c, s in summary.items():
        tr = s["corloc_trace"]
        print(f"{c}: CorLoc {tr[0]:.4f} -> {tr[-1]:.4f}" if tr else f"{c}: trained")


def _cmd_detect(args, cfg):
    manifest = args.video_manifest
    if args.shots:
        manifest = _with_shots(manifest, args.shots, Path(args.out).parent)
    dets = pipeline.detect_stage(args.models, manifest, args.codebooks, args.out, pipeline.detect_config(cfg),
                                 args.tubes, pipeline.tracker_config(cfg) if cfg.seed is not None else None,
                                 cfg.jobs, args.split, args.field)
    print(f"{len(dets)} detections -> {args.out}")


def _with_shots(manifest, shots, where: Path) -> Path:
    """Copy of the manifest whose entries point at another shot file."""
    where.mkdir(parents=True, exist_ok=True)
    src = Path(manifest)
    dst = where / f".{src.stem}.shots.jsonl"
    shots = str(Path(shots).resolve())
    with open(src) as f, open(dst, "w") as g:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                rec["shots"] = shots
                for k in ("trajectories", "gt", "tube_gt"):
                    if rec.get(k) is not None and not Path(rec[k]).is_absolute():
                        rec[k] = str((src.parent / rec[k]).resolve())
                kind, _, rest = rec["field"].partition(":")
                if rest and not Path(rest).is_absolute():
                    rec["field"] = f"{kind}:{(src.parent / rest).resolve()}"
                g.write(json.dumps(rec, sort_keys=True) + "\n")
    return dst


def _cmd_eval(args, cfg):
    from tubeloc.evaluation import read_gt

    gts = read_gt(args.gt)
    tube_gts = read_gt(args.tube_gt) if args.tube_gt else gts
    if args.video_manifest:
        keep = {e.video_id for e in pipeline.select_split(pipeline.load_manifest(args.video_manifest), args.split)}
        gts = [g for g in gts if g.video_id in keep]
    metrics = args.metric or ["map"]
    if "recall" in metrics and not args.tubes:
        raise ConfigError("--metric recall needs --tubes")
    e = cfg.eval
    recs = pipeline.eval_stage(args.detections, gts, metrics, args.out, args.curves, e.theta, e.mode, e.fpr_max,
                               e.eleven_point, args.tubes, tube_gts, e.recall_mode, e.thetas, args.models)
    for r in recs:
        if not isinstance(r["value"], list):
            print(f"{r['metric']}{'/' + r['class'] if 'class' in r else ''}: {r['value']:.4f}")


def _cmd_report(args, cfg):
    print(pipeline.report(args.run_dir, args.out, args.diff), end="")


def _cmd_run(args, cfg):
    out = pipeline.run_pipeline(cfg, args.out)
    print(pipeline.report(out), end="")


COMMANDS = {"synth-gen": _cmd_synth_gen, "extract-tubes": _cmd_extract, "fit-codebooks": _cmd_fit,
            "encode-tubes": _cmd_encode, "train": _cmd_train, "detect": _cmd_detect, "eval": _cmd_eval,
            "report": _cmd_report, "run": _cmd_run}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "dump-model":
            print(svm.dump_model(svm.load_model(args.model)), end="")
            return EXIT_OK
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except pipeline.StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
