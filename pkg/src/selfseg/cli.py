"""Command-line entry point: ``selfseg gen|run|eval``.

Exit codes: 0 ok, 1 stage failure, 2 config or parse error, 3 output
collision, 4 data mismatch.
"""
import argparse
import json
import sys
from pathlib import Path

from . import metrics
from .config import ConfigError, load_gen_config, load_pipeline_config
from .parallel import default_threads
from .phantom import generate_dataset

EXIT_OK, EXIT_STAGE, EXIT_CONFIG, EXIT_COLLISION, EXIT_MISMATCH = 0, 1, 2, 3, 4


def _err(msg):
    print(f"selfseg: {msg}", file=sys.stderr)


def _non_empty(path):
    p = Path(path)
    return p.exists() and (not p.is_dir() or any(p.iterdir()))


def _threads(args):
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return args.threads
    return default_threads()


def cmd_gen(args):
    cfg = load_gen_config(args.config)
    threads = _threads(args)
    if _non_empty(args.out) and not args.overwrite:
        _err(f"{args.out} exists and is not empty (use --overwrite)")
        return EXIT_COLLISION
    for role, rc in cfg.roles.items():
        man = generate_dataset(rc.spec, role, rc.n, cfg.seed, args.out, overwrite=args.overwrite,
                               threads=threads)
        print(man.root / "manifest.json")
    return EXIT_OK


def cmd_run(args):
    from .pipeline import StageError, run_pipeline

    cfg = load_pipeline_config(args.config)
    threads = _threads(args)
    if _non_empty(args.out):
        _err(f"{args.out} exists and is not empty")
        return EXIT_COLLISION
    try:
        report = run_pipeline(cfg, args.out, threads)
    except StageError as e:
        _err(f"stage {e.stage} failed: {e}")
        return EXIT_STAGE
    sys.stdout.write(metrics.render_markdown(report["table"]))
    return EXIT_OK


def cmd_eval(args):
    from .volume import LabelMap, load_rvol

    maps = []
    for p in (args.pred, args.truth):
        if not Path(p).exists():
            _err(f"{p}: no such file")
            return EXIT_CONFIG
        try:
            maps.append(load_rvol(p))
        except (OSError, ValueError, KeyError) as e:
            _err(f"{p}: {e}")
            return EXIT_CONFIG
    pred, truth = maps
    if not all(isinstance(m, LabelMap) for m in maps):
        _err("both inputs must be label maps (sidecar with classes)")
        return EXIT_MISMATCH
    if pred.dims != truth.dims:
        _err(f"dims differ: {pred.dims} vs {truth.dims}")
        return EXIT_MISMATCH
    ids = truth.classes.foreground if args.class_id is None else (args.class_id,)
    try:
        out = {str(c): metrics.dice(pred, truth, c) for c in ids}
    except ValueError as e:
        _err(str(e))
        return EXIT_CONFIG
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="selfseg", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=None,
                    help="worker threads (default: $SELFSEG_THREADS or 1)")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate the four phantom datasets")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--overwrite", action="store_true")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="run the teacher/student pipeline and print the ablation table")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="per-class Dice between two label volumes")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--class", dest="class_id", type=int, default=None)
    e.set_defaults(func=cmd_eval)

    # --threads is accepted after the subcommand as well
    for p in (g, r, e):
        p.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as e:
        _err(str(e))
        return EXIT_CONFIG
    except FileExistsError as e:
        _err(str(e))
        return EXIT_COLLISION


if __name__ == "__main__":
    sys.exit(main())
