"""Command line entry point: ``mbflow {run,sweep,timing,validate} <config>``."""

import argparse
import json
import sys
import traceback
from pathlib import Path

from .config import emit_config, parse_config
from .exceptions import BatchSystemError, ConfigError, DomainError, SolverError
from .harness import RunError, env_threads, run, timing_report, write_timing

EXIT_CONFIG = 2
EXIT_RUN = 3


def _parser():
    p = argparse.ArgumentParser(prog="mbflow", description="Mini-batch gradient flow experiments")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb, help_ in (
        ("run", "run the configured scheme and write all artifacts"),
        ("sweep", "like run, but require an epsilon list long enough for a rate fit"),
        ("timing", "time the reference flow against the mini-batch flow"),
    ):
        s = sub.add_parser(verb, help=help_)
        s.add_argument("config")
        s.add_argument("--out", help="output directory (default: the config's output_dir)")
        s.add_argument("--seed", type=int, help="override the base seed")
        s.add_argument("--threads", type=int, help="worker threads for realizations")
    v = sub.add_parser("validate", help="parse a config and print it with defaults resolved")
    v.add_argument("config")
    return p


def _error_record(out, record):
    text = json.dumps(record, indent=2, sort_keys=True, default=str)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "error.json").write_text(text + "\n")
    print(text, file=sys.stderr)


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        _error_record(None, {"type": "ConfigError", "message": str(exc), "path": exc.path})
        return EXIT_CONFIG
    if args.verb == "validate":
        print(emit_config(cfg))
        return 0
    out = args.out or cfg.output_dir
    threads = args.threads or env_threads()
    try:
        if args.verb == "timing":
            blk = cfg.timing
            if blk is None:
                raise ConfigError("timing needs a 'timing' block", args.config)
            seed = cfg.seed if args.seed is None else args.seed
            rows = timing_report(blk.sizes, blk.repeats, blk.epsilon, blk.T, blk.h, seed)
            write_timing(rows, out)
            print("size  flow_s      minibatch_s  ratio")
            for r in rows:
                print(f"{r['size']:<5d} {r['flow_seconds']:<11.4g} {r['minibatch_seconds']:<12.4g} {r['ratio']:.3f}")
            return 0
        if args.verb == "sweep" and len(cfg.epsilons) < 3:
            raise ConfigError("sweep needs at least three epsilons", args.config)
        manifest = run(cfg, out, args.seed, threads)
    except ConfigError as exc:
        _error_record(out, {"type": "ConfigError", "message": str(exc), "path": exc.path})
        return EXIT_CONFIG
    except RunError as exc:
        _error_record(out, {"message": str(exc), **exc.record})
        return EXIT_RUN
    except (SolverError, DomainError, BatchSystemError, ValueError) as exc:
        _error_record(out, {
            "type": type(exc).__name__, "message": str(exc), "family": cfg.family,
            "time": getattr(exc, "time", None), "traceback": traceback.format_exc(limit=3),
        })
        return EXIT_RUN
    report = Path(out) / "report.json"
    if report.exists():
        for name, rep in json.loads(report.read_text()).items():
            slope = rep.get("slope")
            shown = "n/a" if slope is None else f"{slope:.4f}"
            print(f"{name}: slope {shown} ({rep['quantity']}, R={rep['R']})")
    print(f"wrote {len(manifest['files'])} files to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
