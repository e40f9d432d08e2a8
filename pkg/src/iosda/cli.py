"""Command-line entry point.

    iosda gen-synth --out data/
    iosda run [--config FILE] [--set key=value ...] [--seed N] [--out DIR]
    iosda eval RUN_DIR
    iosda grad-check [--seed N]
    iosda export-embeddings RUN_DIR TIMESTAMP [--out FILE]

Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import gradcheck, meosda, timeline
from .config import KEYS, SEED_ENV, RunConfig, parse_overrides
from .datahub import save_features
from .errors import ConfigError, DataError, IosdaError, NumericError
from .evalkit import format_table, read_metrics_csv, summarize, write_forgetting_csv

log = logging.getLogger("iosda")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _setup_logging(verbosity: str) -> None:
    logging.basicConfig(level=LEVELS[verbosity], format="%(levelname)s %(name)s: %(message)s", force=True)


def _env_seed() -> int | None:
    v = os.environ.get(SEED_ENV)
    if v is None or v == "":
        return None
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"${SEED_ENV} is not an integer: {v!r}") from None


def _load_config(args) -> RunConfig:
    overrides = parse_overrides(args.set)
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    return RunConfig.load(args.config, overrides, seed=getattr(args, "seed", None))


# ----------------------------------------------------------------- commands


def cmd_gen_synth(args) -> int:
    cfg = RunConfig.load(args.config, parse_overrides(args.set))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ds in cfg.domains():
        path = out / f"domain{ds.domain_id}.{args.format}"
        # ground truth always travels with the samples; visibility is decided on load
        save_features(ds.evaluation_view(), path, args.format)
        print(path)
    return EXIT_OK


def run_one(cfg: RunConfig) -> Path:
    """Run the whole stream for one config; returns the run directory."""
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.txt")
    t0 = time.perf_counter()
    state, records = timeline.run(cfg.timeline_config(), cfg.domains(), out)
    log.info("run finished in %.1f s, %d records in %s", time.perf_counter() - t0, len(records), out)
    report = summarize(records)
    write_forgetting_csv(report, out / "forgetting.csv")
    return out


def _run_worker(raw: dict) -> str:
    cfg = RunConfig(raw)
    _setup_logging(cfg["verbosity"])
    return str(run_one(cfg))


def cmd_run(args) -> int:
    cfg = _load_config(args)
    _setup_logging(cfg["verbosity"])
    if args.seeds is None:
        out = run_one(cfg)
        print(format_table(summarize(read_metrics_csv(out / "metrics.csv"))))
        return EXIT_OK
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    base = Path(cfg["out_dir"])
    raws = [cfg.with_values({"seed": s, "out_dir": base / f"seed{s}"}).raw for s in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outs = list(pool.map(_run_worker, raws))
    else:
        outs = [_run_worker(r) for r in raws]
    for s, out in zip(seeds, outs):
        print(f"seed {s}: {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    metrics = run_dir / "metrics.csv"
    if not metrics.is_file():
        raise DataError(f"no metrics.csv in {run_dir}")
    report = summarize(read_metrics_csv(metrics))
    print(format_table(report))
    write_forgetting_csv(report, run_dir / "forgetting.csv")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    results = gradcheck.run_all(seed)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<40} params={r.n_params:<4} rel_err={r.rel_err:.2e}")
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed (tolerance {gradcheck.TOLERANCE:g})")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def cmd_export_embeddings(args) -> int:
    run_dir = Path(args.run_dir)
    cfg_path = run_dir / "config.txt"
    if not cfg_path.is_file():
        raise DataError(f"no config.txt in {run_dir}")
    cfg = RunConfig.load(cfg_path)
    ck = run_dir / "checkpoints" / f"t{args.timestamp}"
    if args.timestamp < 2 or not (ck / "meosda.manifest").is_file():
        raise DataError(f"no adapter checkpoint for timestamp {args.timestamp} in {run_dir}")
    adapter = meosda.load_state(ck)
    domains = [d for d in cfg.domains() if d.domain_id <= args.timestamp]
    holdouts = timeline.holdouts_for(cfg.timeline_config(), domains)
    out = Path(args.out) if args.out else run_dir / f"embeddings_t{args.timestamp}.csv"
    timeline.write_embeddings(out, adapter, holdouts)
    print(out)
    return EXIT_OK


# ------------------------------------------------------------------- parser


def _config_epilog() -> str:
    lines = ["config keys (key=value, defaults shown):"]
    for k, key in KEYS.items():
        lines.append(f"  {k}={key.default}  {key.doc}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="iosda", description="Incremental open-set domain adaptation on feature streams.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")

    g = sub.add_parser("gen-synth", help="write synthetic domains as feature files",
                       formatter_class=argparse.RawDescriptionHelpFormatter, epilog=_config_epilog())
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--format", choices=("csv", "bin"), default="csv", help="file format (default csv)")
    config_args(g)
    g.set_defaults(func=cmd_gen_synth)

    r = sub.add_parser("run", help="run the stream and write a run directory",
                       formatter_class=argparse.RawDescriptionHelpFormatter, epilog=_config_epilog())
    config_args(r)
    r.add_argument("--seed", type=int, help=f"run seed (default: the config value, else ${SEED_ENV}, else 0)")
    r.add_argument("--out", help="run directory (overrides out_dir)")
    r.add_argument("--seeds", help="comma-separated seeds; each run goes to OUT/seed<N>")
    r.add_argument("--jobs", type=int, default=1, help="parallel processes for --seeds (default 1)")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="print the A/F table of a run and write forgetting.csv")
    e.add_argument("run_dir")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("grad-check", help="finite-difference check of every training gradient")
    c.add_argument("--seed", type=int, help=f"seed of the tiny networks (falls back to ${SEED_ENV}, then 0)")
    c.set_defaults(func=cmd_grad_check)

    x = sub.add_parser("export-embeddings", help="write extractor outputs of the holdouts at a timestamp")
    x.add_argument("run_dir")
    x.add_argument("timestamp", type=int)
    x.add_argument("--out", help="CSV path (default RUN_DIR/embeddings_t<T>.csv)")
    x.set_defaults(func=cmd_export_embeddings)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("iosda: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"iosda: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"iosda: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IosdaError, OSError) as exc:
        print(f"iosda: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
