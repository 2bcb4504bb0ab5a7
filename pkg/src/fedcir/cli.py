"""Command line entry point: ``run``, ``diag`` and ``selfcheck``.

Exit codes: 0 success, 1 failed check or failed run, 2 bad configuration,
3 file error. ``FEDCIR_WORKERS`` bounds the number of parallel runs.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import checks, plotting
from .config import ExperimentSpec, format_config, parse_config
from .datagen import ConfigError
from .diagnostics import local_risk, pad_table
from .fedproto import VARIANTS, read_metrics_csv, run_federated, write_metrics_csv
from .models import load_model, save_model

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
WORKERS_ENV = "FEDCIR_WORKERS"


class RunFailure(RuntimeError):
    pass


def provenance(spec: ExperimentSpec, seed, **extra) -> str:
    items = " ".join(f"{k}={v}" for k, v in extra.items())
    return f"fedcir {__version__} config={spec.digest()} seed={seed}" + (f" {items}" if items else "")


def _write_csv(path: Path, comment: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return n


def metrics_path(out: Path, variant: str, seed: int) -> Path:
    return out / f"metrics_{variant}_s{seed}.csv"


def checkpoint_path(out: Path, variant: str, seed: int) -> Path:
    return out / f"model_{variant}_s{seed}.ckpt"


def run_one(spec: ExperimentSpec, variant: str, seed: int, out: Path) -> list[float]:
    """Train one (variant, seed); write its metrics and checkpoint; return the accuracy curve."""
    cfg = spec.fed_config(variant, seed)
    fed = spec.federation(seed)
    last = [0]

    def track(m):
        last[0] = m.round

    try:
        server, rows = run_federated(fed, cfg, on_round=track)
    except Exception as e:  # surface the failing round
        raise RunFailure(f"{variant} seed {seed} failed in round {last[0] + 1}: {e}") from e
    warm = sum(r.warmup for r in rows)
    note = provenance(spec, seed, variant=variant, warmup_rounds=warm)
    write_metrics_csv(metrics_path(out, variant, seed), rows, note)
    meta = {"variant": variant, "seed": seed, "config": spec.digest(), "round": server.round}
    save_model(checkpoint_path(out, variant, seed), server.model, meta, note)
    return [r.test_acc for r in rows]


def _job(args):
    return run_one(*args)


def cmd_run(spec: ExperimentSpec, out: Path, workers: int = 1) -> int:
    out.mkdir(parents=True, exist_ok=True)
    seeds = spec.run.seeds
    master = seeds[0]
    (out / "config.cfg").write_text(f"# {provenance(spec, master)}\n" + format_config(spec))
    jobs = [(spec, v, s, out) for v in spec.run.variants for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            curves = list(pool.map(_job, jobs))
    else:
        curves = [_job(j) for j in jobs]

    by_variant: dict[str, list] = {}
    for (_, v, s, _), c in zip(jobs, curves):
        by_variant.setdefault(v, []).append(c)
    rows = []
    for v in spec.run.variants:
        final = [read_metrics_csv(metrics_path(out, v, s))[-1] for s in seeds]
        acc = np.array([float(r["test_acc"]) for r in final])
        risk = np.array([float(r["mean_local_risk"]) for r in final])
        rows.append([v, len(seeds), f"{acc.mean():.17g}", f"{acc.std():.17g}",
                     f"{risk.mean():.17g}", f"{risk.std():.17g}"])
        print(f"{v:>9}: test_acc {100 * acc.mean():.2f} ± {100 * acc.std():.2f}  "
              f"local_risk {risk.mean():.4f} ± {risk.std():.4f}")
    _write_csv(out / "summary.csv", provenance(spec, master),
               ["variant", "n_seeds", "acc_mean", "acc_std", "risk_mean", "risk_std"], rows)
    plotting.convergence(out / "convergence.png", {v: np.array(c) for v, c in by_variant.items()})
    return EXIT_OK


def _pad_rows(rows):
    return [[r.pair_i, r.pair_j, f"{r.err:.17g}", f"{r.pad:.17g}"] for r in rows]


def cmd_diag(spec: ExperimentSpec, ckpt_a: Path, ckpt_b: Path, out: Path, seed: int | None = None,
             raw: bool = False) -> int:
    model_a, meta_a = load_model(ckpt_a)
    model_b, meta_b = load_model(ckpt_b)
    for p, meta in ((ckpt_a, meta_a), (ckpt_b, meta_b)):
        if meta.get("config") not in (None, spec.digest()):
            print(f"warning: {p} was trained under config {meta['config']}, not {spec.digest()}", file=sys.stderr)
    if seed is None:
        seed = int(meta_a.get("seed", spec.run.seeds[0]))
    fed = spec.federation(seed)
    out.mkdir(parents=True, exist_ok=True)
    note = provenance(spec, seed, a=Path(ckpt_a).name, b=Path(ckpt_b).name)

    def risks(model):
        return [local_risk(model, s, np.random.default_rng([seed, 0xD1A6, s.client])) for s in fed.shards]

    ra, rb = risks(model_a), risks(model_b)
    _write_csv(out / "risks.csv", note, ["client", "risk_a", "risk_b"],
               [[s.client, f"{a:.17g}", f"{b:.17g}"] for s, a, b in zip(fed.shards, ra, rb)])
    pad_a = pad_table(model_a, fed.shards, fed.test_x, seed)
    pad_b = pad_table(model_b, fed.shards, fed.test_x, seed)
    header = ["pair_i", "pair_j", "err", "pad"]
    _write_csv(out / "pad_a.csv", note, header, _pad_rows(pad_a))
    _write_csv(out / "pad_b.csv", note, header, _pad_rows(pad_b))
    if raw:
        _write_csv(out / "pad_raw.csv", note, header, _pad_rows(pad_table(None, fed.shards, fed.test_x, seed)))

    names = (meta_a.get("variant", "a"), meta_b.get("variant", "b"))
    clients = [str(s.client) for s in fed.shards]
    plotting.risk_bars(out / "risks.png", clients, {names[0]: ra, names[1]: rb})
    plotting.pad_scatter(out / "pad.png", [r.pad for r in pad_a], [r.pad for r in pad_b],
                         [r.pair_i == "GLOBAL" for r in pad_a], names)
    ga = np.mean([r.pad for r in pad_a if r.pair_i == "GLOBAL"])
    gb = np.mean([r.pad for r in pad_b if r.pair_i == "GLOBAL"])
    print(f"mean local risk  a={np.mean(ra):.4f}  b={np.mean(rb):.4f}")
    print(f"mean global PAD  a={ga:.4f}  b={gb:.4f}")
    return EXIT_OK


def cmd_selfcheck(results=None) -> int:
    results = checks.run_all() if results is None else results
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<{width}}  {r.detail}  ({r.seconds:.1f}s)")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_CHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, action="append", help="seed override (repeatable)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--variant", action="append", choices=VARIANTS, help="variant override (repeatable)")

    p = argparse.ArgumentParser(prog="fedcir", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fedcir {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="train every (variant, seed) in the config")
    r.add_argument("config", type=Path)
    d = sub.add_parser("diag", parents=[common], help="compare two checkpoints: local risks and PAD")
    d.add_argument("config", type=Path)
    d.add_argument("--a", required=True, type=Path)
    d.add_argument("--b", required=True, type=Path)
    d.add_argument("--raw", action="store_true", help="also report PAD on raw inputs")
    sub.add_parser("selfcheck", help="gradient, KL, bound and reduction checks")
    return p


def _load(args) -> ExperimentSpec:
    spec = parse_config(args.config)
    run = spec.run
    if args.seed:
        run = replace(run, seeds=tuple(args.seed))
    if args.variant:
        run = replace(run, variants=tuple(args.variant))
    if args.out is not None:
        run = replace(run, out=str(args.out))
    return replace(spec, run=run)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "selfcheck":
            return cmd_selfcheck()
        spec = _load(args)
        out = Path(spec.run.out)
        if args.command == "run":
            return cmd_run(spec, out, worker_count())
        seed = args.seed[0] if args.seed else None
        return cmd_diag(spec, args.a, args.b, out, seed, args.raw)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"file error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:  # malformed checkpoint
        print(f"file error: {e}", file=sys.stderr)
        return EXIT_IO
    except RunFailure as e:
        print(f"run failed: {e}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
