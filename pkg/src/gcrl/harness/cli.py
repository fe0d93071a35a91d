"""Command line entry point: ``train``, ``sweep``, ``report`` and ``verify``."""

from __future__ import annotations

import argparse
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from ..errors import ConfigError
from ..trainer import MODES, train_run
from .config import ExperimentConfig, load_config
from .records import record_name, write_record
from .report import report


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gcrl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", type=Path, help="experiment config (JSON)")
        sp.add_argument("--env", help="override the config's environment")
        sp.add_argument("--mode", help=f"override the mode; one of {', '.join(MODES)}")
        sp.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
        if seed:
            sp.add_argument("--seed", type=int, help="run seed (default: first seed of the config)")

    common(sub.add_parser("train", help="one run, written as a record file"))
    sw = sub.add_parser("sweep", help="every seed of a config (modes may be comma separated)")
    common(sw, seed=False)
    sw.add_argument("--parallel", type=int, default=1, help="worker processes")
    rp = sub.add_parser("report", help="metrics.csv, curves.csv and curves.svg from records")
    rp.add_argument("records", nargs="*", type=Path, help="record files or directories (default: --out)")
    rp.add_argument("--out", type=Path, default=Path("runs"))
    rp.add_argument("--no-svg", action="store_true")
    vf = sub.add_parser("verify", help="run the property, oracle and acceptance tests")
    vf.add_argument("--tests", type=Path, help="test directory (default: the repository's tests/)")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.env:
        cfg = replace(cfg, env=args.env)
    if args.mode and "," not in args.mode:
        cfg = replace(cfg, mode=args.mode)
    return cfg


def _run_one(cfg: ExperimentConfig, seed: int, out: Path) -> Path:
    rec = train_run(cfg.env, cfg.mode, cfg.soft, seed=seed, total_steps=cfg.total_steps,
                    eval_every=cfg.eval_every, eval_episodes=cfg.eval_episodes, hard=cfg.hard,
                    env_params=cfg.env_params)
    meta = {"threshold": cfg.r_thr, "window": cfg.window, "total_steps": cfg.total_steps}
    return write_record(out / record_name(cfg.env, cfg.mode, seed), rec, meta)


def _train(args) -> int:
    cfg = _config(args)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    if seed < 0:
        raise ConfigError("seed must be nonnegative")
    print(_run_one(cfg, seed, args.out))
    return 0


def _sweep(args) -> int:
    cfg = _config(args)
    modes = args.mode.split(",") if args.mode else [cfg.mode]
    jobs = [(replace(cfg, mode=m), s) for m in modes for s in cfg.seeds]
    if args.parallel < 1:
        raise ConfigError("--parallel must be at least 1")
    if args.parallel == 1:
        paths = [_run_one(c, s, args.out) for c, s in jobs]
    else:
        with ProcessPoolExecutor(args.parallel) as pool:
            paths = list(pool.map(_run_one, *zip(*jobs), [args.out] * len(jobs)))
    for p in paths:
        print(p)
    return 0


def _report(args) -> int:
    sources = args.records or [args.out]
    paths = []
    for src in sources:
        if src.is_dir():
            paths.extend(sorted(src.glob("*.rec")))
        elif src.is_file():
            paths.append(src)
        else:
            raise FileNotFoundError(f"no such record file or directory: {src}")
    for p in report(paths, args.out, svg=not args.no_svg).values():
        print(p)
    return 0


def _verify(args) -> int:
    tests = args.tests or Path(__file__).resolve().parents[3] / "tests"
    if not tests.is_dir():
        raise FileNotFoundError(f"test directory not found: {tests}")
    return subprocess.call([sys.executable, "-m", "pytest", "-q", str(tests)])


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handler = {"train": _train, "sweep": _sweep, "report": _report, "verify": _verify}[args.command]
    try:
        return handler(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"gcrl {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
