"""Command-line driver for protocol sweeps.

    cstp --scheme CSTP --k 3 --alpha 0.1:0.5:0.05 --n 32 --n 64 --trials 200 --out runs.csv --summary

Every flag may also be given in a ``--config`` file as ``key = value`` lines
(``alpha``, ``n`` and ``scheme`` accept comma-separated lists there);
command-line flags override the file.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .harness import ExperimentConfig, format_csv, format_summary, run_sweep, summarize, write_csv
from .planner import RewardFunction
from .protocols import FeedbackPolicy


class ConfigError(ValueError):
    pass


def parse_alpha(text: str) -> list[float]:
    """``0.2`` or an inclusive range ``lo:hi:step``."""
    text = text.strip()
    if ":" not in text:
        return [float(text)]
    try:
        lo, hi, step = (float(x) for x in text.split(":"))
    except ValueError as exc:
        raise ConfigError(f"bad alpha range {text!r}; expected lo:hi:step") from exc
    if step <= 0 or hi < lo:
        raise ConfigError(f"bad alpha range {text!r}")
    count = int(round((hi - lo) / step))
    return [round(lo + i * step, 10) for i in range(count + 1)]


def _split_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def read_config_file(path: str) -> dict[str, list[str]]:
    """Flat ``key = value`` text; '#' starts a comment."""
    out: dict[str, list[str]] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key = key.strip().lstrip("-").replace("-", "_")
        out.setdefault(key, []).append(value.strip())
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cstp", description="Monte-Carlo sweeps of tree splitting protocols.")
    p.add_argument("--config", help="flat key = value file mirroring these flags")
    p.add_argument("--scheme", action="append", help="BTS, SICTA or CSTP (repeatable)")
    p.add_argument("--k", type=int, help="number of trees for CSTP (default 3)")
    p.add_argument("--alpha", action="append", help="coverage threshold or lo:hi:step range (repeatable)")
    p.add_argument("--n", action="append", type=int, help="population size (repeatable)")
    p.add_argument("--trials", type=int, help="trials per grid point (default 10)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--reward", help='reward pairs, e.g. "d=2:0.5,d=3:0.5"')
    p.add_argument("--feedback-policy", help='"estimation=1,order=1,tail=1,terminate=1" or "1,1,1,1"')
    p.add_argument("--workers", type=int, help="parallel worker processes (default 1)")
    p.add_argument("--out", help="CSV output file (default: standard output)")
    p.add_argument("--summary", action="store_true", help="print mean/stderr per grid point")
    return p


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    file_values = read_config_file(args.config) if args.config else {}
    known = {"scheme", "k", "alpha", "n", "trials", "seed", "reward", "feedback_policy", "workers", "out", "summary"}
    unknown = set(file_values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")

    def pick(name):
        cli = getattr(args, name)
        if cli is not None and cli is not False:
            return cli
        vals = file_values.get(name)
        return vals[-1] if vals else None

    def pick_list(name):
        cli = getattr(args, name)
        if cli:
            return [str(v) for v in cli]
        return [v for raw in file_values.get(name, []) for v in _split_list(raw)]

    cfg = ExperimentConfig()
    try:
        schemes = pick_list("scheme")
        if schemes:
            cfg.schemes = [s.upper() for s in schemes]
        alphas = pick_list("alpha")
        if alphas:
            cfg.alpha_grid = [a for text in alphas for a in parse_alpha(text)]
        ns = pick_list("n")
        if ns:
            cfg.n_list = [int(n) for n in ns]
        for name, attr in (("k", "K"), ("trials", "trials"), ("seed", "seed"), ("workers", "workers")):
            val = pick(name)
            if val is not None:
                setattr(cfg, attr, int(val))
        reward = pick("reward")
        if reward:
            cfg.reward = RewardFunction.parse(reward)
        policy = pick("feedback_policy")
        if policy:
            cfg.feedback_policy = FeedbackPolicy.parse(policy)
        out = pick("out")
        if out:
            cfg.output = Path(out)
        cfg.validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"cstp: config error: {exc}", file=sys.stderr)
        return 2
    out_path, cfg.output = cfg.output, None
    if out_path is not None:
        try:
            open(out_path, "w").close()
        except OSError as exc:
            print(f"cstp: cannot write results to {out_path}: {exc.strerror or exc}", file=sys.stderr)
            return 1
    rows = run_sweep(cfg)
    try:
        if out_path is None:
            sys.stdout.write(format_csv(rows))
        else:
            write_csv(rows, out_path)
    except OSError as exc:
        print(f"cstp: {exc}", file=sys.stderr)
        return 1
    want_summary = args.summary or (
        args.config and read_config_file(args.config).get("summary", ["false"])[-1].lower() in ("1", "true", "yes")
    )
    if want_summary:
        stream = sys.stderr if out_path is None else sys.stdout
        print(format_summary(summarize(rows)), file=stream)
    return 0


if __name__ == "__main__":
    sys.exit(main())
