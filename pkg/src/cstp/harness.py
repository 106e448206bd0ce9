"""Parameter sweeps over the protocol engines, CSV output and summaries."""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path

import numpy as np

from .planner import RewardFunction
from .protocols import SCHEMES, FeedbackPolicy, run_scheme

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def job_seed(master: int, n: int, trial: int) -> int:
    """Seed of one trial.

    Only the population size and the trial number enter, so every scheme, K
    and alpha sees the same user coin flips for a given trial (common random
    numbers), and growing any grid leaves existing trials untouched.
    """
    return splitmix64(splitmix64(splitmix64(master & _MASK) ^ n) ^ trial)


@dataclass
class ExperimentConfig:
    schemes: list[str] = field(default_factory=lambda: ["CSTP"])
    K: int = 3
    alpha_grid: list[float] = field(default_factory=lambda: [0.2])
    n_list: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    trials: int = 10
    seed: int = 0
    reward: RewardFunction = field(default_factory=RewardFunction)
    feedback_policy: FeedbackPolicy = field(default_factory=FeedbackPolicy)
    output: Path | None = None
    workers: int = 1

    def validate(self) -> None:
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if not self.schemes:
            raise ValueError("no scheme given")
        for s in self.schemes:
            if s.upper() not in SCHEMES:
                raise ValueError(f"unknown scheme {s!r}; expected one of {', '.join(SCHEMES)}")
        if not self.alpha_grid or any(not 0 < a < 1 for a in self.alpha_grid):
            raise ValueError("alphas must lie strictly between 0 and 1")
        if not self.n_list or any(n < 1 for n in self.n_list):
            raise ValueError("population sizes must be positive")
        if self.K < 1:
            raise ValueError("K must be positive")
        if "CSTP" in (s.upper() for s in self.schemes) and self.K < 2:
            raise ValueError("CSTP needs K >= 2")

    def jobs(self) -> list["Job"]:
        out = []
        for scheme in self.schemes:
            for alpha in self.alpha_grid:
                for n in self.n_list:
                    for trial in range(self.trials):
                        out.append(
                            Job(scheme.upper(), self.K, alpha, n, trial, job_seed(self.seed, n, trial))
                        )
        return out


@dataclass(frozen=True)
class Job:
    scheme: str
    K: int
    alpha: float
    n: int
    trial: int
    seed: int


@dataclass(frozen=True)
class ResultRow:
    scheme: str
    K: int
    alpha: float
    N: int
    trial: int
    seed: int
    slots: int
    recovered: int
    feedback: int
    throughput: float
    relative_feedback: float
    planned_order_length: int
    tail_splits: int


CSV_HEADER = [f.name for f in fields(ResultRow)]


def run_job(job: Job, reward: RewardFunction, policy: FeedbackPolicy) -> ResultRow:
    res = run_scheme(job.scheme, job.n, job.seed, K=job.K, alpha=job.alpha, reward=reward, policy=policy)
    m = res.metrics
    k = job.K if job.scheme == "CSTP" else 1
    return ResultRow(
        job.scheme,
        k,
        job.alpha,
        job.n,
        job.trial,
        job.seed,
        m.slots_used,
        m.recovered,
        m.feedback,
        m.recovered / m.slots_used,
        m.feedback / job.n,
        res.planned_order_length,
        res.tail_splits,
    )


def _run_packed(args):
    return run_job(*args)


def run_sweep(config: ExperimentConfig) -> list[ResultRow]:
    config.validate()
    jobs = config.jobs()
    packed = [(job, config.reward, config.feedback_policy) for job in jobs]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            rows = list(pool.map(_run_packed, packed, chunksize=max(1, len(jobs) // (8 * config.workers))))
    else:
        rows = [_run_packed(p) for p in packed]
    if config.output is not None:
        write_csv(rows, config.output)
    return rows


def _fmt(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def format_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow([_fmt(v) for v in astuple(row)])
    return buf.getvalue()


def write_csv(rows: list[ResultRow], path) -> None:
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="ascii") as fh:
            fh.write(format_csv(rows))
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc.strerror or exc}") from exc


def read_csv(path) -> list[ResultRow]:
    types = [f.type for f in fields(ResultRow)]
    casts = {"str": str, "int": int, "float": float}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header")
        return [ResultRow(*(casts[t](v) for t, v in zip(types, rec))) for rec in reader]


@dataclass(frozen=True)
class SummaryRow:
    scheme: str
    K: int
    alpha: float
    N: int
    trials: int
    mean_throughput: float
    se_throughput: float
    mean_relative_feedback: float
    se_relative_feedback: float


def _mean_se(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size < 2:
        return float(arr.mean()), 0.0
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size))


def summarize(rows: list[ResultRow]) -> list[SummaryRow]:
    if not rows:
        raise ValueError("nothing to summarize")
    groups: dict[tuple, list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.scheme, r.K, r.alpha, r.N), []).append(r)
    out = []
    for (scheme, k, alpha, n), members in groups.items():
        t, t_se = _mean_se([r.throughput for r in members])
        f, f_se = _mean_se([r.relative_feedback for r in members])
        out.append(SummaryRow(scheme, k, alpha, n, len(members), t, t_se, f, f_se))
    return out


def format_summary(summary: list[SummaryRow]) -> str:
    lines = [f"{'scheme':<6} {'K':>2} {'alpha':>6} {'N':>5} {'trials':>6} {'T':>8} {'se(T)':>8} {'F/N':>8} {'se(F/N)':>8}"]
    for s in summary:
        lines.append(
            f"{s.scheme:<6} {s.K:>2} {s.alpha:>6.3f} {s.N:>5} {s.trials:>6} "
            f"{s.mean_throughput:>8.4f} {s.se_throughput:>8.4f} "
            f"{s.mean_relative_feedback:>8.4f} {s.se_relative_feedback:>8.4f}"
        )
    return "\n".join(lines)
