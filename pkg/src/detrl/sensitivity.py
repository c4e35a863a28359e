"""Six experimental groups, each isolating one source of nondeterminism.

Every group trains ``n_runs`` agents that share all settings except one.
The deterministic group varies nothing; the others vary exactly one seed,
set to ``base + run_index`` so that a group is itself replicable from a
single config.  Reports are pure functions of the run logs.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

from scipy import stats

from detrl import __version__
from detrl import env as catch
from detrl.determinism import COMPLETED, RunLog
from detrl.dqn import (
    DETERMINISTIC_KIND,
    PERTURBED_KIND,
    AgentRunConfig,
    Hyperparams,
    run_training,
)
from detrl.evalproto import EvalSuite
from detrl.rng import MASK64, SeedSpec

log = logging.getLogger(__name__)

GROUP_NAMES = ("deterministic", "compute", "environment", "exploration",
               "initialization", "minibatch")

VARIED_FIELD = {
    "deterministic": None,
    "compute": "compute_seed",
    "environment": "sticky_seed",
    "exploration": "exploration_seed",
    "initialization": "init_seed",
    "minibatch": "minibatch_seed",
}

STICKY_P = 0.25
EPS_END = 0.1
EPS_END_STICKY = 0.01


class UndefinedStatisticError(ZeroDivisionError):
    """Relative standard deviation of a zero mean."""


@dataclass(frozen=True)
class GroupSpec:
    name: str
    base_seeds: SeedSpec = field(default_factory=SeedSpec)
    n_runs: int = 5
    hp: Hyperparams = field(default_factory=Hyperparams)
    env_cfg: catch.EnvConfig = field(default_factory=catch.EnvConfig)

    def __post_init__(self):
        if self.name not in GROUP_NAMES:
            raise ValueError(f"unknown group {self.name!r}; expected one of {GROUP_NAMES}")
        if self.n_runs < 1:
            raise ValueError("n_runs must be positive")

    @property
    def varied_field(self) -> str | None:
        return VARIED_FIELD[self.name]

    @classmethod
    def standard(cls, name: str, base_seeds: SeedSpec | None = None, n_runs: int = 5,
                 hp: Hyperparams | None = None,
                 env_cfg: catch.EnvConfig | None = None) -> "GroupSpec":
        """A group with the stochasticity and final epsilon its name calls for."""
        hp = hp or Hyperparams()
        env_cfg = env_cfg or catch.EnvConfig()
        sticky = name == "environment"
        env_cfg = replace(env_cfg, sticky_p=STICKY_P if sticky else 0.0)
        hp = replace(hp, eps_end=EPS_END_STICKY if sticky else EPS_END)
        return cls(name, base_seeds or SeedSpec(), n_runs, hp, env_cfg)

    def to_dict(self) -> dict:
        return {"name": self.name, "base_seeds": self.base_seeds.to_dict(),
                "n_runs": self.n_runs, "hp": self.hp.to_dict(), "env": self.env_cfg.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "GroupSpec":
        return cls(d["name"], SeedSpec.from_dict(d["base_seeds"]), d["n_runs"],
                   Hyperparams.from_dict(d["hp"]), catch.EnvConfig.from_dict(d["env"]))


def build_group_configs(spec: GroupSpec) -> list[AgentRunConfig]:
    """One config per run; the varied seed of run ``i`` is ``base + i``."""
    sticky = spec.env_cfg.sticky_p > 0
    if spec.name == "environment" and not sticky:
        raise ValueError("the environment group needs sticky_p > 0")
    if spec.name != "environment" and sticky:
        raise ValueError(f"group {spec.name!r} must use a deterministic environment")
    compute = PERTURBED_KIND if spec.name == "compute" else DETERMINISTIC_KIND
    configs = []
    for i in range(spec.n_runs):
        seeds = spec.base_seeds
        if spec.varied_field is not None:
            base = getattr(seeds, spec.varied_field)
            seeds = seeds.replace(**{spec.varied_field: (base + i) & MASK64})
        configs.append(AgentRunConfig(seeds, spec.hp, spec.env_cfg, compute))
    return configs


def _train_to_dict(cfg_dict: dict, suite_json: str | None) -> dict:
    cfg = AgentRunConfig.from_dict(cfg_dict)
    suite = EvalSuite.from_json(suite_json) if suite_json is not None else None
    return run_training(cfg, suite).log.to_dict()


def resolve_parallelism(parallelism: int) -> int:
    if parallelism < 0:
        raise ValueError("parallelism must be >= 0")
    return parallelism or os.cpu_count() or 1


def run_configs(configs: list[AgentRunConfig], suite: EvalSuite | None,
                parallelism: int = 1) -> list[RunLog]:
    """Train every config; logs come back in config order whatever the scheduling."""
    workers = min(resolve_parallelism(parallelism), len(configs))
    if workers <= 1:
        return [run_training(cfg, suite).log for cfg in configs]
    suite_json = suite.to_json() if suite is not None else None
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_train_to_dict, cfg.to_dict(), suite_json) for cfg in configs]
        return [RunLog.from_dict(f.result()) for f in futures]


def rel_std(mean: float, std: float) -> float:
    """``100 * std / mean``, in percent."""
    if mean == 0:
        raise UndefinedStatisticError("relative standard deviation of a zero mean")
    # adding +0.0 turns the -0.0 of a negative mean into 0.0
    return 100.0 * std / mean + 0.0


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    rel_std: float | None

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "rel_std": self.rel_std}


def summarize(values) -> Summary:
    """Mean and sample standard deviation (divisor n - 1) of run scores.

    Computed with exact rational arithmetic, so equal values give a
    standard deviation of exactly zero.
    """
    values = [float(v) for v in values]
    if not values:
        raise ValueError("no values to summarize")
    mean = float(statistics.mean(values))
    std = float(statistics.stdev(values)) if len(values) > 1 else 0.0
    try:
        rs = rel_std(mean, std)
    except UndefinedStatisticError:
        rs = None
    return Summary(mean, std, rs)


@dataclass(frozen=True)
class RunBest:
    run: int
    step_of_best: int
    best_score: float

    def to_dict(self) -> dict:
        return {"run": self.run, "step_of_best": self.step_of_best, "best_score": self.best_score}


@dataclass
class GroupReport:
    name: str
    per_interval: list[tuple[int, Summary]]
    final: Summary
    best: Summary
    per_run_best: list[RunBest]
    fingerprints: list[str]
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "group": self.name,
            "artifact_version": __version__,
            "config_fingerprints": self.fingerprints,
            "per_interval": [{"step": s, **summ.to_dict()} for s, summ in self.per_interval],
            "final": self.final.to_dict(),
            "best": self.best.to_dict(),
            "per_run_best": [b.to_dict() for b in self.per_run_best],
            "flags": self.flags,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "GroupReport":
        def summ(x):
            return Summary(x["mean"], x["std"], x["rel_std"])
        return cls(d["group"], [(p["step"], summ(p)) for p in d["per_interval"]],
                   summ(d["final"]), summ(d["best"]),
                   [RunBest(**b) for b in d["per_run_best"]],
                   list(d["config_fingerprints"]), list(d["flags"]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# group={self.name} version={__version__} "
                  f"fingerprints={','.join(self.fingerprints)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "mean", "std", "rel_std"])
        for step, s in self.per_interval:
            w.writerow([step, repr(s.mean), repr(s.std), "" if s.rel_std is None else repr(s.rel_std)])
        return buf.getvalue()


def group_report(name: str, logs: list[RunLog]) -> GroupReport:
    """Per-interval, final-network and best-network statistics over runs.

    Each run's performance at an interval is its mean evaluation score.
    The best network of a run is its highest-scoring checkpoint after step
    0, the earliest one on ties.  Diverged runs are left out and flagged.
    """
    flags = []
    done = [(i, lg) for i, lg in enumerate(logs) if lg.outcome == COMPLETED]
    for i, lg in enumerate(logs):
        if lg.outcome != COMPLETED:
            flags.append(f"run {i} {lg.outcome}: {lg.diagnostic}")
            log.warning("group %s: run %d %s, left out of the statistics", name, i, lg.outcome)
    if not done:
        raise ValueError(f"group {name!r} has no completed runs")
    if any(not lg.evaluations for _, lg in done):
        raise ValueError(f"group {name!r} has runs without evaluations")
    schedules = {tuple(e.step for e in lg.evaluations) for _, lg in done}
    if len(schedules) != 1:
        raise ValueError(f"group {name!r} runs do not share an evaluation schedule")
    steps = schedules.pop()

    per_interval = []
    for k, step in enumerate(steps):
        per_interval.append((step, summarize(lg.evaluations[k].mean for _, lg in done)))
        if per_interval[-1][1].rel_std is None:
            flags.append(f"rel_std undefined at step {step} (mean 0)")

    per_run_best = []
    for i, lg in done:
        pool = [e for e in lg.evaluations if e.step > 0] or lg.evaluations
        top = max(pool, key=lambda e: e.mean)
        per_run_best.append(RunBest(i, top.step, top.mean))
    best = summarize(b.best_score for b in per_run_best)
    final = per_interval[-1][1]
    for label, s in (("final", final), ("best", best)):
        if s.rel_std is None:
            flags.append(f"{label} rel_std undefined (mean 0)")
    return GroupReport(name, per_interval, final, best, per_run_best,
                       [lg.config_fingerprint for lg in logs], flags)


def run_group(spec: GroupSpec, suite: EvalSuite,
              parallelism: int = 1) -> tuple[list[RunLog], GroupReport]:
    logs = run_configs(build_group_configs(spec), suite, parallelism)
    return logs, group_report(spec.name, logs)


@dataclass(frozen=True)
class VarianceTest:
    statistic: float
    p_value: float
    significant: bool
    df: tuple[int, int]
    degenerate: bool = False


def variance_test(scores_a, scores_b, alpha: float = 0.1) -> VarianceTest:
    """Two-sided F-test for equal variances.

    ``F`` is the larger sample variance over the smaller, with the degrees
    of freedom ordered to match, and ``p = min(1, 2 * P(F' > F))``.  If
    either variance is zero the result is marked degenerate: both zero is
    an equal-variance verdict, one zero is an infinite ratio.
    """
    a = [float(x) for x in scores_a]
    b = [float(x) for x in scores_b]
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two values")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    va, vb = float(statistics.variance(a)), float(statistics.variance(b))
    if va >= vb:
        big, small, df = va, vb, (len(a) - 1, len(b) - 1)
    else:
        big, small, df = vb, va, (len(b) - 1, len(a) - 1)
    if big == 0:
        return VarianceTest(1.0, 1.0, False, df, degenerate=True)
    if small == 0:
        return VarianceTest(float("inf"), 0.0, True, df, degenerate=True)
    f = big / small
    p = min(1.0, 2.0 * float(stats.f.sf(f, *df)))
    return VarianceTest(f, p, p < alpha, df)


SUMMARY_ROWS = (
    ("Average Score (Best)", "best", "mean"),
    ("Standard Deviation (Best)", "best", "std"),
    ("Relative Standard Deviation (Best)", "best", "rel_std"),
    ("Average Score (Final)", "final", "mean"),
    ("Standard Deviation (Final)", "final", "std"),
    ("Relative Standard Deviation (Final)", "final", "rel_std"),
)


def summary_table(reports: list[GroupReport]) -> str:
    """Plain-text table: six metric rows, one column per group."""
    by_name = {r.name: r for r in reports}
    names = [n for n in GROUP_NAMES if n in by_name]
    names += sorted(n for n in by_name if n not in GROUP_NAMES)
    header = ["Metric"] + [n.capitalize() for n in names]
    rows = [header]
    for label, which, attr in SUMMARY_ROWS:
        row = [label]
        for n in names:
            v = getattr(getattr(by_name[n], which), attr)
            if v is None:
                row.append("undef")
            elif attr == "rel_std":
                row.append(f"{v:.2f}%")
            else:
                row.append(f"{v:.3f}")
        rows.append(row)
    widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
    lines = [" | ".join(cell.ljust(w) if c == 0 else cell.rjust(w)
                        for c, (cell, w) in enumerate(zip(r, widths))) for r in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
