"""Run logs and replication checks.

A :class:`RunLog` certifies one training run: at every checkpoint it holds
the network's weight hash and how many words each random stream has
consumed, plus the evaluation scores.  Two runs replicate each other
exactly when their logs agree field by field; when they do not, the draw
counts usually name the source that diverged first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from detrl import __version__

SCHEMA_VERSION = 1
COMPLETED = "completed"
DIVERGED = "diverged"


class IncomparableError(ValueError):
    """Two logs do not share a checkpoint schedule."""


@dataclass
class Checkpoint:
    step: int
    weight_hash: str
    draw_counts: dict[str, int]

    def to_dict(self) -> dict:
        return {"step": self.step, "weight_hash": self.weight_hash,
                "draw_counts": dict(sorted(self.draw_counts.items()))}


@dataclass
class Evaluation:
    step: int
    scores: list[float]
    mean: float

    def to_dict(self) -> dict:
        return {"step": self.step, "scores": self.scores, "mean": self.mean}


@dataclass
class RunLog:
    config_fingerprint: str
    checkpoints: list[Checkpoint] = field(default_factory=list)
    evaluations: list[Evaluation] = field(default_factory=list)
    outcome: str = COMPLETED
    diagnostic: dict | None = None
    config: dict | None = None
    artifact_version: str = __version__

    def validate(self) -> None:
        steps = [c.step for c in self.checkpoints]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("checkpoint steps must be strictly increasing")
        for prev, cur in zip(self.checkpoints, self.checkpoints[1:]):
            for name, count in prev.draw_counts.items():
                if cur.draw_counts.get(name, count) < count:
                    raise ValueError(f"draw count of stream {name!r} decreased at step {cur.step}")
        if self.outcome not in (COMPLETED, DIVERGED):
            raise ValueError(f"unknown outcome {self.outcome!r}")

    @property
    def final_mean(self) -> float | None:
        return self.evaluations[-1].mean if self.evaluations else None

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "artifact_version": self.artifact_version,
            "config_fingerprint": self.config_fingerprint,
            "config": self.config,
            "outcome": self.outcome,
            "diagnostic": self.diagnostic,
            "checkpoints": [c.to_dict() for c in self.checkpoints],
            "evaluations": [e.to_dict() for e in self.evaluations],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunLog":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported run log schema {d.get('schema_version')!r}")
        log = cls(
            config_fingerprint=d["config_fingerprint"],
            checkpoints=[Checkpoint(c["step"], c["weight_hash"], dict(c["draw_counts"]))
                         for c in d["checkpoints"]],
            evaluations=[Evaluation(e["step"], list(e["scores"]), e["mean"])
                         for e in d["evaluations"]],
            outcome=d["outcome"],
            diagnostic=d.get("diagnostic"),
            config=d.get("config"),
            artifact_version=d["artifact_version"],
        )
        log.validate()
        return log

    @classmethod
    def from_json(cls, text: str) -> "RunLog":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path) -> "RunLog":
        with open(path) as f:
            return cls.from_json(f.read())


@dataclass(frozen=True)
class Divergence:
    step: int
    field: str


@dataclass(frozen=True)
class ReplicationVerdict:
    identical: bool
    first_divergence: Divergence | None = None

    def __str__(self):
        if self.identical:
            return "identical"
        d = self.first_divergence
        return f"diverged at step {d.step} ({d.field})"


def _checkpoint_fields(c: Checkpoint, evals: dict):
    yield "weight_hash", c.weight_hash
    for name in sorted(c.draw_counts):
        yield f"draw_counts.{name}", c.draw_counts[name]
    e = evals.get(c.step)
    yield "evaluation.scores", None if e is None else e.scores
    yield "evaluation.mean", None if e is None else e.mean


def compare_runs(a: RunLog, b: RunLog) -> ReplicationVerdict:
    """Exact comparison of two logs, reporting the earliest mismatch.

    The schedules must match, except that a diverged run may stop early; in
    that case the first missing checkpoint is reported as an ``outcome``
    mismatch.
    """
    steps_a = [c.step for c in a.checkpoints]
    steps_b = [c.step for c in b.checkpoints]
    n = min(len(steps_a), len(steps_b))
    if steps_a[:n] != steps_b[:n] or (len(steps_a) != len(steps_b)
                                      and DIVERGED not in (a.outcome, b.outcome)):
        raise IncomparableError("runs do not share a checkpoint schedule")

    evals_a = {e.step: e for e in a.evaluations}
    evals_b = {e.step: e for e in b.evaluations}
    for ca, cb in zip(a.checkpoints, b.checkpoints):
        if set(ca.draw_counts) != set(cb.draw_counts):
            return ReplicationVerdict(False, Divergence(ca.step, "draw_counts.streams"))
        for (name, va), (_, vb) in zip(_checkpoint_fields(ca, evals_a),
                                       _checkpoint_fields(cb, evals_b)):
            if va != vb:
                return ReplicationVerdict(False, Divergence(ca.step, name))
    if len(steps_a) != len(steps_b) or a.outcome != b.outcome or a.diagnostic != b.diagnostic:
        longer = steps_a if len(steps_a) > len(steps_b) else steps_b
        step = longer[n] if len(longer) > n else (steps_a[-1] if steps_a else 0)
        return ReplicationVerdict(False, Divergence(step, "outcome"))
    return ReplicationVerdict(True)


def first_divergence_step(a: RunLog, b: RunLog) -> int | None:
    verdict = compare_runs(a, b)
    return None if verdict.identical else verdict.first_divergence.step
