"""Deep Q-learning training loop wired to named random streams.

Stream consumption per environment step:

* exploration -- one uniform every step, plus one integer when exploring;
* sticky      -- one uniform every step, only when ``sticky_p > 0``;
* noop        -- one integer at the start of every episode;
* minibatch   -- ``batch_size`` integers per update;
* compute     -- one word per matrix product, only in perturbed mode.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np

from detrl import env as catch
from detrl.determinism import COMPLETED, DIVERGED, Checkpoint, Evaluation, RunLog
from detrl.evalproto import STICKY_SEEDS, EvalSuite, SuiteMismatchError, evaluate
from detrl.nn import (
    DETERMINISTIC,
    FLOAT,
    ComputeKind,
    ComputeMode,
    DivergenceError,
    QNetwork,
    RMSProp,
    apply_update,
    backward,
    format_hash,
    forward,
    init_network,
    save_network,
    weight_hash,
)
from detrl.replay import Batch, ReplayBuffer, Transition
from detrl.rng import RandomStream, SeedSpec, streams_for

log = logging.getLogger(__name__)

DETERMINISTIC_KIND = ComputeKind.DETERMINISTIC.value
PERTURBED_KIND = ComputeKind.PERTURBED.value


@dataclass(frozen=True)
class Hyperparams:
    gamma: float = 0.99
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_anneal_steps: int = 5_000
    target_sync_interval: int = 500
    batch_size: int = 32
    train_every: int = 4
    total_steps: int = 50_000
    eval_interval: int = 1_000
    learn_start: int = 500
    buffer_capacity: int = 10_000
    learning_rate: float = 1e-3
    rms_decay: float = 0.95
    rms_eps: float = 1e-5
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        for name in ("eps_anneal_steps", "target_sync_interval", "batch_size", "train_every",
                     "eval_interval", "buffer_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.total_steps < 0 or self.learn_start < 0:
            raise ValueError("total_steps and learn_start must be >= 0")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size exceeds buffer_capacity")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(**d)


# Values of record from the Atari setting; desk defaults above are scaled down.
ATARI_HYPERPARAMS = {
    "eps_start": 1.0,
    "eps_end": 0.1,
    "eps_end_sticky": 0.01,
    "eps_anneal_steps": 1_000_000,
    "total_steps": 20_000_000,
    "eval_interval": 250_000,
    "buffer_capacity": 1_000_000,
    "sticky_p": 0.25,
    "runs_per_group": 5,
}


@dataclass(frozen=True)
class AgentRunConfig:
    seeds: SeedSpec = field(default_factory=SeedSpec)
    hp: Hyperparams = field(default_factory=Hyperparams)
    env_cfg: catch.EnvConfig = field(default_factory=catch.EnvConfig)
    compute: str = DETERMINISTIC_KIND

    def __post_init__(self):
        if self.compute not in (DETERMINISTIC_KIND, PERTURBED_KIND):
            raise ValueError(f"unknown compute kind {self.compute!r}")
        if self.seeds.env_instance_seed != self.env_cfg.env_instance_seed:
            raise ValueError("seeds.env_instance_seed and env_cfg.env_instance_seed disagree")

    @property
    def standard_protocol(self) -> bool:
        return self.env_cfg.sticky_p in (0.0, 0.25)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.env_cfg.feature_size, *self.hp.hidden, catch.N_ACTIONS)

    def to_dict(self) -> dict:
        return {"seeds": self.seeds.to_dict(), "hp": self.hp.to_dict(),
                "env": self.env_cfg.to_dict(), "compute": self.compute}

    @classmethod
    def from_dict(cls, d: dict) -> "AgentRunConfig":
        return cls(SeedSpec.from_dict(d["seeds"]), Hyperparams.from_dict(d["hp"]),
                   catch.EnvConfig.from_dict(d["env"]), d["compute"])

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "AgentRunConfig":
        return replace(self, **changes)


def epsilon_at(t: int, hp: Hyperparams) -> float:
    """Linear anneal from ``eps_start`` to ``eps_end`` over ``eps_anneal_steps``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    frac = min(t / hp.eps_anneal_steps, 1.0)
    return hp.eps_start + (hp.eps_end - hp.eps_start) * frac


def select_action(net: QNetwork, features, eps: float, exploration_stream: RandomStream,
                  mode: ComputeMode = DETERMINISTIC) -> tuple[int, bool]:
    """Epsilon-greedy action; returns ``(action, explored)``.

    One uniform is drawn every call; a uniform integer over the actions is
    drawn only when exploring.  Greedy ties go to the lowest index.
    """
    if exploration_stream.next_uniform() < eps:
        return exploration_stream.next_int(net.n_actions), True
    q = forward(net, features, mode)
    return int(np.argmax(q)), False


def td_targets(target_net: QNetwork, batch: Batch, gamma: float,
               mode: ComputeMode = DETERMINISTIC) -> np.ndarray:
    """``r + gamma * max_a' Q(s', a'; target)``, bootstrap dropped on terminals."""
    if len(batch) == 0:
        raise ValueError("empty minibatch")
    q_next = forward(target_net, batch.next_states, mode).max(axis=1)
    boot = np.where(batch.terminals, FLOAT(0), FLOAT(gamma) * q_next)
    return (batch.rewards.astype(FLOAT) + boot).astype(FLOAT)


class TrainingResult(NamedTuple):
    log: RunLog
    network: QNetwork


def _check_suite(cfg: AgentRunConfig, suite: EvalSuite | None):
    if suite is None:
        return
    if (cfg.env_cfg.sticky_p > 0) != (suite.kind == STICKY_SEEDS):
        raise SuiteMismatchError(
            f"suite kind {suite.kind!r} does not fit sticky_p={cfg.env_cfg.sticky_p}")


def run_training(cfg: AgentRunConfig, suite: EvalSuite | None = None, *,
                 trace: dict | None = None, snapshot_dir=None) -> TrainingResult:
    """Train one agent and return its run log and final online network.

    Checkpoints (weight hash, draw counts, evaluation) are taken at step 0
    and after every ``eval_interval`` steps.  If ``trace`` is a dict it
    receives per-step records of exploration and minibatch draws.  If
    ``snapshot_dir`` is given the online network is saved at every
    checkpoint.
    """
    _check_suite(cfg, suite)
    hp, env_cfg = cfg.hp, cfg.env_cfg
    sticky_on = env_cfg.sticky_p > 0
    perturbed = cfg.compute == PERTURBED_KIND
    streams = streams_for(cfg.seeds, sticky=sticky_on, perturbed=perturbed)
    mode = ComputeMode.perturbed(streams["compute"]) if perturbed else DETERMINISTIC

    net = init_network(cfg.layer_sizes, streams["init"])
    target = net.copy()
    opt = RMSProp.for_network(net, learning_rate=hp.learning_rate, decay=hp.rms_decay,
                              epsilon_stab=hp.rms_eps)
    buffer = ReplayBuffer(hp.buffer_capacity, env_cfg.feature_size, catch.N_ACTIONS)
    runlog = RunLog(cfg.fingerprint(), config=cfg.to_dict())
    if trace is not None:
        trace.setdefault("explore", [])
        trace.setdefault("actions", [])
        trace.setdefault("minibatch", [])

    def checkpoint(step):
        runlog.checkpoints.append(Checkpoint(
            step, format_hash(weight_hash(net)),
            {name: s.draw_count for name, s in streams.items()}))
        if suite is not None:
            res = evaluate(net, suite, env_cfg)
            runlog.evaluations.append(Evaluation(step, res.scores, res.mean))
        if snapshot_dir is not None:
            save_network(net, f"{snapshot_dir}/step_{step:09d}.qnet")

    sticky = (catch.StickyActions(catch.step, env_cfg.sticky_p, streams["sticky"])
              if sticky_on else None)
    episode = 0

    def start_episode(index):
        if sticky is not None:
            sticky.reset()
        return catch.noop_start(lambda: catch.reset(env_cfg, index), catch.step,
                                env_cfg.noops, streams["noop"])

    checkpoint(0)
    state = start_episode(episode)
    feats = catch.featurize(state)
    for t in range(1, hp.total_steps + 1):
        action, explored = select_action(net, feats, epsilon_at(t - 1, hp),
                                         streams["exploration"], mode)
        if sticky is not None:
            nxt, reward, terminal, _ = sticky(state, action)
        else:
            nxt, reward, terminal = catch.step(state, action)
        next_feats = catch.featurize(nxt)
        buffer.push(Transition(feats, action, reward, next_feats, terminal))
        if trace is not None:
            trace["actions"].append(action)
            if explored:
                trace["explore"].append((t, action))

        if terminal:
            episode += 1
            state = start_episode(episode)
            feats = catch.featurize(state)
        else:
            state, feats = nxt, next_feats

        if t % hp.train_every == 0 and buffer.size >= max(hp.learn_start, hp.batch_size):
            batch = buffer.sample(hp.batch_size, streams["minibatch"])
            if trace is not None:
                trace["minibatch"].append((t, batch.indices))
            try:
                y = td_targets(target, batch, hp.gamma, mode)
                grads = backward(net, batch.states, batch.actions, y, mode)
                if not np.isfinite(grads.loss):
                    raise DivergenceError("non-finite loss")
                apply_update(net, grads, opt)
            except DivergenceError as exc:
                log.warning("run %s diverged at step %d: %s", runlog.config_fingerprint, t, exc)
                runlog.outcome = DIVERGED
                runlog.diagnostic = {"step": t, "reason": str(exc)}
                break

        if t % hp.target_sync_interval == 0:
            target = net.copy()
        if t % hp.eval_interval == 0:
            checkpoint(t)

    if runlog.outcome == COMPLETED and runlog.checkpoints[-1].step != hp.total_steps:
        checkpoint(hp.total_steps)
    return TrainingResult(runlog, net)


def train_run(cfg: AgentRunConfig, suite: EvalSuite | None = None) -> RunLog:
    return run_training(cfg, suite).log
