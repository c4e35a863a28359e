"""Deterministic greedy evaluation over a fixed suite of 100 episodes.

Two suite kinds exist.  In a deterministic environment every episode starts
with a predetermined action sequence that puts the agent in a distinct
state, after which the greedy policy plays to the end.  In a sticky-action
environment every episode instead gets its own fixed sticky seed.  Either
way two networks evaluated on one suite can only produce different
trajectories by choosing different greedy actions.

Evaluation layouts use episode indices offset by :data:`EVAL_EPISODE_BASE`
so they never coincide with the layouts seen in training.
"""

from __future__ import annotations

import hashlib
import json
import statistics
from dataclasses import asdict, dataclass, field

import numpy as np

from detrl import __version__
from detrl import env as catch
from detrl.nn import QNetwork, forward, format_hash, weight_hash
from detrl.rng import RandomStream, new_stream

EVAL_EPISODE_BASE = 1 << 40
SUITE_FORMAT = "detrl-eval-suite"
SUITE_VERSION = 1
START_STATES = "start_states"
STICKY_SEEDS = "sticky_seeds"


class SuiteGenerationError(RuntimeError):
    """Too few viable, unique candidates to fill the ranked pool."""


class SuiteMismatchError(ValueError):
    """Suite kind does not fit the environment's stochasticity."""


@dataclass(frozen=True)
class SuiteParams:
    n_candidates: int = 1000
    len_min: int = 2
    len_max: int = 6
    top_k: int = 250
    n_select: int = 100
    n_layouts: int = 1000
    max_attempts: int = 100_000

    def __post_init__(self):
        if not 1 <= self.len_min <= self.len_max:
            raise ValueError("need 1 <= len_min <= len_max")
        if not 1 <= self.n_select <= self.top_k <= self.n_candidates:
            raise ValueError("need 1 <= n_select <= top_k <= n_candidates")
        if self.n_layouts < 1:
            raise ValueError("n_layouts must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# Values of record for the Breakout pipeline; lengths there are game-specific.
ATARI_SUITE_PARAMS = dict(n_candidates=1000, len_min=55, len_max=95, top_k=250, n_select=100)


@dataclass(frozen=True)
class StartSequence:
    layout: int
    actions: tuple[int, ...]
    end_state_digest: str

    def to_dict(self) -> dict:
        return {"layout": self.layout, "actions": list(self.actions),
                "end_state_digest": self.end_state_digest}

    @classmethod
    def from_dict(cls, d: dict) -> "StartSequence":
        return cls(int(d["layout"]), tuple(int(a) for a in d["actions"]), d["end_state_digest"])


@dataclass
class EvalSuite:
    kind: str
    entries: list
    episode_cap: int = 200
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (START_STATES, STICKY_SEEDS):
            raise ValueError(f"unknown suite kind {self.kind!r}")
        if self.episode_cap < 1:
            raise ValueError("episode_cap must be positive")

    def __len__(self):
        return len(self.entries)

    def _entries_json(self):
        if self.kind == START_STATES:
            return [e.to_dict() for e in self.entries]
        return [int(e) for e in self.entries]

    def to_json(self) -> str:
        doc = {
            "format": SUITE_FORMAT,
            "version": SUITE_VERSION,
            "kind": self.kind,
            "episode_cap": self.episode_cap,
            "entries": self._entries_json(),
            "generator_provenance": self.provenance,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalSuite":
        doc = json.loads(text)
        if doc.get("format") != SUITE_FORMAT or doc.get("version") != SUITE_VERSION:
            raise ValueError("not a version-1 evaluation suite file")
        kind = doc["kind"]
        if kind == START_STATES:
            entries = [StartSequence.from_dict(e) for e in doc["entries"]]
        else:
            entries = [int(e) for e in doc["entries"]]
        return cls(kind, entries, doc["episode_cap"], doc.get("generator_provenance", {}))

    def digest(self) -> str:
        blob = json.dumps([self.kind, self.episode_cap, self._entries_json()], sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path) -> "EvalSuite":
        with open(path) as f:
            return cls.from_json(f.read())


def state_digest(state: catch.CatchState) -> str:
    key = [list(state.columns), state.ball_col, state.ball_row, state.paddle_col,
           state.balls_elapsed, state.terminal]
    return hashlib.sha256(json.dumps(key).encode()).hexdigest()[:16]


def _play_prefix(env_cfg, layout, actions):
    """Run a start sequence; None if the episode ends before it is done."""
    state = catch.reset(env_cfg, EVAL_EPISODE_BASE + layout)
    for a in actions:
        state, _, terminal = catch.step(state, a)
        if terminal:
            return None
    return state


def generate_start_sequences(ranker: QNetwork, gen_stream: RandomStream,
                             env_cfg: catch.EnvConfig,
                             params: SuiteParams = SuiteParams()) -> list[StartSequence]:
    """Random prefixes, deduplicated, ranked by the ranker's max action value.

    Per candidate the stream yields a layout index, a length and the
    actions, in that order.  Candidates whose prefix ends the episode are
    redrawn.  The final ``n_select`` are drawn without replacement from the
    ``top_k`` best by a partial Fisher-Yates shuffle on the same stream.
    """
    candidates = []
    attempts = 0
    while len(candidates) < params.n_candidates:
        attempts += 1
        if attempts > params.max_attempts:
            raise SuiteGenerationError(
                f"only {len(candidates)} viable candidates after {params.max_attempts} attempts")
        layout = gen_stream.next_int(params.n_layouts)
        length = params.len_min + gen_stream.next_int(params.len_max - params.len_min + 1)
        actions = tuple(gen_stream.next_int(catch.N_ACTIONS) for _ in range(length))
        end = _play_prefix(env_cfg, layout, actions)
        if end is not None:
            candidates.append((layout, actions, end))

    unique, seen = [], set()
    for layout, actions, end in candidates:
        d = state_digest(end)
        if d not in seen:
            seen.add(d)
            unique.append((StartSequence(layout, actions, d), end))
    if len(unique) < params.top_k:
        raise SuiteGenerationError(
            f"{len(unique)} unique end states among {len(candidates)} candidates, "
            f"need top_k={params.top_k}")

    feats = np.stack([catch.featurize(s) for _, s in unique])
    max_q = forward(ranker, feats).max(axis=1)
    order = sorted(range(len(unique)), key=lambda i: (-float(max_q[i]), i))
    pool = [unique[i][0] for i in order[:params.top_k]]
    for i in range(params.n_select):
        j = i + gen_stream.next_int(params.top_k - i)
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:params.n_select]


def _stamp(provenance: dict) -> dict:
    """Add the generator-input fingerprint and the artifact version."""
    blob = json.dumps(provenance, sort_keys=True, separators=(",", ":"))
    return {**provenance, "fingerprint": hashlib.sha256(blob.encode()).hexdigest()[:16],
            "artifact_version": __version__}


def make_start_state_suite(ranker: QNetwork, seed: int, env_cfg: catch.EnvConfig,
                           params: SuiteParams = SuiteParams(), episode_cap: int = 200) -> EvalSuite:
    seqs = generate_start_sequences(ranker, new_stream("suite", seed), env_cfg, params)
    provenance = _stamp({"seed": seed, "params": params.to_dict(),
                         "ranker_hash": format_hash(weight_hash(ranker)), "env": env_cfg.to_dict()})
    return EvalSuite(START_STATES, seqs, episode_cap, provenance)


def make_sticky_suite(seed: int, n: int = 100, episode_cap: int = 200) -> EvalSuite:
    """``n`` per-episode sticky seeds drawn from one stream."""
    stream = new_stream("suite", seed)
    seeds = [stream.next_u64() for _ in range(n)]
    return EvalSuite(STICKY_SEEDS, seeds, episode_cap, _stamp({"seed": seed, "n": n}))


@dataclass
class EvalResult:
    scores: list[float]
    trajectories: list[list[dict]] | None = None

    @property
    def mean(self) -> float:
        return float(statistics.mean(self.scores))

    @property
    def std(self) -> float:
        return float(statistics.stdev(self.scores)) if len(self.scores) > 1 else 0.0


class _Episode:
    __slots__ = ("state", "score", "done", "sticky", "records")

    def __init__(self, state, sticky=None, record=False):
        self.state = state
        self.score = 0.0
        self.done = False
        self.sticky = sticky
        self.records = [] if record else None

    def act(self, action, cap):
        if self.sticky is not None:
            nxt, reward, terminal, executed = self.sticky(self.state, action)
        else:
            nxt, reward, terminal = catch.step(self.state, action)
            executed = action
        if self.records is not None:
            self.records.append(catch.trajectory_record(self.state, action, executed,
                                                        reward, terminal))
        self.state = nxt
        self.score += reward
        self.done = terminal or nxt.t >= cap


def evaluate(net: QNetwork, suite: EvalSuite, env_cfg: catch.EnvConfig,
             record: bool = False) -> EvalResult:
    """Greedy evaluation, one episode per suite entry, scores in suite order.

    Forward passes always use the deterministic reduction order.  The score
    of an episode includes any reward earned during its start sequence.
    """
    stochastic = env_cfg.sticky_p > 0
    if stochastic != (suite.kind == STICKY_SEEDS):
        raise SuiteMismatchError(
            f"suite kind {suite.kind!r} does not fit an environment with sticky_p={env_cfg.sticky_p}")

    cap = suite.episode_cap
    episodes = []
    for j, entry in enumerate(suite.entries):
        if suite.kind == START_STATES:
            ep = _Episode(catch.reset(env_cfg, EVAL_EPISODE_BASE + entry.layout), record=record)
            for a in entry.actions:
                if ep.done:
                    break
                ep.act(a, cap)
        else:
            sticky = catch.StickyActions(catch.step, env_cfg.sticky_p,
                                         new_stream("sticky", entry))
            ep = _Episode(catch.reset(env_cfg, EVAL_EPISODE_BASE + j), sticky, record)
        episodes.append(ep)

    while True:
        live = [ep for ep in episodes if not ep.done]
        if not live:
            break
        q = forward(net, np.stack([catch.featurize(ep.state) for ep in live]))
        for ep, row in zip(live, q):
            ep.act(int(np.argmax(row)), cap)

    trajectories = [ep.records for ep in episodes] if record else None
    return EvalResult([ep.score for ep in episodes], trajectories)


def per_start_state_curve(log) -> list[list[tuple[int, float]]]:
    """One ``(step, score)`` series per suite entry, across a run's evaluations."""
    evals = log.evaluations
    if not evals:
        return []
    n = len(evals[0].scores)
    return [[(e.step, e.scores[i]) for e in evals] for i in range(n)]
