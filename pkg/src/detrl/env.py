"""Catch: a paddle on the bottom row catches balls falling one row per step.

The raw environment is a pure function of ``(EnvConfig, episode_index,
actions)``.  Two optional mechanisms inject randomness, each through its own
stream: sticky actions (:class:`StickyActions`) and no-op starts
(:func:`noop_start`).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from detrl.rng import RandomStream, derive_seed, new_stream

LEFT, STAY, RIGHT = 0, 1, 2
ACTIONS = (LEFT, STAY, RIGHT)
N_ACTIONS = len(ACTIONS)
_MOVES = (-1, 0, 1)


class EpisodeOverError(RuntimeError):
    """Raised when stepping a terminal state."""


@dataclass(frozen=True)
class EnvConfig:
    grid_w: int = 10
    grid_h: int = 10
    sticky_p: float = 0.0
    max_noops: int | None = None  # None -> grid_h - 2
    episode_len: int = 10
    env_instance_seed: int = 7

    def __post_init__(self):
        if self.grid_w < 1 or self.grid_h < 3:
            raise ValueError("grid must be at least 1 wide and 3 tall")
        if not 0.0 <= self.sticky_p <= 1.0:
            raise ValueError(f"sticky_p must lie in [0, 1], got {self.sticky_p}")
        if self.episode_len < 1:
            raise ValueError("episode_len must be positive")
        if self.max_noops is not None and not 0 <= self.max_noops < self.grid_h - 1:
            raise ValueError(f"max_noops must lie in [0, {self.grid_h - 2}] so no ball is lost")

    @property
    def noops(self) -> int:
        return self.grid_h - 2 if self.max_noops is None else self.max_noops

    @property
    def feature_size(self) -> int:
        return self.grid_w * self.grid_h + self.grid_w

    @property
    def max_score(self) -> float:
        return float(self.episode_len)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        return cls(**d)


@dataclass(frozen=True)
class CatchState:
    grid_w: int
    grid_h: int
    ball_col: int
    ball_row: int
    paddle_col: int
    balls_elapsed: int = 0
    t: int = 0
    columns: tuple[int, ...] = field(default=(), repr=False)
    terminal: bool = False

    def as_dict(self) -> dict:
        return {"ball_col": self.ball_col, "ball_row": self.ball_row,
                "paddle_col": self.paddle_col, "balls_elapsed": self.balls_elapsed,
                "t": self.t, "terminal": self.terminal}


def ball_columns(cfg: EnvConfig, episode_index: int) -> tuple[int, ...]:
    stream = new_stream("env_instance", derive_seed(cfg.env_instance_seed, episode_index))
    return tuple(stream.next_int(cfg.grid_w) for _ in range(cfg.episode_len))


def reset(cfg: EnvConfig, episode_index: int) -> CatchState:
    cols = ball_columns(cfg, episode_index)
    return CatchState(cfg.grid_w, cfg.grid_h, ball_col=cols[0], ball_row=0,
                      paddle_col=cfg.grid_w // 2, columns=cols)


def step(state: CatchState, action: int) -> tuple[CatchState, float, bool]:
    if state.terminal:
        raise EpisodeOverError("step called on a terminal state")
    if action not in ACTIONS:
        raise ValueError(f"invalid action {action!r}")
    paddle = min(max(state.paddle_col + _MOVES[action], 0), state.grid_w - 1)
    row = state.ball_row + 1
    if row < state.grid_h - 1:
        return replace(state, ball_row=row, paddle_col=paddle, t=state.t + 1), 0.0, False
    reward = 1.0 if state.ball_col == paddle else -1.0
    elapsed = state.balls_elapsed + 1
    if elapsed == len(state.columns):
        nxt = replace(state, ball_row=row, paddle_col=paddle, balls_elapsed=elapsed,
                      t=state.t + 1, terminal=True)
        return nxt, reward, True
    nxt = replace(state, ball_col=state.columns[elapsed], ball_row=0, paddle_col=paddle,
                  balls_elapsed=elapsed, t=state.t + 1)
    return nxt, reward, False


StepFn = Callable[[CatchState, int], tuple[CatchState, float, bool]]


class StickyActions:
    """Repeat the previously executed action with probability ``p``.

    Exactly one uniform is drawn on every call, including the first call of
    an episode, where the chosen action is always executed.  Call
    :meth:`reset` at the start of each episode.
    """

    def __init__(self, step_fn: StepFn, sticky_p: float, stream: RandomStream):
        if not 0.0 <= sticky_p <= 1.0:
            raise ValueError(f"sticky_p must lie in [0, 1], got {sticky_p}")
        self.step_fn = step_fn
        self.sticky_p = sticky_p
        self.stream = stream
        self.prev_action = None
        self.n_steps = 0
        self.n_repeats = 0

    def reset(self) -> None:
        self.prev_action = None

    def __call__(self, state: CatchState, action: int):
        """Returns ``(next_state, reward, terminal, executed_action)``."""
        u = self.stream.next_uniform()
        executed = action
        if self.prev_action is not None and u < self.sticky_p:
            executed = self.prev_action
            self.n_repeats += 1
        self.n_steps += 1
        self.prev_action = executed
        nxt, reward, terminal = self.step_fn(state, executed)
        return nxt, reward, terminal, executed


def sticky_wrap(step_fn: StepFn, sticky_p: float, sticky_stream: RandomStream) -> StickyActions:
    return StickyActions(step_fn, sticky_p, sticky_stream)


def noop_start(reset_fn: Callable[[], CatchState], step_fn: StepFn, max_noops: int,
               noop_stream: RandomStream) -> CatchState:
    """Reset, then apply ``k ~ U{0..max_noops}`` Stay actions."""
    state = reset_fn()
    k = noop_stream.next_int(max_noops + 1)
    for _ in range(k):
        state, _, terminal = step_fn(state, STAY)[:3]
        if terminal:
            raise EpisodeOverError("no-op start terminated the episode")
    return state


def featurize(state: CatchState) -> np.ndarray:
    """One-hot ball cell followed by one-hot paddle column (float32)."""
    w, h = state.grid_w, state.grid_h
    x = np.zeros(w * h + w, dtype=np.float32)
    x[state.ball_row * w + state.ball_col] = 1.0
    x[w * h + state.paddle_col] = 1.0
    return x


def trajectory_record(state: CatchState, chosen: int, executed: int, reward: float,
                      terminal: bool) -> dict:
    return {"t": state.t, "state": state.as_dict(), "chosen_action": chosen,
            "executed_action": executed, "reward": reward, "terminal": terminal}


def write_trajectory(records, path) -> None:
    """JSON-lines trajectory dump, one record per step."""
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
