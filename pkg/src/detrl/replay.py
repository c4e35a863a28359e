"""Fixed-capacity circular replay memory with seeded uniform sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from detrl.rng import RandomStream


class NotReadyError(RuntimeError):
    """The buffer holds fewer transitions than the requested batch."""


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool


class Batch(NamedTuple):
    indices: list[int]
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __len__(self):
        return len(self.indices)

    def transitions(self) -> list[Transition]:
        return [Transition(self.states[i], int(self.actions[i]), float(self.rewards[i]),
                           self.next_states[i], bool(self.terminals[i]))
                for i in range(len(self.indices))]


class ReplayBuffer:
    def __init__(self, capacity: int, state_size: int, n_actions: int | None = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.state_size = state_size
        self.n_actions = n_actions
        self.states = np.zeros((capacity, state_size), np.float32)
        self.next_states = np.zeros((capacity, state_size), np.float32)
        self.actions = np.zeros(capacity, np.int64)
        self.rewards = np.zeros(capacity, np.float32)
        self.terminals = np.zeros(capacity, bool)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, t: Transition) -> None:
        if len(t.state) != self.state_size or len(t.next_state) != self.state_size:
            raise ValueError("transition state width does not match the buffer")
        if self.n_actions is not None and not 0 <= t.action < self.n_actions:
            raise ValueError(f"action {t.action} out of range")
        i = self.cursor
        self.states[i] = t.state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.next_states[i] = t.next_state
        self.terminals[i] = t.terminal
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __getitem__(self, i: int) -> Transition:
        if not 0 <= i < self.size:
            raise IndexError(i)
        return Transition(self.states[i], int(self.actions[i]), float(self.rewards[i]),
                          self.next_states[i], bool(self.terminals[i]))

    def sample_indices(self, batch_size: int, stream: RandomStream) -> list[int]:
        """``batch_size`` slot indices, i.i.d. uniform, with replacement."""
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.size < batch_size:
            raise NotReadyError(f"buffer holds {self.size} transitions, batch needs {batch_size}")
        return [stream.next_int(self.size) for _ in range(batch_size)]

    def sample(self, batch_size: int, stream: RandomStream) -> Batch:
        idx = self.sample_indices(batch_size, stream)
        return Batch(idx, self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.terminals[idx])

    def dump(self, path) -> None:
        """JSON-lines dump of stored transitions in slot order."""
        with open(path, "w") as f:
            for i in range(self.size):
                t = self[i]
                f.write(json.dumps({
                    "slot": i,
                    "state": t.state.tolist(),
                    "action": t.action,
                    "reward": t.reward,
                    "next_state": t.next_state.tolist(),
                    "terminal": t.terminal,
                }) + "\n")
