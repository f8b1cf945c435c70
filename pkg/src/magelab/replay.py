"""FIFO replay buffer of real transitions."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .envs import Transition


class EmptyBufferError(LookupError):
    pass


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, obs_dim))
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.cursor = 0

    def __len__(self):
        return self.size

    def push(self, t: Transition) -> None:
        i = self.cursor
        self.s[i] = t.s
        self.a[i] = t.a
        self.r[i] = t.r
        self.s_next[i] = t.s_next
        self.terminal[i] = t.terminal
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise EmptyBufferError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, size=n)

    def sample_arrays(self, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        idx = self._indices(n, rng)
        return {"s": self.s[idx], "a": self.a[idx], "r": self.r[idx],
                "s_next": self.s_next[idx], "terminal": self.terminal[idx]}

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        b = self.sample_arrays(n, rng)
        return [Transition(b["s"][i], b["a"][i], float(b["r"][i]), b["s_next"][i], bool(b["terminal"][i]))
                for i in range(n)]

    def sample_states(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.s[self._indices(n, rng)]

    def ordered(self) -> dict[str, np.ndarray]:
        """Stored transitions, oldest first."""
        if self.size < self.capacity:
            order = np.arange(self.size)
        else:
            order = (np.arange(self.capacity) + self.cursor) % self.capacity
        return {"s": self.s[order], "a": self.a[order], "r": self.r[order],
                "s_next": self.s_next[order], "terminal": self.terminal[order]}

    def dump_csv(self, path: str | Path) -> None:
        data = self.ordered()
        obs_dim, act_dim = self.s.shape[1], self.a.shape[1]
        header = ([f"s{i}" for i in range(obs_dim)] + [f"a{i}" for i in range(act_dim)] + ["r"]
                  + [f"s_next{i}" for i in range(obs_dim)] + ["terminal"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(self.size):
                w.writerow([f"{x:.17g}" for x in data["s"][i]] + [f"{x:.17g}" for x in data["a"][i]]
                           + [f"{data['r'][i]:.17g}"] + [f"{x:.17g}" for x in data["s_next"][i]]
                           + [int(data["terminal"][i])])
