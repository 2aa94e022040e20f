"""Exact finite POMDPs and tabular policies."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ROW_TOL = 1e-12


@dataclass
class TabularPOMDP:
    """Finite POMDP ``(S, A, X, R, T, U, gamma)`` with initial distribution ``mu0``.

    T: (S, A, S) transition rows, U: (S, X) observation rows, R: (S, A) rewards.
    """

    T: np.ndarray
    U: np.ndarray
    R: np.ndarray
    mu0: np.ndarray
    gamma: float = 0.9

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=np.float64)
        self.U = np.asarray(self.U, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.mu0 = np.asarray(self.mu0, dtype=np.float64)
        S, A = self.R.shape
        if self.T.shape != (S, A, S) or self.U.shape[0] != S or self.mu0.shape != (S,):
            raise ValueError("inconsistent array shapes")
        for name, arr in (("T", self.T), ("U", self.U), ("mu0", self.mu0)):
            if np.any(arr < 0):
                raise ValueError(f"{name} has negative entries")
            if np.any(np.abs(arr.sum(-1) - 1.0) > ROW_TOL):
                raise ValueError(f"{name} rows must sum to 1")
        if np.any(self.R < 0):
            raise ValueError("rewards must be nonnegative")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")

    @property
    def S(self) -> int:
        return self.T.shape[0]

    @property
    def A(self) -> int:
        return self.T.shape[1]

    @property
    def X(self) -> int:
        return self.U.shape[1]

    @property
    def r_max(self) -> float:
        return float(self.R.max())

    def with_transitions(self, T) -> TabularPOMDP:
        return TabularPOMDP(T=T, U=self.U, R=self.R, mu0=self.mu0, gamma=self.gamma)

    def to_json(self) -> str:
        return json.dumps({"T": self.T.tolist(), "U": self.U.tolist(), "R": self.R.tolist(),
                           "mu0": self.mu0.tolist(), "gamma": self.gamma})

    @classmethod
    def from_json(cls, text: str) -> TabularPOMDP:
        d = json.loads(text)
        return cls(T=d["T"], U=d["U"], R=d["R"], mu0=d["mu0"], gamma=d.get("gamma", 0.9))

    @classmethod
    def load(cls, path) -> TabularPOMDP:
        return cls.from_json(Path(path).read_text())


def _dirichlet_rows(rng, shape) -> np.ndarray:
    """Uniform rows on the simplex, renormalized so each sums to 1 exactly enough."""
    rows = rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])
    return rows / rows.sum(-1, keepdims=True)


def random_tabular_pomdp(sizes: tuple[int, int, int], seed: int, gamma: float = 0.9) -> TabularPOMDP:
    """Random POMDP with Dirichlet(1, ..., 1) rows and Uniform[0, 1] rewards.

    ``sizes`` is (S, A, X).
    """
    S, A, X = sizes
    rng = np.random.default_rng(seed)
    return TabularPOMDP(
        T=_dirichlet_rows(rng, (S, A, S)),
        U=_dirichlet_rows(rng, (S, X)),
        R=rng.uniform(0.0, 1.0, (S, A)),
        mu0=_dirichlet_rows(rng, (S,)),
        gamma=gamma,
    )


def random_state_policy(S: int, A: int, rng: np.random.Generator) -> np.ndarray:
    return _dirichlet_rows(rng, (S, A))


class HistoryPolicy:
    """Action distributions indexed by history.

    Histories of length t (observations ``x_0..x_t``, actions ``a_0..a_{t-1}``)
    are enumerated in a canonical mixed-radix order; ``tables[t]`` has one row
    per history in that order. The same order is used by
    :func:`vmail.tabular_verify.trajectory_law`.
    """

    def __init__(self, tables: list[np.ndarray]):
        self.tables = [np.asarray(t, dtype=np.float64) for t in tables]
        for t in self.tables:
            if np.any(t < 0) or np.any(np.abs(t.sum(-1) - 1.0) > 1e-12):
                raise ValueError("history policy rows must be distributions")

    @property
    def horizon(self) -> int:
        return len(self.tables)

    def probs(self, t: int) -> np.ndarray:
        return self.tables[t]

    @classmethod
    def random(cls, X: int, A: int, horizon: int, rng: np.random.Generator) -> HistoryPolicy:
        return cls([_dirichlet_rows(rng, (X * (X * A) ** t, A)) for t in range(horizon)])

    @classmethod
    def reactive(cls, obs_policy: np.ndarray, X: int, horizon: int) -> HistoryPolicy:
        """Policy that looks only at the latest observation; ``obs_policy`` is (X, A)."""
        A = obs_policy.shape[1]
        # the latest observation is the fastest-varying digit of the history index
        return cls([np.tile(obs_policy, ((X * A) ** t, 1)) for t in range(horizon)])

    @classmethod
    def constant(cls, dist: np.ndarray, X: int, horizon: int) -> HistoryPolicy:
        A = len(dist)
        return cls([np.tile(dist, (X * (X * A) ** t, 1)) for t in range(horizon)])
