"""Collocation sampling over a truncated (W, L, t) training box."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class TrainingBox:
    W_min: float = 0.1
    W_max: float = 5.0
    L_min: float = 0.01
    L_max: float = 2.0
    T: float = 1.0

    def __post_init__(self):
        if not 0 < self.W_min < self.W_max:
            raise ValueError(f"need 0 < W_min < W_max, got [{self.W_min}, {self.W_max}]")
        if not 0 <= self.L_min < self.L_max:
            raise ValueError(f"need 0 <= L_min < L_max, got [{self.L_min}, {self.L_max}]")
        if not self.T > 0:
            raise ValueError("T must be > 0")

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.W_min, self.L_min, 0.0])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.W_max, self.L_max, self.T])

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)

    def interior(self, margin: float = 0.1) -> "TrainingBox":
        """Sub-box shrunk by ``margin`` of the width on each W and L face."""
        dW = margin * (self.W_max - self.W_min)
        dL = margin * (self.L_max - self.L_min)
        return TrainingBox(self.W_min + dW, self.W_max - dW, self.L_min + dL, self.L_max - dL, self.T)


@dataclass
class CollocationBatch:
    interior: np.ndarray   # (n, 3) points (W, L, t)
    terminal: np.ndarray   # (m, 3) points with t = T
    seed: object
    tag: str = "uniform"   # "uniform" | "adaptive"

    def with_extra(self, extra: np.ndarray) -> "CollocationBatch":
        """Append adaptive interior points at equal weight."""
        if extra is None or len(extra) == 0:
            return self
        return CollocationBatch(np.vstack([self.interior, extra]), self.terminal, self.seed, "adaptive")


def make_rng(*key) -> np.random.Generator:
    """Counter-based generator: the same integer key always yields the same stream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def uniform_points(box: TrainingBox, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(box.lo, box.hi, size=(n, 3))


def sample_uniform(box: TrainingBox, n_interior: int, n_terminal: int, seed) -> CollocationBatch:
    """I.i.d. uniform interior points and terminal points on t = T.

    ``seed`` is an int or a tuple of ints (e.g. (run_seed, iteration, step)).
    """
    if n_interior < 1 or n_terminal < 1:
        raise ValueError("batch sizes must be >= 1")
    key = seed if isinstance(seed, tuple) else (seed,)
    rng = make_rng(*key)
    interior = uniform_points(box, n_interior, rng)
    terminal = uniform_points(box, n_terminal, rng)
    terminal[:, 2] = box.T
    return CollocationBatch(interior, terminal, seed)


def adaptive_resample(box: TrainingBox, residual_evaluator: Callable[[np.ndarray], np.ndarray],
                      pool_size: int, keep_k: int, seed) -> np.ndarray:
    """Return the ``keep_k`` pool points with the largest |residual|.

    Ties go to the lower pool index; points are distinct by construction.
    """
    if not pool_size >= keep_k >= 1:
        raise ValueError("need pool_size >= keep_k >= 1")
    key = seed if isinstance(seed, tuple) else (seed,)
    pool = uniform_points(box, pool_size, make_rng(*key))
    res = np.abs(np.asarray(residual_evaluator(pool), dtype=float))
    if res.shape != (pool_size,):
        raise ValueError(f"residual evaluator returned shape {res.shape}, expected ({pool_size},)")
    bad = np.flatnonzero(~np.isfinite(res))
    if bad.size:
        i = bad[0]
        raise FloatingPointError(f"non-finite residual at candidate {i}: point {pool[i].tolist()}")
    order = np.argsort(-res, kind="stable")
    return pool[order[:keep_k]]
