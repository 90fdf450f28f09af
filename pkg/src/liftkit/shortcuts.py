"""Shortcut extraction from logged trajectories.

Rewards follow ``r_i = -|s_{i+1} - s_W|``: the reward of step ``i`` is the
negative distance after landing, so ``r_{j-1}`` is the reward of arriving at
``s_j``.  A candidate ``(i, j)`` pairs the observation ``o_i`` with the summed
actions ``a_i + ... + a_{j-1}`` and keeps the logged ``r_{j-1}`` and ``o_j``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import RngStream
from .environment import Trajectory

STRATEGIES = ("weighted", "inverse_distance", "uniform", "best")
_EPS = 8 * np.finfo(np.float64).eps


@dataclass(frozen=True)
class ShortcutConfig:
    C: float = 0.0
    strategy: str = "weighted"
    max_per_trajectory: int = 20
    gamma: float = 0.99
    lam: float = 1.0

    def __post_init__(self):
        if self.C < 0:
            raise ValueError("C must be non-negative")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.max_per_trajectory < 1:
            raise ValueError("max_per_trajectory must be >= 1")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")


@dataclass
class ShortcutTuple:
    i: int
    j: int
    o_i: np.ndarray
    a_hat: np.ndarray
    r: float
    o_j: np.ndarray
    weight: float = 0.0

    def __eq__(self, other):
        if not isinstance(other, ShortcutTuple):
            return NotImplemented
        return (
            (self.i, self.j, self.r, self.weight) == (other.i, other.j, other.r, other.weight)
            and np.array_equal(self.o_i, other.o_i)
            and np.array_equal(self.a_hat, other.a_hat)
            and np.array_equal(self.o_j, other.o_j)
        )


def returns(trajectory, gamma: float) -> np.ndarray:
    """Discounted returns-to-go ``G_i = r_i + gamma * G_{i+1}``.

    Accepts a :class:`Trajectory` or a plain sequence of rewards.
    """
    rewards = trajectory.rewards if isinstance(trajectory, Trajectory) else np.asarray(trajectory, dtype=np.float64)
    if rewards.shape[0] == 0:
        raise ValueError("returns of an empty trajectory are undefined")
    G = np.empty_like(rewards)
    acc = 0.0
    for k in range(rewards.shape[0] - 1, -1, -1):
        acc = rewards[k] + gamma * acc
        G[k] = acc
    return G


def candidate_set(
    trajectory: Trajectory,
    i: int,
    cfg: ShortcutConfig,
    G: np.ndarray | None = None,
    stats: dict | None = None,
) -> list[ShortcutTuple]:
    """All ``j > i`` whose accumulated action passes the threshold test and fits in the action ball.

    Single pass over ``j`` with running sums.  The value gap is compared with
    an allowance of a few ulps of its terms, because for ``j = i + 1`` it is
    exactly zero in real arithmetic but the backward recursion can round it
    to a tiny negative number.  ``stats["inner_steps"]`` counts loop
    iterations when a dict is supplied.
    """
    trs = trajectory.transitions
    n = len(trs) - 1
    if not 0 <= i < n:
        raise IndexError(f"source index {i} out of range for a trajectory with last index {n}")
    if G is None:
        G = returns(trajectory, cfg.gamma)
    gamma, C = cfg.gamma, cfg.C
    out = []
    a_hat = np.zeros_like(trs[i].action)
    path = 0.0
    for j in range(i + 1, n + 1):
        a_prev = trs[j - 1].action
        a_hat = a_hat + a_prev
        path += float(np.linalg.norm(a_prev))
        r = trs[j - 1].reward
        if stats is not None:
            stats["inner_steps"] = stats.get("inner_steps", 0) + 1
        gap = gamma * G[j] - G[i] + r
        ulps = _EPS * (abs(gamma * G[j]) + abs(G[i]) + abs(r))
        if gap + ulps >= C * path and float(np.linalg.norm(a_hat)) <= cfg.lam + 1e-9:
            out.append(ShortcutTuple(i, j, trs[i].obs, a_hat.copy(), float(r), trs[j].obs))
    return out


def shortcut_masses(S: list[ShortcutTuple], strategy: str) -> np.ndarray:
    r_hat = np.array([t.r for t in S], dtype=np.float64)
    if strategy == "weighted":
        mass = r_hat - r_hat.min()
        if not mass.sum() > 0:
            mass = np.ones_like(r_hat)
    elif strategy == "inverse_distance":
        mass = 1.0 / np.maximum(-r_hat, 1e-9)
    elif strategy == "uniform":
        mass = np.ones_like(r_hat)
    elif strategy == "best":
        mass = np.zeros_like(r_hat)
        mass[int(np.argmax(r_hat))] = 1.0  # argmax returns the first maximiser
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return mass / mass.sum()


def sample_shortcut(S: list[ShortcutTuple], strategy: str, rng: RngStream) -> ShortcutTuple | None:
    if not S:
        return None
    p = shortcut_masses(S, strategy)
    if strategy == "best":
        k = int(np.argmax(p))
    else:
        k = rng.choice(len(S), p=p)
    return replace(S[k], weight=float(p[k]))


def shortcut_tuples(trajectory: Trajectory, cfg: ShortcutConfig, rng: RngStream) -> list[ShortcutTuple]:
    """Up to ``cfg.max_per_trajectory`` sampled shortcuts, one per distinct source index."""
    n = len(trajectory) - 1
    if n < 1:
        return []
    G = returns(trajectory, cfg.gamma)
    out = []
    for i in rng.permutation(n):
        picked = sample_shortcut(candidate_set(trajectory, int(i), cfg, G), cfg.strategy, rng)
        if picked is not None:
            out.append(picked)
            if len(out) == cfg.max_per_trajectory:
                break
    return out


def tuple_record(ep: int, t: ShortcutTuple) -> dict:
    return {
        "type": "shortcut",
        "ep": ep,
        "i": t.i,
        "j": t.j,
        "o_i": t.o_i,
        "a_hat": t.a_hat,
        "r": t.r,
        "o_j": t.o_j,
        "weight": t.weight,
        "augmented": True,
    }
