"""Logging policies, collection-time action perturbations and episode rollouts."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from . import environment as env
from .core import RngStream, clip_ball
from .environment import EnvConfig, EpisodeState, Trajectory

POLICY_KINDS = ("coordinate_walk", "direct", "noisy_coordinate_walk", "uniform_random")
PERTURBATIONS = ("gaussian_noise", "random_scale", "uniform")


@dataclass(frozen=True)
class PolicySpec:
    kind: str = "coordinate_walk"
    l0: float = 0.2
    sigma: float = 0.0
    reduction: float = 0.5
    l_min: float | None = None  # None -> theta / 4

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}; expected one of {POLICY_KINDS}")
        if not self.l0 > 0:
            raise ValueError("l0 must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not 0 < self.reduction < 1:
            raise ValueError("reduction must lie in (0, 1)")


class Policy:
    """Base class.  Policies act on ``delta = s_W - s`` and may carry state."""

    deterministic = True

    def act(self, delta: np.ndarray, lam: float) -> np.ndarray:
        raise NotImplementedError

    def reset(self) -> None:
        pass


class DirectPolicy(Policy):
    """Largest admissible step straight at the target."""

    def act(self, delta, lam):
        return clip_ball(delta, lam)

    def __eq__(self, other):
        return type(other) is DirectPolicy


class CoordinateWalk(Policy):
    """Optimise one coordinate at a time with a step size that shrinks each sweep.

    While the active coordinate's residual exceeds the step size ``l`` a full
    step of length ``l`` is taken; otherwise the residual itself is applied and
    the walk moves to the next axis.  After every full sweep ``l`` is
    multiplied by ``reduction`` (floored at ``l_min``).
    """

    def __init__(self, l0: float, d: int, reduction: float = 0.5, l_min: float = 0.0125):
        if not l0 > 0 or d < 1:
            raise ValueError("need l0 > 0 and d >= 1")
        self.l0 = float(l0)
        self.d = int(d)
        self.reduction = float(reduction)
        self.l_min = float(min(l_min, l0))
        self.reset()

    def reset(self) -> None:
        self.l = self.l0
        self.axis = 0

    def state(self) -> tuple:
        return (self.l0, self.l, self.axis, self.reduction, self.l_min)

    def __eq__(self, other):
        return isinstance(other, CoordinateWalk) and self.state() == other.state()

    def _advance(self) -> None:
        self.axis += 1
        if self.axis == self.d:
            self.axis = 0
            self.l = max(self.l * self.reduction, self.l_min)

    def act(self, delta, lam):
        delta = np.asarray(delta, dtype=np.float64)
        # skip axes that are already matched so no zero-length step is emitted
        for _ in range(self.d):
            if delta[self.axis] != 0.0:
                break
            self._advance()
        action = np.zeros(self.d)
        k = self.axis
        if abs(delta[k]) > self.l:
            action[k] = math.copysign(self.l, delta[k])
        else:
            action[k] = delta[k]
            self._advance()
        return clip_ball(action, lam)


class NoisyCoordinateWalk(CoordinateWalk):
    deterministic = False

    def __init__(self, l0, d, sigma, rng: RngStream, reduction=0.5, l_min=0.0125):
        super().__init__(l0, d, reduction, l_min)
        self.sigma = float(sigma)
        self.rng = rng

    def act(self, delta, lam):
        a = super().act(delta, lam)
        return clip_ball(a + self.rng.normal(0.0, self.sigma, size=self.d), lam)


class UniformRandomPolicy(Policy):
    deterministic = False

    def __init__(self, d: int, rng: RngStream):
        self.d = d
        self.rng = rng

    def act(self, delta, lam):
        return self.rng.ball(self.d, lam)


def make_policy(spec: PolicySpec, config: EnvConfig, rng: RngStream | None = None) -> Policy:
    l_min = spec.l_min if spec.l_min is not None else config.theta / 4
    if spec.kind == "direct":
        return DirectPolicy()
    if spec.kind == "coordinate_walk":
        return CoordinateWalk(spec.l0, config.d, spec.reduction, l_min)
    if rng is None:
        raise ValueError(f"policy kind {spec.kind!r} needs a random stream")
    if spec.kind == "noisy_coordinate_walk":
        return NoisyCoordinateWalk(spec.l0, config.d, spec.sigma, rng, spec.reduction, l_min)
    return UniformRandomPolicy(config.d, rng)


def delta_from_obs(config: EnvConfig, obs: np.ndarray) -> np.ndarray:
    """Displacement ``s_W - s`` recovered from an observation.

    Position observations are only valid with the target fixed at the origin,
    and difference observations are ``s - s_W``; both give ``-obs``.
    """
    return -np.asarray(obs, dtype=np.float64)


def perturb_action(a, kind: str, sigma: float, lam: float, rng: RngStream) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if kind == "gaussian_noise":
        out = a + rng.normal(0.0, sigma, size=a.shape[0]) if sigma > 0 else a.copy()
    elif kind == "random_scale":
        out = a * (2.0 * math.exp(rng.normal(0.0, sigma))) if sigma > 0 else 2.0 * a
    elif kind == "uniform":
        out = rng.ball(a.shape[0], lam)
    else:
        raise ValueError(f"unknown perturbation {kind!r}; expected one of {PERTURBATIONS}")
    return clip_ball(out, lam)


def run_episode(
    config: EnvConfig,
    policy: Policy,
    rng: RngStream,
    episode: int = 0,
    perturbation: tuple[str, float] | None = None,
    record: list | None = None,
) -> Trajectory:
    """Roll out ``policy`` for one episode drawn from ``rng``.

    ``perturbation=(kind, sigma)`` applies a baseline collection-time
    perturbation to every action.  If ``record`` is a list, the pre-step
    ``(state, policy)`` snapshots are appended to it.
    """
    state, obs = env.reset(config, rng.child("reset"))
    policy.reset()
    noise = rng.child("perturb")
    transitions = []
    while not state.done:
        if record is not None:
            record.append((env.snapshot(state), copy.deepcopy(policy)))
        a = policy.act(delta_from_obs(config, obs), config.lam)
        if perturbation is not None:
            a = perturb_action(a, perturbation[0], perturbation[1], config.lam, noise)
        tr, obs = env.step(state, a, config)
        transitions.append(tr)
    return Trajectory(episode, transitions, state.W, state.s_W.copy())


def rollout_from(state: EpisodeState, policy: Policy, config: EnvConfig) -> list:
    """Continue ``state`` (in place) with ``policy`` until the episode ends."""
    transitions = []
    obs = env.observe(config, state.s, state.s_W)
    while not state.done:
        a = policy.act(delta_from_obs(config, obs), config.lam)
        tr, obs = env.step(state, a, config)
        transitions.append(tr)
    return transitions


def expertness_curve(
    spec: PolicySpec,
    config: EnvConfig,
    n_episodes: int,
    rng: RngStream,
    step_sizes=(0.0125, 0.025, 0.05, 0.1),
) -> list[tuple[float, float]]:
    """Mean episode length for each initial step size (paired episodes)."""
    table = []
    for l0 in step_sizes:
        lengths = []
        sub = PolicySpec(spec.kind, l0, spec.sigma, spec.reduction, spec.l_min)
        for ep in range(n_episodes):
            ep_rng = rng.child("episode", ep)
            policy = make_policy(sub, config, ep_rng.child("policy"))
            lengths.append(len(run_episode(config, policy, ep_rng, ep)))
        table.append((float(l0), float(np.mean(lengths))))
    return table
