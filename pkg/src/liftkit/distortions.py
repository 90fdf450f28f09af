"""Movement distortions f(s, a, W), their context samplers and placement-error constants."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import RngStream, as_vec, block_rotation, clip_interval

KINDS = ("identity", "blend", "rot", "scale", "regrot", "sin", "sqrt")

DEFAULT_SIGMA = {
    "identity": 0.0,
    "blend": 0.2,
    "rot": 0.5,
    "scale": 0.0,
    "regrot": 0.2,
    "sin": 0.3,
    "sqrt": 0.2,
}
REGROT_MEANS = (-0.3, 0.6, -0.3, 0.6)


@dataclass(frozen=True)
class DistortionSpec:
    """Which distortion to apply and its parameters.

    ``sigma=None`` selects the per-kind default noise scale and
    ``scale_floor=None`` selects ``lam / 4``.
    """

    kind: str = "identity"
    sigma: float | None = None
    scale_floor: float | None = None
    region_means: tuple[float, ...] = REGROT_MEANS
    lam: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distortion kind {self.kind!r}; expected one of {KINDS}")
        if self.sigma is None:
            object.__setattr__(self, "sigma", DEFAULT_SIGMA[self.kind])
        if self.scale_floor is None:
            object.__setattr__(self, "scale_floor", self.lam / 4.0)
        object.__setattr__(self, "region_means", tuple(float(m) for m in self.region_means))
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if not 0 < self.scale_floor < self.lam:
            raise ValueError("need 0 < scale_floor < lam")
        if self.kind == "regrot" and len(self.region_means) != 4:
            raise ValueError("regrot needs exactly 4 region means")


@dataclass(frozen=True)
class Context:
    """Per-episode latent distortion parameter.

    ``payload`` is a d x d matrix (blend, sqrt), a scalar angle (rot), four
    angles (regrot), a scalar (sin) or empty (identity, scale).
    ``matrices`` caches the linear maps derived from the payload.
    """

    kind: str
    payload: np.ndarray
    matrices: tuple = field(default=(), compare=False, repr=False)

    def __eq__(self, other):
        return (
            isinstance(other, Context)
            and self.kind == other.kind
            and np.array_equal(self.payload, other.payload)
        )

    def __hash__(self):
        return hash((self.kind, self.payload.tobytes()))


def make_context(kind: str, payload, d: int) -> Context:
    """Build a context (with cached matrices) from a raw payload."""
    payload = np.array(payload, dtype=np.float64)
    if not np.all(np.isfinite(payload)):
        raise ValueError("context payload must be finite")
    if kind in ("blend", "sqrt"):
        if payload.shape != (d, d):
            raise ValueError(f"{kind} context must be a {d}x{d} matrix")
        mats = (np.eye(d) + payload,)
    elif kind == "rot":
        payload = payload.reshape(())
        mats = (block_rotation(d, float(payload)),)
    elif kind == "regrot":
        if payload.shape != (4,):
            raise ValueError("regrot context must hold 4 angles")
        mats = tuple(block_rotation(d, float(w)) for w in payload)
    elif kind == "sin":
        payload = payload.reshape(())
        mats = ()
    elif kind in ("identity", "scale"):
        if payload.size != 0:
            raise ValueError(f"{kind} context carries no payload")
        payload = np.zeros(0)
        mats = ()
    else:
        raise ValueError(f"unknown distortion kind {kind!r}")
    return Context(kind, payload, mats)


def sample_context(spec: DistortionSpec, d: int, rng: RngStream) -> Context:
    if d < 1:
        raise ValueError("dimension must be >= 1")
    sigma = spec.sigma
    if spec.kind in ("blend", "sqrt"):
        payload = rng.normal(0.0, 1.0, size=(d, d)) * sigma
    elif spec.kind == "rot":
        payload = sigma * rng.normal()
    elif spec.kind == "regrot":
        payload = np.asarray(spec.region_means) + sigma * rng.normal(size=4)
    elif spec.kind == "sin":
        payload = sigma * rng.random()
    else:
        payload = np.zeros(0)
    return make_context(spec.kind, payload, d)


def region_index(s: np.ndarray) -> int:
    """Quadrant of the first two coordinates, 0..3.  Zero counts as non-negative."""
    if s.shape[0] < 2:
        raise ValueError("region lookup needs at least two coordinates")
    return (0 if s[0] >= 0.0 else 1) + (0 if s[1] >= 0.0 else 2)


def apply(spec: DistortionSpec, s, a, W: Context, s_W) -> np.ndarray:
    """Position reached by commanding action ``a`` at ``s`` under context ``W``."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if s.shape != a.shape or s.ndim != 1:
        raise ValueError(f"dimension mismatch: s{s.shape} vs a{a.shape}")
    if W.kind != spec.kind:
        raise ValueError(f"context kind {W.kind!r} does not match distortion {spec.kind!r}")
    kind = spec.kind
    if kind == "identity":
        return s + a
    if kind in ("blend", "rot"):
        return s + W.matrices[0] @ a
    if kind == "scale":
        dist = float(np.linalg.norm(s - np.asarray(s_W, dtype=np.float64)))
        return s + clip_interval(dist, spec.scale_floor, spec.lam) * a
    if kind == "regrot":
        return s + W.matrices[region_index(s)] @ a
    if kind == "sin":
        return s + a + float(W.payload) * np.sin(s) * np.cos(s) * float(np.linalg.norm(a))
    if kind == "sqrt":
        return s + W.matrices[0] @ (math.sqrt(float(np.linalg.norm(a))) * a)
    raise ValueError(f"unknown distortion kind {kind!r}")


def lpe_constant(spec: DistortionSpec, d: int) -> float:
    """Proven linear placement-error constant; ``inf`` when none exists."""
    kind = spec.kind
    if kind in ("identity", "blend", "rot"):
        return 0.0
    if kind == "scale":
        return 2.0 * spec.lam
    if kind == "regrot":
        return 2.0
    if kind == "sin":
        return spec.sigma * math.sqrt(d)
    return math.inf


def lpe_ratio(spec: DistortionSpec, s0, actions, W: Context, s_W) -> tuple[float, float, np.ndarray]:
    """Placement gap of one action chain.

    Returns ``(gap, path_length, states)`` where ``gap`` is
    ``|f(s0, sum(a), W) - s_k|`` and ``states`` holds ``s_0..s_k``.
    """
    states = [as_vec(s0, "s0")]
    for a in actions:
        states.append(apply(spec, states[-1], a, W, s_W))
    total = np.sum(np.asarray(actions), axis=0)
    jump = apply(spec, states[0], total, W, s_W)
    gap = float(np.linalg.norm(jump - states[-1]))
    path = float(sum(np.linalg.norm(a) for a in actions))
    return gap, path, np.asarray(states + [jump])


def estimate_lpe_ratio(
    spec: DistortionSpec,
    d: int,
    n_chains: int,
    chain_len: int,
    rng: RngStream,
    half_width: float = 1.0,
    max_tries: int = 1000,
) -> float:
    """Largest observed ``gap / path_length`` over random action chains.

    Chains whose intermediate states (or the single-jump landing) leave the
    box ``[-half_width, half_width]^d`` are redrawn.
    """
    worst = 0.0
    for c in range(n_chains):
        stream = rng.child("chain", c)
        for _ in range(max_tries):
            W = sample_context(spec, d, stream)
            s_W = stream.uniform(-half_width / 2, half_width / 2, size=d)
            s0 = stream.uniform(-half_width, half_width, size=d)
            radius = spec.lam * stream.random()
            actions = stream.ball(d, max(radius, 1e-12), size=chain_len)
            gap, path, states = lpe_ratio(spec, s0, actions, W, s_W)
            if np.all(np.abs(states) <= half_width):
                break
        else:
            continue
        if path < 1e-9:
            continue
        worst = max(worst, gap / path)
    return worst
