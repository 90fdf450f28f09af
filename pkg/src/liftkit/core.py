"""Shared numerics: ball/interval clipping, block rotations and splittable seeded streams."""

from __future__ import annotations

import hashlib
import math
from typing import Iterable, Union

import numpy as np

Label = Union[str, int]


def as_vec(v, name: str = "vector") -> np.ndarray:
    """Return ``v`` as a 1-D float64 array, rejecting NaN/Inf."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def clip_ball(v, lam: float) -> np.ndarray:
    """Radially project ``v`` onto the closed Euclidean ball of radius ``lam``."""
    if not lam > 0:
        raise ValueError(f"ball radius must be positive, got {lam}")
    v = as_vec(v)
    norm = float(np.linalg.norm(v))
    if norm <= lam:
        return v.copy()
    out = v * (lam / norm)
    # rounding in the division can leave the norm one ulp above lam
    while float(np.linalg.norm(out)) > lam:
        out = out * (1.0 - 2.0**-52)
    return out


def clip_interval(x: float, lo: float, hi: float) -> float:
    if not (0 < lo < hi):
        raise ValueError(f"need 0 < lo < hi, got lo={lo}, hi={hi}")
    if not math.isfinite(x):
        raise ValueError("clip_interval input must be finite")
    return min(max(float(x), lo), hi)


def rotation_2d(w: float) -> np.ndarray:
    c, s = math.cos(w), math.sin(w)
    return np.array([[c, -s], [s, c]])


def block_rotation(d: int, w: float) -> np.ndarray:
    """Block-diagonal matrix of 2x2 rotations by ``w`` on adjacent coordinate pairs.

    For odd ``d`` the trailing coordinate is left unchanged.
    """
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    out = np.eye(d)
    block = rotation_2d(w)
    for k in range(d // 2):
        out[2 * k : 2 * k + 2, 2 * k : 2 * k + 2] = block
    return out


def _derive_seed(seed: int, path: tuple) -> int:
    text = repr((int(seed),) + tuple(path))
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


class RngStream:
    """Deterministic random stream addressed by ``(seed, path)``.

    Children are derived by hashing the label path, so the draws of
    ``stream.child("episode", 7)`` do not depend on how much any sibling
    stream has been advanced.  A single instance is not thread-safe.
    """

    def __init__(self, seed: int, path: Iterable[Label] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen = np.random.Generator(np.random.PCG64(_derive_seed(self.seed, self.path)))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path!r})"

    def child(self, *labels: Label) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(labels))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def random(self) -> float:
        return float(self._gen.random())

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, p=None) -> int:
        return int(self._gen.choice(n, p=p))

    def ball(self, d: int, radius: float, size: int | None = None) -> np.ndarray:
        """Uniform sample(s) from the closed ``d``-dimensional ball of ``radius``."""
        m = 1 if size is None else size
        g = self._gen.normal(size=(m, d))
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        r = radius * self._gen.random((m, 1)) ** (1.0 / d)
        pts = g / norms * r
        pts = np.array([clip_ball(p, radius) for p in pts]) if np.any(
            np.linalg.norm(pts, axis=1) > radius
        ) else pts
        return pts[0] if size is None else pts
