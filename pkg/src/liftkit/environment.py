"""Episodic contextual positioning environment and the line-delimited dataset format."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import distortions
from .core import RngStream, as_vec
from .distortions import Context, DistortionSpec

FORMAT_VERSION = 1
OBSERVATIONS = ("position", "difference")
TARGET_MODES = ("fixed_origin", "random_per_episode")


@dataclass(frozen=True)
class EnvConfig:
    d: int = 2
    lam: float = 1.0
    theta: float = 0.05
    max_steps: int = 100
    gamma: float = 0.99
    distortion: DistortionSpec = field(default_factory=DistortionSpec)
    observation: str = "position"
    target_mode: str = "fixed_origin"
    half_width: float = 1.0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not 0 < self.theta < self.lam:
            raise ValueError("need 0 < theta < lam")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.half_width <= 0:
            raise ValueError("half_width must be positive")
        if self.observation not in OBSERVATIONS:
            raise ValueError(f"observation must be one of {OBSERVATIONS}")
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"target_mode must be one of {TARGET_MODES}")
        if self.observation == "position" and self.target_mode != "fixed_origin":
            raise ValueError("position observations require target_mode=fixed_origin")
        if self.distortion.lam != self.lam:
            raise ValueError("distortion.lam must equal the environment action radius lam")
        if self.distortion.kind == "regrot" and self.d < 2:
            raise ValueError("regrot needs d >= 2")

    @classmethod
    def build(cls, d: int = 2, distortion: str = "identity", lam: float = 1.0,
              sigma: float | None = None, scale_floor: float | None = None, **kw) -> "EnvConfig":
        spec = DistortionSpec(kind=distortion, sigma=sigma, scale_floor=scale_floor, lam=lam)
        return cls(d=d, lam=lam, distortion=spec, **kw)

    def digest(self) -> str:
        text = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class EpisodeState:
    s: np.ndarray
    W: Context
    s_W: np.ndarray
    t: int = 0
    done: bool = False

    def distance(self) -> float:
        return float(np.linalg.norm(self.s - self.s_W))


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    done: bool
    latent_s: np.ndarray
    latent_next_s: np.ndarray
    next_obs: np.ndarray
    augmented: bool = False
    t: int = 0

    def __eq__(self, other):
        if not isinstance(other, Transition):
            return NotImplemented
        return (
            self.reward == other.reward
            and self.done == other.done
            and self.augmented == other.augmented
            and self.t == other.t
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("obs", "action", "latent_s", "latent_next_s", "next_obs")
            )
        )


@dataclass
class Trajectory:
    episode: int
    transitions: list[Transition]
    context: Context
    s_W: np.ndarray

    def __len__(self):
        return len(self.transitions)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.episode == other.episode
            and self.context == other.context
            and np.array_equal(self.s_W, other.s_W)
            and self.transitions == other.transitions
        )

    @property
    def observations(self) -> np.ndarray:
        return np.array([tr.obs for tr in self.transitions])

    @property
    def actions(self) -> np.ndarray:
        return np.array([tr.action for tr in self.transitions])

    @property
    def rewards(self) -> np.ndarray:
        return np.array([tr.reward for tr in self.transitions], dtype=np.float64)

    @property
    def positions(self) -> np.ndarray:
        """Latent positions s_0..s_n (start of every step) plus the final landing."""
        if not self.transitions:
            return np.zeros((0, len(self.s_W)))
        return np.array([tr.latent_s for tr in self.transitions] + [self.transitions[-1].latent_next_s])

    def reached(self, theta: float) -> bool:
        return bool(self.transitions) and -self.transitions[-1].reward <= theta


@dataclass
class Dataset:
    trajectories: list[Trajectory] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.meta == other.meta and self.trajectories == other.trajectories

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)


def observe(config: EnvConfig, s: np.ndarray, s_W: np.ndarray) -> np.ndarray:
    if config.observation == "position":
        return s.copy()
    return s - s_W


def reset(config: EnvConfig, rng: RngStream) -> tuple[EpisodeState, np.ndarray]:
    d, h = config.d, config.half_width
    W = distortions.sample_context(config.distortion, d, rng.child("context"))
    if config.target_mode == "fixed_origin":
        s_W = np.zeros(d)
    else:
        s_W = rng.child("target").uniform(-h / 2, h / 2, size=d)
    start = rng.child("start")
    while True:
        s0 = start.uniform(-h, h, size=d)
        if np.linalg.norm(s0 - s_W) > config.theta:
            break
    state = EpisodeState(s=s0, W=W, s_W=s_W)
    return state, observe(config, s0, s_W)


def step(state: EpisodeState, a, config: EnvConfig) -> tuple[Transition, np.ndarray]:
    """Advance ``state`` in place by commanding ``a``."""
    if state.done:
        raise RuntimeError("step called on a finished episode")
    a = as_vec(a, "action")
    if a.shape != state.s.shape:
        raise ValueError(f"action has dimension {a.shape[0]}, expected {state.s.shape[0]}")
    if float(np.linalg.norm(a)) > config.lam + 1e-9:
        raise ValueError(f"action norm {np.linalg.norm(a):.6g} exceeds lam={config.lam}")
    s = state.s
    moved = distortions.apply(config.distortion, s, a, state.W, state.s_W)
    s_next = np.clip(moved, -config.half_width, config.half_width)
    dist = float(np.linalg.norm(s_next - state.s_W))
    done = dist <= config.theta or state.t + 1 >= config.max_steps
    obs = observe(config, s, state.s_W)
    next_obs = observe(config, s_next, state.s_W)
    tr = Transition(
        obs=obs, action=a.copy(), reward=-dist, done=done,
        latent_s=s.copy(), latent_next_s=s_next.copy(), next_obs=next_obs, t=state.t,
    )
    state.s = s_next
    state.t += 1
    state.done = done
    return tr, next_obs.copy()


def snapshot(state: EpisodeState) -> EpisodeState:
    return copy.deepcopy(state)


def restore(snap: EpisodeState) -> EpisodeState:
    return copy.deepcopy(snap)


# ---------------------------------------------------------------- file format


class DatasetFormatError(ValueError):
    pass


def _encode(obj) -> str:
    """JSON text with every float written to 17 significant digits."""
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError("cannot serialise non-finite float")
        text = "%.17g" % x
        if "." not in text and "e" not in text and "n" not in text:
            text += ".0"
        return text
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _encode(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_encode(v) for v in obj) + "]"
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{_encode(v)}" for k, v in obj.items()) + "}"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def encode_line(obj) -> str:
    return _encode(obj) + "\n"


def context_record(traj: Trajectory) -> dict:
    return {
        "type": "context",
        "ep": traj.episode,
        "kind": traj.context.kind,
        "payload": np.atleast_1d(traj.context.payload).tolist(),
        "s_W": traj.s_W,
        "n_transitions": len(traj.transitions),
    }


def transition_record(ep: int, tr: Transition) -> dict:
    return {
        "type": "transition",
        "ep": ep,
        "t": tr.t,
        "obs": tr.obs,
        "action": tr.action,
        "reward": tr.reward,
        "done": tr.done,
        "latent_s": tr.latent_s,
        "latent_next_s": tr.latent_next_s,
        "next_obs": tr.next_obs,
        "augmented": tr.augmented,
    }


def dataset_lines(dataset: Dataset):
    meta = {"type": "meta", "format_version": FORMAT_VERSION}
    meta.update(dataset.meta)
    meta["n_episodes"] = len(dataset.trajectories)
    yield encode_line(meta)
    for traj in dataset.trajectories:
        yield encode_line(context_record(traj))
        for tr in traj.transitions:
            yield encode_line(transition_record(traj.episode, tr))


def write_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(dataset_lines(dataset))


def _context_from_record(rec: dict, d: int) -> Context:
    kind = rec["kind"]
    payload = np.asarray(rec["payload"], dtype=np.float64)
    if kind in ("blend", "sqrt"):
        payload = payload.reshape(d, d)
    elif kind in ("rot", "sin"):
        payload = payload.reshape(())
    return distortions.make_context(kind, payload, d)


def _vec(rec: dict, key: str) -> np.ndarray:
    return np.asarray(rec[key], dtype=np.float64)


def read_dataset(path) -> Dataset:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError(f"{path}: line 1: missing metadata record")
    records = []
    for lineno, text in enumerate(lines, start=1):
        try:
            rec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: malformed record ({exc.msg})") from None
        if not isinstance(rec, dict) or "type" not in rec:
            raise DatasetFormatError(f"{path}: line {lineno}: record without a type field")
        records.append((lineno, rec))

    lineno, meta = records[0]
    if meta["type"] != "meta":
        raise DatasetFormatError(f"{path}: line {lineno}: first record must be metadata")
    if meta.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: line {lineno}: unsupported format version {meta.get('format_version')}")
    try:
        d = int(meta["d"])
        expected_eps = int(meta["n_episodes"])
    except (KeyError, TypeError, ValueError):
        raise DatasetFormatError(f"{path}: line {lineno}: metadata needs integer 'd' and 'n_episodes'") from None
    meta = {k: v for k, v in meta.items() if k not in ("type", "format_version", "n_episodes")}

    trajectories: list[Trajectory] = []
    pending = 0
    for lineno, rec in records[1:]:
        try:
            if rec["type"] == "context":
                if pending:
                    raise DatasetFormatError(
                        f"{path}: line {lineno}: episode {trajectories[-1].episode} is missing {pending} transition(s)"
                    )
                ctx = _context_from_record(rec, d)
                trajectories.append(Trajectory(int(rec["ep"]), [], ctx, _vec(rec, "s_W")))
                pending = int(rec["n_transitions"])
            elif rec["type"] == "transition":
                if not trajectories or int(rec["ep"]) != trajectories[-1].episode or pending == 0:
                    raise DatasetFormatError(f"{path}: line {lineno}: transition for unexpected episode {rec.get('ep')}")
                trajectories[-1].transitions.append(Transition(
                    obs=_vec(rec, "obs"), action=_vec(rec, "action"), reward=float(rec["reward"]),
                    done=bool(rec["done"]), latent_s=_vec(rec, "latent_s"),
                    latent_next_s=_vec(rec, "latent_next_s"), next_obs=_vec(rec, "next_obs"),
                    augmented=bool(rec["augmented"]), t=int(rec["t"]),
                ))
                pending -= 1
            else:
                raise DatasetFormatError(f"{path}: line {lineno}: unknown record type {rec['type']!r}")
        except DatasetFormatError:
            raise
        except (KeyError, ValueError, TypeError) as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: bad {rec.get('type')} record ({exc})") from None
    if pending:
        raise DatasetFormatError(
            f"{path}: line {len(lines)}: episode {trajectories[-1].episode} truncated, {pending} transition(s) missing"
        )
    if len(trajectories) != expected_eps:
        raise DatasetFormatError(
            f"{path}: line {len(lines)}: expected {expected_eps} episodes, found {len(trajectories)}"
        )
    return Dataset(trajectories, meta)


def dataset_meta(config: EnvConfig, seed: int, **extra) -> dict:
    meta = {
        "config_digest": config.digest(),
        "seed": int(seed),
        "d": config.d,
        "gamma": config.gamma,
        "lam": config.lam,
        "theta": config.theta,
        "observation": config.observation,
    }
    meta.update(extra)
    return meta


def with_max_steps(config: EnvConfig, max_steps: int) -> EnvConfig:
    return replace(config, max_steps=max_steps)
