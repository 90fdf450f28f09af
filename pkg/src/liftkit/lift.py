"""LIFT data collection with an action augmentor, plus a k-NN fitted-Q augmentor."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import environment as env
from .core import RngStream, clip_ball
from .environment import Dataset, EnvConfig, Trajectory, encode_line
from .policies import PolicySpec, delta_from_obs, make_policy, run_episode
from .shortcuts import ShortcutConfig, returns, shortcut_tuples

MODEL_FORMAT = "liftkit-knnq"
MODEL_VERSION = 1


@dataclass(frozen=True)
class CollectConfig:
    p: float = 0.6
    n: int = 100
    cap: int = 20
    train_after: tuple[int, ...] = (50,)

    def __post_init__(self):
        object.__setattr__(self, "train_after", tuple(int(x) for x in self.train_after))
        if not 0 <= self.p <= 1:
            raise ValueError("p must lie in [0, 1]")
        if self.n < 0 or self.cap < 0:
            raise ValueError("n and cap must be non-negative")
        if any(not 0 < x < self.n for x in self.train_after) and self.n > 0:
            raise ValueError("train_after entries must lie strictly between 0 and n")


class Augmentor:
    """Action-suggestion interface used during collection.

    ``suggest`` must return an action inside the action ball; returning the
    logged action unchanged means "no override".
    """

    trained = False

    def observe_state(self, state, policy, config: EnvConfig) -> None:
        """Latent-state hook, called before the logging policy acts.  Only oracle augmentors use it."""

    def suggest(self, obs, logged_action, rng: RngStream) -> np.ndarray:
        return logged_action

    def train(self, dataset: Dataset, cfg: ShortcutConfig, rng: RngStream) -> None:
        pass


# ---------------------------------------------------------------- k-NN fitted Q


@dataclass(frozen=True)
class KnnParams:
    k: int = 8
    M: int = 64
    sweeps: int = 2
    use_shortcuts: bool = True
    support_penalty: float = 1.0

    def __post_init__(self):
        if self.k < 1 or self.M < 0 or self.sweeps < 0 or self.support_penalty < 0:
            raise ValueError("need k >= 1, M >= 0, sweeps >= 0 and support_penalty >= 0")


@dataclass
class KnnQModel:
    """Q(o, a) as the mean target of the k nearest training pairs.

    Distances are Euclidean on the concatenated ``(obs, action)`` features,
    each coordinate divided by ``scale``.  ``q`` subtracts
    ``support_penalty`` times the mean neighbour distance, which keeps the
    argmax away from actions far outside the training data.
    """

    features: np.ndarray
    targets: np.ndarray
    scale: np.ndarray
    obs_dim: int
    k: int = 8
    M: int = 64
    lam: float = 1.0
    gamma: float = 0.99
    support_penalty: float = 1.0
    _tree: cKDTree | None = field(default=None, init=False, repr=False, compare=False)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.features / self.scale)
        return self._tree

    def q(self, obs, actions) -> np.ndarray:
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        obs = np.broadcast_to(np.asarray(obs, dtype=np.float64), (actions.shape[0], self.obs_dim))
        return self.q_batch(np.hstack([obs, actions]))

    def q_batch(self, feats: np.ndarray) -> np.ndarray:
        k = min(self.k, self.targets.shape[0])
        dist, idx = self.tree.query(feats / self.scale, k=k)
        dist = dist.reshape(feats.shape[0], k)
        idx = idx.reshape(feats.shape[0], k)
        return self.targets[idx].mean(axis=1) - self.support_penalty * dist.mean(axis=1)


def _transition_table(dataset: Dataset, cfg: ShortcutConfig, params: KnnParams, rng: RngStream):
    obs, act, rew, nxt, done, state_obs, state_G = [], [], [], [], [], [], []
    for traj in dataset:
        if not traj.transitions:
            continue
        G = returns(traj, cfg.gamma)
        for k, tr in enumerate(traj.transitions):
            obs.append(tr.obs)
            act.append(tr.action)
            rew.append(tr.reward)
            nxt.append(tr.next_obs)
            done.append(tr.done)
            state_obs.append(tr.obs)
            state_G.append(G[k])
        if params.use_shortcuts:
            for t in shortcut_tuples(traj, cfg, rng.child("shortcuts", traj.episode)):
                obs.append(t.o_i)
                act.append(t.a_hat)
                rew.append(t.r)
                nxt.append(t.o_j)
                done.append(False)
    return (np.array(obs), np.array(act), np.array(rew), np.array(nxt),
            np.array(done, dtype=bool), np.array(state_obs), np.array(state_G))


def train_knn_q(dataset: Dataset, cfg: ShortcutConfig, params: KnnParams, rng: RngStream) -> KnnQModel:
    """Fit a k-NN Q model on real transitions plus sampled shortcut tuples.

    Targets start at ``r + gamma * mean(return-to-go of the k nearest logged
    states to o')`` and are refined by ``params.sweeps`` fitted value
    iteration sweeps bootstrapping on ``max`` over ``M`` sampled actions
    of the support-penalised model.
    """
    if dataset.n_transitions == 0:
        raise ValueError("cannot train on an empty dataset")
    obs, act, rew, nxt, done, state_obs, state_G = _transition_table(dataset, cfg, params, rng)
    d_obs = obs.shape[1]
    feats = np.hstack([obs, act])
    scale = feats.std(axis=0)
    scale[scale < 1e-12] = 1.0

    obs_scale = scale[:d_obs]
    state_tree = cKDTree(state_obs / obs_scale)
    k_state = min(params.k, state_obs.shape[0])
    _, idx = state_tree.query(nxt / obs_scale, k=k_state)
    idx = idx.reshape(nxt.shape[0], k_state)
    cont = np.where(done, 0.0, state_G[idx].mean(axis=1))
    targets = rew + cfg.gamma * cont

    model = KnnQModel(feats, targets, scale, d_obs, params.k, params.M, cfg.lam, cfg.gamma, params.support_penalty)
    if params.M == 0:
        return model
    live = np.flatnonzero(~done)
    for sweep in range(params.sweeps):
        cands = rng.child("sweep", sweep).ball(act.shape[1], cfg.lam, size=params.M)
        best = np.full(live.shape[0], -np.inf)
        for c in cands:
            q = model.q_batch(np.hstack([nxt[live], np.broadcast_to(c, (live.shape[0], c.shape[0]))]))
            best = np.maximum(best, q)
        new_targets = targets.copy()
        new_targets[live] = rew[live] + cfg.gamma * best
        model.targets = new_targets
        targets = new_targets
    return model


def suggest(model: KnnQModel | None, obs, logged_action, rng: RngStream) -> np.ndarray:
    """Best of ``M`` uniform candidates and the logged action; ties keep the logged action."""
    logged_action = np.asarray(logged_action, dtype=np.float64)
    if model is None or model.M == 0:
        return logged_action
    cands = rng.ball(logged_action.shape[0], model.lam, size=model.M)
    q = model.q(obs, np.vstack([logged_action[None, :], cands]))
    best = int(np.argmax(q))
    if best == 0 or not q[best] > q[0]:
        return logged_action
    return clip_ball(cands[best - 1], model.lam)


class KnnAugmentor(Augmentor):
    def __init__(self, params: KnnParams = KnnParams()):
        self.params = params
        self.model: KnnQModel | None = None

    @property
    def trained(self):
        return self.model is not None

    def train(self, dataset, cfg, rng):
        self.model = train_knn_q(dataset, cfg, self.params, rng)

    def suggest(self, obs, logged_action, rng):
        return suggest(self.model, obs, logged_action, rng)


def write_model(model: KnnQModel, path) -> None:
    header = {
        "type": "model", "format": MODEL_FORMAT, "version": MODEL_VERSION,
        "k": model.k, "M": model.M, "lam": model.lam, "gamma": model.gamma,
        "obs_dim": model.obs_dim, "support_penalty": model.support_penalty, "scale": model.scale, "n_pairs": int(model.targets.shape[0]),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(encode_line(header))
        for x, y in zip(model.features, model.targets):
            fh.write(encode_line({"x": x, "target": float(y)}))


def read_model(path) -> KnnQModel:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln]
    try:
        header = json.loads(lines[0])
    except (IndexError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: line 1: bad model header") from exc
    if header.get("format") != MODEL_FORMAT or header.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: line 1: not a {MODEL_FORMAT} v{MODEL_VERSION} file")
    xs, ys = [], []
    for lineno, text in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(text)
            xs.append(rec["x"])
            ys.append(float(rec["target"]))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}: line {lineno}: bad training pair") from exc
    if len(ys) != header["n_pairs"]:
        raise ValueError(f"{path}: expected {header['n_pairs']} pairs, found {len(ys)}")
    return KnnQModel(
        np.array(xs, dtype=np.float64), np.array(ys), np.asarray(header["scale"], dtype=np.float64),
        int(header["obs_dim"]), int(header["k"]), int(header["M"]), float(header["lam"]), float(header["gamma"]),
        float(header["support_penalty"]),
    )


# ---------------------------------------------------------------- collection


def collect(
    config: EnvConfig,
    policy_spec: PolicySpec,
    augmentor: Augmentor,
    ccfg: CollectConfig,
    rng: RngStream,
    shortcut_cfg: ShortcutConfig | None = None,
    trace: list | None = None,
) -> Dataset:
    """Collect ``ccfg.n`` real trajectories, handing steps to ``augmentor`` with probability ``p``.

    An override counts only when the suggestion differs from the logged
    action; the logging policy is reset right after every override.  Episode
    ``k`` draws from ``rng.child("episode", k)`` exactly like plain
    collection, so ``p = 0`` reproduces it.  ``trace``, when a list,
    receives the logging-policy object after every step.
    """
    if shortcut_cfg is None:
        shortcut_cfg = ShortcutConfig(gamma=config.gamma, lam=config.lam)
    trajectories: list[Trajectory] = []
    train_points = set(ccfg.train_after)
    for ep in range(ccfg.n):
        ep_rng = rng.child("episode", ep)
        policy = make_policy(policy_spec, config, ep_rng.child("policy"))
        state, obs = env.reset(config, ep_rng.child("reset"))
        policy.reset()
        coin = ep_rng.child("handoff")
        suggest_rng = ep_rng.child("augmentor")
        overrides = 0
        transitions = []
        while not state.done:
            u = coin.random()
            handoff = ccfg.p > 0 and u <= ccfg.p and overrides < ccfg.cap and augmentor.trained
            if handoff:
                augmentor.observe_state(env.snapshot(state), copy.deepcopy(policy), config)
            a = policy.act(delta_from_obs(config, obs), config.lam)
            augmented = False
            if handoff:
                suggestion = clip_ball(augmentor.suggest(obs, a, suggest_rng), config.lam)
                if not np.array_equal(suggestion, a):
                    a = suggestion
                    augmented = True
                    overrides += 1
            tr, obs = env.step(state, a, config)
            tr.augmented = augmented
            if augmented:
                policy.reset()
            transitions.append(tr)
            if trace is not None:
                trace.append((ep, augmented, copy.deepcopy(policy)))
        trajectories.append(Trajectory(ep, transitions, state.W, state.s_W.copy()))
        if ep + 1 in train_points:
            augmentor.train(Dataset(list(trajectories)), shortcut_cfg, rng.child("train", ep + 1))
    return Dataset(trajectories)


def plain_collect(config: EnvConfig, policy_spec: PolicySpec, n: int, rng: RngStream,
                  perturbation: tuple[str, float] | None = None) -> Dataset:
    """Logging-policy collection without an augmentor (optionally with a baseline perturbation)."""
    trajectories = []
    for ep in range(n):
        ep_rng = rng.child("episode", ep)
        policy = make_policy(policy_spec, config, ep_rng.child("policy"))
        trajectories.append(run_episode(config, policy, ep_rng, ep, perturbation=perturbation))
    return Dataset(trajectories)
