"""Rollout-based value oracles and runtime checks of the shortcut theory."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import distortions
from . import environment as env
from .core import RngStream, clip_ball
from .environment import EnvConfig, EpisodeState, Trajectory
from .lift import Augmentor, CollectConfig, collect, plain_collect
from .policies import Policy, delta_from_obs, make_policy, rollout_from, run_episode
from .shortcuts import returns


@dataclass
class CheckReport:
    name: str
    passed: bool
    violations: int
    sample_size: int
    counterexample: dict | None = None
    details: dict = field(default_factory=dict)
    hard: bool = True
    applicable: bool = True

    def text(self) -> str:
        if not self.applicable:
            status = "N/A "
        elif self.hard:
            status = "PASS" if self.passed else "FAIL"
        else:
            status = " OK " if self.passed else "WARN"
        kind = "hard" if self.hard else "diag"
        out = f"[{status}] {self.name} ({kind}): {self.violations} violation(s) in {self.sample_size} sample(s)"
        if self.details:
            out += " | " + ", ".join(f"{k}={_fmt(v)}" for k, v in self.details.items())
        if self.counterexample:
            out += " | first counterexample: " + ", ".join(f"{k}={_fmt(v)}" for k, v in self.counterexample.items())
        return out

    def record(self) -> dict:
        return {
            "type": "check", "name": self.name, "passed": self.passed, "hard": self.hard,
            "applicable": self.applicable, "violations": self.violations,
            "sample_size": self.sample_size, "counterexample": self.counterexample or {},
            "details": self.details,
        }


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _report(name, violations, n, first=None, hard=True, **details) -> CheckReport:
    return CheckReport(name, violations == 0, violations, n, first, details, hard)


# ---------------------------------------------------------------- value oracle


def _discounted(rewards, gamma: float) -> float:
    acc = 0.0
    for r in reversed(rewards):
        acc = r + gamma * acc
    return acc


def value_of(policy: Policy, state: EpisodeState, config: EnvConfig, horizon: int | None = None) -> float:
    """Exact return of a deterministic policy from ``state`` over at most ``horizon`` steps.

    The policy object and the state are copied, never advanced.  States in
    the terminal ball, finished states and a zero horizon all have value 0.
    """
    H = config.max_steps if horizon is None else int(horizon)
    if H <= 0 or state.done or state.distance() <= config.theta:
        return 0.0
    st = env.restore(state)
    st.t = 0
    trs = rollout_from(st, copy.deepcopy(policy), replace(config, max_steps=H))
    return _discounted([tr.reward for tr in trs], config.gamma)


def shortcut_slack(
    policy: Policy,
    state: EpisodeState,
    a,
    config: EnvConfig,
    next_policy: Policy | None = None,
    horizon: int | None = None,
) -> tuple[float, np.ndarray]:
    """``gamma*V(s') - V(s) - |s' - s_W|`` for ``s' = f(s, a, W)``, and ``s'`` itself.

    ``next_policy`` is the policy that continues from ``s'``.  By default it
    is ``policy`` after acting once at ``s``, which makes a policy's own
    action exact (zero slack).
    """
    H = config.max_steps if horizon is None else int(horizon)
    v_s = value_of(policy, state, config, H)
    st = env.restore(state)
    st.t, st.done = 0, False
    cfg = replace(config, max_steps=max(H, 1))
    if next_policy is None:
        next_policy = copy.deepcopy(policy)
        next_policy.act(delta_from_obs(config, env.observe(config, state.s, state.s_W)), config.lam)
    env.step(st, a, cfg)
    v_next = 0.0 if st.distance() <= config.theta else value_of(next_policy, st, config, H - 1)
    return config.gamma * v_next - v_s - st.distance(), st.s.copy()


def check_shortcut(policy, state, a, config, tol: float = 1e-6, next_policy=None, horizon=None) -> CheckReport:
    slack, s_next = shortcut_slack(policy, state, a, config, next_policy, horizon)
    bad = slack < -tol
    first = {"slack": slack} if bad else None
    return _report("shortcut", int(bad), 1, first, slack=slack)


# ---------------------------------------------------------------- trajectory checks


def _distances(traj: Trajectory) -> np.ndarray:
    return np.linalg.norm(traj.positions - traj.s_W, axis=1)


def improving_suffix_start(traj: Trajectory) -> int:
    """Smallest step index from which every later step strictly reduces the distance."""
    dist = _distances(traj)
    bad = np.flatnonzero(dist[1:] >= dist[:-1])
    return 0 if bad.size == 0 else int(bad[-1]) + 1


def check_distance_improving(traj: Trajectory) -> CheckReport:
    dist = _distances(traj)
    bad = np.flatnonzero(dist[1:] >= dist[:-1])
    first = None
    if bad.size:
        k = int(bad[0])
        first = {"episode": traj.episode, "step": k, "slack": float(dist[k] - dist[k + 1])}
    start = 0 if bad.size == 0 else int(bad[-1]) + 1
    n = len(traj)
    return _report(
        "distance_improving", int(bad.size), n, first, hard=False,
        suffix_start=start, suffix_fraction=(n - start) / n if n else 1.0,
    )


def check_lemma_lower_bound(traj: Trajectory, gamma: float, tol: float = 1e-9) -> CheckReport:
    if not check_distance_improving(traj).passed:
        rep = _report("lemma_lower_bound", 0, 0)
        rep.applicable = False
        return rep
    G = returns(traj, gamma)
    dist = _distances(traj)[:-1]
    slack = (1 - gamma) * G + dist
    bad = np.flatnonzero(slack < -tol)
    first = None
    if bad.size:
        k = int(bad[0])
        first = {"episode": traj.episode, "step": k, "slack": float(slack[k])}
    return _report("lemma_lower_bound", int(bad.size), len(traj), first, min_slack=float(slack.min()))


@dataclass
class RecordedEpisode:
    """A trajectory together with the environment state and logging-policy state before each step."""

    trajectory: Trajectory
    states: list
    policies: list

    theta: float = 0.0

    @property
    def succeeded(self) -> bool:
        return self.trajectory.reached(self.theta)


def record_episode(config: EnvConfig, policy: Policy, rng: RngStream, episode: int = 0) -> RecordedEpisode:
    rec: list = []
    traj = run_episode(config, policy, rng, episode, record=rec)
    return RecordedEpisode(traj, [r[0] for r in rec], [r[1] for r in rec], theta=config.theta)


def replay_gap(ep: RecordedEpisode, i: int, j: int, config: EnvConfig) -> float:
    """Distance between the single-jump landing of the summed actions over [i, j) and the logged s_j."""
    st = ep.states[i]
    a_hat = np.sum(ep.trajectory.actions[i:j], axis=0)
    landing = distortions.apply(config.distortion, st.s, a_hat, st.W, st.s_W)
    landing = np.clip(landing, -config.half_width, config.half_width)
    return float(np.linalg.norm(landing - ep.trajectory.positions[j]))


def segment_slack(ep: RecordedEpisode, i: int, j: int, config: EnvConfig) -> float:
    """Rollout slack of the summed actions over [i, j) as a shortcut at step i.

    The continuation after the jump is the logged policy state at ``j`` and
    both values use the episode's remaining step budget at ``i``.
    """
    a_hat = np.sum(ep.trajectory.actions[i:j], axis=0)
    horizon = config.max_steps - ep.states[i].t
    slack, _ = shortcut_slack(ep.policies[i], ep.states[i], a_hat, config, ep.policies[j], horizon)
    return slack


def check_theorem_condition(
    ep: RecordedEpisode, i: int, j: int, L_V: float, L_f: float, config: EnvConfig, tol: float = 1e-6
) -> CheckReport:
    """If the sufficient condition holds for segment [i, j), the summed action must be a shortcut."""
    if not i < j:
        raise ValueError("need i < j")
    traj = ep.trajectory
    G = returns(traj, config.gamma)
    G_j = G[j] if j < len(traj) else 0.0
    dist_j = float(np.linalg.norm(traj.positions[j] - traj.s_W))
    lhs = config.gamma * G_j - G[i] - dist_j
    path = float(np.sum(np.linalg.norm(traj.actions[i:j], axis=1)))
    rhs = 0.0 if L_f == 0 else (config.gamma * L_V + 1) * L_f * path
    ulps = 8 * np.finfo(np.float64).eps * (abs(config.gamma * G_j) + abs(G[i]) + dist_j)
    holds = bool(lhs + ulps >= rhs)
    details = {"lhs": float(lhs), "rhs": float(rhs), "condition_holds": holds}
    if not holds:
        return _report("theorem_condition", 0, 0, **details)
    slack = segment_slack(ep, i, j, config)
    bad = slack < -tol
    first = {"episode": traj.episode, "i": i, "j": j, "slack": slack} if bad else None
    return _report("theorem_condition", int(bad), 1, first, slack=slack, **details)


# ---------------------------------------------------------------- sampled diagnostics


def _pair(config: EnvConfig, mode: str, rng: RngStream, eps: float = 1e-3):
    d, h = config.d, config.half_width
    s = rng.uniform(-h, h, size=d)
    if mode == "uniform":
        return s, rng.uniform(-h, h, size=d)
    if mode == "local":
        return s, np.clip(s + rng.ball(d, 0.1), -h, h)
    if mode == "boundary":
        s[1] = -eps * (rng.random() + 1e-3)
        s2 = s.copy()
        s2[1] = eps * (rng.random() + 1e-3)
        return s, s2
    if mode == "within_region":
        return s, np.clip(s + rng.ball(d, eps), -h, h)
    raise ValueError(f"unknown pair mode {mode!r}")


def _context_state(config: EnvConfig, rng: RngStream) -> EpisodeState:
    state, _ = env.reset(config, rng)
    return state


def _at(state: EpisodeState, s) -> EpisodeState:
    out = env.restore(state)
    out.s = np.asarray(s, dtype=np.float64)
    out.t, out.done = 0, False
    return out


def _ray_pair(config: EnvConfig, base: EpisodeState, rng: RngStream):
    h = config.half_width
    u = rng.normal(size=config.d)
    u /= np.linalg.norm(u)
    t1, t2 = rng.uniform(0, h, size=2)
    s1 = np.clip(base.s_W + t1 * u, -h, h)
    s2 = np.clip(base.s_W + t2 * u, -h, h)
    return s1, s2


def estimate_lipschitz(
    policy: Policy, config: EnvConfig, n_pairs: int, rng: RngStream, mode: str = "local"
) -> tuple[float, CheckReport]:
    """Largest ``|V(s) - V(s')| / |s - s'|`` over same-context pairs.

    ``mode`` is ``uniform``, ``local`` (``s'`` within 0.1 of ``s``), ``ray``
    (both on a ray from the target) or ``inside`` (both in the terminal ball).
    """
    bound = 1.0 / (1.0 - config.gamma)
    worst, worst_pair, used = 0.0, None, 0
    for k in range(n_pairs):
        prng = rng.child("pair", k)
        base = _context_state(config, prng.child("context"))
        if mode == "ray":
            s1, s2 = _ray_pair(config, base, prng)
        elif mode == "inside":
            s1 = base.s_W + prng.ball(config.d, config.theta)
            s2 = base.s_W + prng.ball(config.d, config.theta)
        else:
            s1, s2 = _pair(config, mode, prng)
        gap = float(np.linalg.norm(s1 - s2))
        if gap < 1e-6:
            continue
        fresh = copy.deepcopy(policy)
        fresh.reset()
        v1 = value_of(fresh, _at(base, s1), config)
        v2 = value_of(fresh, _at(base, s2), config)
        used += 1
        ratio = abs(v1 - v2) / gap
        if ratio > worst:
            worst, worst_pair = ratio, {"pair": k, "ratio": ratio, "distance": gap}
    rep = _report("lipschitz", int(worst > bound), used, worst_pair if worst > bound else None,
                  hard=False, max_ratio=worst, bound=bound, mode=mode)
    return worst, rep


def _one_step(policy: Policy, state: EpisodeState, config: EnvConfig):
    fresh = copy.deepcopy(policy)
    fresh.reset()
    a = fresh.act(delta_from_obs(config, env.observe(config, state.s, state.s_W)), config.lam)
    moved = distortions.apply(config.distortion, state.s, a, state.W, state.s_W)
    return a, np.clip(moved, -config.half_width, config.half_width)


def check_contraction(
    policy: Policy, config: EnvConfig, n_pairs: int, rng: RngStream, mode: str = "uniform", tol: float = 1e-9
) -> CheckReport:
    """Fraction of same-context pairs whose one-step images are farther apart than the pair.

    Each state is acted on by a freshly reset copy of ``policy``.  Modes:
    ``uniform``, ``local``, ``boundary`` (pairs straddling the sign change of
    the second coordinate) and ``within_region`` (close pairs in one region
    that receive identical actions; other draws are rejected).
    """
    violations, first, used, tries = 0, None, 0, 0
    while used < n_pairs:
        prng = rng.child("pair", tries)
        tries += 1
        if tries > 100 * n_pairs + 1000:
            break
        base = _context_state(config, prng.child("context"))
        s1, s2 = _pair(config, mode, prng)
        st1, st2 = _at(base, s1), _at(base, s2)
        a1, n1 = _one_step(policy, st1, config)
        a2, n2 = _one_step(policy, st2, config)
        if mode == "within_region":
            if distortions.region_index(s1) != distortions.region_index(s2) or not np.array_equal(a1, a2):
                continue
        used += 1
        before = float(np.linalg.norm(s1 - s2))
        after = float(np.linalg.norm(n1 - n2))
        if after > before + tol:
            violations += 1
            if first is None:
                first = {"pair": tries - 1, "before": before, "after": after}
    return _report("contraction", violations, used, first, hard=False,
                   violation_rate=violations / used if used else 0.0, mode=mode)


# ---------------------------------------------------------------- oracle augmentor


class OracleDirectAugmentor(Augmentor):
    """Suggests the clipped straight step to the target, but only when it is a shortcut.

    The shortcut test compares the logging policy's own continuation from
    ``s`` against the reset logging policy continuing from the landing
    point, over the episode's remaining step budget.
    """

    trained = True

    def __init__(self, tol: float = 0.0):
        self.tol = tol
        self._ctx = None
        self.accepted = 0
        self.rejected = 0

    def observe_state(self, state, policy, config):
        self._ctx = (state, policy, config)

    def direct_action(self, state: EpisodeState, config: EnvConfig) -> np.ndarray:
        return clip_ball(state.s_W - state.s, config.lam)

    def suggest(self, obs, logged_action, rng):
        if self._ctx is None:
            return logged_action
        state, policy, config = self._ctx
        self._ctx = None
        a = self.direct_action(state, config)
        fresh = copy.deepcopy(policy)
        fresh.reset()
        slack, _ = shortcut_slack(policy, state, a, config, fresh, config.max_steps - state.t)
        if slack >= -self.tol:
            self.accepted += 1
            return a
        self.rejected += 1
        return logged_action


def mean_return(dataset, gamma: float) -> float:
    vals = [returns(t, gamma)[0] for t in dataset if len(t)]
    return float(np.mean(vals)) if vals else 0.0


def paired_improvement(config: EnvConfig, policy_spec, n_episodes: int, rng: RngStream, p: float = 0.6,
                       cap: int = 20) -> CheckReport:
    """Oracle-augmented vs plain collection on identical episode seeds."""
    plain = plain_collect(config, policy_spec, n_episodes, rng)
    aug = collect(config, policy_spec, OracleDirectAugmentor(), CollectConfig(p=p, n=n_episodes, cap=cap, train_after=()), rng)
    gp = np.array([returns(t, config.gamma)[0] for t in plain])
    ga = np.array([returns(t, config.gamma)[0] for t in aug])
    worse = np.flatnonzero(ga < gp - 1e-9)
    margin = float(ga.mean() - gp.mean())
    first = {"episode": int(worse[0]), "slack": float(ga[worse[0]] - gp[worse[0]])} if worse.size else None
    rep = _report("pi_aug_improvement", int(worse.size) + int(not margin > 0), n_episodes, first,
                  plain_mean=float(gp.mean()), augmented_mean=float(ga.mean()), margin=margin,
                  overrides=int(sum(tr.augmented for t in aug for tr in t.transitions)))
    return rep


# ---------------------------------------------------------------- suite


SUITE = (
    "distance_improving", "shortcut", "lpe", "contraction",
    "lipschitz", "lemma_lower_bound", "theorem_condition", "pi_aug_improvement",
)


def clamped_steps(ep: RecordedEpisode, config: EnvConfig) -> np.ndarray:
    """Per step, whether the box clamp changed the distorted landing point."""
    out = []
    for st, tr in zip(ep.states, ep.trajectory.transitions):
        moved = distortions.apply(config.distortion, st.s, tr.action, st.W, st.s_W)
        out.append(not np.array_equal(moved, tr.latent_next_s))
    return np.array(out, dtype=bool)


def sample_segments(ep: RecordedEpisode, config: EnvConfig, rng: RngStream, n: int,
                    improving_only: bool = True) -> list[tuple[int, int]]:
    """Random segments ``i < j <= last step`` with summed action inside the action ball.

    Segments crossing a clamped step are excluded; with ``improving_only``
    the segment must start inside the distance-improving suffix.
    """
    traj = ep.trajectory
    last = len(traj) - 1
    start = improving_suffix_start(traj) if improving_only else 0
    if last - start < 1:
        return []
    clamped = clamped_steps(ep, config)
    acts = traj.actions
    out = []
    for _ in range(n):
        i = int(rng.integers(start, last))
        j = int(rng.integers(i + 1, last + 1))
        if clamped[i:j].any():
            continue
        if np.linalg.norm(np.sum(acts[i:j], axis=0)) > config.lam + 1e-9:
            continue
        out.append((i, j))
    return out


def record_corpus(config: EnvConfig, policy_spec, n_episodes: int, rng: RngStream) -> list[RecordedEpisode]:
    corpus = []
    for ep in range(n_episodes):
        ep_rng = rng.child("episode", ep)
        policy = make_policy(policy_spec, config, ep_rng.child("policy"))
        if not policy.deterministic:
            raise ValueError("verification needs a deterministic logging policy")
        corpus.append(record_episode(config, policy, ep_rng, ep))
    return corpus


def _merge(name: str, reports: list[CheckReport], hard: bool, **details) -> CheckReport:
    applicable = [r for r in reports if r.applicable]
    violations = sum(r.violations for r in applicable)
    first = next((r.counterexample for r in applicable if r.counterexample), None)
    return _report(name, violations, sum(r.sample_size for r in applicable), first, hard=hard, **details)


def lpe_report(spec, d: int, n_chains: int, chain_len: int, rng: RngStream, half_width: float = 1.0) -> CheckReport:
    bound = distortions.lpe_constant(spec, d)
    if math.isinf(bound):
        # no finite constant exists; check the closed-form gap of the doubled-step construction
        worst = 0.0
        for c in (0.1, 0.5, 1.0):
            v = np.zeros(d)
            v[0] = 1.0
            zero = distortions.make_context(spec.kind, np.zeros((d, d)), d)
            gap, _, _ = distortions.lpe_ratio(spec, np.zeros(d), [c * v, c * v], zero, np.zeros(d))
            worst = max(worst, abs(gap - (2 * math.sqrt(2) - 2) * math.sqrt(c) * c))
        return _report("lpe", int(worst > 1e-10), 3, {"gap_error": worst} if worst > 1e-10 else None,
                       bound=bound, max_gap_error=worst)
    ratio = distortions.estimate_lpe_ratio(spec, d, n_chains, chain_len, rng, half_width)
    bad = ratio > bound + 1e-6
    return _report("lpe", int(bad), n_chains, {"ratio": ratio} if bad else None, max_ratio=ratio, bound=bound)


def run_suite(
    config: EnvConfig,
    policy_spec,
    rng: RngStream,
    n_episodes: int = 100,
    n_samples: int = 500,
) -> list[CheckReport]:
    """Run every check of :data:`SUITE` on a corpus of logging-policy episodes."""
    corpus = record_corpus(config, policy_spec, n_episodes, rng.child("corpus"))
    L_f = distortions.lpe_constant(config.distortion, config.d)
    L_V = 1.0 / (1.0 - config.gamma)
    reports = []

    di = [check_distance_improving(ep.trajectory) for ep in corpus]
    n_steps = sum(len(ep.trajectory) for ep in corpus)
    suffix_steps = sum(len(ep.trajectory) - improving_suffix_start(ep.trajectory) for ep in corpus)
    reports.append(_merge(
        "distance_improving", di, hard=False,
        improving_trajectories=sum(r.passed for r in di) / max(len(di), 1),
        improving_segment_fraction=suffix_steps / max(n_steps, 1),
    ))

    srng = rng.child("shortcut")
    sc = []
    for k in range(n_samples):
        ep = corpus[int(srng.integers(len(corpus)))]
        t = int(srng.integers(len(ep.trajectory)))
        a = ep.trajectory.transitions[t].action
        horizon = config.max_steps - ep.states[t].t
        rep = check_shortcut(ep.policies[t], ep.states[t], a, config, tol=1e-9, horizon=horizon)
        if rep.counterexample:
            rep.counterexample.update(episode=ep.trajectory.episode, step=t)
        sc.append(rep)
    segs = 0
    max_gap = 0.0
    if L_f == 0:
        for ep in corpus:
            if not ep.succeeded:
                continue
            for i, j in sample_segments(ep, config, srng.child("segments", ep.trajectory.episode), 5):
                gap = replay_gap(ep, i, j, config)
                slack = segment_slack(ep, i, j, config)
                max_gap = max(max_gap, gap)
                bad = gap > 1e-9 or slack < -1e-6
                sc.append(_report("shortcut", int(bad), 1,
                                  {"episode": ep.trajectory.episode, "i": i, "j": j, "gap": gap, "slack": slack} if bad else None))
                segs += 1
    reports.append(_merge("shortcut", sc, hard=True, own_action_checks=n_samples,
                          linear_segments=segs, max_replay_gap=max_gap))

    reports.append(lpe_report(config.distortion, config.d, n_samples, 4, rng.child("lpe"), config.half_width))

    probe = make_policy(policy_spec, config, rng.child("probe"))
    reports.append(check_contraction(probe, config, n_samples, rng.child("contraction")))
    reports.append(estimate_lipschitz(probe, config, min(n_samples, 200), rng.child("lipschitz"))[1])

    lemma = []
    for ep in corpus:
        traj = ep.trajectory
        start = improving_suffix_start(traj)
        if start >= len(traj):
            continue
        G = returns(traj, config.gamma)[start:]
        dist = _distances(traj)[start:-1]
        slack = (1 - config.gamma) * G + dist
        bad = np.flatnonzero(slack < -1e-9)
        lemma.append(_report("lemma_lower_bound", int(bad.size), len(slack),
                             {"episode": traj.episode, "step": start + int(bad[0]), "slack": float(slack[bad[0]])}
                             if bad.size else None))
    reports.append(_merge("lemma_lower_bound", lemma, hard=True))

    trng = rng.child("theorem")
    th = []
    for ep in corpus:
        if not ep.succeeded:
            continue
        for i, j in sample_segments(ep, config, trng.child(ep.trajectory.episode), 5):
            th.append(check_theorem_condition(ep, i, j, L_V, L_f, config))
    reports.append(_merge("theorem_condition", th, hard=(L_f == 0), L_f=L_f, L_V=L_V,
                          segments=len(th), condition_held=sum(r.sample_size for r in th)))

    reports.append(paired_improvement(config, policy_spec, n_episodes, rng.child("pi_aug")))
    return reports
