"""Command-line front end.

Experiments are described by a flat ``key = value`` text file with dotted
section names, for example::

    seed = 0
    env.d = 5
    distortion.kind = blend
    policy.l0 = 0.025
    collect.p = 0.6

Unknown keys are rejected.  ``auto`` selects the built-in default of an
optional parameter.  Every output file carries the config digest.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import environment as env
from .core import RngStream
from .distortions import REGROT_MEANS, DistortionSpec
from .environment import Dataset, DatasetFormatError, EnvConfig, encode_line
from .lift import CollectConfig, KnnAugmentor, KnnParams, KnnQModel, collect, plain_collect, read_model, suggest, write_model
from .policies import PERTURBATIONS, Policy, PolicySpec, make_policy, run_episode
from .shortcuts import ShortcutConfig, returns, shortcut_tuples, tuple_record
from .verify import SUITE, run_suite

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3
GRID_RESOLUTION = 0.1


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config file

_INT, _FLOAT, _OPT_FLOAT, _STR, _BOOL, _FLOATS, _INTS = "int", "float", "float?", "str", "bool", "floats", "ints"

SCHEMA: dict[str, tuple[str, object]] = {
    "seed": (_INT, 0),
    "env.d": (_INT, 2),
    "env.lam": (_FLOAT, 1.0),
    "env.theta": (_FLOAT, 0.05),
    "env.max_steps": (_INT, 100),
    "env.gamma": (_FLOAT, 0.99),
    "env.observation": (_STR, "position"),
    "env.target_mode": (_STR, "fixed_origin"),
    "env.half_width": (_FLOAT, 1.0),
    "distortion.kind": (_STR, "blend"),
    "distortion.sigma": (_OPT_FLOAT, None),
    "distortion.scale_floor": (_OPT_FLOAT, None),
    "distortion.region_means": (_FLOATS, REGROT_MEANS),
    "policy.kind": (_STR, "coordinate_walk"),
    "policy.l0": (_FLOAT, 0.2),
    "policy.sigma": (_FLOAT, 0.0),
    "policy.reduction": (_FLOAT, 0.5),
    "policy.l_min": (_OPT_FLOAT, None),
    "shortcut.C": (_FLOAT, 0.0),
    "shortcut.strategy": (_STR, "weighted"),
    "shortcut.max_per_trajectory": (_INT, 20),
    "collect.n": (_INT, 100),
    "collect.p": (_FLOAT, 0.6),
    "collect.cap": (_INT, 20),
    "collect.train_after": (_INTS, None),  # None -> halfway through collection
    "collect.perturbation": (_STR, "none"),
    "collect.perturbation_sigma": (_FLOAT, 0.0),
    "augmentor.k": (_INT, 8),
    "augmentor.M": (_INT, 64),
    "augmentor.sweeps": (_INT, 2),
    "augmentor.use_shortcuts": (_BOOL, True),
    "augmentor.support_penalty": (_FLOAT, 1.0),
    "eval.episodes": (_INT, 20),
    "eval.horizon": (_INT, 30),
    "verify.episodes": (_INT, 100),
    "verify.samples": (_INT, 500),
    "output.dir": (_STR, "."),
}


def _parse_value(key: str, kind: str, text: str):
    try:
        if kind == _INT:
            return int(text)
        if kind == _FLOAT:
            return float(text)
        if kind == _OPT_FLOAT:
            return None if text == "auto" else float(text)
        if kind == _BOOL:
            if text not in ("true", "false"):
                raise ValueError(text)
            return text == "true"
        if kind == _FLOATS:
            return tuple(float(x) for x in text.split(",") if x.strip())
        if kind == _INTS:
            if text == "auto":
                return None
            return tuple(int(x) for x in text.split(",") if x.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from exc


def _format_value(kind: str, value) -> str:
    if value is None:
        return "auto"
    if kind == _BOOL:
        return "true" if value else "false"
    if kind == _FLOAT or kind == _OPT_FLOAT:
        return repr(float(value))
    if kind == _FLOATS:
        return ",".join(repr(float(v)) for v in value)
    if kind == _INTS:
        return ",".join(str(int(v)) for v in value)
    return str(value)


@dataclass
class ExperimentConfig:
    """All experiment settings, validated by building the typed sub-configs."""

    values: dict = field(default_factory=lambda: {k: v for k, (_, v) in SCHEMA.items()})

    def __post_init__(self):
        unknown = set(self.values) - set(SCHEMA)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        self.values = {k: self.values.get(k, default) for k, (_, default) in SCHEMA.items()}
        try:
            self.env_config()
            self.policy_spec()
            self.shortcut_config()
            self.collect_config()
            self.knn_params()
            self.perturbation()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self["eval.episodes"] < 1 or self["eval.horizon"] < 1:
            raise ConfigError("eval.episodes and eval.horizon must be >= 1")
        if self["verify.episodes"] < 1 or self["verify.samples"] < 1:
            raise ConfigError("verify.episodes and verify.samples must be >= 1")
        if self["seed"] < 0:
            raise ConfigError("seed must be non-negative")

    def __getitem__(self, key):
        return self.values[key]

    def override(self, **updates) -> "ExperimentConfig":
        vals = dict(self.values)
        vals.update({k: v for k, v in updates.items() if v is not None})
        return ExperimentConfig(vals)

    def env_config(self) -> EnvConfig:
        v = self.values
        spec = DistortionSpec(kind=v["distortion.kind"], sigma=v["distortion.sigma"],
                              scale_floor=v["distortion.scale_floor"],
                              region_means=v["distortion.region_means"], lam=v["env.lam"])
        return EnvConfig(d=v["env.d"], lam=v["env.lam"], theta=v["env.theta"], max_steps=v["env.max_steps"],
                         gamma=v["env.gamma"], distortion=spec, observation=v["env.observation"],
                         target_mode=v["env.target_mode"], half_width=v["env.half_width"])

    def policy_spec(self) -> PolicySpec:
        v = self.values
        return PolicySpec(v["policy.kind"], v["policy.l0"], v["policy.sigma"], v["policy.reduction"], v["policy.l_min"])

    def shortcut_config(self) -> ShortcutConfig:
        v = self.values
        return ShortcutConfig(v["shortcut.C"], v["shortcut.strategy"], v["shortcut.max_per_trajectory"],
                              v["env.gamma"], v["env.lam"])

    def collect_config(self) -> CollectConfig:
        v = self.values
        n = v["collect.n"]
        train_after = v["collect.train_after"]
        if train_after is None:
            train_after = (n // 2,) if n >= 2 else ()
        return CollectConfig(v["collect.p"], n, v["collect.cap"], train_after)

    def knn_params(self) -> KnnParams:
        v = self.values
        return KnnParams(v["augmentor.k"], v["augmentor.M"], v["augmentor.sweeps"],
                         v["augmentor.use_shortcuts"], v["augmentor.support_penalty"])

    def perturbation(self) -> tuple[str, float] | None:
        kind = self["collect.perturbation"]
        if kind == "none":
            return None
        if kind not in PERTURBATIONS:
            raise ValueError(f"collect.perturbation must be 'none' or one of {PERTURBATIONS}")
        return kind, self["collect.perturbation_sigma"]

    def digest(self) -> str:
        return hashlib.sha256(serialize_config(self).encode()).hexdigest()[:16]


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, SCHEMA[key][0], value)
    return ExperimentConfig(values)


def serialize_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_format_value(kind, cfg[k])}\n" for k, (kind, _) in SCHEMA.items())


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsRecord:
    """Simple dataset quality proxies; not a reproduction of any published score."""

    config_digest: str
    n_trajectories: int
    mean_return: float
    mean_length: float
    success_rate: float
    occupancy: float
    label: str = "proxy"
    extra: dict = field(default_factory=dict)

    def record(self) -> dict:
        out = {"type": "metrics", "label": self.label, "config_digest": self.config_digest,
               "n_trajectories": self.n_trajectories, "mean_return": self.mean_return,
               "mean_length": self.mean_length, "success_rate": self.success_rate, "occupancy": self.occupancy}
        out.update(self.extra)
        return out


def grid_occupancy(dataset: Dataset, half_width: float, d: int, resolution: float = GRID_RESOLUTION) -> float:
    """Fraction of the position-box grid cells visited by any logged latent position."""
    per_axis = max(1, math.ceil(2 * half_width / resolution - 1e-9))
    cells = set()
    for traj in dataset:
        if not len(traj):
            continue
        idx = np.floor((traj.positions + half_width) / resolution).astype(np.int64)
        idx = np.clip(idx, 0, per_axis - 1)
        cells.update(map(tuple, idx.tolist()))
    return len(cells) / float(per_axis) ** d


def dataset_metrics(dataset: Dataset, config: EnvConfig, digest: str, **extra) -> MetricsRecord:
    trajs = [t for t in dataset if len(t)]
    if not trajs:
        return MetricsRecord(digest, 0, 0.0, 0.0, 0.0, 0.0, extra=extra)
    return MetricsRecord(
        config_digest=digest,
        n_trajectories=len(trajs),
        mean_return=float(np.mean([returns(t, config.gamma)[0] for t in trajs])),
        mean_length=float(np.mean([len(t) for t in trajs])),
        success_rate=float(np.mean([t.reached(config.theta) for t in trajs])),
        occupancy=grid_occupancy(dataset, config.half_width, config.d),
        extra=extra,
    )


# ---------------------------------------------------------------- helpers


def worker_count() -> int:
    raw = os.environ.get("LIFT_THREADS", "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"LIFT_THREADS must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"LIFT_THREADS must be a positive integer, got {raw!r}")
    return n


def _map(fn, items):
    """Order-preserving map, threaded when LIFT_THREADS > 1."""
    items = list(items)
    workers = worker_count()
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _write_text(path, text: str) -> None:
    with open(_prepare(path), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_lines(path, records) -> None:
    _write_text(path, "".join(encode_line(r) for r in records))


def _prepare(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.name + suffix)


def _default_out(cfg: ExperimentConfig, name: str) -> Path:
    return Path(cfg["output.dir"]) / name


class ModelPolicy(Policy):
    """Greedy policy of a trained model; the zero action plays the role of the logged action."""

    def __init__(self, model: KnnQModel, rng: RngStream):
        self.model = model
        self.rng = rng

    def act(self, delta, lam):
        obs = -np.asarray(delta, dtype=np.float64)
        return suggest(self.model, obs, np.zeros_like(obs), self.rng)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    config = cfg.env_config()
    spec = cfg.policy_spec()
    rng = RngStream(cfg["seed"])
    perturbation = cfg.perturbation()

    def one(ep):
        ep_rng = rng.child("episode", ep)
        policy = make_policy(spec, config, ep_rng.child("policy"))
        return run_episode(config, policy, ep_rng, ep, perturbation=perturbation)

    dataset = Dataset(_map(one, range(cfg["collect.n"])),
                      env.dataset_meta(config, cfg["seed"], experiment_digest=cfg.digest(), source="gen-data"))
    out = Path(args.out) if args.out else _default_out(cfg, "dataset.jsonl")
    env.write_dataset(dataset, _prepare(out))
    metrics = dataset_metrics(dataset, config, cfg.digest())
    _write_lines(_sidecar(out, ".metrics.jsonl"), [metrics.record()])
    print(f"wrote {len(dataset)} trajectories to {out} (mean return {metrics.mean_return:.4f})")
    return EXIT_OK


def cmd_extract_shortcuts(args, cfg: ExperimentConfig) -> int:
    if not args.dataset:
        raise ConfigError("extract-shortcuts needs --dataset PATH")
    dataset = env.read_dataset(args.dataset)
    scfg = cfg.shortcut_config()
    rng = RngStream(cfg["seed"]).child("shortcuts")
    per_traj = _map(lambda t: (t.episode, shortcut_tuples(t, scfg, rng.child(t.episode))), list(dataset))
    count = sum(len(ts) for _, ts in per_traj)
    meta = {"type": "meta", "config_digest": cfg.digest(),
            "dataset_digest": dataset.meta.get("config_digest"), "C": scfg.C, "strategy": scfg.strategy,
            "cap": scfg.max_per_trajectory, "n_tuples": count, "n_trajectories": len(dataset)}
    out = Path(args.out) if args.out else _default_out(cfg, "shortcuts.jsonl")
    _write_lines(out, [meta] + [tuple_record(ep, t) for ep, ts in per_traj for t in ts])
    print(f"{count} shortcut tuples from {len(dataset)} trajectories (C={scfg.C}, strategy={scfg.strategy})")
    return EXIT_OK


def cmd_collect_lift(args, cfg: ExperimentConfig) -> int:
    config = cfg.env_config()
    spec = cfg.policy_spec()
    ccfg = cfg.collect_config()
    rng = RngStream(cfg["seed"])
    augmentor = KnnAugmentor(cfg.knn_params())
    dataset = collect(config, spec, augmentor, ccfg, rng, cfg.shortcut_config())
    dataset.meta = env.dataset_meta(config, cfg["seed"], experiment_digest=cfg.digest(), source="collect-lift")
    plain = plain_collect(config, spec, ccfg.n, rng)
    out = Path(args.out) if args.out else _default_out(cfg, "lift.jsonl")
    env.write_dataset(dataset, _prepare(out))
    if augmentor.model is not None:
        write_model(augmentor.model, _sidecar(out, ".model.jsonl"))
    overrides = sum(tr.augmented for t in dataset for tr in t.transitions)
    plain_return = dataset_metrics(plain, config, cfg.digest()).mean_return
    metrics = dataset_metrics(dataset, config, cfg.digest(), overrides=int(overrides),
                              plain_mean_return=plain_return)
    _write_lines(_sidecar(out, ".metrics.jsonl"), [metrics.record()])
    print(f"wrote {len(dataset)} trajectories to {out}: mean return {metrics.mean_return:.4f} "
          f"(plain {plain_return:.4f}), {overrides} overrides")
    return EXIT_OK


def evaluation_curve(config: EnvConfig, policy_factory, n_episodes: int, rng: RngStream) -> np.ndarray:
    """Distance to target after each step, shape ``(n_episodes, max_steps + 1)``.

    Episodes that finish early keep their final distance for the remaining steps.
    """

    def one(ep):
        ep_rng = rng.child("episode", ep)
        traj = run_episode(config, policy_factory(ep_rng.child("policy")), ep_rng, ep)
        dist = np.linalg.norm(traj.positions - traj.s_W, axis=1)
        row = np.full(config.max_steps + 1, dist[-1])
        row[: dist.shape[0]] = dist
        return row

    return np.array(_map(one, range(n_episodes)))


def cmd_evaluate(args, cfg: ExperimentConfig) -> int:
    config = env.with_max_steps(cfg.env_config(), cfg["eval.horizon"])
    rng = RngStream(cfg["seed"]).child("evaluate")
    if args.model:
        model = read_model(args.model)
        if model.obs_dim != config.d:
            raise ConfigError(f"model expects {model.obs_dim}-dimensional observations, config has d={config.d}")
        factory = lambda r: ModelPolicy(model, r)  # noqa: E731
        source = f"model:{Path(args.model).name}"
    else:
        spec = cfg.policy_spec()
        if args.policy:
            spec = PolicySpec(args.policy, spec.l0, spec.sigma, spec.reduction, spec.l_min)
        factory = lambda r: make_policy(spec, config, r)  # noqa: E731
        source = f"policy:{spec.kind}"
    curve = evaluation_curve(config, factory, cfg["eval.episodes"], rng)
    buf = io.StringIO()
    buf.write(f"# config_digest={cfg.digest()} source={source} episodes={cfg['eval.episodes']}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "median_distance", "q25", "q75"])
    for t in range(curve.shape[1]):
        q25, med, q75 = np.percentile(curve[:, t], [25, 50, 75])
        writer.writerow([t, f"{med:.17g}", f"{q25:.17g}", f"{q75:.17g}"])
    out = Path(args.out) if args.out else _default_out(cfg, "evaluate.csv")
    _write_text(out, buf.getvalue())
    print(f"median distance after {curve.shape[1] - 1} steps: {np.median(curve[:, -1]):.4f} ({out})")
    return EXIT_OK


def cmd_verify(args, cfg: ExperimentConfig) -> int:
    config = cfg.env_config()
    reports = run_suite(config, cfg.policy_spec(), RngStream(cfg["seed"]).child("verify"),
                        n_episodes=cfg["verify.episodes"], n_samples=cfg["verify.samples"])
    text = "\n".join(r.text() for r in reports) + "\n"
    out = Path(args.out) if args.out else _default_out(cfg, "verify.jsonl")
    meta = {"type": "meta", "config_digest": cfg.digest(), "checks": list(SUITE)}
    _write_lines(out, [meta] + [r.record() for r in reports])
    _write_text(_sidecar(out, ".txt"), f"config_digest={cfg.digest()}\n" + text)
    sys.stdout.write(text)
    failed = [r.name for r in reports if r.hard and r.applicable and not r.passed]
    if failed:
        print(f"hard check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "extract-shortcuts": cmd_extract_shortcuts,
    "collect-lift": cmd_collect_lift,
    "evaluate": cmd_evaluate,
    "verify": cmd_verify,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="liftkit", description="Shortcut-augmented data collection for active positioning.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config file (key = value lines)")
        p.add_argument("--seed", type=int, help="overrides 'seed'")
        p.add_argument("--out", help="primary output path")
        p.add_argument("--n", type=int, help="overrides 'collect.n'")
        p.add_argument("--p", type=float, help="overrides 'collect.p'")
        p.add_argument("--C", type=float, help="overrides 'shortcut.C'")
        p.add_argument("--strategy", help="overrides 'shortcut.strategy'")
        p.add_argument("--cap", type=int, help="overrides 'collect.cap' and 'shortcut.max_per_trajectory'")
        if name == "extract-shortcuts":
            p.add_argument("--dataset", help="dataset file to read")
        if name == "evaluate":
            group = p.add_mutually_exclusive_group()
            group.add_argument("--policy", help="logging policy kind to evaluate (default: the config's)")
            group.add_argument("--model", help="trained model file to evaluate greedily")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config).override(**{
            "seed": args.seed, "collect.n": args.n, "collect.p": args.p, "shortcut.C": args.C,
            "shortcut.strategy": args.strategy, "collect.cap": args.cap, "shortcut.max_per_trajectory": args.cap,
        })
        worker_count()
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, DatasetFormatError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
