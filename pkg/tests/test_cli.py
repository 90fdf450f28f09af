import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liftkit import cli
from liftkit import environment as env
from liftkit.cli import SCHEMA, ConfigError, ExperimentConfig, main, parse_config, serialize_config
from liftkit.verify import CheckReport


def _run(tmp_path, *argv, config=None):
    args = list(argv)
    if config is not None:
        path = tmp_path / "exp.cfg"
        path.write_text(config)
        args += ["--config", str(path)]
    return main(args)


def _jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


# ---------------------------------------------------------------- config


def test_defaults_round_trip():
    cfg = ExperimentConfig()
    assert parse_config(serialize_config(cfg)).values == cfg.values
    assert cfg.env_config().distortion.kind == "blend"
    assert cfg.collect_config().train_after == (50,)
    assert len(cfg.digest()) == 16


@settings(max_examples=60, deadline=None)
@given(
    st.integers(0, 2**31), st.integers(2, 6), st.floats(0.01, 0.5), st.floats(0.0, 1.0),
    st.sampled_from(["weighted", "uniform", "best", "inverse_distance"]), st.booleans(),
    st.one_of(st.none(), st.floats(0.0, 1.0)),
)
def test_config_round_trip(seed, d, l0, p, strategy, shortcuts, sigma):
    cfg = ExperimentConfig().override(**{
        "seed": seed, "env.d": d, "policy.l0": l0, "collect.p": p, "shortcut.strategy": strategy,
        "augmentor.use_shortcuts": shortcuts, "distortion.sigma": sigma,
    })
    back = parse_config(serialize_config(cfg))
    assert back.values == cfg.values
    assert back.digest() == cfg.digest()


def test_comments_and_blank_lines():
    cfg = parse_config("# header\n\nenv.d = 3  # trailing\ncollect.train_after = 10, 20\n")
    assert cfg["env.d"] == 3 and cfg["collect.train_after"] == (10, 20)


@pytest.mark.parametrize("text,match", [
    ("env.dd = 2\n", "unknown"),
    ("env.d = 2\nenv.d = 3\n", "duplicate"),
    ("env.d = two\n", "cannot parse"),
    ("augmentor.use_shortcuts = yes\n", "cannot parse"),
    ("just words\n", "key = value"),
    ("collect.p = 1.5\n", "p"),
    ("collect.n = 10\ncollect.train_after = 10\n", "train_after"),
    ("distortion.kind = regrot\nenv.d = 1\n", "regrot|d"),
    ("collect.perturbation = flip\n", "perturbation"),
    ("eval.horizon = 0\n", "eval"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_every_schema_key_is_serialized():
    lines = serialize_config(ExperimentConfig()).splitlines()
    assert [line.split(" = ")[0] for line in lines] == list(SCHEMA)


# ---------------------------------------------------------------- commands


def test_gen_data_outputs_and_metrics(tmp_path):
    out = tmp_path / "sub" / "data.jsonl"
    assert _run(tmp_path, "gen-data", "--n", "15", "--seed", "3", "--out", str(out)) == 0
    data = env.read_dataset(out)
    assert len(data) == 15
    (m,) = _jsonl(tmp_path / "sub" / "data.jsonl.metrics.jsonl")
    assert m["label"] == "proxy" and m["n_trajectories"] == 15
    assert 0 <= m["success_rate"] <= 1 and 0 < m["occupancy"] <= 1
    assert m["config_digest"] == data.meta["experiment_digest"]


def test_flag_overrides_change_digest(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    _run(tmp_path, "gen-data", "--n", "3", "--out", str(a))
    _run(tmp_path, "gen-data", "--n", "3", "--seed", "1", "--out", str(b))
    assert env.read_dataset(a).meta["experiment_digest"] != env.read_dataset(b).meta["experiment_digest"]


def test_extract_shortcuts_threshold_sweep(tmp_path):
    data = tmp_path / "d.jsonl"
    _run(tmp_path, "gen-data", "--n", "20", "--out", str(data))
    counts = []
    for C in (0.0, 0.5, 1.0, 2.0):
        out = tmp_path / f"s{C}.jsonl"
        assert _run(tmp_path, "extract-shortcuts", "--dataset", str(data), "--C", str(C), "--out", str(out)) == 0
        rows = _jsonl(out)
        assert rows[0]["type"] == "meta" and rows[0]["C"] == C
        assert rows[0]["n_tuples"] == len(rows) - 1
        assert all(len(r["a_hat"]) == 2 and np.linalg.norm(r["a_hat"]) <= 1 + 1e-9 for r in rows[1:])
        counts.append(len(rows) - 1)
    assert counts == sorted(counts, reverse=True) and counts[0] > 0


def test_extract_shortcuts_edge_cases(tmp_path):
    empty = tmp_path / "empty.jsonl"
    _run(tmp_path, "gen-data", "--n", "0", "--out", str(empty), config="collect.train_after = \n")
    out = tmp_path / "s.jsonl"
    assert _run(tmp_path, "extract-shortcuts", "--dataset", str(empty), "--out", str(out)) == 0
    assert len(_jsonl(out)) == 1

    broken = tmp_path / "broken.jsonl"
    broken.write_text('{"type": "meta"}\n{"type":\n')
    assert _run(tmp_path, "extract-shortcuts", "--dataset", str(broken), "--out", str(out)) == 3
    assert _run(tmp_path, "extract-shortcuts", "--dataset", str(tmp_path / "missing.jsonl")) == 3
    assert _run(tmp_path, "extract-shortcuts", "--out", str(out)) == 1


def test_collect_lift_with_p_zero_equals_gen_data(tmp_path):
    plain, lift = tmp_path / "plain.jsonl", tmp_path / "lift.jsonl"
    _run(tmp_path, "gen-data", "--n", "12", "--out", str(plain), config="collect.train_after = 6\n")
    assert _run(tmp_path, "collect-lift", "--n", "12", "--p", "0", "--out", str(lift),
                config="collect.train_after = 6\n") == 0
    assert env.read_dataset(plain).trajectories == env.read_dataset(lift).trajectories
    (m,) = _jsonl(tmp_path / "lift.jsonl.metrics.jsonl")
    assert m["overrides"] == 0
    assert m["mean_return"] == m["plain_mean_return"]


@pytest.mark.slow
def test_collect_lift_improves_on_plain_and_model_evaluates(tmp_path):
    lift = tmp_path / "lift.jsonl"
    assert _run(tmp_path, "collect-lift", "--out", str(lift)) == 0
    (m,) = _jsonl(tmp_path / "lift.jsonl.metrics.jsonl")
    assert m["overrides"] > 0
    assert m["mean_return"] >= m["plain_mean_return"]
    curve = tmp_path / "model.csv"
    assert _run(tmp_path, "evaluate", "--model", str(tmp_path / "lift.jsonl.model.jsonl"), "--out", str(curve)) == 0
    assert "source=model:lift.jsonl.model.jsonl" in curve.read_text().splitlines()[0]


def _curve(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_digest=")
    rows = list(csv.DictReader(lines[1:]))
    return lines[0], rows


def test_evaluate_direct_reaches_target(tmp_path):
    out = tmp_path / "curve.csv"
    assert _run(tmp_path, "evaluate", "--policy", "direct", "--out", str(out),
                config="distortion.kind = identity\neval.episodes = 40\n") == 0
    header, rows = _curve(out)
    assert "source=policy:direct" in header and "episodes=40" in header
    assert list(rows[0]) == ["step", "median_distance", "q25", "q75"]
    assert len(rows) == 31
    # the farthest start in the unit box is sqrt(2) away, so two full steps always suffice
    steps = math.ceil(math.sqrt(2) / 1.0)
    assert float(rows[steps]["q75"]) <= 0.05
    med = [float(r["median_distance"]) for r in rows]
    assert all(b <= a + 1e-12 for a, b in zip(med, med[1:]))


def test_evaluate_rejects_model_of_wrong_dimension(tmp_path):
    lift = tmp_path / "lift.jsonl"
    _run(tmp_path, "collect-lift", "--n", "6", "--out", str(lift), config="collect.train_after = 3\n")
    assert _run(tmp_path, "evaluate", "--model", str(tmp_path / "lift.jsonl.model.jsonl"),
                "--out", str(tmp_path / "c.csv"), config="env.d = 3\n") == 1


def test_verify_command(tmp_path):
    out = tmp_path / "v.jsonl"
    assert _run(tmp_path, "verify", "--out", str(out), config="verify.episodes = 15\nverify.samples = 40\n") == 0
    rows = _jsonl(out)
    assert rows[0]["checks"] == [r["name"] for r in rows[1:]]
    assert (tmp_path / "v.jsonl.txt").read_text().startswith("config_digest=")


def test_verify_exit_code_on_failed_hard_check(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "run_suite", lambda *a, **k: [CheckReport("shortcut", False, 1, 1)])
    assert _run(tmp_path, "verify", "--out", str(tmp_path / "v.jsonl")) == 2
    monkeypatch.setattr(cli, "run_suite", lambda *a, **k: [CheckReport("lipschitz", False, 1, 1, hard=False)])
    assert _run(tmp_path, "verify", "--out", str(tmp_path / "v.jsonl")) == 0


def test_exit_codes(tmp_path):
    assert main(["gen-data", "--bogus"]) == 1
    assert main([]) == 1
    assert main(["gen-data", "--p", "2", "--out", str(tmp_path / "x.jsonl")]) == 1
    assert main(["gen-data", "--config", str(tmp_path / "nope.cfg")]) == 3
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen-data", "--n", "1", "--out", str(blocker / "x.jsonl")]) == 3


def test_thread_count_does_not_change_outputs(tmp_path, monkeypatch):
    one, four = tmp_path / "one.jsonl", tmp_path / "four.jsonl"
    _run(tmp_path, "gen-data", "--n", "10", "--out", str(one))
    monkeypatch.setenv("LIFT_THREADS", "4")
    _run(tmp_path, "gen-data", "--n", "10", "--out", str(four))
    assert one.read_bytes() == four.read_bytes()
    monkeypatch.setenv("LIFT_THREADS", "zero")
    assert _run(tmp_path, "gen-data", "--n", "1", "--out", str(one)) == 1
    monkeypatch.setenv("LIFT_THREADS", "0")
    assert _run(tmp_path, "gen-data", "--n", "1", "--out", str(one)) == 1
