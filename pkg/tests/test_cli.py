import csv
import io
import json
from pathlib import Path

import pytest
import yaml
from hypothesis import given, settings, strategies as st

from noisypush.cli import (
    ConfigError,
    ExperimentConfig,
    csv_header,
    emit_csv,
    parse_initial,
    plurality_warnings,
    run_cli,
)
from noisypush.core import ProtocolParams
from noisypush.engine import rumor, run_trial
from noisypush.noise import make_uniform

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(autouse=True)
def _out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("NOISYPUSH_OUT_DIR", str(tmp_path))
    return tmp_path


def _small_records(n_trials):
    params = ProtocolParams(n=1024, k=2, epsilon=0.5)
    return [run_trial(params, make_uniform(2, 0.5 - 1e-9), "B", rumor(1, 2), s, stage1_only=True)
            for s in range(n_trials)]


def test_emit_csv_empty_batch():
    text = emit_csv([], k=3)
    assert text == ",".join(csv_header(3)) + "\n"
    assert csv_header(2) == ["trial", "stage", "phase", "round", "a", "c_1", "c_2", "bias", "converged"]


def test_emit_csv_rows(tmp_path):
    recs = _small_records(2)
    assert all(len(r.phases) == 3 for r in recs)
    path = tmp_path / "x.csv"
    text = emit_csv(recs, path)
    rows = list(csv.reader(io.StringIO(text)))
    assert len(rows) == 1 + 6
    assert [r[0] for r in rows[1:]] == ["0"] * 3 + ["1"] * 3
    assert path.read_text() == text
    # full precision: floats written with repr round-trip exactly
    d = recs[0].per_phase_distributions[0]
    assert float(rows[1][5]) == d.fractions[0]


def test_emit_csv_rejects_mixed_k():
    a = _small_records(1)[0]
    b = run_trial(ProtocolParams(n=1024, k=3, epsilon=0.5), make_uniform(3, 0.5), "B", rumor(1, 3), 0,
                  stage1_only=True)
    with pytest.raises(ConfigError):
        emit_csv([a, b])


def test_emit_csv_deterministic():
    assert emit_csv(_small_records(2)) == emit_csv(_small_records(2))


def test_emit_csv_reports_path():
    with pytest.raises(OSError, match="no_such_dir"):
        emit_csv(_small_records(1), "/no_such_dir/out.csv")


@st.composite
def configs(draw):
    k = draw(st.integers(2, 4))
    n = draw(st.integers(100, 10**6))
    eps = draw(st.floats(0.05, 0.6))
    mode = draw(st.sampled_from(["rumor", "plurality"]))
    initial = None
    if mode == "plurality":
        initial = tuple(draw(st.lists(st.integers(0, 20), min_size=k, max_size=k)))
        if sum(initial) == 0:
            initial = (1,) + initial[1:]
    params = ProtocolParams(n=n, k=k, epsilon=eps, s=draw(st.floats(0.5, 1.5)), mode=mode,
                            initial_opinionated=sum(initial) if initial else None)
    return ExperimentConfig(
        params=params,
        noise_spec=draw(st.sampled_from([None, f"uniform:{k}:0.1", f"identity:{k}"])),
        process=draw(st.sampled_from(["O", "B", "P"])),
        initial=initial,
        trials=draw(st.integers(1, 500)),
        base_seed=draw(st.integers(0, 2**31)),
        output=draw(st.text("abcxyz_/", min_size=1, max_size=12)),
        sweep_axis=draw(st.sampled_from([None, "epsilon", "n"])),
        sweep_values=tuple(draw(st.lists(st.floats(0.1, 0.5), max_size=4))),
        parallelism=draw(st.integers(1, 8)),
    )


@settings(max_examples=100, deadline=None)
@given(configs())
def test_config_round_trip(cfg):
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    assert ExperimentConfig.from_yaml(cfg.to_yaml()) == cfg


def test_config_rejects_unknown_fields():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"params": {"n": 10, "k": 2, "epsilon": 0.1}, "colour": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"params": {"n": 10, "k": 2, "epsilon": 0.1, "gamma": 1}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"params": {"n": 10, "k": 2}})


def test_plurality_config_checks():
    p = ProtocolParams(n=100, k=2, epsilon=0.3, mode="plurality", initial_opinionated=70)
    with pytest.raises(ConfigError):
        ExperimentConfig(p, initial=(50, 30))
    with pytest.raises(ConfigError):
        ExperimentConfig(p, initial=(70,))
    with pytest.warns(UserWarning):
        plurality_warnings((35, 35))


def test_parse_initial():
    assert parse_initial("1:60, 2:40") == {1: 60, 2: 40}
    with pytest.raises(ConfigError):
        parse_initial("1-60")


@pytest.mark.parametrize("name", ["rumor_end_to_end.yaml", "epsilon_scaling.yaml", "plurality_small.yaml"])
def test_presets_load(name):
    cfg = ExperimentConfig.from_yaml((CONFIGS / name).read_text())
    cfg.trial_config()


def test_cli_run_trials_zero(capsys):
    assert run_cli(["run", "--n", "1000", "--k", "2", "--epsilon", "0.4", "--trials", "0"]) == 1
    assert "trials" in capsys.readouterr().err


def test_cli_bad_usage_is_config_error(capsys):
    assert run_cli(["frobnicate"]) == 1
    assert run_cli(["run", "--k", "2", "--epsilon", "0.4"]) == 1
    assert "n: required" in capsys.readouterr().err
    assert run_cli(["run", "--n", "1000", "--k", "2", "--epsilon", "0.4", "--noise", "uniform:3:0.1"]) == 1


def test_cli_run_writes_csv_and_json(_out_dir):
    argv = ["run", "--n", "2000", "--k", "3", "--epsilon", "0.45", "--process", "B", "--trials", "3",
            "--seed", "5", "--out", "batch"]
    assert run_cli(argv) == 0
    text = (_out_dir / "batch.csv").read_text()
    doc = json.loads((_out_dir / "batch.json").read_text())
    assert doc["config"]["trials"] == 3 and len(doc["records"]) == 3
    assert {"seed", "params", "process", "stage", "fractions", "converged_to", "convergence_round"} <= set(
        doc["records"][0])
    n_rows = sum(len(r["stage"]) for r in doc["records"])
    assert len(text.strip().split("\n")) == 1 + n_rows
    # same config twice gives a byte-identical CSV
    assert run_cli(argv[:-1] + ["again"]) == 0
    assert (_out_dir / "again.csv").read_bytes() == text.encode()


def test_cli_config_file_with_override(_out_dir):
    cfg = {"params": {"n": 2000, "k": 2, "epsilon": 0.45}, "process": "B", "trials": 4, "output": "fromfile"}
    path = _out_dir / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert run_cli(["run", "--config", str(path), "--trials", "2"]) == 0
    doc = json.loads((_out_dir / "fromfile.json").read_text())
    assert doc["config"]["trials"] == 2
    assert doc["config"]["params"]["n"] == 2000


def test_cli_plurality_run(_out_dir):
    argv = ["run", "--n", "5000", "--k", "3", "--epsilon", "0.4", "--initial", "1:260,2:180,3:160",
            "--process", "B", "--trials", "2", "--out", "plur"]
    assert run_cli(argv) == 0
    doc = json.loads((_out_dir / "plur.json").read_text())
    assert doc["config"]["params"]["mode"] == "plurality"
    assert doc["config"]["params"]["initial_opinionated"] == 600


def test_cli_sweep_rows(_out_dir):
    argv = ["sweep", "--n", "2000", "--k", "2", "--epsilon", "0.4", "--process", "P", "--trials", "2",
            "--sweep-epsilon", "0.45,0.4,0.35", "--out", "sw"]
    assert run_cli(argv) == 0
    rows = list(csv.reader((_out_dir / "sw.sweep.csv").open()))
    assert rows[0] == ["n", "epsilon", "trials", "success_rate", "median_convergence_round"]
    assert [float(r[1]) for r in rows[1:]] == [0.45, 0.4, 0.35]
    argv = ["sweep", "--n", "2000", "--k", "2", "--epsilon", "0.45", "--process", "P", "--trials", "1",
            "--sweep-n", "2000,3000", "--out", "swn"]
    assert run_cli(argv) == 0
    rows = list(csv.reader((_out_dir / "swn.sweep.csv").open()))
    assert [r[0] for r in rows[1:]] == ["2000", "3000"]
    assert run_cli(["sweep", "--n", "2000", "--k", "2", "--epsilon", "0.4"]) == 1


def test_cli_mp_check(capsys):
    assert run_cli(["mp-check", "--noise", "uniform:3:0.2", "--m", "1", "--delta", "0.4", "--epsilon", "0.29"]) == 0
    out = capsys.readouterr().out
    assert out.count("margin 0.12 ") == 2
    assert "epsilon < 0.3" in out and "epsilon=0.29: yes" in out
    assert run_cli(["mp-check", "--noise", "cyclic:0.1", "--transpose", "--delta", "0.1"]) == 0
    assert "not majority-preserving" in capsys.readouterr().out
    assert run_cli(["mp-check", "--delta", "0.1"]) == 1


def test_cli_maj_table(capsys):
    assert run_cli(["maj-table", "--ell", "3", "--q", "0.6,0.4"]) == 0
    out = capsys.readouterr().out
    assert "0.648000000000000" in out and "0.352000000000000" in out
    assert run_cli(["maj-table", "--ell", "3", "--q", "0.6,0.6"]) == 1


def test_cli_verify(capsys):
    assert run_cli(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL " not in out
    assert out.count("PASS") >= 9
