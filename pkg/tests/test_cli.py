import json
import subprocess
import sys

import pytest

from detrl.cli import EXIT_BAD_INPUT, EXIT_NEGATIVE, EXIT_OK, main, parse_seed_override, ConfigError
from detrl.determinism import RunLog

TINY_HP = {"total_steps": 200, "eval_interval": 100, "learn_start": 50}


def _config(tmp_path, **extra):
    doc = {"groups": ["deterministic", "initialization"], "n_runs": 2, "hp": TINY_HP, **extra}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("train")
    cfg = _config(tmp)
    outs = [tmp / "a", tmp / "b"]
    for out in outs:
        assert main(["train", "--config", cfg, "--out", str(out)]) == EXIT_OK
    return outs


def test_train_outputs_are_byte_identical(trained):
    a, b = trained
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert {"summary.txt", "deterministic/run_0.json", "initialization/report.json"} <= {
        str(p) for p in files}
    for rel in files:
        if rel.name != "run_metadata.json":
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_verify_exit_codes(trained, tmp_path, capsys):
    a, b = trained
    assert main(["verify", str(a / "deterministic/run_0.json"), str(b / "deterministic/run_0.json")]) == EXIT_OK
    assert main(["verify", str(a / "initialization/run_0.json"),
                 str(a / "initialization/run_1.json")]) == EXIT_NEGATIVE
    assert "step 0" in capsys.readouterr().out
    short = RunLog.load(a / "deterministic/run_0.json")
    short.checkpoints, short.evaluations = short.checkpoints[:1], short.evaluations[:1]
    short.save(tmp_path / "short.json")
    assert main(["verify", str(a / "deterministic/run_0.json"), str(tmp_path / "short.json")]) == EXIT_BAD_INPUT
    (tmp_path / "junk.json").write_text("{not json")
    assert main(["verify", str(tmp_path / "junk.json"), str(tmp_path / "junk.json")]) == EXIT_BAD_INPUT


def test_report_bands_and_idempotence(trained, capsys):
    out = trained[0]
    assert main(["report", "--out", str(out)]) == EXIT_OK
    first = {p: p.read_bytes() for p in out.rglob("*.csv")}
    summary = (out / "summary.txt").read_bytes()
    assert main(["report", "--out", str(out)]) == EXIT_OK
    assert {p: p.read_bytes() for p in out.rglob("*.csv")} == first
    assert (out / "summary.txt").read_bytes() == summary
    lines = (out / "deterministic/band.csv").read_text().splitlines()
    assert lines[1] == "step,mean,mean_minus_std,mean_plus_std"
    for row in lines[2:]:
        _, mean, lo, hi = row.split(",")
        assert mean == lo == hi
    assert (out / "initialization/start_states.csv").read_text().count("\n") == 2 + 2 * 100 * 3


def test_report_on_empty_directory(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == EXIT_NEGATIVE


def test_missing_suite_file_is_bad_input(tmp_path, capsys):
    cfg = _config(tmp_path, suite_path=str(tmp_path / "nope.json"))
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_BAD_INPUT
    assert "suite_path" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("doc,field", [
    ({"hp": {"learning_rat": 1e-3}}, "hp"),
    ({"groups": ["gpu"]}, "groups[0].name"),
    ({"n_runs": 0}, "n_runs"),
    ({"colour": 1}, "config"),
    ({"groups": [{"name": "minibatch", "env": {"sticky_p": 1.5}}]}, "groups[0].env"),
])
def test_bad_config_fields_are_named(tmp_path, capsys, doc, field):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_BAD_INPUT
    assert field in capsys.readouterr().err


def test_missing_config_and_unknown_command(tmp_path):
    assert main(["train", "--config", str(tmp_path / "x.json"), "--out", str(tmp_path)]) == EXIT_BAD_INPUT
    assert main(["frobnicate"]) == EXIT_BAD_INPUT


def test_output_dir_from_environment(tmp_path, monkeypatch):
    cfg = _config(tmp_path, groups=["deterministic"], n_runs=1)
    monkeypatch.delenv("DETRL_OUTPUT_DIR", raising=False)
    assert main(["train", "--config", cfg]) == EXIT_BAD_INPUT
    monkeypatch.setenv("DETRL_OUTPUT_DIR", str(tmp_path / "env_out"))
    assert main(["train", "--config", cfg]) == EXIT_OK
    assert (tmp_path / "env_out/deterministic/run_0.json").is_file()


def test_seed_override(tmp_path):
    cfg = _config(tmp_path, groups=["deterministic"], n_runs=1)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "b"),
                 "--seed-override", "init_seed=0x10"]) == EXIT_OK
    a = RunLog.load(tmp_path / "a/deterministic/run_0.json")
    b = RunLog.load(tmp_path / "b/deterministic/run_0.json")
    assert a.checkpoints[0].weight_hash != b.checkpoints[0].weight_hash
    assert parse_seed_override("sticky_seed=18446744073709551615") == ("sticky_seed", 2**64 - 1)
    for bad in ("init_seed", "nope=1", "init_seed=-1", "init_seed=18446744073709551616"):
        with pytest.raises(ConfigError):
            parse_seed_override(bad)


def test_gen_suite(tmp_path):
    args = ["gen-suite", "--seed", "7"]
    small = tmp_path / "cfg.json"
    small.write_text(json.dumps({"suite_params": {"n_candidates": 300, "top_k": 60, "n_select": 20}}))
    for name in ("a.json", "b.json"):
        assert main(args + ["--config", str(small), "--out", str(tmp_path / name)]) == EXIT_OK
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert len(json.loads((tmp_path / "a.json").read_text())["entries"]) == 20
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"suite_params": {"top_k": 10, "n_select": 20}}))
    assert main(args + ["--config", str(bad), "--out", str(tmp_path / "c.json")]) == EXIT_BAD_INPUT


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "detrl", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("detrl ")
