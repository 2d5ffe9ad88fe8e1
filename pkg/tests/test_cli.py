import json
import subprocess
import sys

import numpy as np
import pytest

from ddsmooth.cli import main
from ddsmooth.runner.store import ResultsStore

from helpers import tiny_config, tiny_stack
from test_store_report_claims import fixture_records


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    tiny_stack().save(d / "models")
    assert main(["gen-data", "--n", "16", "--seed", "3", "--out", str(d / "data")]) == 0
    return d


def test_gen_data(workdir):
    with np.load(workdir / "data" / "dataset.npz") as z:
        assert z["images"].shape == (16, 3, 32, 32)
        assert set(z.files) == {"images", "labels", "seg_masks", "depth_maps", "groups"}


def test_zero_budget_attack_saves_inputs(workdir):
    out = workdir / "atk0"
    rc = main(["attack", "--models", str(workdir / "models"), "--data", str(workdir / "data" / "dataset.npz"),
               "--method", "pgd", "--budget", "0", "--iterations", "2", "--out", str(out)])
    assert rc == 0
    with np.load(out / "adversarial.npz") as a, np.load(workdir / "data" / "dataset.npz") as c:
        assert np.array_equal(a["images"], c["images"])


def test_attack_then_defend_eval(workdir, capsys):
    out = workdir / "atk"
    assert main(["attack", "--models", str(workdir / "models"), "--data", str(workdir / "data" / "dataset.npz"),
                 "--method", "mifgsm", "--budget", str(8 / 255), "--iterations", "3", "--noise-level", "low",
                 "--p-diffusion", "0.5", "--limit", "8", "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["defend-eval", "--models", str(workdir / "models"), "--images", str(out / "adversarial.npz"),
                 "--clean", str(out / "clean.npz"), "--level", "high", "--out", str(out / "eval")]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["n_images"] == 8 and 0 <= result["accuracy"] <= 1
    assert (out / "eval" / "metrics.json").is_file()


def test_grid_report_and_check(workdir, capsys):
    cfg = tiny_config("models")
    (workdir / "cfg.json").write_text(json.dumps(cfg))
    out = workdir / "grid"
    assert main(["grid", "--config", str(workdir / "cfg.json"), "--out", str(out)]) == 0
    assert (out / "results.jsonl").is_file() and (out / "report.md").is_file()
    assert (out / "report.tex").is_file() and (out / "report.csv").is_file()
    capsys.readouterr()
    assert main(["report", "--store", str(out / "results.jsonl"), "--format", "csv"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert len(rows) == len(ResultsStore(out / "results.jsonl")) + 1
    # the untrained tiny stack need not satisfy the claims, but the grid is complete
    assert main(["check", "--store", str(out / "results.jsonl")]) in (0, 2)


def test_check_exit_codes(tmp_path):
    good = tmp_path / "good.jsonl"
    ResultsStore(good).append(fixture_records())
    assert main(["check", "--store", str(good), "--out", str(tmp_path)]) == 0
    assert len(json.loads((tmp_path / "claims.json").read_text())) == 7
    bad = tmp_path / "bad.jsonl"
    recs = [r for r in fixture_records() if not (r.attack["method"] == "pgd" and r.defense["mode"] == "none"
                                                 and r.metric == "accuracy" and r.attack["noise_level"] == "none")]
    from helpers import record
    ResultsStore(bad).append(recs + [record("pgd/none/0.0", "none", "accuracy", 0.9)])
    assert main(["check", "--store", str(bad)]) == 2
    partial = tmp_path / "partial.jsonl"
    ResultsStore(partial).append(fixture_records()[:3])
    assert main(["check", "--store", str(partial)]) == 1


def test_demo(workdir):
    out = workdir / "demo"
    assert main(["demo", "--models", str(workdir / "models"), "--n", "4", "--out", str(out)]) == 0
    summary = json.loads((out / "demo.json").read_text())
    assert len(summary["predictions"]["high"]) == 4
    assert (out / "demo.png").stat().st_size > 0


@pytest.mark.parametrize("argv", [
    [],
    ["attack", "--models", "nowhere", "--data", "x.npz", "--method", "pgd", "--out", "o"],
    ["attack", "--models", "m", "--data", "x", "--method", "cw", "--out", "o"],
    ["gen-data", "--n", "0", "--seed", "1", "--out", "o"],
    ["report", "--store", "missing.jsonl"],
    ["grid", "--config", "missing.json", "--out", "o"],
])
def test_validation_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1


def test_bad_device_env(workdir, monkeypatch):
    monkeypatch.setenv("DDSMOOTH_DEVICE", "tpu")
    assert main(["demo", "--models", str(workdir / "models"), "--out", str(workdir / "d2")]) == 1


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "ddsmooth", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "grid" in out.stdout and "defend-eval" in out.stdout
