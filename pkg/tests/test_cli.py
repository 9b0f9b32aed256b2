from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from moeplan import cli
from moeplan.config import SloSpec, save_config
from moeplan.presets import preset_config

FAST = {
    "fit": ["fit"],
    "predict": ["predict", "--requests", "6", "--history", "60"],
    "plan": ["plan", "--history", "60"],
    "simulate": ["simulate", "--history", "60", "--runs", "3"],
    "compare": ["compare", "--requests", "2", "--history", "60"],
    "oracle-lpt": ["oracle", "lpt", "--instances", "100"],
    "oracle-tokens": ["oracle", "tokens", "--instances", "200"],
}


def run(tmp_path: Path, name: str, argv: list[str]) -> tuple[int, Path]:
    out = tmp_path / name
    return cli.main([*argv, "--out", str(out), "--seed", "3"]), out


def primary_outputs(out: Path) -> dict[str, bytes]:
    man = json.loads((out / "run_manifest.json").read_text())
    return {n: (out / n).read_bytes() for n in man["outputs"]}


@pytest.mark.parametrize("name", sorted(FAST))
def test_rerun_is_byte_identical(tmp_path, name, capsys):
    code_a, a = run(tmp_path, "a", FAST[name])
    out_a = capsys.readouterr().out
    code_b, b = run(tmp_path, "b", FAST[name])
    out_b = capsys.readouterr().out
    assert code_a == code_b == cli.EXIT_OK
    fa, fb = primary_outputs(a), primary_outputs(b)
    assert fa and fa == fb
    assert out_a == out_b


@pytest.mark.parametrize("name", sorted(FAST))
def test_manifest_lists_every_output(tmp_path, name, capsys):
    code, out = run(tmp_path, "x", FAST[name])
    assert code == cli.EXIT_OK
    man = json.loads((out / "run_manifest.json").read_text())
    written = sorted(p.name for p in out.iterdir() if p.name != "run_manifest.json")
    assert sorted(man["outputs"]) == written
    assert len(set(man["outputs"])) == len(man["outputs"])
    for key in ("command", "config_paths", "seed", "output_directory", "artifact_version", "timestamp"):
        assert key in man
    assert man["seed"] == 3 and man["status"] == "ok"


def test_jobs_do_not_change_compare(tmp_path, capsys):
    argv = ["compare", "--requests", "3", "--history", "60"]
    _, a = run(tmp_path, "j1", argv)
    _, b = run(tmp_path, "j3", [*argv, "--jobs", "3"])
    assert (a / "compare.csv").read_bytes() == (b / "compare.csv").read_bytes()


def test_infeasible_exit_names_constraint(tmp_path, capsys):
    cfg = preset_config("small-8x12", 0)
    path = tmp_path / "tight.json"
    save_config(path, *cfg._replace(slo=SloSpec(30.0, 1e-4)))
    code, out = run(tmp_path, "inf", ["plan", "--config", str(path), "--history", "60"])
    assert code == cli.EXIT_INFEASIBLE
    assert "10d" in capsys.readouterr().err
    man = json.loads((out / "run_manifest.json").read_text())
    assert man["status"] == "infeasible" and man["binding_constraint"] == "10d"
    assert man["config_paths"] == [str(path.resolve())]


def test_input_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{\"model\": {}}")
    assert run(tmp_path, "c", ["plan", "--config", str(bad)])[0] == cli.EXIT_INPUT
    assert run(tmp_path, "a", ["plan", "--activation", str(tmp_path / "missing.npy"), "--n-in", "8"])[0] \
        == cli.EXIT_INPUT
    np.save(tmp_path / "act.npy", np.full((12, 8), 1 / 8))
    assert run(tmp_path, "n", ["plan", "--activation", str(tmp_path / "act.npy")])[0] == cli.EXIT_INPUT
    assert run(tmp_path, "j", ["compare", "--jobs", "0"])[0] == cli.EXIT_INPUT


def test_fit_missing_layer_exit_2(tmp_path, capsys):
    samples = tmp_path / "s.csv"
    rows = ["layer,memory_mb,seconds"]
    for l in range(11):     # layer 11 has no samples
        rows += [f"{l},{m},{0.02 + 0.5 * np.exp(-m / 300):.9f}" for m in range(128, 2049, 128)]
    samples.write_text("\n".join(rows) + "\n")
    code, out = run(tmp_path, "fit", ["fit", "--samples", str(samples)])
    text = capsys.readouterr()
    assert code == cli.EXIT_INPUT
    assert "11" in text.out + text.err


def test_fit_prints_threshold(tmp_path, capsys):
    code, _ = run(tmp_path, "fit", ["fit"])
    assert code == cli.EXIT_OK
    assert "threshold" in capsys.readouterr().out


def test_baseline_flag_gives_report(tmp_path, capsys):
    code, out = run(tmp_path, "b", ["plan", "--history", "60", "--baseline", "mix"])
    assert code == cli.EXIT_OK
    assert not (out / "plan.json").exists()
    assert json.loads((out / "report.json").read_text())["label"] == "MIX"


def test_simulate_zero_dispersion_matches_plan(tmp_path, capsys):
    _, p = run(tmp_path, "p", ["plan", "--history", "60"])
    code, s = run(tmp_path, "s", ["simulate", "--history", "60", "--plan", str(p / "plan.json"),
                                  "--dispersion", "0"])
    assert code == cli.EXIT_OK
    trace = json.loads((p / "trace_report.json").read_text())
    sim = json.loads((s / "sim.json").read_text())
    assert sim["realized_tpot"] == pytest.approx(trace["latency"]["tpot"], abs=1e-12)
    assert sim["realized_ttft"] == pytest.approx(trace["latency"]["ttft"], abs=1e-12)


def test_internal_error_exit_4(tmp_path, monkeypatch, capsys):
    def boom(args, run):
        raise RuntimeError("boom")
    monkeypatch.setattr(cli, "cmd_plan", boom)
    code, out = run(tmp_path, "i", ["plan"])
    assert code == cli.EXIT_INTERNAL
    assert json.loads((out / "run_manifest.json").read_text())["status"] == "internal_error"


def test_price_override_env(tmp_path, monkeypatch, capsys):
    _, a = run(tmp_path, "a", ["plan", "--history", "60", "--baseline", "gpu"])
    gpu = preset_config("small-8x12", 3).platform.gpu_price_per_mb_second
    monkeypatch.setenv("MOEPLAN_GPU_PRICE", repr(gpu / 2))
    _, b = run(tmp_path, "b", ["plan", "--history", "60", "--baseline", "gpu"])
    ra = json.loads((a / "report.json").read_text())
    rb = json.loads((b / "report.json").read_text())
    assert rb["total"] == pytest.approx(ra["total"] / 2, rel=1e-12)
    assert json.loads((b / "run_manifest.json").read_text())["price_overrides"] == {"gpu": repr(gpu / 2)}
    monkeypatch.setenv("MOEPLAN_GPU_PRICE", "0")
    assert run(tmp_path, "c", ["plan", "--baseline", "gpu"])[0] == cli.EXIT_INPUT
