import json

import pytest
from click.testing import CliRunner

from unigen import run as cli_module
from unigen.optim import NumericalAbort
from unigen.run import cli

from conftest import small_config


@pytest.fixture
def runner():
    return CliRunner()


def _write_config(tmp_path, **overrides):
    cfg = small_config("vae", **overrides)
    path = tmp_path / "vae.json"
    path.write_text(json.dumps(cfg.to_mapping()))
    return path, cfg


def test_run_then_eval(runner, tmp_path):
    path, cfg = _write_config(tmp_path)
    result = runner.invoke(cli, ["run", str(path), "--base-dir", str(tmp_path)])
    assert result.exit_code == 0, result.output
    assert "[run] Done." in result.output

    ckpt = cfg.paths(tmp_path).checkpoint_path("final")
    result = runner.invoke(
        cli, ["eval", "--checkpoint", str(ckpt), "--dataset", '{"kind": "gaussian-mixture-2d"}', "--samples", "200"]
    )
    assert result.exit_code == 0, result.output
    metrics, _ = json.JSONDecoder().raw_decode(result.output[result.output.index("{") :])
    assert "test_elbo" in metrics and "high_quality" in metrics


def test_eval_rejects_mismatched_dataset(runner, tmp_path):
    path, cfg = _write_config(tmp_path)
    assert runner.invoke(cli, ["run", str(path), "--base-dir", str(tmp_path)]).exit_code == 0
    ckpt = cfg.paths(tmp_path).checkpoint_path("final")
    result = runner.invoke(cli, ["eval", "--checkpoint", str(ckpt), "--dataset", '{"kind": "tabular-synthetic"}'])
    assert result.exit_code == 1
    assert "does not match" in result.output


def test_invalid_config_exits_with_1(runner, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"kind": "iwgan", "seed": 0, "k": 3, "batch_size": 64}))
    result = runner.invoke(cli, ["run", str(path), "--base-dir", str(tmp_path)])
    assert result.exit_code == 1
    assert "[error]" in result.output

    result = runner.invoke(cli, ["run", str(tmp_path / "missing.yaml")])
    assert result.exit_code == 1


def test_numerical_abort_exits_with_2(runner, tmp_path, monkeypatch):
    path, _ = _write_config(tmp_path)

    def aborting(config, base_dir=None):
        raise NumericalAbort("Non-finite loss at step 3")

    monkeypatch.setattr(cli_module, "run_experiment", aborting)
    result = runner.invoke(cli, ["run", str(path)])
    assert result.exit_code == 2
    assert "[abort]" in result.output


def test_verify_lemmas_command(runner, tmp_path):
    out = tmp_path / "lemmas.jsonl"
    result = runner.invoke(cli, ["verify-lemmas", "--seed", "1", "--instances", "2", "--output", str(out)])
    assert result.exit_code == 0, result.output
    assert "0 failed" in result.output
    assert len(out.read_text().splitlines()) == 6

    assert runner.invoke(cli, ["verify-lemmas", "--instances", "0"]).exit_code == 1


def test_compare_command(runner, tmp_path):
    paths = []
    for kind, extra in (("gan", {}), ("iwgan", {"k": 4})):
        cfg = small_config(kind, steps=3, **extra)
        path = tmp_path / f"{kind}.json"
        path.write_text(json.dumps(cfg.to_mapping()))
        paths.append(str(path))
    result = runner.invoke(cli, ["compare", "--configs", *paths, "--seeds", "2", "--base-dir", str(tmp_path)])
    assert result.exit_code == 0, result.output
    assert "[compare] Done." in result.output


def test_verify_lemmas_exits_with_3_on_failed_check(runner, tmp_path, monkeypatch):
    def failing_suite(seed, instances, tol):
        yield {"check": "lemma1", "passed": True}
        yield {"check": "lemma2", "passed": False}
        yield {"check": "jsd_trajectory_claim", "passed": None}

    monkeypatch.setattr(cli_module, "run_suite", failing_suite)
    out = tmp_path / "lemmas.jsonl"
    result = runner.invoke(cli, ["verify-lemmas", "--output", str(out)])
    assert result.exit_code == 3
    assert "1 failed" in result.output
    assert len(out.read_text().splitlines()) == 3
