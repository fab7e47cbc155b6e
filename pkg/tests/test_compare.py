import pandas as pd
import pytest

from unigen.compare import compare_configs, paired_deltas

from conftest import small_config


def test_paired_deltas_and_median():
    results = pd.DataFrame(
        [
            {"config": "gan", "seed": 0, "high_quality": 0.5},
            {"config": "gan", "seed": 1, "high_quality": 0.7},
            {"config": "iwgan", "seed": 0, "high_quality": 0.6},
            {"config": "iwgan", "seed": 1, "high_quality": 0.9},
        ]
    )
    table = paired_deltas(results, "gan", "iwgan", ["high_quality", "test_elbo"])
    assert list(table["seed"]) == [0, 1, "median"]
    assert table["high_quality_delta"].tolist()[:2] == pytest.approx([0.1, 0.2])
    assert table["high_quality_delta"].iloc[-1] == pytest.approx(0.15)
    assert "test_elbo_delta" not in table.columns


def test_paired_deltas_skip_unmatched_seeds():
    results = pd.DataFrame(
        [
            {"config": "a", "seed": 0, "m": 1.0},
            {"config": "b", "seed": 1, "m": 2.0},
        ]
    )
    assert paired_deltas(results, "a", "b", ["m"]).empty


def test_compare_configs_runs_paired_seeds(tmp_path):
    configs = [("gan", small_config("gan", steps=3)), ("iwgan", small_config("iwgan", steps=3, k=4))]
    table, path = compare_configs(configs, seeds=[0, 1], base_dir=tmp_path)
    assert path.exists() and (path.parent / "runs.csv").exists()
    assert list(table["seed"]) == [0, 1, "median"]
    assert "high_quality_delta" in table.columns
    runs = pd.read_csv(path.parent / "runs.csv")
    assert set(runs["status"]) == {"completed"}
    assert sorted(runs["seed"].tolist()) == [0, 0, 1, 1]


def test_compare_needs_two_configs(tmp_path):
    with pytest.raises(ValueError):
        compare_configs([("gan", small_config("gan"))], seeds=[0], base_dir=tmp_path)
