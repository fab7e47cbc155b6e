import json

import numpy as np
import pytest

from unigen import metrics
from unigen.config import MixtureSpec
from unigen.datasets import sample_mixture_2d
from unigen.metrics import MetricWriter, histogram_divergences, mode_coverage, summarize
from unigen.models import Bound, Mlp, RngStream
from unigen.tensor import Tensor

from conftest import constant_net, random_net


def test_mode_coverage_on_data_samples():
    spec = MixtureSpec()
    n = 2000
    samples = sample_mixture_2d(spec, n, RngStream(0))
    out = mode_coverage(samples, spec)
    # 2-D Gaussian mass inside 3 sigma
    inside = 1.0 - np.exp(-4.5)
    assert out["covered_modes"] == 2
    assert out["high_quality"] == pytest.approx(inside, abs=3 * np.sqrt(inside * (1 - inside) / n))
    assert out["smallest_mode_hit"] == pytest.approx(0.25, abs=0.03)


def test_mode_coverage_collapsed_generator():
    spec = MixtureSpec()
    out = mode_coverage(np.tile([[-2.0, 0.0]], (50, 1)), spec)
    assert out["covered_modes"] == 1
    assert out["smallest_mode_hit"] == 0.0
    assert out["mode_hits"] == [1.0, 0.0]


def test_mode_coverage_matches_brute_force():
    spec = MixtureSpec(means=((0.0, 0.0), (3.0, 0.0), (0.0, 3.0)), weights=(0.5, 0.3, 0.2), stds=(0.5, 0.5, 0.5))
    samples = np.random.default_rng(0).uniform(-2, 5, size=(300, 2))
    out = mode_coverage(samples, spec, radius=1.0)
    hits = np.zeros(3)
    good = 0
    for s in samples:
        d = [np.hypot(*(s - np.array(m))) for m in spec.means]
        k = int(np.argmin(d))
        if d[k] <= 1.0:
            hits[k] += 1
            good += 1
    assert np.allclose(out["mode_hits"], hits / 300)
    assert out["high_quality"] == pytest.approx(good / 300)
    with pytest.raises(ValueError):
        mode_coverage(samples, spec, radius=0.0)


def test_histogram_divergences():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5000, 2)), rng.normal(size=(5000, 2))
    same = histogram_divergences(a, b, bins=10)
    assert same["kl_hat"] < 0.05 and same["jsd_hat"] < 0.02
    far = histogram_divergences(a - 2.0, b + 2.0, bins=10)
    assert far["jsd_hat"] > 0.5
    assert far["jsd_hat"] <= np.log(2.0)
    with pytest.raises(ValueError):
        histogram_divergences(np.zeros((0, 2)), b)


def test_test_elbo_of_constant_model():
    enc = constant_net(Mlp("enc", (3, 4, 2), head="gaussian"))
    bias = np.array([0.3, -1.0, 2.0])
    dec_net = Mlp("dec", (2, 4, 3))
    dec = constant_net(dec_net)
    dec = Bound(dec_net, {**dec.weights, "dec.b1": Tensor(bias)})
    x = (np.random.default_rng(0).uniform(size=(10, 3)) > 0.5).astype(float)
    expected = np.mean(x @ bias - np.sum(np.log1p(np.exp(bias))))
    for estimator in ("elbo", "iw"):
        value = metrics.test_elbo(enc, dec, x, RngStream(0), samples_per_x=3, estimator=estimator)
        assert value == pytest.approx(expected, abs=1e-10)


def test_importance_weighted_bound_tightens_with_more_samples():
    # the encoder is the prior, so the single-sample bound pays the full Jensen gap
    enc = constant_net(Mlp("enc", (4, 6, 2), head="gaussian"))
    dec = random_net(Mlp("dec", (2, 6, 4)), seed=2, gain=3.0)
    x = (np.random.default_rng(3).uniform(size=(2000, 4)) > 0.5).astype(float)
    one = metrics.test_elbo(enc, dec, x, RngStream(4), samples_per_x=1, estimator="iw")
    many = metrics.test_elbo(enc, dec, x, RngStream(4), samples_per_x=50, estimator="iw")
    assert many > one


def test_test_elbo_argument_checks():
    enc = constant_net(Mlp("enc", (3, 4, 2), head="gaussian"))
    dec = constant_net(Mlp("dec", (2, 4, 3)))
    with pytest.raises(ValueError):
        metrics.test_elbo(enc, dec, np.zeros((2, 3)), RngStream(0), samples_per_x=0)
    with pytest.raises(ValueError):
        metrics.test_elbo(enc, dec, np.zeros((2, 3)), RngStream(0), estimator="exact")


def test_metric_writer_nulls_non_finite(tmp_path, caplog):
    writer = MetricWriter(tmp_path / "run" / "metrics.jsonl")
    writer.write({"step": 1, "loss": float("nan"), "ess": np.float64(2.5)})
    writer.write({"step": 2, "loss": 0.5})
    rows = [json.loads(line) for line in (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
    assert rows[0] == {"step": 1, "loss": None, "ess": 2.5}
    assert "non-finite" in caplog.text
    assert summarize(rows, ["loss", "ess"]) == {"loss": 0.5, "ess": 2.5}
