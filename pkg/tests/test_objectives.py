import numpy as np
import pytest

from unigen import tensor as T
from unigen.models import Bound, Mlp, PriorSpec, RngStream, encode_reparam
from unigen.objectives import (
    Batch,
    aae_losses,
    aavae_losses,
    aavae_weights,
    elbo_terms,
    gan_disc_loss,
    gan_gen_loss_unsaturated,
    importance_weights,
    indicator_sleep_loss,
    infogan_losses,
    iw_gan_gen_update,
    vae_elbo,
    wake_sleep_step,
)
from unigen.tensor import Tensor

from conftest import constant_net, random_net

LOG2 = float(np.log(2.0))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_uniform_discriminator_losses(rng):
    disc = constant_net(Mlp("disc", (2, 4, 1), head="sigmoid"))
    real, fake = Tensor(rng.normal(size=(8, 2))), Tensor(rng.normal(size=(8, 2)))
    assert gan_disc_loss(disc, real, fake).item() == pytest.approx(2 * LOG2)
    assert gan_gen_loss_unsaturated(disc, fake).item() == pytest.approx(LOG2)
    assert np.allclose(aavae_weights(disc, fake, temperature=1.0), 0.5)


def test_importance_weight_arithmetic():
    report = importance_weights(np.array([0.8, 0.2]), 2)
    assert report.normalized[0] == pytest.approx([16 / 17, 1 / 17])
    assert report.ess[0] == pytest.approx(1.0 / ((16 / 17) ** 2 + (1 / 17) ** 2))
    assert report.fallback_groups == 0


def test_importance_weights_uniform_discriminator_and_k1():
    assert np.array_equal(importance_weights(np.full(8, 0.5), 4).normalized, np.full((2, 4), 0.25))
    assert np.array_equal(importance_weights(np.array([0.1, 0.7, 0.3]), 1).normalized, np.ones((3, 1)))


def test_importance_weights_fall_back_on_degenerate_groups(caplog):
    report = importance_weights(np.array([1.0, 0.5, 0.2, 0.4]), 2)
    assert report.fallback_groups == 1
    assert np.array_equal(report.normalized[0], [0.5, 0.5])
    assert report.normalized[1].sum() == pytest.approx(1.0)
    assert "uniform weights" in caplog.text


def test_importance_weights_zero_group_falls_back_but_clamped_outputs_do_not():
    report = importance_weights(np.array([0.0, 0.0, 0.3, 0.6]), 2)
    assert report.fallback_groups == 1
    assert np.array_equal(report.normalized[0], [0.5, 0.5])

    clamped = importance_weights(np.array([1.0 - 1e-7, 1e-7]), 2)
    assert clamped.fallback_groups == 0
    assert clamped.normalized[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_importance_weights_group_validation():
    with pytest.raises(ValueError):
        importance_weights(np.full(5, 0.5), 2)
    with pytest.raises(ValueError):
        Batch(real_x=np.zeros((6, 2)), z=np.zeros((6, 2)), k=4)


def test_iw_update_with_k1_matches_vanilla_generator_gradient(rng):
    gen_net = Mlp("gen", (2, 6, 2))
    gen_w = gen_net.init(RngStream(1, "gen"))
    disc = random_net(Mlp("disc", (2, 6, 1), head="sigmoid"), seed=2)
    z = rng.normal(size=(8, 2))

    grads = []
    for use_iw in (True, False):
        with T.Tape() as tape:
            gen = Bound(gen_net, tape.watch_all(gen_w))
            if use_iw:
                loss = iw_gan_gen_update(disc, gen, z, k=1)["loss"]
            else:
                loss = gan_gen_loss_unsaturated(disc, gen(Tensor(z)))
        grads.append(tape.backward(loss))
    for name in gen_w:
        assert np.allclose(grads[0][name], grads[1][name], rtol=0, atol=1e-12)


def test_iw_update_reports_weights_per_group(rng):
    gen = random_net(Mlp("gen", (2, 6, 2)))
    disc = random_net(Mlp("disc", (2, 6, 1), head="sigmoid"), seed=3, gain=3.0)
    out = iw_gan_gen_update(disc, gen, rng.normal(size=(12, 2)), k=4)
    report = out["report"]
    assert report.normalized.shape == (3, 4)
    assert np.allclose(report.normalized.sum(axis=1), 1.0)
    assert np.all((report.ess >= 1.0 - 1e-12) & (report.ess <= 4.0 + 1e-12))
    assert out["fake_x"].shape == (12, 2)


def test_disc_loss_does_not_reach_the_generator(rng):
    gen_net, disc_net = Mlp("gen", (2, 4, 2)), Mlp("disc", (2, 4, 1), head="sigmoid")
    gen_w = gen_net.init(RngStream(0, "gen"))
    disc_w = disc_net.init(RngStream(0, "disc"))
    with T.Tape() as tape:
        gw, dw = tape.watch_all(gen_w), tape.watch_all(disc_w)
        fake = Bound(gen_net, gw)(Tensor(rng.normal(size=(5, 2))))
        loss = gan_disc_loss(Bound(disc_net, dw), Tensor(rng.normal(size=(5, 2))), fake)
    grads = tape.backward(loss)
    assert all(not np.any(grads[name]) for name in gen_w)
    assert any(np.any(grads[name]) for name in disc_w)


def test_sleep_phase_with_label_code_is_the_discriminator_loss(rng):
    disc = random_net(Mlp("disc", (2, 5, 1), head="sigmoid"), seed=4)
    real, fake = Tensor(rng.normal(size=(6, 2))), Tensor(rng.normal(size=(6, 2)))
    assert indicator_sleep_loss(disc, real, fake).item() == gan_disc_loss(disc, real, fake).item()


def test_wake_phase_is_the_vae_reconstruction_term(rng):
    enc = random_net(Mlp("enc", (3, 5, 2), head="gaussian"), seed=5)
    dec = random_net(Mlp("dec", (2, 5, 3)), seed=6)
    x = Tensor((rng.uniform(size=(4, 3)) > 0.5).astype(float))
    eps = rng.normal(size=(4, 2))
    losses = wake_sleep_step(dec, enc, x, PriorSpec(dim=2), RngStream(0), likelihood="bernoulli", eps=eps)
    recon = elbo_terms(enc, dec, x, "bernoulli", eps=eps)["recon"]
    assert losses["wake_loss"].item() == pytest.approx(-T.mean(recon).item(), abs=1e-12)
    assert np.isfinite(losses["sleep_loss"].item())


def test_wake_sleep_gradients_stay_in_their_phase(rng):
    enc_net, dec_net = Mlp("enc", (3, 4, 2), head="gaussian"), Mlp("dec", (2, 4, 3))
    enc_w, dec_w = enc_net.init(RngStream(0, "enc")), dec_net.init(RngStream(0, "dec"))
    x = Tensor((rng.uniform(size=(4, 3)) > 0.5).astype(float))
    for phase, frozen in (("wake_loss", enc_w), ("sleep_loss", dec_w)):
        with T.Tape() as tape:
            ew, dw = tape.watch_all(enc_w), tape.watch_all(dec_w)
            loss = wake_sleep_step(Bound(dec_net, dw), Bound(enc_net, ew), x, PriorSpec(dim=2), RngStream(1))[phase]
        grads = tape.backward(loss)
        assert all(not np.any(grads[name]) for name in frozen), phase


def test_aavae_with_perfect_discriminator_is_the_vae_elbo(rng):
    enc = random_net(Mlp("enc", (3, 5, 2), head="gaussian"), seed=7)
    dec = random_net(Mlp("dec", (2, 5, 3)), seed=8)
    disc = random_net(Mlp("disc", (3, 5, 1), head="sigmoid"), seed=9)
    x = Tensor((rng.uniform(size=(6, 3)) > 0.5).astype(float))
    fake = (rng.uniform(size=(6, 3)) > 0.5).astype(float)
    eps_real, eps_fake = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    out = aavae_losses(enc, dec, disc, x, fake, perfect_discriminator=True, eps_real=eps_real, eps_fake=eps_fake)
    elbo = vae_elbo(enc, dec, x, eps=eps_real)
    assert -out["gen_loss"].item() == pytest.approx(elbo.item(), abs=1e-10)


def test_aavae_weights_are_constants_and_temperature_smooths(rng):
    enc_net, dec_net = Mlp("enc", (3, 5, 2), head="gaussian"), Mlp("dec", (2, 5, 3))
    enc_w, dec_w = enc_net.init(RngStream(7, "enc")), dec_net.init(RngStream(8, "dec"))
    disc_net = Mlp("disc", (3, 5, 1), head="sigmoid")
    disc_w = disc_net.init(RngStream(9, "disc"), gain=4.0)
    x = Tensor((rng.uniform(size=(6, 3)) > 0.5).astype(float))
    fake = rng.uniform(size=(6, 3))

    with T.Tape() as tape:
        enc, dec = Bound(enc_net, tape.watch_all(enc_w)), Bound(dec_net, tape.watch_all(dec_w))
        disc = Bound(disc_net, tape.watch_all(disc_w))
        out = aavae_losses(enc, dec, disc, x, fake, rng=RngStream(0), temperature=3.0)
    grads = tape.backward(out["gen_loss"])
    assert all(not np.any(grads[name]) for name in disc_w)
    assert any(np.any(grads[name]) for name in dec_w)

    disc = Bound(disc_net, {k: Tensor(v) for k, v in disc_w.items()})
    sharp = aavae_weights(disc, x, 1.0)
    smooth = aavae_weights(disc, x, 5.0)
    assert np.all(np.abs(smooth - 0.5) <= np.abs(sharp - 0.5) + 1e-12)
    with pytest.raises(ValueError):
        aavae_weights(disc, x, 0.5)


def test_aavae_needs_one_fake_per_real(rng):
    enc = random_net(Mlp("enc", (3, 5, 2), head="gaussian"))
    dec = random_net(Mlp("dec", (2, 5, 3)))
    disc = random_net(Mlp("disc", (3, 5, 1), head="sigmoid"))
    with pytest.raises(ValueError):
        aavae_losses(enc, dec, disc, np.zeros((4, 3)), np.zeros((3, 3)), rng=RngStream(0))


def test_aae_is_infogan_with_roles_swapped(rng):
    gen = random_net(Mlp("gen", (2, 5, 2)), seed=1)
    disc = random_net(Mlp("disc", (2, 5, 1), head="sigmoid"), seed=2)
    code_net = random_net(Mlp("code", (2, 5, 2), head="gaussian"), seed=3)
    z, real = rng.normal(size=(7, 2)), rng.normal(size=(7, 2))

    info = infogan_losses(gen, disc, code_net, z, Tensor(real))
    # the generator plays the encoder: its input z is the "data", real samples the "prior"
    aae = aae_losses(gen, disc, code_net, Tensor(z), prior_z=real)
    assert aae["adv_loss"].item() == pytest.approx(info["gen_adv_loss"].item(), abs=1e-12)
    assert aae["disc_loss"].item() == pytest.approx(info["disc_adv_loss"].item(), abs=1e-12)
    assert aae["nll_loss"].item() == pytest.approx(info["code_loss"].item(), abs=1e-12)


def test_encoder_kl_term_matches_closed_form(rng):
    enc = random_net(Mlp("enc", (3, 4, 2), head="gaussian"), seed=2)
    dec = random_net(Mlp("dec", (2, 4, 3)), seed=3)
    x = Tensor((rng.uniform(size=(5, 3)) > 0.5).astype(float))
    terms = elbo_terms(enc, dec, x, "bernoulli", eps=np.zeros((5, 2)))
    _, mean_, logvar = encode_reparam(enc, x, eps=np.zeros((5, 2)))
    manual = 0.5 * np.sum(np.exp(logvar.data) + mean_.data**2 - 1.0 - logvar.data, axis=-1)
    assert np.allclose(terms["kl"].data, manual)
    assert np.allclose(terms["elbo"].data, terms["recon"].data - manual)
