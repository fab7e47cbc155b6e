"""Training objectives as losses to minimize.

Each adversarial pair is written once against the discriminator table
``q(y|x)``: the discriminator side reconstructs ``y`` with ``q``, the generator
side with the reversed ``q^r(y|x) = q(1-y|x)``. Constant terms and the 1/2
scale from the uniform p(y) are dropped; learning rates absorb them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .models import (
    Bound,
    PriorSpec,
    RngStream,
    decoder_loglik,
    decoder_sample,
    discriminate,
    encode_reparam,
    gaussian_kl_to_prior,
    gaussian_loglik,
    gaussian_params,
    generate,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Batch:
    real_x: np.ndarray
    z: np.ndarray
    k: int = 1

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.z.shape[0] % self.k:
            raise ValueError(f"latent batch of {self.z.shape[0]} is not a multiple of k={self.k}")


@dataclass(frozen=True)
class IwReport:
    """Importance weights per group of k samples: rows of ``normalized`` sum to one."""

    raw_weights: np.ndarray
    normalized: np.ndarray
    ess: np.ndarray
    fallback_groups: int = 0

    @property
    def k(self) -> int:
        return int(self.normalized.shape[-1])

    def summary(self) -> Dict[str, float]:
        return {
            "ess_mean": float(self.ess.mean()),
            "ess_min": float(self.ess.min()),
            "weight_max": float(self.normalized.max()),
            "weight_min": float(self.normalized.min()),
            "iw_fallback_groups": float(self.fallback_groups),
        }


def log_q(disc: Bound, x: Tensor, y: int) -> Tensor:
    """log q_phi(y|x) per example."""
    p = discriminate(disc, x)
    return T.log(p) if y == 1 else T.log(1.0 - p)


def log_q_reversed(disc: Bound, x: Tensor, y: int) -> Tensor:
    """log q^r_phi(y|x) = log q_phi(1-y|x)."""
    return log_q(disc, x, 1 - y)


def gan_disc_terms(disc: Bound, real_x: Tensor, fake_x: Tensor) -> Dict[str, Tensor]:
    fake_x = T.as_tensor(fake_x).detach()
    return {
        "real": -T.mean(log_q(disc, real_x, 1)),
        "fake": -T.mean(log_q(disc, fake_x, 0)),
    }


def gan_disc_loss(disc: Bound, real_x: Tensor, fake_x: Tensor) -> Tensor:
    """-[mean log D(real) + mean log(1 - D(fake))]; fake samples are detached."""
    terms = gan_disc_terms(disc, real_x, fake_x)
    return terms["real"] + terms["fake"]


def gan_gen_loss_unsaturated(disc: Bound, fake_x: Tensor) -> Tensor:
    """-mean log D(G(z)), i.e. -mean log q^r(y=0|x) on the generated branch."""
    return -T.mean(log_q_reversed(disc, fake_x, 0))


def infogan_code_loss(code_net: Bound, fake_x: Tensor, z: np.ndarray) -> Tensor:
    """-mean log q_eta(z|x, y=0) under the code net's diagonal Gaussian."""
    mean_, logvar = gaussian_params(code_net(fake_x))
    return -T.mean(gaussian_loglik(Tensor(z), mean_, logvar))


def infogan_losses(gen: Bound, disc: Bound, code_net: Bound, z: np.ndarray, real_x: Tensor) -> Dict[str, Tensor]:
    fake = generate(gen, Tensor(z))
    disc_adv = gan_disc_loss(disc, real_x, fake)
    gen_adv = gan_gen_loss_unsaturated(disc, fake)
    code = infogan_code_loss(code_net, fake, z)
    return {
        "disc_adv_loss": disc_adv,
        "disc_loss": disc_adv + infogan_code_loss(code_net, fake.detach(), z),
        "gen_adv_loss": gen_adv,
        "code_loss": code,
        "gen_loss": gen_adv + code,
    }


def aae_losses(encoder: Bound, disc_z: Bound, decoder: Bound, real_x: Tensor, prior_z: np.ndarray) -> Dict[str, Tensor]:
    """Adversarial autoencoder: the discriminator works in code space.

    ``prior_z`` plays the real branch (y=1) and ``E(x)`` the approximate branch
    (y=0); the decoder is a diagonal Gaussian over x.
    """
    real_x = T.as_tensor(real_x)
    code = encoder(real_x)
    mean_, logvar = gaussian_params(decoder(code))
    nll = -T.mean(gaussian_loglik(real_x, mean_, logvar))
    adv = gan_gen_loss_unsaturated(disc_z, code)
    diff = real_x - mean_
    return {
        "disc_loss": gan_disc_loss(disc_z, Tensor(prior_z), code),
        "adv_loss": adv,
        "nll_loss": nll,
        "gen_loss": adv + nll,
        "recon_loss": T.mean(T.sum(diff * diff, axis=-1) * 0.5),
    }


def elbo_terms(
    encoder: Bound,
    decoder: Bound,
    x: Tensor,
    likelihood: str,
    rng: Optional[RngStream] = None,
    eps: Optional[np.ndarray] = None,
) -> Dict[str, Tensor]:
    """Per-example single-sample reconstruction and KL-to-prior."""
    x = T.as_tensor(x)
    z, mean_, logvar = encode_reparam(encoder, x, rng=rng, eps=eps)
    recon = decoder_loglik(decoder, z, x, likelihood)
    kl = gaussian_kl_to_prior(mean_, logvar)
    return {"recon": recon, "kl": kl, "elbo": recon - kl}


def vae_elbo(
    encoder: Bound,
    decoder: Bound,
    real_x: Tensor,
    rng: Optional[RngStream] = None,
    likelihood: str = "bernoulli",
    eps: Optional[np.ndarray] = None,
) -> Tensor:
    """Single-sample reparameterized ELBO averaged over the batch (to maximize)."""
    return T.mean(elbo_terms(encoder, decoder, real_x, likelihood, rng=rng, eps=eps)["elbo"])


def wake_sleep_step(
    gen: Bound,
    inf: Bound,
    real_x: Tensor,
    prior: PriorSpec,
    rng: RngStream,
    likelihood: str = "bernoulli",
    eps: Optional[np.ndarray] = None,
) -> Dict[str, Tensor]:
    """Wake: fit p_theta(x|h) to data with h from q_lambda (detached).
    Sleep: fit q_lambda(h|x) to dreams (h, x) ~ p(h) p_theta(x|h) (detached)."""
    real_x = T.as_tensor(real_x)
    h_wake, _, _ = encode_reparam(inf, real_x, rng=rng.child("wake"), eps=eps)
    wake = -T.mean(decoder_loglik(gen, h_wake.detach(), real_x, likelihood))

    dream_rng = rng.child("sleep")
    h = prior.sample(real_x.shape[0], dream_rng)
    with T.no_grad():
        dreams = decoder_sample(gen, Tensor(h), likelihood, dream_rng)
    mean_, logvar = gaussian_params(inf(Tensor(dreams)))
    sleep = -T.mean(gaussian_loglik(Tensor(h), mean_, logvar))
    return {"wake_loss": wake, "sleep_loss": sleep}


def indicator_sleep_loss(disc: Bound, real_x: Tensor, fake_x: Tensor) -> Tensor:
    """Sleep phase with h = y and lambda = phi: dreams are (y=1, real x) and (y=0, G(z))."""
    dreams = {1: T.as_tensor(real_x), 0: T.as_tensor(fake_x).detach()}
    loss = None
    for y, x in dreams.items():
        term = -T.mean(log_q(disc, x, y))
        loss = term if loss is None else loss + term
    return loss


def importance_weights(d: np.ndarray, k: int) -> IwReport:
    """w_i = q^r(y=0|x_i) / q(y=0|x_i) = D/(1-D), normalized within groups of k.

    The uniform fallback guards raw probability tables (D = 1 or an all-zero
    group). Outputs of ``discriminate`` are clamped to [1e-7, 1 - 1e-7] and never
    reach it.
    """
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    if k < 1 or d.size % k:
        raise ValueError(f"{d.size} samples cannot be split into groups of k={k}")
    d = d.reshape(-1, k)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = d / (1.0 - d)
    totals = raw.sum(axis=1, keepdims=True)
    bad = ~np.isfinite(totals[:, 0]) | (totals[:, 0] <= 0)
    normalized = np.where(bad[:, None], 1.0 / k, raw / np.where(bad[:, None], 1.0, totals))
    if bad.any():
        logger.warning("Importance weights degenerate in %d group(s); using uniform weights", int(bad.sum()))
    ess = 1.0 / np.sum(normalized**2, axis=1)
    return IwReport(raw_weights=raw, normalized=normalized, ess=ess, fallback_groups=int(bad.sum()))


def iw_gan_gen_update(disc: Bound, gen: Bound, z: np.ndarray, k: int) -> Dict[str, object]:
    """Importance-weighted generator loss: -sum_i w~_i log q^r(y=0|x_i), averaged over groups.

    Weights are constants; the JSD correction is dropped for every k.
    """
    fake = generate(gen, Tensor(z))
    p = discriminate(disc, fake)
    report = importance_weights(p.data, k)
    n_groups = report.normalized.shape[0]
    weights = Tensor(report.normalized.reshape(-1) / n_groups)
    loss = -T.sum(weights * T.log(p))
    return {"loss": loss, "report": report, "fake_x": fake}


def aavae_weights(disc: Bound, x: Tensor, temperature: float) -> np.ndarray:
    """q^r_phi(y=0|x) = D_tau(x): the weight of the learnable (y=0) branch."""
    if temperature < 1.0:
        raise ValueError(f"temperature must be >= 1, got {temperature}")
    with T.no_grad():
        return discriminate(disc, T.as_tensor(x).detach(), temperature=temperature).data


def aavae_losses(
    encoder: Bound,
    decoder: Bound,
    disc: Bound,
    real_x: Tensor,
    fake_x: Tensor,
    rng: Optional[RngStream] = None,
    temperature: float = 3.0,
    likelihood: str = "bernoulli",
    perfect_discriminator: bool = False,
    eps_real: Optional[np.ndarray] = None,
    eps_fake: Optional[np.ndarray] = None,
) -> Dict[str, object]:
    """Adversary-activated VAE losses.

    Real and fake examples contribute their ELBO terms weighted by the
    reversed, temperature-smoothed discriminator; the sum is divided by the real
    count. ``perfect_discriminator`` pins the weights to 1 (real) / 0 (fake).
    The y=1 branch and the label KL carry no theta/eta gradient and are skipped.
    """
    if temperature < 1.0:
        raise ValueError(f"temperature must be >= 1, got {temperature}")
    real_x = T.as_tensor(real_x)
    fake_x = T.as_tensor(fake_x).detach()
    n_real = real_x.shape[0]
    if fake_x.shape[0] != n_real:
        raise ValueError(f"AAVAE needs one fake sample per real example ({fake_x.shape[0]} vs {n_real})")

    if perfect_discriminator:
        w_real, w_fake = np.ones(n_real), np.zeros(n_real)
    else:
        w_real = aavae_weights(disc, real_x, temperature)
        w_fake = aavae_weights(disc, fake_x, temperature)

    real_terms = elbo_terms(encoder, decoder, real_x, likelihood, rng=rng, eps=eps_real)
    fake_terms = elbo_terms(encoder, decoder, fake_x, likelihood, rng=rng, eps=eps_fake)
    weighted = T.sum(Tensor(w_real) * real_terms["elbo"]) + T.sum(Tensor(w_fake) * fake_terms["elbo"])
    objective = weighted * (1.0 / n_real)
    return {
        "gen_loss": -objective,
        "disc_loss": gan_disc_loss(disc, real_x, fake_x),
        "weights_real": w_real,
        "weights_fake": w_fake,
    }
