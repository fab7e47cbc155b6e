"""Exact probability computations over small finite supports.

Everything here is a closed-form sum, so these objects serve as oracles for
the gradient identities checked in ``oracle.py``. Conventions: ``y = 1`` is
the real-data branch and ``y = 0`` the generated branch; a discriminator
table holds ``q(y=1|x)`` per support point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, softmax, xlogy

SUM_TOL = 1e-12
LOG_HALF = float(np.log(0.5))


class DistributionError(ValueError):
    pass


class AbsoluteContinuityError(ValueError):
    def __init__(self, index: int, message: Optional[str] = None):
        super().__init__(message or f"q(x)=0 but p(x)>0 at support point {index}")
        self.index = index


@dataclass(frozen=True)
class TabularDist:
    probs: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.probs, dtype=np.float64).reshape(-1)
        if arr.size == 0:
            raise DistributionError("TabularDist needs a positive support size")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise DistributionError("TabularDist probabilities must be finite and non-negative")
        if abs(arr.sum() - 1.0) > SUM_TOL:
            raise DistributionError(f"TabularDist probabilities sum to {arr.sum():.15f}, not 1")
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)

    @property
    def support_size(self) -> int:
        return int(self.probs.size)

    @classmethod
    def from_weights(cls, weights: Sequence[float]) -> "TabularDist":
        w = np.asarray(weights, dtype=np.float64)
        total = w.sum()
        if total <= 0:
            raise DistributionError("weights must have a positive total")
        return cls(w / total)

    @classmethod
    def from_logits(cls, logits: Sequence[float]) -> "TabularDist":
        return cls(softmax(np.asarray(logits, dtype=np.float64)))

    @classmethod
    def uniform(cls, n: int) -> "TabularDist":
        return cls(np.full(n, 1.0 / n))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(self.support_size, size=n, p=self.probs)


@dataclass(frozen=True)
class TabularConditional:
    """Rows keyed by condition value; conditions listed in ``undefined`` have no row."""

    rows: Mapping[int, TabularDist]
    undefined: Tuple[int, ...] = ()

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "TabularConditional":
        return cls(rows={i: TabularDist(row) for i, row in enumerate(np.asarray(matrix, dtype=np.float64))})

    def table(self, n_conditions: Optional[int] = None) -> np.ndarray:
        """Row-stacked probabilities; undefined rows come back as NaN."""
        n = n_conditions if n_conditions is not None else max(list(self.rows) + list(self.undefined)) + 1
        width = next(iter(self.rows.values())).support_size
        out = np.full((n, width), np.nan)
        for cond, dist in self.rows.items():
            out[cond] = dist.probs
        return out


PhiLike = Union[np.ndarray, Sequence[float], TabularConditional]


def discriminator_values(phi: PhiLike, n: int) -> np.ndarray:
    """q(y=1|x) for every support point."""
    if isinstance(phi, TabularConditional):
        return phi.table(n)[:, 1]
    d = np.asarray(phi, dtype=np.float64).reshape(-1)
    if d.size != n:
        raise DistributionError(f"discriminator table has {d.size} entries, support has {n}")
    if np.any((d < 0) | (d > 1)):
        raise DistributionError("discriminator probabilities must lie in [0, 1]")
    return d


def kl_array(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p||q) on raw arrays; p need not be normalized (used under perturbation)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DistributionError(f"support mismatch: {p.shape} vs {q.shape}")
    bad = np.flatnonzero((q <= 0) & (p > 0))
    if bad.size:
        raise AbsoluteContinuityError(int(bad[0]))
    safe_q = np.where(q > 0, q, 1.0)
    return float(np.sum(xlogy(p, p) - xlogy(p, safe_q)))


def kl(p: TabularDist, q: TabularDist) -> float:
    return max(kl_array(p.probs, q.probs), 0.0)


def jsd_array(p: np.ndarray, q: np.ndarray) -> float:
    m = 0.5 * (np.asarray(p) + np.asarray(q))
    return 0.5 * kl_array(p, m) + 0.5 * kl_array(q, m)


def jsd(p: TabularDist, q: TabularDist) -> float:
    return float(np.clip(jsd_array(p.probs, q.probs), 0.0, np.log(2.0)))


@dataclass(frozen=True)
class GanTabularModel:
    """p(x|y): y=0 is softmax(theta), y=1 is the fixed data distribution."""

    p_data: TabularDist
    p_y: TabularDist = field(default_factory=lambda: TabularDist.uniform(2))

    @property
    def n(self) -> int:
        return self.p_data.support_size

    def p_g(self, theta: np.ndarray) -> TabularDist:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n,):
            raise DistributionError(f"theta must have shape ({self.n},), got {theta.shape}")
        return TabularDist.from_logits(theta)

    def conditional(self, theta: np.ndarray, y: int) -> TabularDist:
        return self.p_g(theta) if y == 0 else self.p_data


def marginal_prior(model: GanTabularModel, theta0: np.ndarray) -> TabularDist:
    """p_theta0(x) = E_p(y)[p_theta0(x|y)]; requires a uniform p(y)."""
    if not np.allclose(model.p_y.probs, 0.5, atol=SUM_TOL):
        raise DistributionError("marginal_prior assumes a uniform p(y)")
    return TabularDist(0.5 * (model.p_g(theta0).probs + model.p_data.probs))


def reversed_likelihood(d: np.ndarray, y: int) -> np.ndarray:
    """q^r(y|x) = q(1-y|x): q(y=1|x) for y=0, q(y=0|x) for y=1."""
    return d if y == 0 else 1.0 - d


def reversed_posterior(model: GanTabularModel, theta0: np.ndarray, phi0: PhiLike, y: int) -> TabularDist:
    """q^r(x|y) proportional to q^r_phi0(y|x) * p_theta0(x)."""
    prior = marginal_prior(model, theta0).probs
    d = discriminator_values(phi0, model.n)
    lik = reversed_likelihood(np.nan_to_num(d, nan=0.0), y)
    unnorm = lik * prior
    z = unnorm.sum()
    if z <= 0:
        raise DistributionError(f"reversed posterior for y={y} has zero normalizer (degenerate discriminator)")
    return TabularDist(unnorm / z)


def optimal_discriminator(p_g: TabularDist, p_data: TabularDist) -> TabularConditional:
    """q*(y=1|x) = p_data(x) / (p_g(x) + p_data(x)); points where both vanish are flagged."""
    if p_g.support_size != p_data.support_size:
        raise DistributionError("support mismatch")
    rows: Dict[int, TabularDist] = {}
    undefined = []
    for x, (g, r) in enumerate(zip(p_g.probs, p_data.probs)):
        if g + r <= 0:
            undefined.append(x)
            continue
        d = r / (g + r)
        rows[x] = TabularDist(np.array([1.0 - d, d]))
    return TabularConditional(rows=rows, undefined=tuple(undefined))


def random_gan_instance(
    rng: np.random.Generator, n: int = 16, logit_range: float = 4.0
) -> Tuple[GanTabularModel, np.ndarray, np.ndarray]:
    """Dirichlet(1) data and generator, logistic-of-uniform discriminator table."""
    p_data = TabularDist(rng.dirichlet(np.ones(n)))
    theta0 = np.log(rng.dirichlet(np.ones(n)))
    phi0 = expit(rng.uniform(-logit_range, logit_range, size=n))
    return GanTabularModel(p_data=p_data), theta0, phi0


# ---------------------------------------------------------------------------
# Tabular VAE


@dataclass(frozen=True)
class RewrittenObjective:
    """Exhaustive value of E_ptheta0(x)[-KL(q(z|x,y) q^r_*(y|x) || p_theta(z,y|x))] and its pieces."""

    total: float
    label_prior: float
    fake_branch: float
    evidence: float

    @property
    def dependent(self) -> float:
        return self.total - self.label_prior - self.fake_branch - self.evidence

    def as_dict(self) -> Dict[str, float]:
        return {
            "total": self.total,
            "label_prior": self.label_prior,
            "fake_branch": self.fake_branch,
            "evidence": self.evidence,
            "dependent": self.dependent,
        }


@dataclass(frozen=True)
class TabularVae:
    """Decoder p~(x|z) (rows over x, logits theta), encoder q~(z|x) (rows over z, logits eta).

    ``degenerate_code`` stands in for the parameter-free q(z|x,y=1) = p(z|y=1).
    """

    p_data: TabularDist
    prior: TabularDist
    decoder_logits: np.ndarray
    encoder_logits: np.ndarray
    degenerate_code: Optional[TabularDist] = None

    def __post_init__(self) -> None:
        n, m = self.p_data.support_size, self.prior.support_size
        if np.shape(self.decoder_logits) != (m, n):
            raise DistributionError(f"decoder logits must be ({m}, {n}), got {np.shape(self.decoder_logits)}")
        if np.shape(self.encoder_logits) != (n, m):
            raise DistributionError(f"encoder logits must be ({n}, {m}), got {np.shape(self.encoder_logits)}")
        if self.degenerate_code is None:
            object.__setattr__(self, "degenerate_code", TabularDist.uniform(m))

    @property
    def n(self) -> int:
        return self.p_data.support_size

    @property
    def m(self) -> int:
        return self.prior.support_size

    def decoder(self, theta: Optional[np.ndarray] = None) -> np.ndarray:
        logits = self.decoder_logits if theta is None else np.asarray(theta).reshape(self.m, self.n)
        return softmax(logits, axis=1)

    def encoder(self, eta: Optional[np.ndarray] = None) -> np.ndarray:
        logits = self.encoder_logits if eta is None else np.asarray(eta).reshape(self.n, self.m)
        return softmax(logits, axis=1)

    def generated(self, theta: Optional[np.ndarray] = None) -> np.ndarray:
        """p_g(x) = sum_z p~(z) p~(x|z)."""
        return self.prior.probs @ self.decoder(theta)

    def elbo_per_x(self, theta: Optional[np.ndarray] = None, eta: Optional[np.ndarray] = None) -> np.ndarray:
        dec = self.decoder(theta)
        enc = self.encoder(eta)
        recon = np.sum(enc * np.log(dec.T), axis=1)
        kl_prior = np.sum(xlogy(enc, enc) - enc * np.log(self.prior.probs), axis=1)
        return recon - kl_prior

    def elbo(self, theta: Optional[np.ndarray] = None, eta: Optional[np.ndarray] = None) -> float:
        return float(self.p_data.probs @ self.elbo_per_x(theta, eta))

    def log_likelihood(self, theta: Optional[np.ndarray] = None) -> float:
        return float(self.p_data.probs @ np.log(self.generated(theta)))

    def rewritten_objective(
        self,
        theta: Optional[np.ndarray] = None,
        eta: Optional[np.ndarray] = None,
        theta0: Optional[np.ndarray] = None,
    ) -> RewrittenObjective:
        """Sum over (source, x, y, z) of the joint-KL form with a perfect discriminator.

        The posterior p_theta(z,y|x) is normalized numerically; the outer
        expectation uses the frozen generator at ``theta0``.
        """
        theta0 = self.decoder_logits if theta0 is None else theta0
        dec = self.decoder(theta)
        enc = self.encoder(eta)
        data = self.p_data.probs
        if np.any(data <= 0):
            raise DistributionError("rewritten objective needs full-support p_data")
        code = self.degenerate_code.probs
        prior = self.prior.probs

        # joint[y, z, x] = p_theta(x|z,y) p(z|y) p(y)
        joint = np.empty((2, self.m, self.n))
        joint[0] = 0.5 * prior[:, None] * dec
        joint[1] = 0.5 * code[:, None] * data[None, :]
        evidence_theta = joint.sum(axis=(0, 1))
        posterior = joint / evidence_theta[None, None, :]

        sources = {1: data, 0: self.generated(theta0)}
        total = 0.0
        for source, px in sources.items():
            y = 1 - source  # the perfect reversed discriminator picks the other branch
            q = enc.T if y == 0 else np.repeat(code[:, None], self.n, axis=1)
            neg_kl = np.sum(xlogy(q, posterior[y]) - xlogy(q, q), axis=0)
            total += 0.5 * float(px @ neg_kl)

        gen0 = sources[0]
        marginal0 = 0.5 * (gen0 + data)
        return RewrittenObjective(
            total=total,
            label_prior=LOG_HALF,
            fake_branch=0.5 * float(gen0 @ np.log(data)),
            evidence=-float(marginal0 @ np.log(evidence_theta)),
        )

    def aavae_objective(
        self,
        disc_real: np.ndarray,
        disc_fake: np.ndarray,
        theta: Optional[np.ndarray] = None,
        eta: Optional[np.ndarray] = None,
        theta0: Optional[np.ndarray] = None,
    ) -> float:
        """Adversary-activated objective with q(y=1|x) tables per source.

        A learned discriminator passes the same table twice; the perfect one is
        ``disc_real = 1``, ``disc_fake = 0``.
        """
        theta0 = self.decoder_logits if theta0 is None else theta0
        data = self.p_data.probs
        elbo_x = self.elbo_per_x(theta, eta)
        fake_branch_x = np.log(data)  # E_c[log p_data(x)] - KL(c||c)
        total = 0.0
        for px, d in ((data, np.asarray(disc_real)), (self.generated(theta0), np.asarray(disc_fake))):
            w0 = reversed_likelihood(d, 0)
            w1 = 1.0 - w0
            per_x = np.where(w0 > 0, w0 * elbo_x, 0.0) + np.where(w1 > 0, w1 * fake_branch_x, 0.0)
            label_kl = xlogy(w0, w0) + xlogy(w1, w1) - (w0 + w1) * LOG_HALF
            total += 0.5 * float(px @ (per_x - label_kl))
        return total


def random_tabular_vae(rng: np.random.Generator, n: int = 16, m: int = 8, scale: float = 1.5) -> TabularVae:
    return TabularVae(
        p_data=TabularDist(rng.dirichlet(np.ones(n))),
        prior=TabularDist(rng.dirichlet(np.ones(m))),
        decoder_logits=rng.normal(scale=scale, size=(m, n)),
        encoder_logits=rng.normal(scale=scale, size=(n, m)),
        degenerate_code=TabularDist(rng.dirichlet(np.ones(m))),
    )
