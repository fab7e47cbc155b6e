from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from . import tensor as T
from .optim import ParamSet
from .tensor import DomainError, ShapeError, Tape, Tensor

logger = logging.getLogger(__name__)

LOGVAR_MIN = -20.0
LOGVAR_MAX = 4.0
PROB_CLAMP = 1e-7
LOG_2PI = float(np.log(2.0 * np.pi))

ACTIVATIONS = {"tanh": T.tanh, "relu": T.relu, "sigmoid": T.sigmoid, "linear": lambda x: x}
HEADS = ("linear", "sigmoid", "gaussian")


class RngStream:
    """Counter-based (Philox) stream keyed by a root seed and a label path.

    ``child("data")`` derives an independent labelled substream, so paired runs
    share common random numbers per concern.
    """

    def __init__(self, seed: int, label: str = "root"):
        self.seed = int(seed)
        self.label = label
        key = np.random.SeedSequence([self.seed, zlib.crc32(label.encode("utf-8"))])
        self.generator = np.random.Generator(np.random.Philox(key))

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{label}")

    def normal(self, shape: Tuple[int, ...]) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def uniform(self, low: float, high: float, shape: Tuple[int, ...]) -> np.ndarray:
        return self.generator.uniform(low, high, size=shape)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, label={self.label!r})"


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "standard-normal"
    dim: int = 2

    def __post_init__(self) -> None:
        if self.kind not in ("standard-normal", "uniform-hypercube"):
            raise ValueError(f"Unknown prior kind '{self.kind}'")
        if self.dim < 1:
            raise ValueError("prior dim must be >= 1")

    def sample(self, n: int, rng: RngStream) -> np.ndarray:
        if self.kind == "standard-normal":
            return rng.normal((n, self.dim))
        return rng.uniform(-1.0, 1.0, (n, self.dim))


@dataclass(frozen=True)
class Mlp:
    """Fully connected net; parameters live in a ParamSet under ``<name>.w<i>`` / ``<name>.b<i>``.

    A ``gaussian`` head emits mean and log-variance of width ``widths[-1]`` each.
    """

    name: str
    widths: Tuple[int, ...]
    activations: Tuple[str, ...] = ()
    head: str = "linear"

    def __post_init__(self) -> None:
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"{self.name}: widths must list at least input and output, all positive")
        acts = tuple(self.activations) or ("tanh",) * (len(widths) - 2)
        if len(acts) != len(widths) - 2:
            raise ValueError(f"{self.name}: need one activation per hidden layer, got {len(acts)}")
        for act in acts:
            if act not in ACTIVATIONS:
                raise ValueError(f"{self.name}: unknown activation '{act}'")
        if self.head not in HEADS:
            raise ValueError(f"{self.name}: unknown head '{self.head}'")
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "activations", acts)

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def _layer_widths(self) -> Tuple[int, ...]:
        last = self.widths[-1] * (2 if self.head == "gaussian" else 1)
        return self.widths[:-1] + (last,)

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        dims = self._layer_widths()
        shapes: Dict[str, Tuple[int, ...]] = {}
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            shapes[f"{self.name}.w{i}"] = (fan_in, fan_out)
            shapes[f"{self.name}.b{i}"] = (fan_out,)
        return shapes

    def init(self, rng: RngStream, gain: float = 1.0) -> Dict[str, np.ndarray]:
        """Scaled-uniform fan-in weights, zero biases."""
        out: Dict[str, np.ndarray] = {}
        for pname, shape in self.param_shapes().items():
            if len(shape) == 2:
                bound = gain / np.sqrt(shape[0])
                out[pname] = rng.uniform(-bound, bound, shape)
            else:
                out[pname] = np.zeros(shape)
        return out

    def forward(self, weights: Mapping[str, Tensor], x: Tensor) -> Tensor:
        """Pre-head output (logits for a sigmoid head, stacked mean/logvar for gaussian)."""
        x = T.as_tensor(x)
        if x.shape[-1:] != (self.in_width,):
            raise ShapeError(f"{self.name}: expected input width {self.in_width}, got shape {x.shape}")
        n_layers = len(self.widths) - 1
        h = x
        for i in range(n_layers):
            h = T.matmul(h, weights[f"{self.name}.w{i}"]) + weights[f"{self.name}.b{i}"]
            if i < n_layers - 1:
                h = ACTIVATIONS[self.activations[i]](h)
        return h

    def card(self) -> Dict:
        return {"name": self.name, "widths": list(self.widths), "activations": list(self.activations), "head": self.head}

    @classmethod
    def from_card(cls, card: Mapping) -> "Mlp":
        return cls(
            name=card["name"],
            widths=tuple(card["widths"]),
            activations=tuple(card.get("activations", ())),
            head=card.get("head", "linear"),
        )


@dataclass(frozen=True)
class Bound:
    """An Mlp applied with a fixed set of weight tensors."""

    net: Mlp
    weights: Mapping[str, Tensor]

    def __call__(self, x: Tensor) -> Tensor:
        return self.net.forward(self.weights, x)


@dataclass
class ModelBundle:
    nets: Dict[str, Mlp]
    prior: PriorSpec
    params: ParamSet
    likelihood: str = "gaussian"
    meta: Dict = field(default_factory=dict)

    @classmethod
    def build(cls, nets: Iterable[Mlp], prior: PriorSpec, rng: RngStream, likelihood: str = "gaussian") -> "ModelBundle":
        arrays: Dict[str, np.ndarray] = {}
        net_map: Dict[str, Mlp] = {}
        for net in nets:
            if net.name in net_map:
                raise ValueError(f"Duplicate network name '{net.name}'")
            net_map[net.name] = net
            arrays.update(net.init(rng.child(net.name)))
        return cls(nets=net_map, prior=prior, params=ParamSet.from_arrays(arrays), likelihood=likelihood)

    def names(self, *groups: str) -> Tuple[str, ...]:
        return tuple(n for g in groups for n in self.params.group(g))

    def weights(self, tape: Optional[Tape] = None, trainable: Iterable[str] = (), values: Optional[Mapping[str, np.ndarray]] = None) -> Dict[str, Tensor]:
        """Tensors for every parameter; those in ``trainable`` groups are watched on ``tape``."""
        source = values if values is not None else self.params.values
        train = set(self.names(*trainable))
        out: Dict[str, Tensor] = {}
        for name, value in source.items():
            if name in train:
                if tape is None:
                    raise ValueError("trainable groups need a tape")
                out[name] = tape.watch(value, name)
            else:
                out[name] = Tensor(value)
        return out

    def bind(self, name: str, weights: Mapping[str, Tensor]) -> Bound:
        return Bound(self.nets[name], weights)

    def card(self) -> Dict:
        return {
            "nets": [net.card() for net in self.nets.values()],
            "prior": {"kind": self.prior.kind, "dim": self.prior.dim},
            "likelihood": self.likelihood,
            "meta": self.meta,
        }

    @classmethod
    def from_card(cls, card: Mapping, params: ParamSet) -> "ModelBundle":
        nets = {c["name"]: Mlp.from_card(c) for c in card["nets"]}
        expected = {n for net in nets.values() for n in net.param_shapes()}
        missing = expected - set(params.values)
        if missing:
            raise ValueError(f"Checkpoint lacks parameters {sorted(missing)}")
        return cls(
            nets=nets,
            prior=PriorSpec(**card["prior"]),
            params=params,
            likelihood=card.get("likelihood", "gaussian"),
            meta=dict(card.get("meta", {})),
        )


def generate(gen: Bound, z: Tensor) -> Tensor:
    """x = G(z); a sigmoid head squashes to (0, 1)."""
    z = T.as_tensor(z)
    if z.shape[-1:] != (gen.net.in_width,):
        raise ShapeError(f"generate: z width {z.shape[-1:]} does not match generator input {gen.net.in_width}")
    out = gen(z)
    return T.sigmoid(out) if gen.net.head == "sigmoid" else out


def discriminator_logits(disc: Bound, x: Tensor) -> Tensor:
    return T.reshape(disc(x), (T.as_tensor(x).shape[0],))


def discriminate(disc: Bound, x: Tensor, temperature: float = 1.0) -> Tensor:
    """q_phi(y=1|x) per example, clamped to [1e-7, 1-1e-7]."""
    if disc.net.head != "sigmoid":
        raise ValueError(f"discriminate needs a sigmoid head, '{disc.net.name}' has '{disc.net.head}'")
    logits = discriminator_logits(disc, x)
    if temperature != 1.0:
        logits = logits * (1.0 / temperature)
    return T.clip(T.sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)


def gaussian_params(out: Tensor) -> Tuple[Tensor, Tensor]:
    width = out.shape[-1] // 2
    mean_ = T.slice_(out, 0, width, axis=-1)
    logvar = T.clip(T.slice_(out, width, 2 * width, axis=-1), LOGVAR_MIN, LOGVAR_MAX)
    return mean_, logvar


def encode_reparam(
    enc: Bound, x: Tensor, rng: Optional[RngStream] = None, eps: Optional[np.ndarray] = None
) -> Tuple[Tensor, Tensor, Tensor]:
    """z = mean + exp(logvar/2) * eps; ``eps`` overrides the draw (tests, paired evaluation)."""
    if enc.net.head != "gaussian":
        raise ValueError(f"encode_reparam needs a gaussian head, '{enc.net.name}' has '{enc.net.head}'")
    mean_, logvar = gaussian_params(enc(x))
    if eps is None:
        if rng is None:
            raise ValueError("encode_reparam needs an rng or explicit eps")
        eps = rng.normal(mean_.shape)
    eps_t = Tensor(eps)
    if eps_t.shape != mean_.shape:
        raise ShapeError(f"eps shape {eps_t.shape} does not match code shape {mean_.shape}")
    z = mean_ + T.exp(logvar * 0.5) * eps_t
    return z, mean_, logvar


def bernoulli_loglik(x: Tensor, logits: Tensor) -> Tensor:
    """sum_d x*log(sigmoid(l)) + (1-x)*log(1-sigmoid(l)) = sum_d x*l - softplus(l)."""
    x = T.as_tensor(x)
    if x.shape != logits.shape:
        raise ShapeError(f"bernoulli_loglik: x shape {x.shape} vs logits shape {logits.shape}")
    if np.any(x.data < 0.0) or np.any(x.data > 1.0):
        raise DomainError("bernoulli_loglik: x must lie in [0, 1]")
    return T.sum(x * logits - T.softplus(logits), axis=-1)


def gaussian_loglik(x: Tensor, mean_: Tensor, logvar: Tensor) -> Tensor:
    """Diagonal Gaussian log-density per example."""
    x = T.as_tensor(x)
    if x.shape != mean_.shape:
        raise ShapeError(f"gaussian_loglik: x shape {x.shape} vs mean shape {mean_.shape}")
    diff = x - mean_
    quad = diff * diff * T.exp(-logvar)
    return T.sum(logvar + quad + LOG_2PI, axis=-1) * -0.5


def gaussian_kl_to_prior(mean_: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)) per example."""
    return T.sum(T.exp(logvar) + mean_ * mean_ - 1.0 - logvar, axis=-1) * 0.5


def decoder_loglik(decoder: Bound, z: Tensor, x: Tensor, likelihood: str) -> Tensor:
    out = decoder(z)
    if likelihood == "bernoulli":
        return bernoulli_loglik(x, out)
    if likelihood == "gaussian":
        mean_, logvar = gaussian_params(out)
        return gaussian_loglik(x, mean_, logvar)
    raise ValueError(f"Unknown likelihood '{likelihood}'")


def decoder_mean(decoder: Bound, z: Tensor, likelihood: str) -> Tensor:
    out = decoder(z)
    if likelihood == "bernoulli":
        return T.sigmoid(out)
    return gaussian_params(out)[0]


def decoder_sample(decoder: Bound, z: Tensor, likelihood: str, rng: RngStream) -> np.ndarray:
    out = decoder(z)
    if likelihood == "bernoulli":
        probs = T.sigmoid(out).data
        return (rng.uniform(0.0, 1.0, probs.shape) < probs).astype(np.float64)
    mean_, logvar = gaussian_params(out)
    return mean_.data + np.exp(0.5 * logvar.data) * rng.normal(mean_.shape)
