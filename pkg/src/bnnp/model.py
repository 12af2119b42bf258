"""Stacked amortised layers: conditional posteriors, sampling and prediction.

Weights of layer l form a [D, U] matrix (D = fan-in incl. bias column,
U = units).  Flattened weight vectors use unit-major (column-stacking) order,
so unit-factorised blocks are contiguous and the global vector is the
concatenation of the per-layer vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from . import layers as L
from .gaussian import (
    GaussianFactor,
    Structure,
    check_finite,
    condition_on_previous,
    kl_blocks,
    sample,
)
from .priors import PriorLayout, PriorSet, apply_learnability, decode, standard_init

LAST_LAYER_PRECISION = ("inference", "likelihood")


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture, prior structure and likelihood of a BNNP."""

    widths: tuple[int, ...]
    nonlinearity: str = "relu"
    bias: bool = True
    prior_structure: Structure = Structure.UNITWISE
    inference_hidden: tuple[int, ...] = (50, 50)
    inference_nonlinearity: str = "relu"
    # "inference": the last layer's inference net supplies per-point precisions;
    # "likelihood": they are fixed to 1/σ_y².
    last_layer_precision: str = "inference"
    learn_sigma_y: bool = True
    sigma_y_init: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "inference_hidden", tuple(int(w) for w in self.inference_hidden))
        object.__setattr__(self, "prior_structure", Structure(self.prior_structure))
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError(f"widths must hold at least two positive entries, got {self.widths}")
        L.nonlinearity(self.nonlinearity)
        L.nonlinearity(self.inference_nonlinearity)
        if self.last_layer_precision not in LAST_LAYER_PRECISION:
            raise ValueError(f"last_layer_precision must be one of {LAST_LAYER_PRECISION}")
        if self.sigma_y_init <= 0:
            raise ValueError("sigma_y_init must be positive")

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def layout(self) -> PriorLayout:
        return PriorLayout(self.prior_structure, self.widths, self.bias)

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def fan_in(self, layer: int) -> int:
        return self.widths[layer] + int(self.bias)


def init_params(cfg: NetworkConfig, key, prior: Optional[PriorSet] = None) -> dict:
    """Inference networks Θ, prior parameters Ψ and the likelihood log σ_y."""
    if prior is None:
        prior = standard_init(cfg.widths, cfg.prior_structure, cfg.bias)
    keys = jax.random.split(key, cfg.num_layers)
    nets = [
        L.init_inference_net(keys[l], cfg.in_dim + cfg.out_dim, cfg.widths[l + 1], cfg.inference_hidden)
        for l in range(cfg.num_layers)
    ]
    return {
        "nets": nets,
        "prior": prior.params,
        "log_sigma_y": jnp.full((cfg.out_dim,), np.log(cfg.sigma_y_init)),
    }


def init_masks(cfg: NetworkConfig, params: dict, prior_mask=None, learnability: Optional[float] = None) -> dict:
    """Trainable flags matching ``params``; prior entries follow the learnability mask."""
    if prior_mask is None:
        prior = PriorSet(cfg.layout, params["prior"])
        if learnability is not None:
            prior = apply_learnability(prior, learnability)
        prior_mask = prior.mask
    return {
        "nets": jax.tree_util.tree_map(lambda a: np.ones(np.shape(a), dtype=bool), params["nets"]),
        "prior": prior_mask,
        "log_sigma_y": np.full(np.shape(params["log_sigma_y"]), cfg.learn_sigma_y),
    }


def prior_set(cfg: NetworkConfig, params: dict) -> PriorSet:
    return PriorSet(cfg.layout, params["prior"])


# ---------------------------------------------------------------------------
# State containers
# ---------------------------------------------------------------------------


@jax.tree_util.register_pytree_node_class
@dataclass
class PosteriorState:
    """Layer posteriors along K sample paths plus the weights drawn from them.

    ``posteriors[l]`` was computed from activations produced by
    ``weights[:l]``; ``noise`` holds the standard-normal draws so the last
    layer can be re-sampled consistently after an online update.
    """

    posteriors: list
    weights: list
    noise: list
    kl_layers: list
    context_pred: Optional[jax.Array] = None

    def tree_flatten(self):
        return (self.posteriors, self.weights, self.noise, self.kl_layers, self.context_pred), None

    @classmethod
    def tree_unflatten(cls, _, children):
        return cls(*children)

    @property
    def kl(self):
        return sum(self.kl_layers)

    @property
    def num_samples(self) -> int:
        return self.weights[0].shape[0]


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def draw_noise(cfg: NetworkConfig, key, num_samples: int) -> list:
    sizes = cfg.layout.block_sizes
    return [jax.random.normal(jax.random.fold_in(key, l), (num_samples, sizes[l])) for l in range(cfg.num_layers)]


def layer_pseudo(cfg: NetworkConfig, params: dict, layer: int, x, y) -> L.PseudoLikelihoodBatch:
    pseudo = L.encode(params["nets"][layer], x, y, cfg.inference_nonlinearity)
    if layer == cfg.num_layers - 1:
        precisions = pseudo.precisions
        if cfg.last_layer_precision == "likelihood":
            precisions = jnp.broadcast_to(jnp.exp(-2.0 * params["log_sigma_y"]), y.shape)
        pseudo = L.PseudoLikelihoodBatch(y, precisions)
    return pseudo


def layer_prior(cfg: NetworkConfig, factors: Sequence[GaussianFactor], layer: int, previous_flat) -> GaussianFactor:
    if cfg.prior_structure is Structure.GLOBAL:
        return condition_on_previous(factors[0], previous_flat, layer, cfg.layout.block_sizes)
    return factors[layer]


def _weights_from_sample(cfg: NetworkConfig, layer: int, factor: GaussianFactor, eps):
    units, fan_in = cfg.widths[layer + 1], cfg.fan_in(layer)
    k = eps.shape[0]
    if factor.structure.unit_factorised:
        w = sample(factor, eps.reshape(k, units, fan_in))
    else:
        w = sample(factor, eps)
    flat = w.reshape(k, units * fan_in)
    return jnp.swapaxes(flat.reshape(k, units, fan_in), -1, -2), flat


def _layer_kl(post: GaussianFactor, prior: GaussianFactor):
    kl = kl_blocks(post, prior)
    return jnp.sum(kl, axis=-1) if post.structure.unit_factorised else kl


def _features(cfg: NetworkConfig, h):
    return L.with_bias(h, cfg.bias)


def _forward(cfg: NetworkConfig, weights: Sequence, x, upto: Optional[int] = None):
    """Propagate x through the first ``upto`` layers; returns the pre-activation output.

    x is [N, d0] or [K, N, d0]; weights[l] is [K, D, U].
    """
    act = L.nonlinearity(cfg.nonlinearity)
    upto = len(weights) if upto is None else upto
    h = jnp.broadcast_to(x, (weights[0].shape[0],) + x.shape[-2:]) if x.ndim == 2 else x
    for l in range(upto):
        z = jnp.einsum("knd,kdu->knu", _features(cfg, h), weights[l])
        h = act(z) if l < cfg.num_layers - 1 else z
    return h


def hidden_input(cfg: NetworkConfig, weights: Sequence, x, layer: int, num_samples: int):
    """[K, n, D] input to ``layer`` (raw x for the first layer), bias column appended."""
    if layer == 0:
        h = jnp.broadcast_to(x, (num_samples,) + x.shape)
    else:
        h = _forward(cfg, weights, x, upto=layer)
    return _features(cfg, h)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def infer(
    cfg: NetworkConfig,
    params: dict,
    x,
    y,
    key=None,
    num_samples: int = 1,
    *,
    mask=None,
    noise=None,
    batch_masks=None,
    grad_batch=None,
):
    """Sample K weight sets from q(W | context) layer by layer.

    The pseudo-likelihoods are computed once per context; only activations
    differ between sample paths.  ``mask`` ([N], 0/1) removes padded rows.
    With ``batch_masks`` ([B, N]) each layer's posterior is accumulated by
    sequential updates over the batches; if ``grad_batch`` is given only that
    batch's evidence carries gradients.
    Returns (PosteriorState, weights) where weights[l] is [K, D, U].
    """
    x = jnp.asarray(x, dtype=jnp.float64)
    y = jnp.asarray(y, dtype=jnp.float64)
    check_finite("context", x, y)
    if noise is None:
        if key is None:
            raise ValueError("infer needs either a PRNG key or explicit noise")
        if num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        noise = draw_noise(cfg, key, num_samples)
    k = noise[0].shape[0]
    factors = decode(cfg.layout, params["prior"])
    act = L.nonlinearity(cfg.nonlinearity)
    h = jnp.broadcast_to(x, (k,) + x.shape)
    previous = jnp.zeros((k, 0))
    posts, weights, kls = [], [], []
    z = None
    for l in range(cfg.num_layers):
        pseudo = layer_pseudo(cfg, params, l, x, y)
        if mask is not None:
            pseudo = pseudo._replace(precisions=pseudo.precisions * mask[:, None])
        a = _features(cfg, h)
        prior_l = layer_prior(cfg, factors, l, previous)
        if batch_masks is None:
            post = L.update_with_stats(prior_l, *L.evidence_stats(prior_l.structure, a, pseudo))
        else:
            post = prior_l
            for b in range(batch_masks.shape[0]):
                part = pseudo._replace(precisions=pseudo.precisions * batch_masks[b][:, None])
                stats = L.evidence_stats(prior_l.structure, a, part)
                if grad_batch is not None:
                    keep = jnp.asarray(b) == grad_batch
                    stats = jax.tree_util.tree_map(lambda s: jnp.where(keep, s, jax.lax.stop_gradient(s)), stats)
                post = L.update_with_stats(post, *stats)
        w, flat = _weights_from_sample(cfg, l, post, noise[l])
        kls.append(_layer_kl(post, prior_l))
        posts.append(post)
        weights.append(w)
        previous = jnp.concatenate([previous, flat], axis=-1)
        z = a @ w
        h = act(z) if l < cfg.num_layers - 1 else z
    return PosteriorState(posts, weights, list(noise), kls, z), weights


def infer_minibatched(
    cfg: NetworkConfig,
    params: dict,
    x,
    y,
    batches: Sequence,
    key=None,
    num_samples: int = 1,
    *,
    noise=None,
):
    """Memory-bounded posterior sampling over a partition of the context.

    For each layer the batches are visited in turn: each batch is pushed
    through the already-sampled earlier layers, used for one sequential
    update and then dropped.  Weights for the layer are drawn only after all
    batches.  Given the same noise this reproduces ``infer``.
    """
    x = jnp.asarray(x, dtype=jnp.float64)
    y = jnp.asarray(y, dtype=jnp.float64)
    batches = [np.asarray(b, dtype=int) for b in batches]
    covered = np.sort(np.concatenate(batches)) if batches else np.array([], dtype=int)
    if not np.array_equal(covered, np.arange(x.shape[0])):
        raise ValueError("batches must partition the context rows")
    if noise is None:
        noise = draw_noise(cfg, key, num_samples)
    k = noise[0].shape[0]
    factors = decode(cfg.layout, params["prior"])
    previous = jnp.zeros((k, 0))
    posts, weights, kls = [], [], []
    for l in range(cfg.num_layers):
        prior_l = layer_prior(cfg, factors, l, previous)
        post = L.LayerPosterior(prior_l, l)
        for idx in batches:
            xb, yb = x[idx], y[idx]
            a = hidden_input(cfg, weights, xb, l, k)
            post = L.sequential_posterior(post, a, layer_pseudo(cfg, params, l, xb, yb))
        factor = post.factor
        w, flat = _weights_from_sample(cfg, l, factor, noise[l])
        kls.append(_layer_kl(factor, prior_l))
        posts.append(factor)
        weights.append(w)
        previous = jnp.concatenate([previous, flat], axis=-1)
    return PosteriorState(posts, weights, list(noise), kls, predict(cfg, weights, x)), weights


def predict(cfg: NetworkConfig, weights: Sequence, x):
    """Per-sample network outputs [K, n, d_L]; each row depends only on its own input."""
    x = jnp.asarray(x, dtype=jnp.float64)
    return _forward(cfg, weights, x)


def online_update(cfg: NetworkConfig, params: dict, state: PosteriorState, x_new, y_new) -> PosteriorState:
    """Fold new context points into the last layer only.

    Earlier layers keep their stored samples; the new points are propagated
    through them and the last-layer posterior receives one sequential update.
    The last layer is re-drawn with its stored noise.
    """
    x_new = jnp.asarray(x_new, dtype=jnp.float64)
    y_new = jnp.asarray(y_new, dtype=jnp.float64)
    last = cfg.num_layers - 1
    if x_new.shape[0] == 0:
        return state
    a = hidden_input(cfg, state.weights, x_new, last, state.num_samples)
    current = L.LayerPosterior(state.posteriors[last], last)
    post = L.sequential_posterior(current, a, layer_pseudo(cfg, params, last, x_new, y_new)).factor
    factors = decode(cfg.layout, params["prior"])
    previous = flatten_weights(state.weights[:last]) if last else jnp.zeros((state.num_samples, 0))
    prior_l = layer_prior(cfg, factors, last, previous)
    w, _ = _weights_from_sample(cfg, last, post, state.noise[last])
    return PosteriorState(
        state.posteriors[:last] + [post],
        state.weights[:last] + [w],
        state.noise,
        state.kl_layers[:last] + [_layer_kl(post, prior_l)],
        None,
    )


def sample_prior_weights(cfg: NetworkConfig, prior_params, key, num_samples: int) -> list:
    factors = decode(cfg.layout, prior_params)
    noise = draw_noise(cfg, key, num_samples)
    if cfg.prior_structure is Structure.GLOBAL:
        flat = sample(factors[0], jnp.concatenate(noise, axis=-1))
        chunks = jnp.split(flat, np.cumsum(cfg.layout.block_sizes)[:-1], axis=-1)
        weights = []
        for l, c in enumerate(chunks):
            units, fan_in = cfg.widths[l + 1], cfg.fan_in(l)
            weights.append(jnp.swapaxes(c.reshape(num_samples, units, fan_in), -1, -2))
        return weights
    return [_weights_from_sample(cfg, l, factors[l], noise[l])[0] for l in range(cfg.num_layers)]


def prior_predictive_sample(cfg: NetworkConfig, prior_params, x, num_samples: int, key):
    """Noiseless function draws [K, n, d_L] from the weight prior."""
    return predict(cfg, sample_prior_weights(cfg, prior_params, key, num_samples), x)


def flatten_weights(weights: Sequence) -> jax.Array:
    """[K, D, U] per layer -> [K, total] in global enumeration order."""
    return jnp.concatenate([w.swapaxes(-1, -2).reshape(w.shape[0], -1) for w in weights], axis=-1)


def unflatten_weights(cfg: NetworkConfig, flat) -> list:
    flat = jnp.asarray(flat)
    k = flat.shape[0]
    chunks = jnp.split(flat, np.cumsum(cfg.layout.block_sizes)[:-1], axis=-1)
    return [
        jnp.swapaxes(c.reshape(k, cfg.widths[l + 1], cfg.fan_in(l)), -1, -2) for l, c in enumerate(chunks)
    ]
