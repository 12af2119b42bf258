"""The amortised linear layer.

An inference network maps each context pair (x_n, y_n) to a pseudo-target
and a log noise level per output unit of the layer.  Those pseudo-likelihoods
are combined with the layer's Gaussian prior by exact Bayesian linear
regression on the layer's input activations.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import jax
import jax.numpy as jnp

from .gaussian import (
    GaussianFactor,
    Structure,
    check_finite,
    update_from_stats,
    vec_stats,
)

LOG_NOISE_MIN = -10.0
LOG_NOISE_MAX = 5.0

NONLINEARITIES = {
    "relu": jax.nn.relu,
    "tanh": jnp.tanh,
    "silu": jax.nn.silu,
}


def nonlinearity(name: str):
    try:
        return NONLINEARITIES[name]
    except KeyError:
        raise ValueError(f"unknown nonlinearity {name!r}; choose from {sorted(NONLINEARITIES)}") from None


class PseudoLikelihoodBatch(NamedTuple):
    targets: jax.Array  # [..., N, units]
    precisions: jax.Array  # [..., N, units], 1/σ²


def init_mlp(key, sizes: Sequence[int]) -> list[dict]:
    """Fan-in scaled normal weights, zero biases."""
    params = []
    keys = jax.random.split(key, len(sizes) - 1)
    for k, n_in, n_out in zip(keys, sizes[:-1], sizes[1:]):
        w = jax.random.normal(k, (n_in, n_out)) / jnp.sqrt(n_in)
        params.append({"w": w, "b": jnp.zeros((n_out,))})
    return params


def mlp(params: Sequence[dict], x, act):
    h = x
    for i, layer in enumerate(params):
        h = h @ layer["w"] + layer["b"]
        if i < len(params) - 1:
            h = act(h)
    return h


def init_inference_net(key, in_dim: int, units: int, hidden: Sequence[int]) -> list[dict]:
    """MLP from (x, y) to [pseudo-targets | log σ] for ``units`` outputs.

    The log σ head starts with zero bias, i.e. unit noise.
    """
    return init_mlp(key, [in_dim, *hidden, 2 * units])


def encode(net: Sequence[dict], x, y, act="relu") -> PseudoLikelihoodBatch:
    """Pointwise map of context pairs to pseudo-likelihood parameters."""
    check_finite("context inputs", x, y)
    if x.shape[-2] != y.shape[-2]:
        raise ValueError(f"context x has {x.shape[-2]} rows but y has {y.shape[-2]}")
    if isinstance(act, str):
        act = nonlinearity(act)
    out = mlp(net, jnp.concatenate([x, y], axis=-1), act)
    units = out.shape[-1] // 2
    log_sigma = jnp.clip(out[..., units:], LOG_NOISE_MIN, LOG_NOISE_MAX)
    return PseudoLikelihoodBatch(out[..., :units], jnp.exp(-2.0 * log_sigma))


def with_bias(h, bias: bool = True):
    if not bias:
        return h
    return jnp.concatenate([h, jnp.ones(h.shape[:-1] + (1,), dtype=h.dtype)], axis=-1)


def unit_stats(activations, targets, precisions):
    """Per-unit Gram matrices and projections.

    activations [..., N, D]; targets/precisions [..., N, U]
    -> gram [..., U, D, D], proj [..., U, D]
    """
    gram = jnp.einsum("...nd,...nu,...ne->...ude", activations, precisions, activations)
    proj = jnp.einsum("...nd,...nu->...ud", activations, targets * precisions)
    return gram, proj


def evidence_stats(structure: Structure, activations, pseudo: PseudoLikelihoodBatch):
    if structure.unit_factorised:
        return unit_stats(activations, pseudo.targets, pseudo.precisions)
    return vec_stats(activations, pseudo.targets, pseudo.precisions)


@jax.tree_util.register_pytree_node_class
class LayerPosterior:
    """Closed-form conditional posterior of one layer's weights."""

    __slots__ = ("factor", "layer")

    def __init__(self, factor: GaussianFactor, layer: int = 0):
        self.factor = factor
        self.layer = layer

    def tree_flatten(self):
        return (self.factor,), self.layer

    @classmethod
    def tree_unflatten(cls, layer, children):
        return cls(children[0], layer)

    def __repr__(self):
        return f"LayerPosterior(layer={self.layer}, factor={self.factor!r})"


def update_with_stats(prior: GaussianFactor, gram, proj) -> GaussianFactor:
    structure = Structure.UNITWISE if prior.structure.unit_factorised else Structure.LAYERWISE
    mean, tril = update_from_stats(prior.mean, prior.scale_tril, gram, proj)
    return GaussianFactor(mean, tril, structure)


def posterior(prior: GaussianFactor, activations, pseudo: PseudoLikelihoodBatch, layer: int = 0) -> LayerPosterior:
    """Closed-form layer posterior given input activations (bias column included).

    Unit-factorised priors ([..., units, D]) give independent per-unit
    updates; dense priors over vec(W) use the block Kronecker form.
    """
    check_finite(f"layer {layer} activations", activations)
    check_finite(f"layer {layer} pseudo-likelihoods", *pseudo)
    gram, proj = evidence_stats(prior.structure, activations, pseudo)
    return LayerPosterior(update_with_stats(prior, gram, proj), layer)


def sequential_posterior(current: LayerPosterior, activations, pseudo: PseudoLikelihoodBatch) -> LayerPosterior:
    """Use the current posterior as the prior for a further batch of evidence."""
    return posterior(current.factor, activations, pseudo, current.layer)
