"""Weight priors: parameterisation, standard initialisation, learnability masks.

Prior parameters live in a list of per-layer dicts (a JAX pytree) so they can
be differentiated and optimised alongside the inference networks.  Means are
stored raw, diagonal variances in log space and dense covariances as
unconstrained Cholesky factors whose diagonal is stored as a log.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import jax.numpy as jnp
import numpy as np

from .gaussian import GaussianFactor, Structure, diag_embed, jittered_cholesky

VARIANCE_FLOOR = 1e-8
_SD_FLOOR = float(np.sqrt(VARIANCE_FLOOR))


@dataclass(frozen=True)
class PriorLayout:
    """Static description of how prior parameters map onto network weights."""

    structure: Structure
    widths: tuple[int, ...]
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "structure", Structure(self.structure))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError(f"need at least two positive widths, got {self.widths}")

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    def fan_in(self, layer: int) -> int:
        return self.widths[layer] + int(self.bias)

    def units(self, layer: int) -> int:
        return self.widths[layer + 1]

    @property
    def block_sizes(self) -> list[int]:
        return [self.fan_in(l) * self.units(l) for l in range(self.num_layers)]

    @property
    def num_weights(self) -> int:
        return int(sum(self.block_sizes))


def decode_tril(raw):
    """Unconstrained square matrix -> lower-triangular factor with floored diagonal."""
    diag = jnp.maximum(jnp.exp(jnp.diagonal(raw, axis1=-2, axis2=-1)), _SD_FLOOR)
    return jnp.tril(raw, -1) + diag_embed(diag)


def encode_tril(tril):
    tril = jnp.asarray(tril)
    return jnp.tril(tril, -1) + diag_embed(jnp.log(jnp.diagonal(tril, axis1=-2, axis2=-1)))


def decode_factor(structure: Structure, block: dict) -> GaussianFactor:
    if structure is Structure.DIAGONAL:
        var = jnp.maximum(jnp.exp(block["log_var"]), VARIANCE_FLOOR)
        return GaussianFactor(block["mean"], diag_embed(jnp.sqrt(var)), Structure.DIAGONAL)
    return GaussianFactor(block["mean"], decode_tril(block["chol"]), structure)


def decode(layout: PriorLayout, params: Sequence[dict]) -> list[GaussianFactor]:
    """Per-layer factors, or a single GLOBAL factor for the full-rank prior."""
    return [decode_factor(layout.structure, block) for block in params]


def encode_factor(structure: Structure, factor: GaussianFactor) -> dict:
    if structure is Structure.DIAGONAL:
        return {"mean": jnp.asarray(factor.mean), "log_var": jnp.log(factor.variance)}
    return {"mean": jnp.asarray(factor.mean), "chol": encode_tril(factor.scale_tril)}


@dataclass
class PriorSet:
    """Meta-learnable weight prior Ψ together with its trainable mask."""

    layout: PriorLayout
    params: list[dict]
    mask: list[dict] = field(default=None)

    def __post_init__(self):
        if self.mask is None:
            self.mask = [{k: np.ones(np.shape(v), dtype=bool) for k, v in block.items()} for block in self.params]

    @property
    def structure(self) -> Structure:
        return self.layout.structure

    def factors(self, params=None) -> list[GaussianFactor]:
        return decode(self.layout, self.params if params is None else params)

    def replace(self, params=None, mask=None) -> "PriorSet":
        return PriorSet(self.layout, self.params if params is None else params, self.mask if mask is None else mask)

    @classmethod
    def from_factors(cls, layout: PriorLayout, factors: Sequence[GaussianFactor]) -> "PriorSet":
        params = [encode_factor(layout.structure, f) for f in factors]
        return cls(layout, params)

    def trainable_weights(self) -> np.ndarray:
        """Boolean per weight (global enumeration order): any tied parameter trainable."""
        flags = []
        for block in self.mask:
            m = np.asarray(block["mean"])
            flags.append(m.reshape(-1))
        return np.concatenate(flags)


def _layer_shapes(layout: PriorLayout, layer: int):
    d_in, units = layout.fan_in(layer), layout.units(layer)
    if layout.structure.unit_factorised:
        return (units, d_in)
    return (units * d_in,)


def standard_init(widths: Sequence[int], structure: Structure | str = Structure.DIAGONAL, bias: bool = True) -> PriorSet:
    """Zero means; variance 1/fan-in (bias column counted); dense forms start diagonal."""
    layout = PriorLayout(Structure(structure), tuple(widths), bias)
    variances = []
    for l in range(layout.num_layers):
        shape = _layer_shapes(layout, l)
        variances.append(np.full(shape, 1.0 / layout.fan_in(l)))
    if layout.structure is Structure.DIAGONAL:
        params = [{"mean": jnp.zeros(v.shape), "log_var": jnp.log(jnp.asarray(v))} for v in variances]
    elif layout.structure is Structure.GLOBAL:
        var = np.concatenate([v.reshape(-1) for v in variances])
        params = [{"mean": jnp.zeros(var.shape), "chol": jnp.diag(0.5 * jnp.log(jnp.asarray(var)))}]
    else:
        params = [{"mean": jnp.zeros(v.shape), "chol": diag_embed(0.5 * jnp.log(jnp.asarray(v)))} for v in variances]
    return PriorSet(layout, params)


def prior_from_covariance(layout: PriorLayout, means, covariances) -> PriorSet:
    """Build a prior from explicit moments (one entry per layer, or one for GLOBAL)."""
    factors = [
        GaussianFactor.from_covariance(m, c, layout.structure, label=f"prior block {i}")
        for i, (m, c) in enumerate(zip(means, covariances))
    ]
    return PriorSet.from_factors(layout, factors)


def learnable_count(num_weights: int, proportion: float) -> int:
    """Nearest integer to proportion·|W|, ties to even."""
    return int(round(proportion * num_weights))


def apply_learnability(prior: PriorSet, proportion: float) -> PriorSet:
    """Mark the prior parameters of the first round(p·|W|) weights trainable.

    Weights are enumerated layer by layer, and within a layer in vec order
    (all inputs of unit 0, then unit 1, ...; the bias is the last input).  A
    weight owns its mean, its variance, and its row of the Cholesky factor, so
    dense covariances with earlier weights move together with it.
    """
    if not 0.0 <= proportion <= 1.0:
        raise ValueError(f"proportion must lie in [0, 1], got {proportion}")
    layout = prior.layout
    cutoff = learnable_count(layout.num_weights, proportion)
    owned = np.arange(layout.num_weights) < cutoff
    masks = []
    if layout.structure is Structure.GLOBAL:
        chunks = [owned]
    else:
        chunks = np.split(owned, np.cumsum(layout.block_sizes)[:-1])
    for block, flags in zip(prior.params, chunks):
        mean_mask = flags.reshape(np.shape(block["mean"]))
        mask = {"mean": mean_mask}
        if "log_var" in block:
            mask["log_var"] = mean_mask.copy()
        else:
            dim = np.shape(block["chol"])[-1]
            lower = np.tril(np.ones((dim, dim), dtype=bool))
            mask["chol"] = mean_mask[..., :, None] & lower
        masks.append(mask)
    return prior.replace(mask=masks)


def covariance_roundtrip(cov):
    """decode(encode(Σ)) for a dense covariance; used to check the parameterisation."""
    raw = encode_tril(jittered_cholesky(jnp.asarray(cov), "covariance"))
    tril = decode_tril(raw)
    return tril @ jnp.swapaxes(tril, -1, -2)
