"""Structured multivariate Gaussians over weight blocks.

Every factor stores a mean and a lower-triangular Cholesky factor of its
covariance.  Leading array dimensions are batch dimensions and denote
*independent* blocks (e.g. one block per output unit, or one per sample
path).  Covariances are never inverted explicitly: conjugate updates work in
the whitened coordinates of the prior factor and all quadratic forms go
through triangular solves.
"""

from __future__ import annotations

import enum
from typing import NamedTuple, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import solve_triangular

from .errors import CholeskyError, InputValidationError

JITTER_START = 1e-10
JITTER_STOP = 1e-4


class Structure(str, enum.Enum):
    DIAGONAL = "diagonal"
    UNITWISE = "unitwise"
    LAYERWISE = "layerwise"
    GLOBAL = "global"

    @property
    def unit_factorised(self) -> bool:
        return self in (Structure.DIAGONAL, Structure.UNITWISE)


class CholeskyCache(NamedTuple):
    factor: jax.Array
    log_det: jax.Array


def _traced(*arrays) -> bool:
    return any(isinstance(a, jax.core.Tracer) for a in arrays)


def check_finite(name: str, *arrays) -> None:
    """Raise InputValidationError if any concrete array holds NaN/inf."""
    if _traced(*arrays):
        return
    for a in arrays:
        if not np.all(np.isfinite(np.asarray(a))):
            raise InputValidationError(f"{name} contains non-finite values")


def swap(a):
    return jnp.swapaxes(a, -1, -2)


def _bcast_batch(a, b, core_a: int, core_b: int):
    batch = jnp.broadcast_shapes(a.shape[: a.ndim - core_a], b.shape[: b.ndim - core_b])
    return (
        jnp.broadcast_to(a, batch + a.shape[a.ndim - core_a :]),
        jnp.broadcast_to(b, batch + b.shape[b.ndim - core_b :]),
    )


def tri_solve(tril, b, *, trans: int = 0):
    """Solve ``tril @ x = b`` (or the transposed system) for lower-triangular ``tril``."""
    tril, b = _bcast_batch(tril, b, 2, 2)
    return solve_triangular(tril, b, lower=True, trans=trans)


def jittered_cholesky(a, label: str = "matrix"):
    """Cholesky with the jitter ladder 1e-10 .. 1e-4 times the mean diagonal.

    Inside traced code only the plain factorisation is attempted; the ladder
    needs concrete values to decide whether to retry.
    """
    a = jnp.asarray(a)
    chol = jnp.linalg.cholesky(a)
    if _traced(a):
        return chol
    bad = ~np.all(np.isfinite(np.asarray(chol)), axis=(-2, -1))
    if not np.any(bad):
        return chol
    eye = jnp.eye(a.shape[-1], dtype=a.dtype)
    scale = jnp.mean(jnp.diagonal(a, axis1=-2, axis2=-1), axis=-1)
    level = JITTER_START
    while np.any(bad):
        if level > JITTER_STOP * (1 + 1e-9):
            raise CholeskyError(label, JITTER_STOP)
        jitter = jnp.where(jnp.asarray(bad), level * scale, 0.0)
        attempt = jnp.linalg.cholesky(a + jitter[..., None, None] * eye)
        ok = np.all(np.isfinite(np.asarray(attempt)), axis=(-2, -1))
        chol = jnp.where(jnp.asarray(bad & ok)[..., None, None], attempt, chol)
        bad = bad & ~ok
        level *= 10.0
    return chol


def cholesky_cache(a, label: str = "matrix") -> CholeskyCache:
    factor = jittered_cholesky(a, label)
    return CholeskyCache(factor, tril_log_det(factor))


def tril_log_det(tril):
    """log|L Lᵀ| for a lower-triangular factor with positive diagonal."""
    return 2.0 * jnp.sum(jnp.log(jnp.diagonal(tril, axis1=-2, axis2=-1)), axis=-1)


@jax.tree_util.register_pytree_node_class
class GaussianFactor:
    """Gaussian N(mean, L Lᵀ) over a weight block, with optional batch dims."""

    __slots__ = ("mean", "scale_tril", "structure")

    def __init__(self, mean, scale_tril, structure: Structure = Structure.UNITWISE):
        self.mean = mean
        self.scale_tril = scale_tril
        self.structure = Structure(structure)

    def tree_flatten(self):
        return (self.mean, self.scale_tril), self.structure

    @classmethod
    def tree_unflatten(cls, structure, children):
        return cls(*children, structure=structure)

    def __repr__(self):
        return (
            f"GaussianFactor(structure={self.structure.value}, "
            f"batch={tuple(self.batch_shape)}, dim={self.dim})"
        )

    @classmethod
    def from_covariance(cls, mean, cov, structure=Structure.UNITWISE, label="covariance"):
        mean = jnp.asarray(mean, dtype=jnp.float64)
        cov = jnp.asarray(cov, dtype=jnp.float64)
        check_finite(label, mean, cov)
        return cls(mean, jittered_cholesky(cov, label), structure)

    @classmethod
    def diagonal(cls, mean, variance):
        mean = jnp.asarray(mean, dtype=jnp.float64)
        variance = jnp.asarray(variance, dtype=jnp.float64)
        check_finite("variance", mean, variance)
        if not _traced(variance) and np.any(np.asarray(variance) <= 0):
            raise InputValidationError("variances must be strictly positive")
        return cls(mean, diag_embed(jnp.sqrt(variance)), Structure.DIAGONAL)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def batch_shape(self):
        return self.mean.shape[:-1]

    @property
    def covariance(self):
        return self.scale_tril @ swap(self.scale_tril)

    @property
    def variance(self):
        return jnp.sum(self.scale_tril**2, axis=-1)

    @property
    def log_det(self):
        return tril_log_det(self.scale_tril)

    @property
    def cache(self) -> CholeskyCache:
        return CholeskyCache(self.scale_tril, self.log_det)

    def with_structure(self, structure) -> "GaussianFactor":
        return GaussianFactor(self.mean, self.scale_tril, structure)

    def __getitem__(self, idx) -> "GaussianFactor":
        """Index the batch dimensions."""
        return GaussianFactor(self.mean[idx], self.scale_tril[idx], self.structure)


def diag_embed(v):
    return v[..., :, None] * jnp.eye(v.shape[-1], dtype=v.dtype)


# ---------------------------------------------------------------------------
# Conjugate updates
# ---------------------------------------------------------------------------


def sufficient_stats(design, targets, precisions):
    """Return (ΦᵀΛΦ, ΦᵀΛy) for a design [..., N, D] and targets/precisions [..., N]."""
    weighted = design * precisions[..., :, None]
    gram = swap(weighted) @ design
    proj = jnp.einsum("...nd,...n->...d", weighted, targets)
    return gram, proj


def update_from_stats(mean, scale_tril, gram, proj):
    """Posterior (mean, Cholesky) given prior moments and evidence statistics.

    With Σ = L Lᵀ and M = I + Lᵀ G L factored as M = U Uᵀ (U upper, obtained
    from a reversed-order Cholesky), the posterior covariance
    S = (Σ⁻¹ + G)⁻¹ = L M⁻¹ Lᵀ has the lower-triangular factor L U⁻ᵀ.
    M ⪰ I, so the factorisation cannot fail for finite inputs.
    """
    dim = mean.shape[-1]
    lt = swap(scale_tril)
    whitened = lt @ gram @ scale_tril
    eye = jnp.eye(dim, dtype=whitened.dtype)
    m_rev = (eye + whitened)[..., ::-1, ::-1]
    upper = jnp.linalg.cholesky(m_rev)[..., ::-1, ::-1]
    upper, lt = _bcast_batch(upper, lt, 2, 2)
    post_lt = solve_triangular(upper, lt, lower=False)  # U⁻¹ Lᵀ
    post_tril = swap(post_lt)
    resid = proj - jnp.einsum("...de,...e->...d", gram, mean)
    post_mean = mean + jnp.einsum("...de,...e->...d", post_tril, jnp.einsum("...de,...e->...d", post_lt, resid))
    return post_mean, post_tril


def _validate_evidence(design, targets, precisions, label):
    check_finite(f"{label} design", design)
    check_finite(f"{label} targets", targets)
    check_finite(f"{label} precisions", precisions)
    if not _traced(precisions) and np.any(np.asarray(precisions) <= 0):
        raise InputValidationError(f"{label} precisions must be strictly positive")


def _validate_result(mean, tril, label):
    if _traced(mean, tril):
        return
    if not (np.all(np.isfinite(np.asarray(mean))) and np.all(np.isfinite(np.asarray(tril)))):
        raise CholeskyError(label, JITTER_STOP)


def conjugate_update(prior: GaussianFactor, design, targets, precisions, label: str = "layer") -> GaussianFactor:
    """Bayesian linear regression update of a unit-factorised prior.

    ``design`` is [..., N, D]; ``targets`` and ``precisions`` are [..., N] and
    broadcast against the prior's batch dimensions (one block per unit).
    The result is a UNITWISE factor: a diagonal prior gives a dense posterior.
    """
    design = jnp.asarray(design, dtype=jnp.float64)
    targets = jnp.asarray(targets, dtype=jnp.float64)
    precisions = jnp.asarray(precisions, dtype=jnp.float64)
    _validate_evidence(design, targets, precisions, label)
    if prior.structure not in (Structure.DIAGONAL, Structure.UNITWISE):
        raise InputValidationError(
            f"conjugate_update needs a unit-factorised prior, got {prior.structure.value}"
        )
    if design.shape[-2] == 0:
        return GaussianFactor(prior.mean, prior.scale_tril, Structure.UNITWISE)
    gram, proj = sufficient_stats(design, targets, precisions)
    mean, tril = update_from_stats(prior.mean, prior.scale_tril, gram, proj)
    _validate_result(mean, tril, label)
    return GaussianFactor(mean, tril, Structure.UNITWISE)


def block_diag(blocks):
    """[..., U, D, D] -> [..., U·D, U·D] block-diagonal matrix."""
    units, dim = blocks.shape[-3], blocks.shape[-1]
    eye = jnp.eye(units, dtype=blocks.dtype)
    big = jnp.einsum("uv,...ude->...udve", eye, blocks)
    return big.reshape(blocks.shape[:-3] + (units * dim, units * dim))


def vec_stats(activations, targets, precisions):
    """Block form of the Kronecker-structured evidence over vec(W).

    activations [..., N, D], targets/precisions [..., N, U].  Returns the
    block-diagonal matrix with blocks φ(X)ᵀΛ_dφ(X) and vec(φ(X)ᵀỸ) with
    ỹ = y·λ, both in unit-major (column-stacking) order.
    """
    blocks = jnp.einsum("...nd,...nu,...ne->...ude", activations, precisions, activations)
    proj = jnp.einsum("...nd,...nu->...ud", activations, targets * precisions)
    return block_diag(blocks), proj.reshape(proj.shape[:-2] + (-1,))


def conjugate_update_vec(prior: GaussianFactor, activations, targets, precisions, label: str = "layer") -> GaussianFactor:
    """Update a dense prior over vec(W) with per-unit pseudo-observations."""
    activations = jnp.asarray(activations, dtype=jnp.float64)
    targets = jnp.asarray(targets, dtype=jnp.float64)
    precisions = jnp.asarray(precisions, dtype=jnp.float64)
    _validate_evidence(activations, targets, precisions, label)
    units = targets.shape[-1]
    if prior.dim != units * activations.shape[-1]:
        raise InputValidationError(
            f"{label}: prior has {prior.dim} weights but evidence implies "
            f"{units}x{activations.shape[-1]}"
        )
    if activations.shape[-2] == 0:
        return GaussianFactor(prior.mean, prior.scale_tril, Structure.LAYERWISE)
    gram, proj = vec_stats(activations, targets, precisions)
    mean, tril = update_from_stats(prior.mean, prior.scale_tril, gram, proj)
    _validate_result(mean, tril, label)
    return GaussianFactor(mean, tril, Structure.LAYERWISE)


def condition_on_previous(global_factor: GaussianFactor, realized, layer_index: int, block_sizes: Sequence[int]) -> GaussianFactor:
    """Conditional over block ``layer_index`` (0-based) given all earlier blocks.

    With Σ = L Lᵀ partitioned into previous (p) and current (c) blocks, the
    conditional mean is μ_c + L_cp L_pp⁻¹(ω_p − μ_p) and its covariance
    Σ_cc − Σ_cp Σ_pp⁻¹ Σ_pc equals L_cc L_ccᵀ.  Later blocks marginalise out.
    ``realized`` is [..., n_prev] and may carry sample-path batch dims.
    """
    offsets = np.concatenate([[0], np.cumsum(block_sizes)])
    start, stop = int(offsets[layer_index]), int(offsets[layer_index + 1])
    tril = global_factor.scale_tril
    mean = global_factor.mean
    l_cc = tril[..., start:stop, start:stop]
    if layer_index == 0:
        return GaussianFactor(mean[..., start:stop], l_cc, Structure.LAYERWISE)
    realized = jnp.asarray(realized, dtype=jnp.float64)
    if realized.shape[-1] != start:
        raise InputValidationError(f"expected {start} realised weights, got {realized.shape[-1]}")
    l_pp = tril[..., :start, :start]
    if not _traced(l_pp) and not np.all(np.asarray(jnp.diagonal(l_pp, axis1=-2, axis2=-1)) > 0):
        raise CholeskyError(f"previous-layer block of layer {layer_index}", JITTER_STOP)
    z = tri_solve(l_pp, (realized - mean[..., :start])[..., None])[..., 0]
    cond_mean = mean[..., start:stop] + jnp.einsum("...cp,...p->...c", tril[..., start:stop, :start], z)
    l_cc = jnp.broadcast_to(l_cc, cond_mean.shape[:-1] + l_cc.shape[-2:])
    return GaussianFactor(cond_mean, l_cc, Structure.LAYERWISE)


# ---------------------------------------------------------------------------
# Divergences and sampling
# ---------------------------------------------------------------------------


def kl_blocks(q: GaussianFactor, p: GaussianFactor):
    """KL[q‖p] for every batch block (no reduction)."""
    if q.dim != p.dim:
        raise InputValidationError(f"dimension mismatch in KL: {q.dim} vs {p.dim}")
    dmean = p.mean - q.mean
    if p.structure is Structure.DIAGONAL:
        sd = jnp.diagonal(p.scale_tril, axis1=-2, axis2=-1)
        white = q.scale_tril / sd[..., :, None]
        delta = dmean / sd
    else:
        white = tri_solve(p.scale_tril, q.scale_tril)
        delta = tri_solve(p.scale_tril, dmean[..., None])[..., 0]
    trace = jnp.sum(white**2, axis=(-2, -1))
    maha = jnp.sum(delta**2, axis=-1)
    return 0.5 * (trace + maha - q.dim + p.log_det - q.log_det)


def kl_divergence(q: GaussianFactor, p: GaussianFactor):
    """KL[q‖p] of the product over all batch blocks."""
    return jnp.sum(kl_blocks(q, p))


def sample(g: GaussianFactor, noise):
    """Reparameterised draw m + L ε; ``noise`` may carry extra leading dims."""
    return g.mean + jnp.einsum("...ij,...j->...i", g.scale_tril, noise)


# ---------------------------------------------------------------------------
# Re-blocking helpers
# ---------------------------------------------------------------------------


def merge_units(f: GaussianFactor) -> GaussianFactor:
    """[..., U, D] unit blocks -> one [..., U·D] block (block-diagonal)."""
    mean = f.mean.reshape(f.mean.shape[:-2] + (-1,))
    return GaussianFactor(mean, block_diag(f.scale_tril), Structure.LAYERWISE)


def concat_blocks(factors: Sequence[GaussianFactor]) -> GaussianFactor:
    """Independent consecutive blocks -> one block-diagonal GLOBAL factor."""
    mean = jnp.concatenate([f.mean for f in factors], axis=-1)
    total = mean.shape[-1]
    batch = mean.shape[:-1]
    tril = jnp.zeros(batch + (total, total), dtype=mean.dtype)
    start = 0
    for f in factors:
        stop = start + f.dim
        tril = tril.at[..., start:stop, start:stop].set(f.scale_tril)
        start = stop
    return GaussianFactor(mean, tril, Structure.GLOBAL)
