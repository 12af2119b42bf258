"""Non-amortised Gaussian VI baselines over BNN weights.

The four families differ only in which weight covariances they keep:

=========  ===============================  =========================
family     covariance                        storage
=========  ===============================  =========================
mfvi       diagonal                          unitwise, off-diag frozen
ucvi       dense within each unit            [U, D, D] per layer
lcvi       dense within each layer           [P, P] per layer
fcvi       dense over all weights            one [P_tot, P_tot]
=========  ===============================  =========================

Mean-field shares the unitwise parameterisation with its strictly-lower
Cholesky entries masked, so it is literally UCVI with correlations frozen.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import partial
from typing import Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from . import model as M
from .errors import TrainingAborted
from .gaussian import GaussianFactor, Structure, concat_blocks, kl_divergence, merge_units, sample
from .objectives import gaussian_log_lik
from .priors import PriorLayout, PriorSet, decode, encode_factor
from .trainer import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, MAX_CONSECUTIVE_NONFINITE


class Family(str, enum.Enum):
    MEAN_FIELD = "mfvi"
    UNITWISE = "ucvi"
    LAYERWISE = "lcvi"
    FULL = "fcvi"

    @property
    def structure(self) -> Structure:
        return _STRUCTURE[self]

    @property
    def default_lr(self) -> tuple[float, float]:
        return (5e-4, 5e-5) if self is Family.FULL else (5e-3, 5e-5)


_STRUCTURE = {
    Family.MEAN_FIELD: Structure.UNITWISE,
    Family.UNITWISE: Structure.UNITWISE,
    Family.LAYERWISE: Structure.LAYERWISE,
    Family.FULL: Structure.GLOBAL,
}
_RANK = {Structure.DIAGONAL: 0, Structure.UNITWISE: 1, Structure.LAYERWISE: 2, Structure.GLOBAL: 3}

DEFAULT_STEPS = 20000


@dataclass
class VariationalPosterior:
    family: Family
    layout: PriorLayout
    params: list
    mask: list

    def factors(self, params=None) -> list[GaussianFactor]:
        return decode(self.layout, self.params if params is None else params)

    def replace(self, params) -> "VariationalPosterior":
        return VariationalPosterior(self.family, self.layout, params, self.mask)


def restructure(factors: Sequence[GaussianFactor], structure: Structure) -> list[GaussianFactor]:
    """Re-express independent blocks in a coarser blocking (block-diagonal fill)."""
    src = factors[0].structure
    if _RANK[structure] < _RANK[src]:
        raise ValueError(f"cannot refine {src.value} into {structure.value}")
    if structure is src:
        return list(factors)
    if structure is Structure.UNITWISE:
        return [f.with_structure(Structure.UNITWISE) for f in factors]
    layers = [merge_units(f) if f.structure.unit_factorised else f for f in factors]
    if structure is Structure.LAYERWISE:
        return layers
    return [concat_blocks(layers)]


def _marginal_blocks(factors: Sequence[GaussianFactor], layout: PriorLayout, structure: Structure) -> list[GaussianFactor]:
    """Moments of ``factors`` restricted to ``structure``'s blocks (used to initialise q)."""
    if _RANK[structure] >= _RANK[factors[0].structure]:
        return restructure(factors, structure)
    # only GLOBAL -> finer needs marginalising: take diagonal blocks of Σ
    cov = factors[0].covariance
    mean = factors[0].mean
    offsets = np.concatenate([[0], np.cumsum(layout.block_sizes)])
    out = []
    for l in range(layout.num_layers):
        s, e = int(offsets[l]), int(offsets[l + 1])
        m, c = mean[s:e], cov[s:e, s:e]
        if structure.unit_factorised:
            u, d = layout.units(l), layout.fan_in(l)
            idx = np.arange(u)
            blocks = c.reshape(u, d, u, d)[idx, :, idx, :]
            out.append(GaussianFactor.from_covariance(m.reshape(u, d), blocks, structure))
        else:
            out.append(GaussianFactor.from_covariance(m, c, structure))
    return out


def init_at_prior(family: Family | str, prior: PriorSet) -> VariationalPosterior:
    """q initialised with the prior's means and (block-restricted) covariances."""
    family = Family(family)
    structure = family.structure
    layout = PriorLayout(structure, prior.layout.widths, prior.layout.bias)
    blocks = _marginal_blocks(prior.factors(), prior.layout, structure)
    params = [encode_factor(structure, f) for f in blocks]
    mask = []
    for blk in params:
        m = {"mean": np.ones(np.shape(blk["mean"]), dtype=bool)}
        dim = np.shape(blk["chol"])[-1]
        allowed = np.eye(dim, dtype=bool) if family is Family.MEAN_FIELD else np.tril(np.ones((dim, dim), dtype=bool))
        m["chol"] = np.broadcast_to(allowed, np.shape(blk["chol"])).copy()
        mask.append(m)
    if family is Family.MEAN_FIELD:
        params = [{"mean": b["mean"], "chol": b["chol"] * m["chol"]} for b, m in zip(params, mask)]
    return VariationalPosterior(family, layout, params, mask)


def promote(q: VariationalPosterior, family: Family | str) -> VariationalPosterior:
    """Embed q in a richer family (warm start); the distribution is unchanged."""
    family = Family(family)
    if _RANK[family.structure] < _RANK[q.family.structure]:
        raise ValueError(f"cannot promote {q.family.value} to {family.value}")
    ps = PriorSet(q.layout, q.params)
    return init_at_prior(family, ps)


def kl_to_prior(q_factors: Sequence[GaussianFactor], p_factors: Sequence[GaussianFactor]):
    """KL[q‖p] after promoting both to their coarser common blocking.

    A fully diagonal p is handled elementwise whatever q's blocking is.
    """
    if p_factors[0].structure is Structure.DIAGONAL:
        q_flat_mean, q_blocks = _flat_blocks(q_factors)
        p_mean = jnp.concatenate([f.mean.reshape(-1) for f in p_factors])
        p_var = jnp.concatenate([f.variance.reshape(-1) for f in p_factors])
        maha = jnp.sum((q_flat_mean - p_mean) ** 2 / p_var)
        start = 0
        trace = 0.0
        logdet_q = 0.0
        for tril in q_blocks:
            batch, dim = tril.shape[:-2], tril.shape[-1]
            n = int(np.prod(batch, dtype=int)) * dim
            pv = p_var[start : start + n].reshape(batch + (dim,))
            trace = trace + jnp.sum(tril**2 / pv[..., :, None])
            logdet_q = logdet_q + 2.0 * jnp.sum(jnp.log(jnp.diagonal(tril, axis1=-2, axis2=-1)))
            start += n
        return 0.5 * (trace + maha - p_mean.shape[0] + jnp.sum(jnp.log(p_var)) - logdet_q)
    target = max(q_factors[0].structure, p_factors[0].structure, key=lambda s: _RANK[s])
    qs = restructure(q_factors, target)
    ps = restructure(p_factors, target)
    return sum(kl_divergence(a, b) for a, b in zip(qs, ps))


def _flat_blocks(factors):
    mean = jnp.concatenate([f.mean.reshape(-1) for f in factors])
    return mean, [f.scale_tril for f in factors]


def sample_weights(cfg: M.NetworkConfig, q: VariationalPosterior, params, noise) -> list:
    """Per-layer [K, D, U] weights from q; ``noise`` is [K, P_tot]."""
    factors = q.factors(params)
    k = noise.shape[0]
    if q.layout.structure is Structure.GLOBAL:
        return M.unflatten_weights(cfg, sample(factors[0], noise))
    chunks = jnp.split(noise, np.cumsum(q.layout.block_sizes)[:-1], axis=-1)
    out = []
    for l, (f, eps) in enumerate(zip(factors, chunks)):
        units, fan_in = cfg.widths[l + 1], cfg.fan_in(l)
        if f.structure.unit_factorised:
            w = sample(f, eps.reshape(k, units, fan_in))
        else:
            w = sample(f, eps).reshape(k, units, fan_in)
        out.append(jnp.swapaxes(w, -1, -2))
    return out


def _elbo_parts(cfg, q, params, p_factors, x, y, log_sigma, noise):
    weights = sample_weights(cfg, q, params, noise)
    ll = gaussian_log_lik(M.predict(cfg, weights, x), y, log_sigma)
    return ll, kl_to_prior(q.factors(params), p_factors)


def network_for(prior: PriorSet, nonlinearity: str = "relu") -> M.NetworkConfig:
    return M.NetworkConfig(prior.layout.widths, nonlinearity=nonlinearity, bias=prior.layout.bias, prior_structure=prior.structure)


@dataclass
class FitResult:
    posterior: VariationalPosterior
    trace: np.ndarray  # per-step ELBO estimate
    nonfinite_steps: int


def fit(
    family: Family | str | VariationalPosterior,
    x,
    y,
    prior: PriorSet,
    sigma_y: float,
    *,
    steps: int = DEFAULT_STEPS,
    num_samples: int = 8,
    lr: Optional[tuple[float, float]] = None,
    seed: int = 0,
    nonlinearity: str = "relu",
) -> FitResult:
    """Maximise the reparameterised ELBO (analytic KL) with Adam.

    ``family`` may be an existing posterior to continue from.  The learning
    rate decays linearly from lr[0] to lr[1] over ``steps``.
    """
    q = family if isinstance(family, VariationalPosterior) else init_at_prior(family, prior)
    lr_start, lr_end = q.family.default_lr if lr is None else lr
    cfg = network_for(prior, nonlinearity)
    x = jnp.asarray(x, dtype=jnp.float64)
    y = jnp.asarray(y, dtype=jnp.float64)
    if y.ndim == 1:
        y = y[:, None]
    log_sigma = jnp.full((y.shape[-1],), float(np.log(sigma_y)))
    p_factors = prior.factors()
    masks = jax.tree_util.tree_map(jnp.asarray, q.mask)
    total = q.layout.num_weights
    key = jax.random.PRNGKey(seed)

    def neg_elbo(params, noise):
        ll, kl = _elbo_parts(cfg, q, params, p_factors, x, y, log_sigma, noise)
        return -(jnp.mean(ll) - kl)

    grad_fn = jax.value_and_grad(neg_elbo)

    def body(carry, t):
        params, m, v, count, run, dead = carry
        noise = jax.random.normal(jax.random.fold_in(key, t), (num_samples, total))
        loss, g = grad_fn(params, noise)
        g = jax.tree_util.tree_map(lambda a, k: jnp.where(k, a, 0.0), g, masks)
        finite = jnp.isfinite(loss) & jnp.all(jnp.stack([jnp.all(jnp.isfinite(a)) for a in jax.tree_util.tree_leaves(g)]))
        ok = finite & ~dead
        lr_t = lr_start + (lr_end - lr_start) * t / steps
        c = count + 1.0
        nm = jax.tree_util.tree_map(lambda a, b: ADAM_BETA1 * a + (1 - ADAM_BETA1) * b, m, g)
        nv = jax.tree_util.tree_map(lambda a, b: ADAM_BETA2 * a + (1 - ADAM_BETA2) * b * b, v, g)
        upd = lambda p, a, b, k: jnp.where(
            k & ok, p - lr_t * (a / (1 - ADAM_BETA1**c)) / (jnp.sqrt(b / (1 - ADAM_BETA2**c)) + ADAM_EPS), p
        )
        new_params = jax.tree_util.tree_map(upd, params, nm, nv, masks)
        keep = lambda a, b: jnp.where(ok, a, b)
        nm = jax.tree_util.tree_map(keep, nm, m)
        nv = jax.tree_util.tree_map(keep, nv, v)
        run = jnp.where(finite, 0, run + 1)
        dead = dead | (run >= MAX_CONSECUTIVE_NONFINITE)
        count = jnp.where(ok, c, count)
        return (new_params, nm, nv, count, run, dead), (-loss, ~finite)

    zeros = jax.tree_util.tree_map(jnp.zeros_like, q.params)
    init = (q.params, zeros, zeros, jnp.asarray(0.0), jnp.asarray(0), jnp.asarray(False))
    run_scan = jax.jit(lambda c: jax.lax.scan(body, c, jnp.arange(steps, dtype=jnp.float64)))
    (params, _, _, _, _, dead), (trace, bad) = run_scan(init)
    if bool(dead):
        raise TrainingAborted(f"{q.family.value}: {MAX_CONSECUTIVE_NONFINITE} consecutive non-finite steps")
    return FitResult(q.replace(params), np.asarray(trace), int(np.sum(np.asarray(bad))))


def elbo_of(
    q: VariationalPosterior,
    x,
    y,
    prior: PriorSet,
    sigma_y: float,
    num_samples: int = 10000,
    seed: int = 0,
    chunk: int = 1000,
    nonlinearity: str = "relu",
) -> tuple[float, float]:
    """(ELBO, standard error): MC expected log-likelihood minus analytic KL."""
    cfg = network_for(prior, nonlinearity)
    x = jnp.asarray(x, dtype=jnp.float64)
    y = jnp.asarray(y, dtype=jnp.float64)
    if y.ndim == 1:
        y = y[:, None]
    log_sigma = jnp.full((y.shape[-1],), float(np.log(sigma_y)))
    p_factors = prior.factors()
    key = jax.random.PRNGKey(seed)

    @partial(jax.jit, static_argnums=1)
    def lls(i, n):
        noise = jax.random.normal(jax.random.fold_in(key, i), (n, q.layout.num_weights))
        weights = sample_weights(cfg, q, q.params, noise)
        return gaussian_log_lik(M.predict(cfg, weights, x), y, log_sigma)

    out, done, i = [], 0, 0
    while done < num_samples:
        n = min(chunk, num_samples - done)
        out.append(np.asarray(lls(i, n)))
        done += n
        i += 1
    ll = np.concatenate(out)
    kl = float(kl_to_prior(q.factors(), p_factors))
    se = float(np.std(ll, ddof=1) / np.sqrt(ll.size)) if ll.size > 1 else float("nan")
    return float(np.mean(ll) - kl), se
