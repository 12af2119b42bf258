"""Monte Carlo training objectives.

All objectives are written as quantities to *maximise*.  A single set of K
posterior samples drawn from q(W | context) is shared by every term of a task,
so identities such as PP-AVI = NPML + AVI hold exactly per draw.
"""

from __future__ import annotations

import enum
import math
from functools import partial
from typing import NamedTuple, Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import logsumexp

from . import model as M

LOG_2PI = math.log(2.0 * math.pi)


class Objective(str, enum.Enum):
    PP_AVI = "pp_avi"
    AVI = "avi"
    NPML = "npml"
    TELL_AVI = "tell_avi"


class Split(NamedTuple):
    """Context/target arrays of one task, optionally zero-padded with masks."""

    xc: jax.Array
    yc: jax.Array
    xt: jax.Array
    yt: jax.Array
    mask_c: Optional[jax.Array] = None
    mask_t: Optional[jax.Array] = None


@jax.tree_util.register_pytree_node_class
class ObjectiveEstimate:
    """Objective value and the terms it was assembled from (per-task or averaged)."""

    fields = (
        "value",
        "log_posterior_predictive",
        "expected_log_lik_context",
        "kl_sum",
        "expected_log_lik_target",
    )

    def __init__(self, value, log_posterior_predictive, expected_log_lik_context, kl_sum, expected_log_lik_target, num_samples: int):
        self.value = value
        self.log_posterior_predictive = log_posterior_predictive
        self.expected_log_lik_context = expected_log_lik_context
        self.kl_sum = kl_sum
        self.expected_log_lik_target = expected_log_lik_target
        self.num_samples = num_samples

    def tree_flatten(self):
        return tuple(getattr(self, f) for f in self.fields), self.num_samples

    @classmethod
    def tree_unflatten(cls, num_samples, children):
        return cls(*children, num_samples)

    @property
    def elbo(self):
        return self.expected_log_lik_context - self.kl_sum

    def as_dict(self) -> dict:
        out = {f: float(getattr(self, f)) for f in self.fields}
        out["num_samples"] = int(self.num_samples)
        return out

    def __repr__(self):
        parts = ", ".join(f"{f}={np.asarray(getattr(self, f))!s}" for f in self.fields)
        return f"ObjectiveEstimate({parts}, K={self.num_samples})"


def gaussian_log_lik(pred, y, log_sigma, mask=None):
    """Joint log N(y; ŷ, σ²) over rows and outputs, one value per sample.

    pred [K, n, d], y [n, d], log_sigma [d] (or scalar); mask [n] drops rows.
    """
    z = (y - pred) * jnp.exp(-log_sigma)
    point = -0.5 * LOG_2PI - log_sigma - 0.5 * z**2
    if mask is not None:
        point = point * mask[:, None]
    return jnp.sum(point, axis=(-2, -1))


def log_posterior_predictive(sample_log_liks):
    """log (1/K) Σ_k exp(ℓ_k) with the log-sum-exp trick."""
    sample_log_liks = jnp.asarray(sample_log_liks)
    return logsumexp(sample_log_liks, axis=-1) - math.log(sample_log_liks.shape[-1])


def task_terms(
    cfg: M.NetworkConfig,
    params: dict,
    split: Split,
    key,
    num_samples: int,
    *,
    batch_masks=None,
    grad_batch=None,
    noise=None,
) -> ObjectiveEstimate:
    """All objective terms of one task from one shared set of K draws.

    ``value`` is left at 0; ``combine`` assembles the requested objective.
    """
    state, weights = M.infer(
        cfg,
        params,
        split.xc,
        split.yc,
        key,
        num_samples,
        mask=split.mask_c,
        noise=noise,
        batch_masks=batch_masks,
        grad_batch=grad_batch,
    )
    log_sigma = params["log_sigma_y"]
    context_ll = gaussian_log_lik(state.context_pred, split.yc, log_sigma, split.mask_c)
    target_ll = gaussian_log_lik(M.predict(cfg, weights, split.xt), split.yt, log_sigma, split.mask_t)
    k = weights[0].shape[0]
    return ObjectiveEstimate(
        jnp.zeros(()),
        log_posterior_predictive(target_ll),
        jnp.mean(context_ll),
        jnp.mean(state.kl),
        jnp.mean(target_ll),
        k,
    )


def combine(terms: ObjectiveEstimate, objective: Objective | str, pp_weight: float = 1.0, kl_weight: float = 1.0) -> ObjectiveEstimate:
    """Assemble an objective value from its terms.

    ``pp_weight`` scales the target term (posterior predictive, or expected
    log-likelihood for TELL-AVI) and ``kl_weight`` the KL penalty.
    """
    objective = Objective(objective)
    elbo = terms.expected_log_lik_context - kl_weight * terms.kl_sum
    if objective is Objective.PP_AVI:
        value = pp_weight * terms.log_posterior_predictive + elbo
    elif objective is Objective.AVI:
        value = elbo
    elif objective is Objective.NPML:
        value = pp_weight * terms.log_posterior_predictive
    else:
        value = pp_weight * terms.expected_log_lik_target + elbo
    return ObjectiveEstimate(
        value,
        terms.log_posterior_predictive,
        terms.expected_log_lik_context,
        terms.kl_sum,
        terms.expected_log_lik_target,
        terms.num_samples,
    )


def _context_only(xc, yc) -> Split:
    xc = jnp.asarray(xc, dtype=jnp.float64)
    yc = jnp.asarray(yc, dtype=jnp.float64)
    return Split(xc, yc, jnp.zeros((0, xc.shape[-1])), jnp.zeros((0, yc.shape[-1])))


def as_split(task_or_split) -> Split:
    if isinstance(task_or_split, Split):
        return task_or_split
    xc, yc, xt, yt = task_or_split.arrays()
    f = lambda a: jnp.asarray(a, dtype=jnp.float64)
    return Split(f(xc), f(yc), f(xt), f(yt))


def elbo(cfg, params, xc, yc, key, num_samples: int) -> ObjectiveEstimate:
    """Expected context log-likelihood minus the path-averaged layerwise KL."""
    return combine(task_terms(cfg, params, _context_only(xc, yc), key, num_samples), Objective.AVI)


def _mean_estimates(ests: Sequence[ObjectiveEstimate]) -> ObjectiveEstimate:
    return jax.tree_util.tree_map(lambda *a: jnp.mean(jnp.stack(a)), *ests)


def _over_tasks(objective, cfg, params, tasks, key, num_samples, pp_weight=1.0, kl_weight=1.0) -> ObjectiveEstimate:
    tasks = list(tasks)
    if not tasks:
        raise ValueError("need at least one task")
    ests = [
        combine(task_terms(cfg, params, as_split(t), jax.random.fold_in(key, j), num_samples), objective, pp_weight, kl_weight)
        for j, t in enumerate(tasks)
    ]
    return _mean_estimates(ests)


def pp_avi(cfg, params, tasks, key, num_samples: int, pp_weight=1.0, kl_weight=1.0) -> ObjectiveEstimate:
    """Target log posterior predictive plus context ELBO, averaged over tasks."""
    return _over_tasks(Objective.PP_AVI, cfg, params, tasks, key, num_samples, pp_weight, kl_weight)


def avi(cfg, params, tasks, key, num_samples: int, kl_weight=1.0) -> ObjectiveEstimate:
    return _over_tasks(Objective.AVI, cfg, params, tasks, key, num_samples, 1.0, kl_weight)


def npml(cfg, params, tasks, key, num_samples: int) -> ObjectiveEstimate:
    return _over_tasks(Objective.NPML, cfg, params, tasks, key, num_samples)


def tell_avi(cfg, params, tasks, key, num_samples: int, pp_weight=1.0, kl_weight=1.0) -> ObjectiveEstimate:
    """Unbiased target expected log-likelihood plus context ELBO."""
    return _over_tasks(Objective.TELL_AVI, cfg, params, tasks, key, num_samples, pp_weight, kl_weight)


OBJECTIVES = {
    Objective.PP_AVI: pp_avi,
    Objective.AVI: avi,
    Objective.NPML: npml,
    Objective.TELL_AVI: tell_avi,
}


# ---------------------------------------------------------------------------
# Padded meta-batches (used by the trainer under jit)
# ---------------------------------------------------------------------------


def pad_splits(splits: Sequence[Split], max_context: Optional[int] = None, max_target: Optional[int] = None) -> Split:
    """Stack splits into [B, n_max, d] arrays with 0/1 row masks."""
    splits = [as_split(s) for s in splits]
    nc = max_context if max_context is not None else max(s.xc.shape[0] for s in splits)
    nt = max_target if max_target is not None else max(s.xt.shape[0] for s in splits)

    def pad(a, n):
        a = np.asarray(a, dtype=np.float64)
        if a.shape[0] > n:
            raise ValueError(f"task has {a.shape[0]} rows but padding size is {n}")
        out = np.zeros((n,) + a.shape[1:])
        out[: a.shape[0]] = a
        return out

    def mask(n_real, n):
        m = np.zeros(n)
        m[:n_real] = 1.0
        return m

    cols = [
        [pad(s.xc, nc) for s in splits],
        [pad(s.yc, nc) for s in splits],
        [pad(s.xt, nt) for s in splits],
        [pad(s.yt, nt) for s in splits],
        [mask(s.xc.shape[0], nc) for s in splits],
        [mask(s.xt.shape[0], nt) for s in splits],
    ]
    return Split(*(jnp.asarray(np.stack(c)) for c in cols))


def meta_objective(
    cfg: M.NetworkConfig,
    params: dict,
    batch: Split,
    keys,
    num_samples: int,
    objective: Objective | str,
    pp_weight: float = 1.0,
    kl_weight: float = 1.0,
    batch_masks=None,
    grad_batch=None,
) -> ObjectiveEstimate:
    """Task-averaged objective over a padded meta-batch (``keys`` is [B, 2])."""

    def one(split, key, bm):
        terms = task_terms(cfg, params, split, key, num_samples, batch_masks=bm, grad_batch=grad_batch)
        return combine(terms, objective, pp_weight, kl_weight)

    if batch_masks is None:
        per_task = jax.vmap(lambda s, k: one(s, k, None))(batch, keys)
    else:
        per_task = jax.vmap(one)(batch, keys, batch_masks)
    return jax.tree_util.tree_map(lambda a: jnp.mean(a, axis=0), per_task)


# ---------------------------------------------------------------------------
# Large-K estimates for evaluation
# ---------------------------------------------------------------------------


def expected_last_layer_log_lik(cfg, state: M.PosteriorState, x, y, log_sigma):
    """E over the last layer's Gaussian posterior of the context log-likelihood, per path.

    Given the earlier layers the output is linear in the last-layer weights,
    so E[(y - z)²] = (y - E z)² + Var z in closed form.
    """
    last = cfg.num_layers - 1
    a = M.hidden_input(cfg, state.weights, x, last, state.num_samples)  # [K, n, D]
    post = state.posteriors[last]
    units, d = cfg.widths[-1], cfg.fan_in(last)
    if post.structure.unit_factorised:
        mean, cov = post.mean, post.covariance  # [K, U, D], [K, U, D, D]
    else:
        k = post.mean.shape[0]
        mean = post.mean.reshape(k, units, d)
        full = post.covariance.reshape(k, units, d, units, d)
        idx = jnp.arange(units)
        cov = jnp.moveaxis(full[:, idx, :, idx, :], 0, 1)  # per-unit diagonal blocks
    mu = jnp.einsum("knd,kud->knu", a, mean)
    var = jnp.einsum("knd,kude,kne->knu", a, cov, a)
    inv_var = jnp.exp(-2.0 * log_sigma)
    point = -0.5 * LOG_2PI - log_sigma - 0.5 * ((y - mu) ** 2 + var) * inv_var
    return jnp.sum(point, axis=(-2, -1))


def elbo_samples(cfg, params, xc, yc, key, num_samples: int, chunk: int = 1024, analytic_last_layer: bool = True) -> np.ndarray:
    """Per-path ELBO contributions E[ℓ] − KL_k, drawn in chunks of ``chunk`` paths.

    With ``analytic_last_layer`` the expectation over the last layer is taken
    in closed form (same mean, lower variance); otherwise each path uses its
    sampled weights.
    """
    xc = jnp.asarray(xc, dtype=jnp.float64)
    yc = jnp.asarray(yc, dtype=jnp.float64)

    @partial(jax.jit, static_argnums=1)
    def run(k, n):
        state, _ = M.infer(cfg, params, xc, yc, k, n)
        if analytic_last_layer:
            ll = expected_last_layer_log_lik(cfg, state, xc, yc, params["log_sigma_y"])
        else:
            ll = gaussian_log_lik(state.context_pred, yc, params["log_sigma_y"])
        return ll - state.kl

    out, done, c = [], 0, 0
    while done < num_samples:
        n = min(chunk, num_samples - done)
        out.append(np.asarray(run(jax.random.fold_in(key, c), n)))
        done += n
        c += 1
    return np.concatenate(out)


def elbo_estimate(cfg, params, xc, yc, key, num_samples: int, chunk: int = 1024, analytic_last_layer: bool = True) -> tuple[float, float]:
    """(mean, standard error) of the ELBO over ``num_samples`` paths."""
    vals = elbo_samples(cfg, params, xc, yc, key, num_samples, chunk, analytic_last_layer)
    se = float(np.std(vals, ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else float("nan")
    return float(np.mean(vals)), se
