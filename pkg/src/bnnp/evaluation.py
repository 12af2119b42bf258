"""Evaluation metrics and exports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from . import _kernels
from .gaussian import Structure
from .priors import PriorSet

LOG_2PI = math.log(2.0 * math.pi)
JACKKNIFE_GROUPS = 100


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float


def log_lik_from_sse(sse, n_values: int, sigma) -> np.ndarray:
    """Gaussian joint log-likelihood of ``n_values`` scalars with residual sum ``sse``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return -0.5 * n_values * LOG_2PI - n_values * np.log(sigma) - 0.5 * np.asarray(sse) / sigma**2


def _prior_blocks(prior: PriorSet):
    out = []
    for f in prior.factors():
        out.append((np.asarray(f.mean, dtype=np.float64), np.asarray(f.scale_tril, dtype=np.float64), f.structure))
    return out


def sample_prior_flat(prior: PriorSet, rng: np.random.Generator, count: int) -> np.ndarray:
    """[count, P] weight draws in global enumeration order."""
    parts = []
    for mean, tril, structure in _prior_blocks(prior):
        if structure is Structure.DIAGONAL:
            sd = np.diagonal(tril, axis1=-2, axis2=-1)
            eps = rng.standard_normal((count,) + mean.shape)
            parts.append((mean + sd * eps).reshape(count, -1))
        elif structure is Structure.UNITWISE:
            eps = rng.standard_normal((count,) + mean.shape)
            parts.append((mean + np.einsum("ude,cue->cud", tril, eps)).reshape(count, -1))
        else:
            eps = rng.standard_normal((count, mean.shape[-1]))
            parts.append(mean + eps @ tril.T)
    return np.concatenate(parts, axis=1)


def _grouped_jackknife(log_w: np.ndarray, groups: int) -> tuple[float, float]:
    """LSE(log_w) − log M and its delete-a-group jackknife standard error."""
    m = log_w.shape[0]
    value = float(logsumexp(log_w) - math.log(m))
    g = min(groups, m)
    if g < 2:
        return value, float("nan")
    chunks = np.array_split(log_w, g)
    sizes = np.array([c.size for c in chunks], dtype=np.float64)
    lse = np.array([logsumexp(c) for c in chunks])
    loo = np.empty(g)
    for i in range(g):
        rest = np.delete(lse, i)
        loo[i] = logsumexp(rest) - math.log(m - sizes[i])
    var = (g - 1) / g * np.sum((loo - loo.mean()) ** 2)
    return value, float(math.sqrt(var))


def lml_mc(
    prior: PriorSet,
    x,
    y,
    sigma_y,
    num_samples: int = 1_000_000,
    seed: int = 0,
    *,
    nonlinearity: str = "relu",
    chunk: int = 20_000,
    backend: str = "auto",
    groups: int = JACKKNIFE_GROUPS,
):
    """Naive Monte Carlo log marginal likelihood under the weight prior.

    The same prior draws serve every value in ``sigma_y``.  Returns one
    Estimate, or a list of them when ``sigma_y`` is a sequence.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if x.ndim == 1:
        x = x[:, None]
    scalar = np.ndim(sigma_y) == 0
    sigmas = np.atleast_1d(np.asarray(sigma_y, dtype=np.float64))
    widths = prior.layout.widths
    sse = np.empty(num_samples)
    done = 0
    c = 0
    while done < num_samples:
        n = min(chunk, num_samples - done)
        rng = np.random.default_rng([seed, c])
        w = sample_prior_flat(prior, rng, n)
        sse[done : done + n] = _kernels.sse(w, x, y, widths, prior.layout.bias, nonlinearity, backend)
        done += n
        c += 1
    out = [Estimate(*_grouped_jackknife(log_lik_from_sse(sse, y.size, s), groups)) for s in sigmas]
    return out[0] if scalar else out


def kl_gap(lml: float, elbo: float) -> float:
    """LML − ELBO; reported raw, so MC error can make it slightly negative."""
    return float(lml) - float(elbo)


def sample_log_liks(predictions, targets, sigma_y) -> np.ndarray:
    """Joint Gaussian log-likelihood of the targets under each sample: [K]."""
    pred = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if pred.ndim == 2:
        pred = pred[..., None]
    if targets.ndim == 1:
        targets = targets[:, None]
    sigma = np.broadcast_to(np.asarray(sigma_y, dtype=np.float64), targets.shape[-1:])
    z = (targets - pred) / sigma
    return np.sum(-0.5 * LOG_2PI - np.log(sigma) - 0.5 * z**2, axis=(-2, -1))


def lppd(predictions, targets, sigma_y) -> float:
    """Per-datapoint log posterior predictive density of a whole target set.

    predictions [K, n, d]; the joint density is averaged over samples in log
    space, then divided by n.
    """
    ll = sample_log_liks(predictions, targets, sigma_y)
    n = np.asarray(targets).shape[0]
    if n == 0:
        return 0.0
    return float((logsumexp(ll) - math.log(ll.shape[0])) / n)


def mae(predictive_mean, targets) -> float:
    a = np.asarray(predictive_mean, dtype=np.float64)
    b = np.asarray(targets, dtype=np.float64)
    return float(np.mean(np.abs(a.reshape(b.shape) - b)))


def export_function_samples(samples, grid, path) -> Path:
    """CSV with columns sample_id, x0.., y0..; rows ordered by sample then grid point."""
    samples = np.asarray(samples, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 1:
        grid = grid[:, None]
    if samples.ndim == 2:
        samples = samples[..., None]
    k, n, d_out = samples.shape
    if n != grid.shape[0]:
        raise ValueError(f"samples cover {n} points but the grid has {grid.shape[0]}")
    path = Path(path)
    header = ["sample_id"] + [f"x{i}" for i in range(grid.shape[1])] + [f"y{i}" for i in range(d_out)]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s in range(k):
            for i in range(n):
                w.writerow([s] + [repr(float(v)) for v in grid[i]] + [repr(float(v)) for v in samples[s, i]])
    return path


def read_function_samples(path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of ``export_function_samples``: (samples [K, n, d], grid [n, d0])."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    nx = sum(h.startswith("x") for h in header)
    data = np.asarray([[float(v) for v in r] for r in body]) if body else np.zeros((0, len(header)))
    ids = data[:, 0].astype(int)
    k = int(ids.max()) + 1 if ids.size else 0
    n = ids.size // k if k else 0
    grid = data[:n, 1 : 1 + nx]
    samples = data[:, 1 + nx :].reshape(k, n, -1)
    return samples, grid


def summarise(metric: str, per_task: Sequence[float]) -> dict:
    """{metric, mean, stderr, per_task} with stderr over tasks."""
    vals = np.asarray(list(per_task), dtype=np.float64)
    mean = float(np.mean(vals)) if vals.size else float("nan")
    se = float(np.std(vals, ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else float("nan")
    return {"metric": metric, "mean": mean, "stderr": se, "per_task": vals.tolist()}
