"""Experiment recipes: the KL-gap sweep and prior-learning diagnostics."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import jax
import numpy as np

from . import baselines as B
from . import datagen
from . import evaluation as E
from . import model as M
from . import objectives as O
from . import trainer as T
from .errors import ConfigError
from .priors import PriorSet, standard_init

log = logging.getLogger(__name__)

KLGAP_METHODS = ("mfvi", "ucvi", "lcvi", "fcvi", "bnnp")
KLGAP_COLUMNS = ("method", "sigma_y", "seed", "elbo", "elbo_stderr", "lml", "lml_stderr", "kl")


def fit_bnnp_single_task(
    x,
    y,
    prior: PriorSet,
    sigma_y: float,
    *,
    steps: int = 20000,
    num_samples: int = 8,
    seed: int = 0,
    nonlinearity: str = "relu",
    inference_hidden: Sequence[int] = (50, 50),
    lr: tuple[float, float] = (5e-3, 5e-5),
) -> tuple[M.NetworkConfig, dict]:
    """Train only the inference networks of a BNNP on one dataset with the ELBO.

    The prior and σ_y stay fixed.  The last layer uses the true likelihood
    precision, which makes its conditional posterior exact given the earlier
    layers.
    """
    cfg = M.NetworkConfig(
        prior.layout.widths,
        nonlinearity=nonlinearity,
        bias=prior.layout.bias,
        prior_structure=prior.structure,
        inference_hidden=tuple(inference_hidden),
        last_layer_precision="likelihood",
        learn_sigma_y=False,
        sigma_y_init=float(sigma_y),
    )
    params = M.init_params(cfg, jax.random.PRNGKey(seed), prior)
    tcfg = T.TrainConfig(
        steps=steps,
        meta_batch_size=1,
        num_samples=num_samples,
        objective=O.Objective.AVI,
        lr_start=lr[0],
        lr_end=lr[1],
        seed=seed,
        context_range=(1.0, 1.0),
        prior_learnability=0.0,
    )
    task = datagen.Task(x, y, np.arange(np.shape(x)[0]))
    state = T.init_state(cfg, tcfg, params)
    state, _ = T.train(cfg, tcfg, [task], state)
    return cfg, state.params


@dataclass(frozen=True)
class KLGapConfig:
    widths: tuple[int, ...] = (1, 20, 20, 1)
    nonlinearity: str = "relu"
    sigma_grid: tuple[float, ...] = tuple(float(s) for s in np.logspace(-2, 1, 8))
    methods: tuple[str, ...] = KLGAP_METHODS
    seeds: tuple[int, ...] = (21,)
    task_seed: int = 0
    noise: float = 0.1
    steps: int = 20000
    bnnp_steps: int = 20000
    num_samples: int = 8
    elbo_samples: int = 10000
    lml_samples: int = 1_000_000
    inference_hidden: tuple[int, ...] = (50, 50)

    def __post_init__(self):
        for name in ("widths", "sigma_grid", "methods", "seeds", "inference_hidden"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        unknown = set(self.methods) - set(KLGAP_METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}; choose from {KLGAP_METHODS}")
        if not self.sigma_grid or min(self.sigma_grid) <= 0:
            raise ConfigError("sigma_grid must hold positive values")
        if not self.methods or not self.seeds:
            raise ConfigError("methods and seeds must be non-empty")

    @classmethod
    def from_dict(cls, d: dict) -> "KLGapConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown klgap config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e


def kl_gap_task(cfg: KLGapConfig) -> datagen.Task:
    spec = datagen.GeneratorSpec(datagen.Kind.BNN_PRIOR, widths=cfg.widths, noise=cfg.noise, nonlinearity=cfg.nonlinearity)
    task = datagen.generate(spec, cfg.task_seed)
    return datagen.Task(task.x, task.y, np.arange(task.n), provenance=task.provenance)


def method_elbo(method: str, x, y, prior: PriorSet, sigma: float, seed: int, cfg: KLGapConfig) -> tuple[float, float]:
    if method == "bnnp":
        net, params = fit_bnnp_single_task(
            x,
            y,
            prior,
            sigma,
            steps=cfg.bnnp_steps,
            num_samples=cfg.num_samples,
            seed=seed,
            nonlinearity=cfg.nonlinearity,
            inference_hidden=cfg.inference_hidden,
        )
        return O.elbo_estimate(net, params, x, y, jax.random.PRNGKey(seed + 1), cfg.elbo_samples)
    fit = B.fit(method, x, y, prior, sigma, steps=cfg.steps, num_samples=cfg.num_samples, seed=seed, nonlinearity=cfg.nonlinearity)
    return B.elbo_of(fit.posterior, x, y, prior, sigma, cfg.elbo_samples, seed=seed + 1, nonlinearity=cfg.nonlinearity)


def run_kl_gap(cfg: KLGapConfig, task: Optional[datagen.Task] = None) -> list[dict]:
    """One row per (method, σ_y, seed): ELBO, MC log marginal likelihood and their gap."""
    task = kl_gap_task(cfg) if task is None else task
    prior = standard_init(cfg.widths)
    lmls = E.lml_mc(prior, task.x, task.y, list(cfg.sigma_grid), cfg.lml_samples, seed=cfg.task_seed, nonlinearity=cfg.nonlinearity)
    rows = []
    for seed in cfg.seeds:
        for method in cfg.methods:
            for sigma, lml in zip(cfg.sigma_grid, lmls):
                elbo, se = method_elbo(method, task.x, task.y, prior, sigma, seed, cfg)
                row = {
                    "method": method,
                    "sigma_y": float(sigma),
                    "seed": int(seed),
                    "elbo": elbo,
                    "elbo_stderr": se,
                    "lml": lml.value,
                    "lml_stderr": lml.stderr,
                    "kl": E.kl_gap(lml.value, elbo),
                }
                log.info("klgap %s", row)
                rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Prior-learning diagnostics
# ---------------------------------------------------------------------------


def lagged_autocorrelation(samples, grid, lag: float) -> float:
    """Mean over function samples of corr(f(x), f(x + lag)) on a uniform grid."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 3:
        samples = samples[..., 0]
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    step = grid[1] - grid[0]
    shift = int(round(lag / step))
    if shift <= 0 or shift >= grid.size - 1:
        raise ValueError("lag must span between one and n-2 grid steps")
    a, b = samples[:, :-shift], samples[:, shift:]
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    corr = np.sum(a * b, axis=1) / np.sqrt(np.sum(a * a, axis=1) * np.sum(b * b, axis=1))
    return float(np.mean(corr))


def bnnp_lppd(cfg: M.NetworkConfig, params: dict, task: datagen.Task, num_samples: int, seed: int) -> float:
    xc, yc, xt, yt = task.arrays()
    _, weights = M.infer(cfg, params, xc, yc, jax.random.PRNGKey(seed), num_samples)
    pred = np.asarray(M.predict(cfg, weights, xt))
    return E.lppd(pred, yt, np.exp(np.asarray(params["log_sigma_y"])))


def mfvi_lppd(
    task: datagen.Task,
    prior: PriorSet,
    sigma_y: float,
    *,
    steps: int = 20000,
    num_samples: int = 8,
    eval_samples: int = 1000,
    seed: int = 0,
    nonlinearity: str = "relu",
) -> float:
    """Fit mean-field VI on the context, then score the target set."""
    xc, yc, xt, yt = task.arrays()
    fit = B.fit(B.Family.MEAN_FIELD, xc, yc, prior, sigma_y, steps=steps, num_samples=num_samples, seed=seed, nonlinearity=nonlinearity)
    cfg = B.network_for(prior, nonlinearity)
    noise = jax.random.normal(jax.random.PRNGKey(seed + 1), (eval_samples, prior.layout.num_weights))
    weights = B.sample_weights(cfg, fit.posterior, fit.posterior.params, noise)
    pred = np.asarray(M.predict(cfg, weights, xt))
    return E.lppd(pred, yt, sigma_y)
