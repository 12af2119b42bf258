"""Meta-training loop, Adam, learning-rate schedule and checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from . import datagen
from . import model as M
from . import objectives as O
from .errors import ConfigError, TrainingAborted
from .gaussian import Structure

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MAX_CONSECUTIVE_NONFINITE = 10
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    meta_batch_size: int = 5
    num_samples: int = 8
    objective: O.Objective = O.Objective.PP_AVI
    lr_start: float = 5e-3
    lr_end: float = 5e-5
    seed: int = 0
    context_range: tuple[float, float] = (0.1, 0.5)
    pp_weight: float = 1.0
    kl_weight: float = 1.0
    checkpoint_every: int = 0
    # >1 splits each context into this many batches and keeps gradients for one.
    context_batches: int = 1
    prior_learnability: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "objective", O.Objective(self.objective))
        object.__setattr__(self, "context_range", tuple(float(v) for v in self.context_range))
        a, b = self.context_range
        if not 0.0 < a <= b <= 1.0:
            raise ConfigError(f"context_range must satisfy 0 < a <= b <= 1, got {self.context_range}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.meta_batch_size < 1 or self.num_samples < 1 or self.context_batches < 1:
            raise ConfigError("meta_batch_size, num_samples and context_batches must be >= 1")
        if self.lr_start < 0 or self.lr_end < 0:
            raise ConfigError("learning rates must be non-negative")
        if not 0.0 <= self.prior_learnability <= 1.0:
            raise ConfigError("prior_learnability must lie in [0, 1]")


@dataclass
class TrainState:
    """Everything needed to continue training bit-exactly.

    Randomness is counter-based on (seed, step), so no generator state is kept.
    """

    params: dict
    opt_m: dict
    opt_v: dict
    masks: dict
    step: int = 0
    updates: int = 0
    nonfinite_total: int = 0
    nonfinite_run: int = 0


def lr_at(step: int, steps: int, start: float, end: float) -> float:
    """Linear interpolation from ``start`` at step 0 to ``end`` at step ``steps``."""
    frac = min(max(step / steps, 0.0), 1.0)
    return start + (end - start) * frac


def init_state(cfg: M.NetworkConfig, tcfg: TrainConfig, params: Optional[dict] = None, masks: Optional[dict] = None) -> TrainState:
    if params is None:
        params = M.init_params(cfg, jax.random.PRNGKey(tcfg.seed))
    if masks is None:
        masks = M.init_masks(cfg, params, learnability=tcfg.prior_learnability)
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    masks = jax.tree_util.tree_map(lambda a: jnp.asarray(a, dtype=bool), masks)
    return TrainState(params, zeros, zeros, masks)


# ---------------------------------------------------------------------------
# One optimisation step
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _step_fn(cfg: M.NetworkConfig, objective: O.Objective, num_samples: int, pp_weight: float, kl_weight: float, batched: bool):
    def loss_fn(params, batch, keys, batch_masks, grad_batch):
        est = O.meta_objective(
            cfg,
            params,
            batch,
            keys,
            num_samples,
            objective,
            pp_weight,
            kl_weight,
            batch_masks if batched else None,
            grad_batch if batched else None,
        )
        return -est.value, est

    grad_fn = jax.value_and_grad(loss_fn, has_aux=True)

    @jax.jit
    def step(params, m, v, masks, count, lr, batch, keys, batch_masks, grad_batch):
        (loss, est), grads = grad_fn(params, batch, keys, batch_masks, grad_batch)
        grads = jax.tree_util.tree_map(lambda g, k: jnp.where(k, g, 0.0), grads, masks)
        leaves = jax.tree_util.tree_leaves(grads)
        finite = jnp.isfinite(loss) & jnp.all(jnp.stack([jnp.all(jnp.isfinite(g)) for g in leaves]))
        t = count + 1.0
        new_m = jax.tree_util.tree_map(lambda a, g: ADAM_BETA1 * a + (1 - ADAM_BETA1) * g, m, grads)
        new_v = jax.tree_util.tree_map(lambda a, g: ADAM_BETA2 * a + (1 - ADAM_BETA2) * g * g, v, grads)

        def update(p, a, b, k):
            step_ = lr * (a / (1 - ADAM_BETA1**t)) / (jnp.sqrt(b / (1 - ADAM_BETA2**t)) + ADAM_EPS)
            return jnp.where(k & finite, p - step_, p)

        new_params = jax.tree_util.tree_map(update, params, new_m, new_v, masks)
        keep = lambda new, old: jnp.where(finite, new, old)
        new_m = jax.tree_util.tree_map(keep, new_m, m)
        new_v = jax.tree_util.tree_map(keep, new_v, v)
        return new_params, new_m, new_v, finite, loss, est

    return step


def _context_batch_masks(mask_c, num_batches: int):
    """Round-robin assignment of the real context rows of each task to batches."""
    b, n = mask_c.shape
    rank = np.cumsum(mask_c, axis=1) - 1
    out = np.zeros((b, num_batches, n))
    for i in range(num_batches):
        out[:, i, :] = (mask_c > 0) & (rank % num_batches == i)
    return jnp.asarray(out)


def train_step(
    cfg: M.NetworkConfig,
    tcfg: TrainConfig,
    state: TrainState,
    batch: O.Split,
    keys,
    grad_batch: int = 0,
    lr: Optional[float] = None,
) -> tuple[TrainState, O.ObjectiveEstimate]:
    """One Adam update on the negated task-averaged objective.

    Non-finite losses or gradients leave the parameters untouched; after
    ten in a row TrainingAborted is raised.
    """
    lr = lr_at(state.step, tcfg.steps, tcfg.lr_start, tcfg.lr_end) if lr is None else lr
    batched = tcfg.context_batches > 1
    fn = _step_fn(cfg, tcfg.objective, tcfg.num_samples, tcfg.pp_weight, tcfg.kl_weight, batched)
    bm = _context_batch_masks(np.asarray(batch.mask_c), tcfg.context_batches) if batched else jnp.zeros(())
    params, m, v, finite, loss, est = fn(
        state.params,
        state.opt_m,
        state.opt_v,
        state.masks,
        jnp.asarray(float(state.updates)),
        jnp.asarray(lr),
        batch,
        keys,
        bm,
        jnp.asarray(grad_batch),
    )
    finite = bool(finite)
    new = dataclasses.replace(state, params=params, opt_m=m, opt_v=v, step=state.step + 1)
    if finite:
        new.updates += 1
        new.nonfinite_run = 0
    else:
        new.nonfinite_total += 1
        new.nonfinite_run += 1
        log.warning("non-finite objective or gradient at step %d; update skipped", state.step)
        if new.nonfinite_run >= MAX_CONSECUTIVE_NONFINITE:
            raise TrainingAborted(f"{new.nonfinite_run} consecutive non-finite steps (last step {state.step})")
    return new, est


# ---------------------------------------------------------------------------
# Meta-batches and the training loop
# ---------------------------------------------------------------------------


def padding_sizes(tasks: Sequence[datagen.Task]) -> tuple[int, int]:
    n = max(t.n for t in tasks)
    return n, n


def sample_meta_batch(tasks: Sequence[datagen.Task], tcfg: TrainConfig, step: int, pad: tuple[int, int]):
    """Tasks, fresh context/target splits, PRNG keys and the gradient batch for ``step``."""
    rng = np.random.default_rng([tcfg.seed, step])
    size = min(tcfg.meta_batch_size, len(tasks))
    idx = rng.choice(len(tasks), size=size, replace=False)
    splits = [datagen.random_split(tasks[i], tcfg.context_range, [tcfg.seed, step, j]) for j, i in enumerate(idx)]
    batch = O.pad_splits(splits, *pad)
    base = jax.random.fold_in(jax.random.PRNGKey(tcfg.seed), step)
    keys = jnp.stack([jax.random.fold_in(base, j) for j in range(size)])
    grad_batch = int(rng.integers(tcfg.context_batches))
    return batch, keys, grad_batch


def train(
    cfg: M.NetworkConfig,
    tcfg: TrainConfig,
    tasks: Sequence[datagen.Task],
    state: Optional[TrainState] = None,
    *,
    until: Optional[int] = None,
    callback: Optional[Callable[[TrainState, dict], None]] = None,
    checkpoint_path=None,
) -> tuple[TrainState, list[dict]]:
    """Run steps ``state.step .. until`` (default ``tcfg.steps``); returns the loss trace."""
    tasks = list(tasks)
    if not tasks:
        raise ConfigError("training needs at least one task")
    state = init_state(cfg, tcfg) if state is None else state
    until = tcfg.steps if until is None else until
    pad = padding_sizes(tasks)
    trace = []
    while state.step < until:
        step = state.step
        batch, keys, gb = sample_meta_batch(tasks, tcfg, step, pad)
        lr = lr_at(step, tcfg.steps, tcfg.lr_start, tcfg.lr_end)
        state, est = train_step(cfg, tcfg, state, batch, keys, gb, lr)
        row = {"step": step, "lr": lr, "loss": -float(est.value), **{k: v for k, v in est.as_dict().items() if k != "value"}}
        trace.append(row)
        if callback is not None:
            callback(state, row)
        if checkpoint_path is not None and tcfg.checkpoint_every and state.step % tcfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, cfg, tcfg, state)
    return state, trace


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


def gradient_check(
    cfg: M.NetworkConfig,
    params: dict,
    split: O.Split,
    key,
    num_samples: int,
    objective: O.Objective | str = O.Objective.PP_AVI,
    h: float = 1e-5,
    pp_weight: float = 1.0,
    kl_weight: float = 1.0,
) -> float:
    """Max over parameters of |g_ad − g_fd| / max(|g_ad|, |g_fd|, 1e-6).

    The same key (hence the same noise) is used for every evaluation, so the
    objective is a deterministic function of the parameters.
    """
    flat, unravel = ravel_pytree(params)
    split = O.as_split(split)

    def f(theta):
        terms = O.task_terms(cfg, unravel(theta), split, key, num_samples)
        return O.combine(terms, objective, pp_weight, kl_weight).value

    f_jit = jax.jit(f)
    g_ad = np.asarray(jax.jit(jax.grad(f))(flat))
    g_fd = np.empty_like(g_ad)
    base = np.asarray(flat)
    for i in range(base.size):
        e = np.zeros_like(base)
        e[i] = h
        g_fd[i] = (float(f_jit(base + e)) - float(f_jit(base - e))) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-6)
    return float(np.max(np.abs(g_ad - g_fd) / denom))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _config_dict(obj) -> dict:
    d = dataclasses.asdict(obj)
    for k, v in d.items():
        if isinstance(v, (Structure, O.Objective)):
            d[k] = v.value
        elif isinstance(v, tuple):
            d[k] = list(v)
    return d


def network_config_from_dict(d: dict) -> M.NetworkConfig:
    return _from_dict(M.NetworkConfig, d)


def train_config_from_dict(d: dict) -> TrainConfig:
    return _from_dict(TrainConfig, d)


def _from_dict(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {cls.__name__}: {e}") from e


def config_hash(cfg: M.NetworkConfig, tcfg: TrainConfig) -> str:
    blob = json.dumps({"network": _config_dict(cfg), "train": _config_dict(tcfg)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _named(prefix: str, tree) -> dict:
    leaves, _ = jax.tree_util.tree_flatten_with_path(tree)
    return {f"{prefix}{jax.tree_util.keystr(path)}": np.asarray(leaf) for path, leaf in leaves}


def _fill(prefix: str, template, arrays) -> object:
    leaves, treedef = jax.tree_util.tree_flatten_with_path(template)
    out = []
    for path, leaf in leaves:
        name = f"{prefix}{jax.tree_util.keystr(path)}"
        if name not in arrays:
            raise ValueError(f"checkpoint is missing array {name}")
        a = arrays[name]
        if a.shape != np.shape(leaf):
            raise ValueError(f"checkpoint array {name} has shape {a.shape}, expected {np.shape(leaf)}")
        out.append(jnp.asarray(a))
    return jax.tree_util.tree_unflatten(treedef, out)


def save_checkpoint(path, cfg: M.NetworkConfig, tcfg: TrainConfig, state: TrainState) -> None:
    """Single .npz with named arrays (``params['nets'][0][1]['w']`` etc.) and JSON metadata."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash(cfg, tcfg),
        "network": _config_dict(cfg),
        "train": _config_dict(tcfg),
        "step": state.step,
        "updates": state.updates,
        "nonfinite_total": state.nonfinite_total,
        "nonfinite_run": state.nonfinite_run,
        "rng": {"scheme": "counter", "seed": tcfg.seed, "next_step": state.step},
    }
    arrays = {}
    arrays.update(_named("params", state.params))
    arrays.update(_named("adam_m", state.opt_m))
    arrays.update(_named("adam_v", state.opt_v))
    arrays.update(_named("mask", state.masks))
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[M.NetworkConfig, TrainConfig, TrainState]:
    with np.load(Path(path), allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    if "__meta__" not in arrays:
        raise ValueError(f"{path} is not a checkpoint (no metadata)")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
    cfg = network_config_from_dict(meta["network"])
    tcfg = train_config_from_dict(meta["train"])
    if config_hash(cfg, tcfg) != meta["config_hash"]:
        raise ValueError("checkpoint config hash mismatch")
    template = M.init_params(cfg, jax.random.PRNGKey(0))
    mask_template = M.init_masks(cfg, template)
    state = TrainState(
        _fill("params", template, arrays),
        _fill("adam_m", template, arrays),
        _fill("adam_v", template, arrays),
        jax.tree_util.tree_map(lambda a: a.astype(bool), _fill("mask", mask_template, arrays)),
        meta["step"],
        meta["updates"],
        meta["nonfinite_total"],
        meta["nonfinite_run"],
    )
    return cfg, tcfg, state
