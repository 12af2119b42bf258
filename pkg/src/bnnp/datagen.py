"""Synthetic meta-datasets: sawtooth, Heaviside, BNN-prior and SE-GP tasks.

Every generator is a pure function of (spec, seed).  Tasks are stored as
JSON lines, one task per line.
"""

from __future__ import annotations

import base64
import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DatasetFormatError

FORMAT_VERSION = 1
SAWTOOTH_PERIOD = 0.75


class Kind(str, enum.Enum):
    SAWTOOTH = "sawtooth"
    HEAVISIDE = "heaviside"
    BNN_PRIOR = "bnn_prior"
    GP_SE = "gp_se"


_DEFAULTS = {
    Kind.SAWTOOTH: dict(n_range=(40, 100), x_range=(-2.0, 2.0), noise=0.05),
    Kind.HEAVISIDE: dict(n_range=(40, 100), x_range=(-5.0, 5.0), noise=0.01, lengthscale=1.0),
    Kind.BNN_PRIOR: dict(n_range=(21, 42), x_range=(-4.0, 4.0), noise=0.1),
    Kind.GP_SE: dict(n_range=(40, 100), x_range=(-5.0, 5.0), noise=0.05, lengthscale=0.5),
}


@dataclass(frozen=True)
class GeneratorSpec:
    """What kind of function to draw and how to sample inputs and noise.

    ``None`` fields take the per-kind defaults.
    """

    kind: Kind
    n_range: Optional[tuple[int, int]] = None
    x_range: Optional[tuple[float, float]] = None
    noise: Optional[float] = None
    lengthscale: Optional[float] = None
    outputscale: float = 1.0
    widths: tuple[int, ...] = (1, 20, 20, 1)
    nonlinearity: str = "relu"
    bias: bool = True
    context_range: tuple[float, float] = (0.1, 0.5)

    def __post_init__(self):
        kind = Kind(self.kind)
        object.__setattr__(self, "kind", kind)
        defaults = _DEFAULTS[kind]
        for name in ("n_range", "x_range", "noise", "lengthscale"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, defaults.get(name, 1.0))
        object.__setattr__(self, "n_range", tuple(int(v) for v in self.n_range))
        object.__setattr__(self, "x_range", tuple(float(v) for v in self.x_range))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        object.__setattr__(self, "context_range", tuple(float(v) for v in self.context_range))
        lo, hi = self.n_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"n_range must satisfy 1 <= lo <= hi, got {self.n_range}")
        if not self.x_range[0] < self.x_range[1]:
            raise ConfigError(f"x_range must be increasing, got {self.x_range}")
        if self.noise < 0:
            raise ConfigError(f"noise must be non-negative, got {self.noise}")
        if self.lengthscale <= 0 or self.outputscale <= 0:
            raise ConfigError("lengthscale and outputscale must be positive")
        a, b = self.context_range
        if not 0.0 <= a <= b <= 1.0:
            raise ConfigError(f"context_range must satisfy 0 <= a <= b <= 1, got {self.context_range}")
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ConfigError(f"bad widths {self.widths}")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown generator spec keys: {sorted(unknown)}")
        if "kind" not in d:
            raise ConfigError("generator spec needs a 'kind'")
        try:
            return cls(**d)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


@dataclass
class Task:
    """One dataset with a disjoint context/target partition of its rows."""

    x: np.ndarray
    y: np.ndarray
    context_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    target_indices: Optional[np.ndarray] = None
    provenance: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"x has {self.x.shape[0]} rows but y has {self.y.shape[0]}")
        self.context_indices = np.asarray(self.context_indices, dtype=np.int64)
        if self.target_indices is None:
            self.target_indices = np.setdiff1d(np.arange(self.n), self.context_indices)
        self.target_indices = np.asarray(self.target_indices, dtype=np.int64)
        both = np.concatenate([self.context_indices, self.target_indices])
        if len(both) != self.n or not np.array_equal(np.sort(both), np.arange(self.n)):
            raise ValueError("context and target indices must partition the rows")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def arrays(self):
        c, t = self.context_indices, self.target_indices
        return self.x[c], self.y[c], self.x[t], self.y[t]

    def __eq__(self, other):
        if not isinstance(other, Task):
            return NotImplemented
        return (
            self.provenance == other.provenance
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.context_indices, other.context_indices)
            and np.array_equal(self.target_indices, other.target_indices)
        )


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _inputs(spec: GeneratorSpec, rng: np.random.Generator, dim: int = 1) -> np.ndarray:
    n = int(rng.integers(spec.n_range[0], spec.n_range[1] + 1))
    return rng.uniform(spec.x_range[0], spec.x_range[1], size=(n, dim))


def sawtooth(x, eps1: float, eps2: float):
    """ε₁x/3 + 0.25ε₂ + 1.33(x mod 0.75 − 0.375), floored modulo."""
    x = np.asarray(x, dtype=np.float64)
    return eps1 * (x / 3.0) + 0.25 * eps2 + 1.33 * (np.mod(x, SAWTOOTH_PERIOD) - 0.375)


def se_kernel(xa, xb, lengthscale: float = 1.0, outputscale: float = 1.0):
    xa = np.atleast_2d(np.asarray(xa, dtype=np.float64))
    xb = np.atleast_2d(np.asarray(xb, dtype=np.float64))
    if xa.shape[-1] != xb.shape[-1]:
        xa, xb = xa.reshape(-1, 1), xb.reshape(-1, 1)
    sq = np.sum((xa[:, None, :] - xb[None, :, :]) ** 2, axis=-1)
    return outputscale * np.exp(-0.5 * sq / lengthscale**2)


def gp_sample(x, rng: np.random.Generator, lengthscale: float, outputscale: float = 1.0, size: Optional[int] = None):
    """Exact draw(s) from a zero-mean SE-GP at ``x`` via a jittered Cholesky."""
    k = se_kernel(x, x, lengthscale, outputscale)
    n = k.shape[0]
    chol = np.linalg.cholesky(k + 1e-8 * outputscale * np.eye(n))
    shape = (n,) if size is None else (n, size)
    return chol @ rng.standard_normal(shape)


def gen_sawtooth(spec: GeneratorSpec, seed) -> Task:
    rng = _rng(seed)
    x = _inputs(spec, rng)
    eps1, eps2 = rng.standard_normal(2)
    y = sawtooth(x, eps1, eps2) + spec.noise * rng.standard_normal(x.shape)
    return Task(x, y, provenance=f"sawtooth:{seed}")


def heaviside_labels(f):
    """Centre a function sample and map it to ±1 (ties go to +1)."""
    f = np.asarray(f) - np.mean(f)
    return np.where(f >= 0, 1.0, -1.0)


def gen_heaviside(spec: GeneratorSpec, seed) -> Task:
    rng = _rng(seed)
    x = _inputs(spec, rng)
    f = gp_sample(x, rng, spec.lengthscale, spec.outputscale)
    y = heaviside_labels(f)[:, None] + spec.noise * rng.standard_normal((x.shape[0], 1))
    return Task(x, y, provenance=f"heaviside:{seed}")


def _act(name):
    return {
        "relu": lambda h: np.maximum(h, 0.0),
        "tanh": np.tanh,
        "silu": lambda h: h / (1.0 + np.exp(-h)),
    }[name]


def bnn_prior_weights(widths: Sequence[int], rng: np.random.Generator, bias: bool = True, scale: float = 1.0) -> list[np.ndarray]:
    """Weights from the standard prior: zero mean, variance 1/fan-in (bias counted)."""
    out = []
    for d_in, d_out in zip(widths[:-1], widths[1:]):
        fan_in = d_in + int(bias)
        out.append(scale * rng.standard_normal((fan_in, d_out)) / math.sqrt(fan_in))
    return out


def mlp_forward(weights: Sequence[np.ndarray], x, nonlinearity: str = "relu", bias: bool = True):
    act = _act(nonlinearity)
    h = np.asarray(x, dtype=np.float64)
    for i, w in enumerate(weights):
        if bias:
            h = np.concatenate([h, np.ones(h.shape[:-1] + (1,))], axis=-1)
        h = h @ w
        if i < len(weights) - 1:
            h = act(h)
    return h


def gen_bnn_prior(spec: GeneratorSpec, seed, weights: Optional[Sequence[np.ndarray]] = None) -> Task:
    """Function drawn from the standard BNN prior; ``weights`` overrides the draw."""
    rng = _rng(seed)
    x = _inputs(spec, rng, spec.widths[0])
    w = bnn_prior_weights(spec.widths, rng, spec.bias) if weights is None else weights
    f = mlp_forward(w, x, spec.nonlinearity, spec.bias)
    y = f + spec.noise * rng.standard_normal(f.shape)
    return Task(x, y, provenance=f"bnn_prior:{seed}")


def gen_gp_se(spec: GeneratorSpec, seed) -> Task:
    rng = _rng(seed)
    x = _inputs(spec, rng)
    f = gp_sample(x, rng, spec.lengthscale, spec.outputscale)
    y = f[:, None] + spec.noise * rng.standard_normal((x.shape[0], 1))
    return Task(x, y, provenance=f"gp_se:{seed}")


GENERATORS = {
    Kind.SAWTOOTH: gen_sawtooth,
    Kind.HEAVISIDE: gen_heaviside,
    Kind.BNN_PRIOR: gen_bnn_prior,
    Kind.GP_SE: gen_gp_se,
}


def generate(spec: GeneratorSpec, seed) -> Task:
    return GENERATORS[spec.kind](spec, seed)


def generate_many(spec: GeneratorSpec, count: int, seed: int) -> list[Task]:
    """``count`` tasks; task j uses the substream [seed, j]."""
    if count < 0:
        raise ConfigError("count must be non-negative")
    return [generate(spec, [seed, j]) for j in range(count)]


def split(task: Task, context_proportion: float, seed) -> Task:
    """Uniformly random partition with round(p·N) context points."""
    if not 0.0 <= context_proportion <= 1.0:
        raise ValueError(f"context_proportion must lie in [0, 1], got {context_proportion}")
    rng = _rng(seed)
    n_c = int(round(context_proportion * task.n))
    perm = rng.permutation(task.n)
    return Task(task.x, task.y, np.sort(perm[:n_c]), np.sort(perm[n_c:]), task.provenance)


def random_split(task: Task, context_range: tuple[float, float], seed) -> Task:
    """Draw p ~ U(a, b) then split; used to resplit tasks each time they are visited."""
    rng = _rng(seed)
    p = float(rng.uniform(*context_range))
    return split(task, p, rng.integers(2**63))


# ---------------------------------------------------------------------------
# JSON-lines storage
# ---------------------------------------------------------------------------


def _encode_array(a: np.ndarray, readable: bool):
    a = np.asarray(a, dtype="<f8")
    if readable:
        return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}
    return {"shape": list(a.shape), "b64": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d) -> np.ndarray:
    shape = tuple(int(s) for s in d["shape"])
    if "b64" in d:
        raw = base64.b64decode(d["b64"].encode("ascii"), validate=True)
        a = np.frombuffer(raw, dtype="<f8")
    else:
        a = np.asarray(d["data"], dtype=np.float64)
    if a.size != math.prod(shape):
        raise DatasetFormatError(f"array payload has {a.size} values but shape {shape}")
    return a.reshape(shape).astype(np.float64)


def task_to_json(task: Task, readable: bool = False) -> str:
    return json.dumps(
        {
            "version": FORMAT_VERSION,
            "x": _encode_array(task.x, readable),
            "y": _encode_array(task.y, readable),
            "context": task.context_indices.tolist(),
            "target": task.target_indices.tolist(),
            "provenance": task.provenance,
        }
    )


def task_from_json(line: str) -> Task:
    try:
        d = json.loads(line)
        if d.get("version") != FORMAT_VERSION:
            raise DatasetFormatError(f"unsupported task format version {d.get('version')!r}")
        return Task(_decode_array(d["x"]), _decode_array(d["y"]), d["context"], d["target"], d.get("provenance", ""))
    except DatasetFormatError:
        raise
    except (ValueError, KeyError, TypeError) as e:
        raise DatasetFormatError(f"malformed task record: {e}") from e


def save_tasks(tasks: Iterable[Task], path, readable: bool = False) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for t in tasks:
            fh.write(task_to_json(t, readable) + "\n")


def load_tasks(path) -> list[Task]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"meta-dataset {path} does not exist")
    tasks = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                tasks.append(task_from_json(line))
            except DatasetFormatError as e:
                raise DatasetFormatError(f"{path}:{lineno}: {e}") from e
    return tasks
