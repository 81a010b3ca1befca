"""Parameter storage, loss functions, gradients, and the optimizer.

Everything downstream trains through this module: a named dense
parameter store with paired gradient buffers, the negative binomial /
binary cross-entropy / pairwise ranking losses with analytic gradients,
an Adam-style first-order optimizer, a finite-difference gradient
checker, and the binary checkpoint format (magic ``RNUM1``).
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln

from .errors import DomainError, IntegrityError, ParseError, TrainingError

CHECKPOINT_MAGIC = b"RNUM1"


class ParamStore:
    """Named dense float64 arrays with same-shape gradient buffers."""

    def __init__(self):
        self._values = {}
        self._grads = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._values:
            raise IntegrityError(f"parameter {name!r} already exists")
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise DomainError(f"parameter {name!r} contains non-finite values")
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        return self._values[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def names(self):
        return sorted(self._values)

    def zero_grads(self):
        for g in self._grads.values():
            g[...] = 0.0

    def size(self) -> int:
        return sum(v.size for v in self._values.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name in self.names():
            out.add(name, self._values[name].copy())
            out._grads[name][...] = self._grads[name]
        return out

    def flat_values(self) -> np.ndarray:
        return np.concatenate([self._values[n].ravel() for n in self.names()])

    def flat_grads(self) -> np.ndarray:
        return np.concatenate([self._grads[n].ravel() for n in self.names()])

    def set_flat_values(self, flat: np.ndarray):
        offset = 0
        for n in self.names():
            v = self._values[n]
            v[...] = flat[offset : offset + v.size].reshape(v.shape)
            offset += v.size
        if offset != flat.size:
            raise IntegrityError("flat vector size does not match parameter count")

    def check_finite(self):
        for n in self.names():
            if not np.all(np.isfinite(self._values[n])):
                raise TrainingError(f"parameter {n!r} became non-finite")

    # -- checkpoint format -------------------------------------------------
    # magic "RNUM1" | uint32 LE manifest length | manifest JSON (utf-8,
    # sorted by name, entries {name, shape, offset}) | float64 LE payload.

    def to_bytes(self) -> bytes:
        manifest = []
        offset = 0
        for n in self.names():
            v = self._values[n]
            manifest.append({"name": n, "shape": list(v.shape), "offset": offset})
            offset += v.size * 8
        head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", len(head)))
        buf.write(head)
        for n in self.names():
            buf.write(self._values[n].astype("<f8").tobytes())
        return buf.getvalue()

    def save(self, path):
        tmp = str(path) + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamStore":
        if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise ParseError("bad checkpoint magic (expected RNUM1)")
        pos = len(CHECKPOINT_MAGIC)
        (head_len,) = struct.unpack("<I", blob[pos : pos + 4])
        pos += 4
        manifest = json.loads(blob[pos : pos + head_len].decode("utf-8"))
        pos += head_len
        store = cls()
        for entry in manifest:
            shape = tuple(entry["shape"])
            size = int(np.prod(shape)) if shape else 1
            start = pos + entry["offset"]
            arr = np.frombuffer(blob[start : start + size * 8], dtype="<f8").reshape(shape)
            store.add(entry["name"], arr.copy())
        return store

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass(frozen=True)
class CountPrediction:
    """Mean/dispersion pair of a negative binomial count prediction."""

    mu: float
    dispersion: float

    def __post_init__(self):
        if not (self.mu > 0 and math.isfinite(self.mu)):
            raise DomainError(f"mu must be positive and finite, got {self.mu!r}")
        if not (self.dispersion > 0 and math.isfinite(self.dispersion)):
            raise DomainError(f"dispersion must be positive and finite, got {self.dispersion!r}")


def nb_log_likelihood(k: int, pred: CountPrediction) -> float:
    """log P(k) under NB(mean=mu, dispersion=r).

    ln P(k) = lnG(k+r) - lnG(r) - lnG(k+1) + r ln(r/(r+mu)) + k ln(mu/(r+mu))
    """
    if k < 0 or k != int(k):
        raise DomainError(f"k must be a nonnegative integer, got {k!r}")
    k = int(k)
    mu, r = pred.mu, pred.dispersion
    total = mu + r
    ll = (
        gammaln(k + r)
        - gammaln(r)
        - gammaln(k + 1)
        + r * (math.log(r) - math.log(total))
        + k * (math.log(mu) - math.log(total))
    )
    return float(ll)


def nb_log_likelihood_grad(k: int, pred: CountPrediction):
    """Analytic (d/dmu, d/dr) of nb_log_likelihood."""
    if k < 0 or k != int(k):
        raise DomainError(f"k must be a nonnegative integer, got {k!r}")
    k = int(k)
    mu, r = pred.mu, pred.dispersion
    total = mu + r
    d_mu = k / mu - (k + r) / total
    d_r = digamma(k + r) - digamma(r) + math.log(r) - math.log(total) + 1.0 - (k + r) / total
    return float(d_mu), float(d_r)


def bce_loss(p: float, label: int):
    """Binary cross-entropy -[y ln p + (1-y) ln(1-p)] and its d/dp.

    `p` must lie strictly inside (0, 1); callers working with logits
    should clamp the logit, not the probability.
    """
    if not (0.0 < p < 1.0):
        raise DomainError(f"probability must be in (0, 1), got {p!r}")
    if label not in (0, 1):
        raise DomainError(f"label must be 0 or 1, got {label!r}")
    if label == 1:
        return -math.log(p), -1.0 / p
    return -math.log1p(-p), 1.0 / (1.0 - p)


def bce_from_logit(logit, label):
    """Stable BCE evaluated from the pre-sigmoid score; vectorized.

    Equals bce_loss(sigmoid(logit), label); the gradient wrt the logit
    is sigmoid(logit) - label.
    """
    logit = np.asarray(logit, dtype=float)
    label = np.asarray(label, dtype=float)
    return np.logaddexp(0.0, logit) - label * logit


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.logaddexp(0.0, x)


def bpr_loss(score_pos: float, score_neg: float) -> float:
    """Pairwise ranking loss -ln sigmoid(score_pos - score_neg).

    Computed as softplus(-(diff)); stable for |diff| up to ~1e3 and
    beyond (it degrades gracefully to max(0, -diff)).
    """
    return float(np.logaddexp(0.0, -(float(score_pos) - float(score_neg))))


@dataclass
class OptimizerState:
    """Adam state: bias-corrected first/second moments per parameter."""

    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def make_optimizer_state(params: ParamStore, learning_rate=1e-2, beta1=0.9, beta2=0.999,
                         epsilon=1e-8) -> OptimizerState:
    state = OptimizerState(learning_rate, beta1, beta2, epsilon)
    for name in params.names():
        state.m[name] = np.zeros_like(params[name])
        state.v[name] = np.zeros_like(params[name])
    return state


def optimizer_step(params: ParamStore, state: OptimizerState):
    """One Adam update from the populated gradient buffers.

    Gradients are zeroed afterwards and the step counter advances; a
    non-finite gradient aborts with the offending parameter's name.
    """
    for name in params.names():
        if not np.all(np.isfinite(params.grad(name))):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in params.names():
        g = params.grad(name)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name][...] -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    params.zero_grads()


def grad_check(loss_fn, params: ParamStore, epsilon: float = 1e-5, sample: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error of the analytic gradient vs central differences.

    `loss_fn(params)` must return the scalar loss *and* populate the
    gradient buffers (they are zeroed before the call).  The relative
    error per coordinate is |ga - gf| / max(|ga|, |gf|, 1); `sample`
    restricts the sweep to that many randomly chosen coordinates.
    """
    params.zero_grads()
    loss_fn(params)
    analytic = params.flat_grads().copy()
    base = params.flat_values().copy()

    n = base.size
    if sample is not None and sample < n:
        if rng is None:
            rng = np.random.default_rng(0)
        coords = np.sort(rng.choice(n, size=sample, replace=False))
    else:
        coords = np.arange(n)

    worst = 0.0
    work = base.copy()
    for i in coords:
        h = epsilon * max(1.0, abs(base[i]))
        work[i] = base[i] + h
        params.set_flat_values(work)
        params.zero_grads()
        up = loss_fn(params)
        work[i] = base[i] - h
        params.set_flat_values(work)
        params.zero_grads()
        down = loss_fn(params)
        work[i] = base[i]
        fd = (up - down) / (2.0 * h)
        err = abs(analytic[i] - fd) / max(abs(analytic[i]), abs(fd), 1.0)
        worst = max(worst, err)
    params.set_flat_values(base)
    params.zero_grads()
    return worst
