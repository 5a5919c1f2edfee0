"""Differentiable models on flat parameter vectors.

Two model families are supported: a tanh multilayer perceptron with a
softmax cross-entropy head, and a pure quadratic ``0.5 w^T A w + b^T w``
used as an analytic oracle. Every operation takes a flat ``float64``
parameter vector and returns new arrays; nothing is mutated in place.

Second-order information for the MLP is computed with the R-operator
(forward-over-backward propagation of a direction), so ``hvp`` is exact
up to rounding rather than a finite-difference approximation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

DEFAULT_HESSIAN_CAP = 512


class DimensionError(ValueError):
    """Raised when arrays disagree with a model's declared dimensions."""

    def __init__(self, axis: str, expected, got):
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"dimension mismatch on {axis}: expected {expected}, got {got}")


class HessianTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.shape[0] < 1:
            raise ValueError("batch must contain at least one sample")
        if x.shape[0] != y.shape[0]:
            raise DimensionError("n_samples", x.shape[0], y.shape[0])
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @staticmethod
    def concat(*batches: "Batch") -> "Batch":
        return Batch(
            np.concatenate([b.inputs for b in batches]),
            np.concatenate([b.labels for b in batches]),
        )


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    hidden: tuple[int, ...]
    classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        widths = (self.input_dim, *self.hidden, self.classes)
        if any(int(wd) < 1 for wd in widths):
            raise ValueError(f"all MLP widths must be >= 1, got {widths}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.classes)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        """(rows, cols) of each weight matrix followed by its bias length."""
        out: list[tuple[int, ...]] = []
        w = self.widths
        for fan_in, fan_out in zip(w[:-1], w[1:]):
            out.append((fan_out, fan_in))
            out.append((fan_out,))
        return out

    @property
    def dim(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes)


@dataclass(frozen=True)
class QuadraticSpec:
    A: np.ndarray
    b: np.ndarray
    classes: int = 1
    input_dim: int | None = None

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64)
        b = np.array(self.b, dtype=np.float64).reshape(-1)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionError("A", "square matrix", A.shape)
        if b.shape[0] != A.shape[0]:
            raise DimensionError("b", A.shape[0], b.shape[0])
        scale = max(np.abs(A).max(), 1.0)
        if np.abs(A - A.T).max() > 1e-12 * scale:
            raise ValueError("quadratic matrix A must be symmetric")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [(self.A.shape[0],)]

    @property
    def dim(self) -> int:
        return self.A.shape[0]


ModelSpec = Union[MLPSpec, QuadraticSpec]


@dataclass(frozen=True)
class ModelParams:
    values: np.ndarray
    shapes: list[tuple[int, ...]] = field(default_factory=list)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.shapes and sum(int(np.prod(s)) for s in self.shapes) != v.size:
            raise DimensionError("d", sum(int(np.prod(s)) for s in self.shapes), v.size)
        if not np.all(np.isfinite(v)):
            raise ValueError("parameters contain non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.size

    def unflatten(self) -> list[np.ndarray]:
        return _unflatten(self.values, self.shapes)


def _vec(w) -> np.ndarray:
    if isinstance(w, ModelParams):
        return w.values
    return np.asarray(w, dtype=np.float64)


def _unflatten(v: np.ndarray, shapes) -> list[np.ndarray]:
    out = []
    i = 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(v[i:i + n].reshape(s))
        i += n
    return out


def _check(spec: ModelSpec, w: np.ndarray, batch: Batch | None):
    if w.ndim != 1 or w.size != spec.dim:
        raise DimensionError("parameters", spec.dim, w.shape)
    if isinstance(spec, MLPSpec) and batch is not None:
        if batch.inputs.shape[1] != spec.input_dim:
            raise DimensionError("n_features", spec.input_dim, batch.inputs.shape[1])
        if batch.labels.min() < 0 or batch.labels.max() >= spec.classes:
            raise DimensionError(
                "labels", f"[0, {spec.classes})",
                (int(batch.labels.min()), int(batch.labels.max())),
            )


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Deterministic start point: N(0, 1/fan_in) weights, zero biases.

    Quadratic models always start from the origin.
    """
    if isinstance(spec, QuadraticSpec):
        return ModelParams(np.zeros(spec.dim), spec.shapes)
    rng = np.random.default_rng(seed)
    parts = []
    for shape in spec.shapes:
        if len(shape) == 2:
            parts.append(rng.standard_normal(shape).ravel() / np.sqrt(shape[1]))
        else:
            parts.append(np.zeros(shape))
    return ModelParams(np.concatenate(parts), spec.shapes)


# -- MLP internals -----------------------------------------------------------

def _forward(layers, x):
    acts = [x]
    a = x
    n_layers = len(layers) // 2
    for k in range(n_layers):
        W, b = layers[2 * k], layers[2 * k + 1]
        z = a @ W.T + b
        a = np.tanh(z) if k < n_layers - 1 else z
        acts.append(a)
    return acts


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _onehot(y, classes):
    out = np.zeros((y.size, classes))
    out[np.arange(y.size), y] = 1.0
    return out


def _backward(layers, acts, delta):
    """Backprop ``delta`` (dLoss/dlogits, already batch-scaled)."""
    n_layers = len(layers) // 2
    grads = [None] * len(layers)
    for k in range(n_layers - 1, -1, -1):
        W = layers[2 * k]
        grads[2 * k] = delta.T @ acts[k]
        grads[2 * k + 1] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ W) * (1.0 - acts[k] ** 2)
    return grads


def logits(spec: MLPSpec, w, inputs: np.ndarray) -> np.ndarray:
    w = _vec(w)
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    _check(spec, w, None)
    return _forward(_unflatten(w, spec.shapes), x)[-1]


def predict(spec: ModelSpec, w, inputs: np.ndarray) -> np.ndarray:
    if isinstance(spec, QuadraticSpec):
        return np.zeros(np.atleast_2d(inputs).shape[0], dtype=np.int64)
    return logits(spec, w, inputs).argmax(axis=1)


def per_sample_losses(spec: ModelSpec, w, batch: Batch) -> np.ndarray:
    w = _vec(w)
    _check(spec, w, batch)
    if isinstance(spec, QuadraticSpec):
        val = 0.5 * w @ spec.A @ w + spec.b @ w
        return np.full(len(batch), val)
    z = _forward(_unflatten(w, spec.shapes), batch.inputs)[-1]
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    return lse - z[np.arange(len(batch)), batch.labels]


def loss(spec: ModelSpec, w, batch: Batch) -> float:
    """Mean per-sample loss over ``batch``."""
    w = _vec(w)
    _check(spec, w, batch)
    if isinstance(spec, QuadraticSpec):
        return float(0.5 * w @ spec.A @ w + spec.b @ w)
    return float(per_sample_losses(spec, w, batch).mean())


def grad(spec: ModelSpec, w, batch: Batch) -> np.ndarray:
    """Exact gradient of :func:`loss` (batch-mean convention)."""
    w = _vec(w)
    _check(spec, w, batch)
    if isinstance(spec, QuadraticSpec):
        return spec.A @ w + spec.b
    layers = _unflatten(w, spec.shapes)
    acts = _forward(layers, batch.inputs)
    n = len(batch)
    delta = (_softmax(acts[-1]) - _onehot(batch.labels, spec.classes)) / n
    return np.concatenate([g.ravel() for g in _backward(layers, acts, delta)])


def per_sample_grads(spec: ModelSpec, w, batch: Batch) -> np.ndarray:
    """Per-sample gradients as an (n_samples, d) array."""
    w = _vec(w)
    _check(spec, w, batch)
    n = len(batch)
    if isinstance(spec, QuadraticSpec):
        return np.tile(spec.A @ w + spec.b, (n, 1))
    layers = _unflatten(w, spec.shapes)
    acts = _forward(layers, batch.inputs)
    delta = _softmax(acts[-1]) - _onehot(batch.labels, spec.classes)
    n_layers = len(layers) // 2
    blocks = [None] * len(layers)
    for k in range(n_layers - 1, -1, -1):
        W = layers[2 * k]
        blocks[2 * k] = np.einsum("no,ni->noi", delta, acts[k]).reshape(n, -1)
        blocks[2 * k + 1] = delta
        if k > 0:
            delta = (delta @ W) * (1.0 - acts[k] ** 2)
    return np.concatenate(blocks, axis=1)


def hvp(spec: ModelSpec, w, v, batch: Batch) -> np.ndarray:
    """Exact Hessian-vector product of :func:`loss` at ``w`` along ``v``."""
    w = _vec(w)
    v = np.asarray(v, dtype=np.float64)
    _check(spec, w, batch)
    if v.shape != w.shape:
        raise DimensionError("direction", w.shape, v.shape)
    if not np.all(np.isfinite(v)):
        raise ValueError("direction contains non-finite values")
    if isinstance(spec, QuadraticSpec):
        return spec.A @ v
    layers = _unflatten(w, spec.shapes)
    dirs = _unflatten(v, spec.shapes)
    n_layers = len(layers) // 2
    acts = _forward(layers, batch.inputs)

    # forward pass of the R-operator: directional derivatives of activations
    r_acts = [np.zeros_like(batch.inputs)]
    r_z = None
    for k in range(n_layers):
        W, VW, Vb = layers[2 * k], dirs[2 * k], dirs[2 * k + 1]
        r_z = r_acts[k] @ W.T + acts[k] @ VW.T + Vb
        if k < n_layers - 1:
            r_acts.append((1.0 - acts[k + 1] ** 2) * r_z)
        else:
            r_acts.append(r_z)

    n = len(batch)
    p = _softmax(acts[-1])
    delta = (p - _onehot(batch.labels, spec.classes)) / n
    r_delta = p * (r_z - (p * r_z).sum(axis=1, keepdims=True)) / n

    out = [None] * len(layers)
    for k in range(n_layers - 1, -1, -1):
        W, VW = layers[2 * k], dirs[2 * k]
        out[2 * k] = r_delta.T @ acts[k] + delta.T @ r_acts[k]
        out[2 * k + 1] = r_delta.sum(axis=0)
        if k > 0:
            s = 1.0 - acts[k] ** 2
            r_s = -2.0 * acts[k] * r_acts[k]
            back = delta @ W
            r_delta = (r_delta @ W + delta @ VW) * s + back * r_s
            delta = back * s
    return np.concatenate([g.ravel() for g in out])


def dense_hessian(spec: ModelSpec, w, batch: Batch, cap: int = DEFAULT_HESSIAN_CAP) -> np.ndarray:
    """Materialize the Hessian column by column from :func:`hvp`."""
    w = _vec(w)
    _check(spec, w, batch)
    d = spec.dim
    if d > cap:
        raise HessianTooLargeError(
            f"model has d={d} parameters, above the dense Hessian cap {cap}; use hvp() instead"
        )
    if isinstance(spec, QuadraticSpec):
        return np.array(spec.A)
    H = np.empty((d, d))
    e = np.zeros(d)
    for j in range(d):
        e[j] = 1.0
        H[:, j] = hvp(spec, w, e, batch)
        e[j] = 0.0
    return H


def build_spec(kind: str, **kw) -> ModelSpec:
    """Construct a model spec from a config-style description."""
    if kind == "mlp":
        return MLPSpec(int(kw["input_dim"]), tuple(kw.get("hidden", ())), int(kw["classes"]))
    if kind == "quadratic":
        return QuadraticSpec(np.asarray(kw["A"]), np.asarray(kw.get("b", np.zeros(len(kw["A"])))))
    raise ValueError(f"unknown model kind {kind!r}")


def flat_size(shapes: Sequence[tuple[int, ...]]) -> int:
    return sum(int(np.prod(s)) for s in shapes)
