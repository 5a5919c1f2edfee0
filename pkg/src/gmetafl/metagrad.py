"""Local meta-update engines.

A client's meta objective is its loss after ``nu`` gradient fine-tuning
steps, ``F_i(w) = f_i(w_nu)`` with ``w_l = w_{l-1} - alpha * grad f_i(w_{l-1})``.
Its gradient is the product ``(I - alpha H(w_0)) ... (I - alpha H(w_{nu-1}))
grad f_i(w_nu)``. The engines below estimate it from independent batches:

* ``exact``: Hessian factors estimated on their own batches,
* ``fo``: Hessian factors dropped,
* ``hf``: each Hessian-vector product replaced by a symmetric difference of
  gradients at ``w +/- delta * d``.

All three return a :class:`LocalUpdateTrace` whose ``updated`` model is
``w_in - beta * direction``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .data import ClientDataset, sample_batch
from .nn import Batch, ModelSpec
from .rng import LocalStreams, RngStream

ENGINES = ("exact", "fo", "hf")


class NonFiniteError(FloatingPointError):
    def __init__(self, what: str, step: int, delta: float | None = None):
        self.step = step
        self.delta = delta
        msg = f"non-finite values in {what} at step {step}"
        if delta is not None:
            msg += f" (delta={delta:g}; a too-small delta amplifies cancellation error)"
        super().__init__(msg)


@dataclass(frozen=True)
class BatchPlan:
    d_sizes: tuple[int, ...]
    dprime_sizes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "d_sizes", tuple(int(s) for s in self.d_sizes))
        object.__setattr__(self, "dprime_sizes", tuple(int(s) for s in self.dprime_sizes))
        if len(self.d_sizes) != len(self.dprime_sizes) + 1:
            raise ValueError(
                f"batch plan needs nu+1 gradient sizes and nu Hessian sizes, got "
                f"{len(self.d_sizes)} and {len(self.dprime_sizes)}"
            )
        if any(s < 1 for s in self.d_sizes + self.dprime_sizes):
            raise ValueError("all batch sizes must be >= 1")

    @property
    def nu(self) -> int:
        return len(self.dprime_sizes)

    @classmethod
    def uniform(cls, nu: int, size: int, hessian_size: int | None = None) -> "BatchPlan":
        hs = size if hessian_size is None else hessian_size
        return cls((size,) * (nu + 1), (hs,) * nu)


@dataclass(frozen=True)
class HyperParams:
    alpha: float
    beta: float
    nu: int
    tau: int = 1
    delta: float = 1e-3
    batch_plan: BatchPlan | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.nu < 0 or self.tau < 1:
            raise ValueError("need nu >= 0 and tau >= 1")
        if self.delta <= 0:
            raise ValueError("delta must be > 0")
        if self.batch_plan is None:
            object.__setattr__(self, "batch_plan", BatchPlan.uniform(self.nu, 40))
        elif self.batch_plan.nu != self.nu:
            raise ValueError(f"batch plan is for nu={self.batch_plan.nu}, hyperparameters say nu={self.nu}")


@dataclass
class LocalUpdateTrace:
    intermediates: list[np.ndarray]
    direction: np.ndarray
    updated: np.ndarray
    engine: str = ""
    batches: dict = field(default_factory=dict)


HessianMode = str  # "auto" | "dense" | "hvp"


def _finite(v: np.ndarray, what: str, step: int, delta=None) -> np.ndarray:
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(what, step, delta)
    return v


class _BatchSource:
    """Hands out batches either from a stream or the full train split."""

    def __init__(self, client: ClientDataset, stream: RngStream | None, full_batch: bool):
        if not full_batch and stream is None:
            raise ValueError("a stream is required unless full_batch=True")
        self.client = client
        self.stream = stream
        self.full_batch = full_batch

    def __call__(self, size: int) -> Batch:
        if self.full_batch:
            return self.client.train
        return sample_batch(self.client, size, self.stream)


def _sources(client, streams: LocalStreams | None, full_batch: bool):
    g = _BatchSource(client, None if streams is None else streams.grad, full_batch)
    h = _BatchSource(client, None if streams is None else streams.hess, full_batch)
    return g, h


def _sizes(sizes, nu: int) -> list[int]:
    if isinstance(sizes, (int, np.integer)):
        return [int(sizes)] * nu
    sizes = list(sizes)
    if len(sizes) < nu:
        raise ValueError(f"need {nu} batch sizes, got {len(sizes)}")
    return sizes[:nu]


def _path(spec, w, alpha, nu, draw: Callable[[int], Batch], sizes) -> list[np.ndarray]:
    path = [np.array(w, dtype=np.float64)]
    for l in range(1, nu + 1):
        g = nn.grad(spec, path[-1], draw(sizes[l - 1]))
        path.append(_finite(path[-1] - alpha * g, "fine-tuning model", l))
    return path


def finetune_path(spec: ModelSpec, w, client: ClientDataset, alpha: float, nu: int,
                  streams: LocalStreams | RngStream | None = None, sizes=40,
                  *, full_batch: bool = False) -> list[np.ndarray]:
    """Models ``w~_0 .. w~_nu`` reached by ``nu`` stochastic gradient steps.

    Step ``l`` uses one fresh batch of size ``sizes[l-1]`` from the gradient
    stream. With ``full_batch=True`` the whole train split is used instead and
    no stream is touched.
    """
    if nu < 0:
        raise ValueError("nu must be >= 0")
    stream = streams.grad if isinstance(streams, LocalStreams) else streams
    draw = _BatchSource(client, stream, full_batch)
    return _path(spec, nn._vec(w), alpha, nu, draw, _sizes(sizes, nu))


def _use_dense(spec, mode: HessianMode, cap: int) -> bool:
    if mode == "dense":
        return True
    if mode == "hvp":
        return False
    if mode == "auto":
        return spec.dim <= cap
    raise ValueError(f"unknown hessian mode {mode!r}")


def _exact_direction(spec, path, alpha_h, draw_g, draw_h, plan: BatchPlan,
                     dense: bool, cap: int) -> np.ndarray:
    nu = plan.nu
    d = _finite(nn.grad(spec, path[nu], draw_g(plan.d_sizes[nu])), "final gradient", nu)
    for lp in range(1, nu + 1):
        j = nu - lp
        batch = draw_h(plan.dprime_sizes[j])
        if dense:
            H = nn.dense_hessian(spec, path[j], batch, cap=cap)
            d = d - alpha_h * (H @ d)
        else:
            d = d - alpha_h * nn.hvp(spec, path[j], d, batch)
        _finite(d, "meta-gradient direction", lp)
    return d


def _trace(engine, path, d, w_in, beta, streams, full_batch) -> LocalUpdateTrace:
    used = {} if (streams is None or full_batch) else {"grad": streams.grad.draws, "hess": streams.hess.draws}
    return LocalUpdateTrace(path, d, w_in - beta * d, engine, used)


def exact_local_update(spec: ModelSpec, w_in, client: ClientDataset, hp: HyperParams,
                       streams: LocalStreams | None = None, *, full_batch: bool = False,
                       hessian_mode: HessianMode = "auto",
                       hessian_cap: int = nn.DEFAULT_HESSIAN_CAP) -> LocalUpdateTrace:
    """One local meta step with estimated Hessians on separate batches.

    Consumes ``nu + 1`` gradient batches and ``nu`` Hessian batches. Below
    ``hessian_cap`` parameters each Hessian is materialized (``"auto"``);
    otherwise each factor is applied via an exact Hessian-vector product.
    """
    if hp.nu < 1:
        raise ValueError("the exact engine needs nu >= 1; use the fo engine for nu=0 (FedAvg mode)")
    w_in = nn._vec(w_in)
    draw_g, draw_h = _sources(client, streams, full_batch)
    plan = hp.batch_plan
    path = _path(spec, w_in, hp.alpha, hp.nu, draw_g, plan.d_sizes)
    d = _exact_direction(spec, path, hp.alpha, draw_g, draw_h, plan,
                         _use_dense(spec, hessian_mode, hessian_cap), hessian_cap)
    return _trace("exact", path, d, w_in, hp.beta, streams, full_batch)


def fo_local_update(spec: ModelSpec, w_in, client: ClientDataset, hp: HyperParams,
                    streams: LocalStreams | None = None, *, full_batch: bool = False) -> LocalUpdateTrace:
    """First-order local step: the gradient at the fine-tuned model.

    With ``nu == 0`` this is a plain SGD step, i.e. the FedAvg local rule.
    """
    w_in = nn._vec(w_in)
    draw_g, _ = _sources(client, streams, full_batch)
    plan = hp.batch_plan
    path = _path(spec, w_in, hp.alpha, hp.nu, draw_g, plan.d_sizes)
    d = _finite(nn.grad(spec, path[-1], draw_g(plan.d_sizes[hp.nu])), "final gradient", hp.nu)
    return _trace("fo", path, d, w_in, hp.beta, streams, full_batch)


def hf_local_update(spec: ModelSpec, w_in, client: ClientDataset, hp: HyperParams,
                    streams: LocalStreams | None = None, *, full_batch: bool = False) -> LocalUpdateTrace:
    """Hessian-free local step.

    Each backward factor uses ``g+ - g-`` evaluated on one shared batch at
    ``w~_j +/- delta * d``.
    """
    if hp.nu < 1:
        raise ValueError("the hf engine needs nu >= 1; use the fo engine for nu=0 (FedAvg mode)")
    w_in = nn._vec(w_in)
    draw_g, draw_h = _sources(client, streams, full_batch)
    plan, nu, delta = hp.batch_plan, hp.nu, hp.delta
    path = _path(spec, w_in, hp.alpha, nu, draw_g, plan.d_sizes)
    d = _finite(nn.grad(spec, path[nu], draw_g(plan.d_sizes[nu])), "final gradient", nu)
    for lp in range(1, nu + 1):
        j = nu - lp
        batch = draw_h(plan.dprime_sizes[j])
        g_plus = nn.grad(spec, path[j] + delta * d, batch)
        g_minus = nn.grad(spec, path[j] - delta * d, batch)
        d = _finite(d - (hp.alpha / (2.0 * delta)) * (g_plus - g_minus),
                    "hessian-free direction", lp, delta)
    return _trace("hf", path, d, w_in, hp.beta, streams, full_batch)


_DISPATCH = {"exact": exact_local_update, "fo": fo_local_update, "hf": hf_local_update}


def local_update(engine: str, spec, w_in, client, hp, streams=None, **kw) -> LocalUpdateTrace:
    try:
        fn = _DISPATCH[engine]
    except KeyError:
        raise ValueError(f"unknown engine {engine!r}; expected one of {ENGINES}") from None
    return fn(spec, w_in, client, hp, streams, **kw)


def meta_loss(spec: ModelSpec, w, client: ClientDataset, alpha: float, nu: int) -> float:
    """``F_i(w)``: full-batch train loss after ``nu`` full-batch fine-tuning steps."""
    path = finetune_path(spec, w, client, alpha, nu, full_batch=True)
    return nn.loss(spec, path[-1], client.train)


def exact_meta_gradient_oracle(spec: ModelSpec, w, client: ClientDataset, alpha: float, nu: int,
                               *, hessian_cap: int = nn.DEFAULT_HESSIAN_CAP) -> np.ndarray:
    """Deterministic ``grad F_i(w)`` from true gradients and Hessians.

    The Jacobian product is accumulated left to right as a dense matrix and
    applied to the final gradient once; above ``hessian_cap`` the product is
    applied through Hessian-vector products instead.
    """
    batch = client.train
    path = finetune_path(spec, w, client, alpha, nu, full_batch=True)
    g = nn.grad(spec, path[nu], batch)
    d = spec.dim
    if d <= hessian_cap:
        M = np.eye(d)
        for l in range(nu):
            M = M @ (np.eye(d) - alpha * nn.dense_hessian(spec, path[l], batch, cap=hessian_cap))
        return M @ g
    for l in range(nu - 1, -1, -1):
        g = g - alpha * nn.hvp(spec, path[l], g, batch)
    return g


def quadratic_meta_gradient(A: np.ndarray, w: np.ndarray, alpha: float, nu: int) -> np.ndarray:
    """Closed form ``A (I - alpha A)^(2 nu) w`` for a centered quadratic."""
    P = np.eye(A.shape[0]) - alpha * A
    Pn = np.linalg.matrix_power(P, nu)
    return Pn @ A @ Pn @ w
