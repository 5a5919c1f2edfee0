"""Executable convergence-bound formulas for meta federated learning.

Every function evaluates a closed form or recursion literally, in the order
it is stated, without algebraic simplification. Index conventions:

* ``plan.d_sizes[j]`` is the size of gradient batch ``j`` (``j = 0..nu``),
* ``plan.dprime_sizes[j]`` is the size of Hessian batch ``j`` (``j = 0..nu-1``),
* model-error arrays are returned with a leading zero entry so that
  ``h[l]`` is the bound after ``l`` fine-tuning steps and ``h[0] == 0``
  (the start model is exact).

:func:`estimate_constants` produces empirical surrogates for the problem
constants. They are maxima over finitely many probes and therefore lower
estimates of the true suprema.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .data import ClientDataset
from .metagrad import BatchPlan


@dataclass(frozen=True)
class TheoryConstants:
    B: float
    L: float
    rho: float
    sigma_G: float = 0.0
    sigma_H: float = 0.0
    kappa_G: float = 0.0
    kappa_H: float = 0.0
    gamma_G: float | None = None
    gamma_H: float | None = None
    lower_estimate: bool = False

    def __post_init__(self):
        # bounded gradients and Hessians make dissimilarity at most 2B / 2L
        if self.gamma_G is None:
            object.__setattr__(self, "gamma_G", 2.0 * self.B)
        if self.gamma_H is None:
            object.__setattr__(self, "gamma_H", 2.0 * self.L)
        for name in ("B", "L", "rho", "sigma_G", "sigma_H", "kappa_G", "kappa_H", "gamma_G", "gamma_H"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"constant {name} must be finite and >= 0, got {v}")


def _plan(plan, nu: int) -> BatchPlan:
    if plan is None:
        raise ValueError("a batch plan is required")
    if isinstance(plan, (int, np.integer)):
        return BatchPlan.uniform(nu, int(plan))
    if plan.nu != nu:
        raise ValueError(f"batch plan covers nu={plan.nu}, asked for nu={nu}")
    return plan


def fourth_moment_bound(kappa: float, sigma4: float, D: int) -> float:
    """Bound on E||batch mean - mean||^4 for a batch of ``D`` samples.

    ``kappa`` bounds the per-sample fourth moment and ``sigma4`` is the
    squared per-sample variance (sigma^4).
    """
    if D < 1:
        raise ValueError("D must be >= 1")
    return (kappa + 3.0 * (D - 1) * sigma4) / D**3


def smoothness_LF(c: TheoryConstants, alpha: float, nu: int) -> float:
    """Smoothness constant of the meta functions."""
    if nu < 1:
        raise ValueError("nu must be >= 1")
    a = 1.0 + alpha * c.L
    tail = sum(a**l for l in range(nu))
    return c.L * a ** (2 * nu) + c.B * alpha * c.rho * a ** (nu - 1) * tail


def model_error_bounds(c: TheoryConstants, alpha: float, plan, nu: int):
    """First, second and fourth moment bounds of ``||w~_l - w_l||``.

    Returns three arrays of length ``nu + 1`` (index 0 is the exact start).
    """
    plan = _plan(plan, nu)
    D = plan.d_sizes
    aL = 1.0 + alpha * c.L
    s2 = c.sigma_G**2
    s4 = c.sigma_G**4
    h = np.zeros(nu + 1)
    hp = np.zeros(nu + 1)
    hpp = np.zeros(nu + 1)
    q2 = 2.0 + 2.0 * alpha**2 * c.L**2
    q4 = 8.0 + 64.0 * alpha**4 * c.L**4

    def m4(Dj):
        return c.kappa_G + 3.0 * (Dj - 1) * s4

    for l in range(1, nu + 1):
        h[l] = alpha * c.sigma_G * sum(aL**j / math.sqrt(D[l - 1 - j]) for j in range(l))
        hp[l] = alpha**2 * s2 * q2 ** (l - 1) / D[0] + 2.0 * alpha**2 * s2 * sum(
            q2 ** (l - j - 1) / D[j] for j in range(1, l)
        )
        hpp[l] = alpha**4 * m4(D[0]) * q4 ** (l - 1) / D[0] ** 3 + 64.0 * alpha**4 * sum(
            m4(D[j]) * q4 ** (l - j - 1) / D[j] ** 3 for j in range(1, l)
        )
    return h, hp, hpp


def hessian_error_recursions(c: TheoryConstants, alpha: float, plan, nu: int):
    """``d_l`` and ``d'_l`` for ``l = 1..nu`` (index 0 unused, set to 0)."""
    plan = _plan(plan, nu)
    Dp = plan.dprime_sizes
    _, hp, hpp = model_error_bounds(c, alpha, plan, nu)
    aL = 1.0 + alpha * c.L

    def mH(Dj):
        return fourth_moment_bound(c.kappa_H, c.sigma_H**4, Dj)

    d = np.zeros(nu + 1)
    dq = np.zeros(nu + 1)
    if nu < 1:
        return d, dq
    d[1] = alpha**2 * c.sigma_H**2 / Dp[0]
    dq[1] = alpha**4 * (c.kappa_H + 3.0 * (Dp[0] - 1) * c.sigma_H**4) / Dp[0] ** 3
    for l in range(2, nu + 1):
        Dl = Dp[l - 1]
        d[l] = 2.0 * d[l - 1] * (aL + alpha * c.sigma_H / math.sqrt(Dl)) ** 2 + 2.0 * alpha**2 * aL ** (
            2 * l - 2
        ) * (c.sigma_H**2 / Dl + c.rho**2 * hp[l - 1])
        dq[l] = 64.0 * dq[l - 1] * (aL**4 + alpha**4 * mH(Dl)) + 64.0 * alpha**4 * aL ** (4 * l - 4) * (
            c.rho**4 * hpp[l - 1] + mH(Dl)
        )
    return d, dq


def meta_grad_moments_exact(c: TheoryConstants, alpha: float, plan, nu: int) -> tuple[float, float]:
    """Bias bound and second-moment bound of the exact stochastic meta-gradient."""
    if nu < 1:
        raise ValueError("nu must be >= 1")
    plan = _plan(plan, nu)
    h, hp, hpp = model_error_bounds(c, alpha, plan, nu)
    d, dq = hessian_error_recursions(c, alpha, plan, nu)
    Dn = plan.d_sizes[nu]
    aL = 1.0 + alpha * c.L
    grad_err2 = c.sigma_G**2 / Dn + c.L**2 * hp[nu]
    mu = (
        aL**nu * (c.sigma_G / math.sqrt(Dn) + c.L * h[nu])
        + c.B * alpha * c.rho * aL ** (nu - 1) * float(np.sum(h[1:nu]))
        + math.sqrt(d[nu] * grad_err2)
    )
    m4 = fourth_moment_bound(c.kappa_G, c.sigma_G**4, Dn)
    sigma_sq = (
        3.0 * aL ** (2 * nu) * grad_err2
        + 3.0 * c.B**2 * d[nu]
        + 6.0 * math.sqrt(2.0 * dq[nu] * (m4 + c.L**4 * hpp[nu]))
    )
    return mu, sigma_sq


def similarity_g(c: TheoryConstants, alpha: float, nu: int) -> float:
    if nu < 1:
        raise ValueError("nu must be >= 1")
    aL = 1.0 + alpha * c.L
    return alpha**2 * c.gamma_H**2 * aL ** (2 * nu - 2) * (2 ** (nu - 1) + sum(2**l for l in range(1, nu)))


def similarity_gamma_F(c: TheoryConstants, alpha: float, nu: int) -> float:
    """Squared dissimilarity bound of the clients' meta-gradients."""
    aL = 1.0 + alpha * c.L
    return 15.0 * c.B**2 * similarity_g(c, alpha, nu) + 6.0 * c.gamma_G**2 * aL ** (2 * nu) * (
        1.0 + alpha**2 * c.L**2
    )


def fo_moments(c: TheoryConstants, alpha: float, plan, nu: int) -> tuple[float, float]:
    """Bias and second-moment bounds when Hessian factors are dropped."""
    if nu < 0:
        raise ValueError("nu must be >= 0")
    plan = _plan(plan, nu)
    h, hp, _ = model_error_bounds(c, alpha, plan, nu)
    Dn = plan.d_sizes[nu]
    drift = (1.0 + alpha * c.L) ** nu + 1.0
    mu = c.sigma_G / math.sqrt(Dn) + c.L * h[nu] + c.B * drift
    sigma_sq = 2.0 * c.sigma_G**2 / Dn + 2.0 * c.L**2 * hp[nu] + 2.0 * c.B**2 * drift**2
    return mu, sigma_sq


def hf_truncation(c: TheoryConstants, alpha: float, delta: float, nu: int) -> float:
    """Bias contributed by the symmetric-difference Hessian approximation."""
    aL = 1.0 + alpha * c.L
    return alpha * c.rho * delta * c.B**2 * sum(aL ** (nu + i - 1) for i in range(nu))


def hf_recursions(c: TheoryConstants, alpha: float, delta: float, plan, nu: int):
    """``p_l`` and ``p'_l`` for ``l = 0..nu``."""
    plan = _plan(plan, nu)
    h, hp, _ = model_error_bounds(c, alpha, plan, nu)
    D, Dp = plan.d_sizes, plan.dprime_sizes
    aL = 1.0 + alpha * c.L
    p = np.zeros(nu + 1)
    pq = np.zeros(nu + 1)
    p[0] = c.sigma_G / math.sqrt(D[nu]) + c.L * h[nu]
    pq[0] = c.sigma_G**2 / D[nu] + c.L**2 * hp[nu]
    for l in range(1, nu + 1):
        j = nu - l
        p[l] = aL * p[l - 1] + (alpha / delta) * (c.sigma_G / math.sqrt(Dp[j]) + c.L * h[j])
        pq[l] = 3.0 * pq[l - 1] * (1.0 + alpha**2 * c.L**2) + (3.0 * alpha**2 / (2.0 * delta**2)) * (
            c.sigma_G**2 / Dp[j] + 2.0 * c.L**2 * hp[j]
        )
    return p, pq


def hf_moments(c: TheoryConstants, alpha: float, delta: float, plan, nu: int) -> tuple[float, float]:
    """Bias and second-moment bounds of the Hessian-free estimator."""
    if nu < 1:
        raise ValueError("nu must be >= 1")
    if delta <= 0:
        raise ValueError("delta must be > 0")
    p, pq = hf_recursions(c, alpha, delta, plan, nu)
    q = hf_truncation(c, alpha, delta, nu)
    return p[nu] + q, 2.0 * pq[nu] + 2.0 * q**2


def engine_moments(engine: str, c: TheoryConstants, alpha: float, plan, nu: int, delta: float = 1e-3):
    if engine == "exact":
        return meta_grad_moments_exact(c, alpha, plan, nu)
    if engine == "fo":
        return fo_moments(c, alpha, plan, nu)
    if engine == "hf":
        return hf_moments(c, alpha, delta, plan, nu)
    raise ValueError(f"unknown engine {engine!r}")


def beta_limit(L_F: float, tau: int) -> float:
    return 1.0 / (10.0 * tau * L_F)


def theorem_rhs(c: TheoryConstants | None, derived: dict, beta: float, tau: int, K: float, r: float,
                n: int, F0_minus_Fstar: float, big_O_const: float = 1.0) -> dict:
    """Right-hand side of the stationarity guarantee, with its terms.

    ``derived`` holds ``L_F``, ``mu_F``, ``sigma_F_sq`` and ``gamma_F_sq``.
    ``K`` may be ``math.inf``. The returned dict has ``total``, the
    individual terms, and ``beta_ok`` (False when beta exceeds
    ``1 / (10 tau L_F)``; a warning is emitted too).
    """
    L_F = float(derived.get("L_F", 0.0))
    mu = float(derived.get("mu_F", 0.0))
    s2 = float(derived.get("sigma_F_sq", 0.0))
    g2 = float(derived.get("gamma_F_sq", 0.0))
    if not 0 < r <= 1:
        raise ValueError("participation r must be in (0, 1]")
    if r < 1 and n < 2:
        raise ValueError("partial participation needs n >= 2")
    beta_ok = L_F <= 0 or beta <= beta_limit(L_F, tau)
    if not beta_ok:
        warnings.warn(
            f"beta={beta:g} exceeds 1/(10 tau L_F)={beta_limit(L_F, tau):g}; the bound's hypothesis fails",
            stacklevel=2,
        )
    bL = beta * L_F
    drift = bL * tau * (tau - 1)
    participation = 0.0 if r == 1 else (1.0 - r) / (r * (n - 1))
    terms = {
        "optimality_gap": 4.0 * F0_minus_Fstar / (beta * tau * K),
        "variance": big_O_const * bL * (1.0 + drift) * s2,
        "dissimilarity": big_O_const * bL * g2 * (participation + drift),
        "bias": big_O_const * mu**2,
    }
    return {"total": sum(terms.values()), "terms": terms, "beta_ok": beta_ok,
            "participation": participation}


@dataclass
class BoundReport:
    nu: int
    engine: str
    L_F: float
    h: list
    h_prime: list
    h_double_prime: list
    mu_F: float
    sigma_F_sq: float
    gamma_F_sq: float
    theorem_rhs: float
    terms: dict = field(default_factory=dict)
    beta_ok: bool = True

    def labeled(self) -> dict:
        return {
            "nu": self.nu,
            "engine": self.engine,
            "smoothness_of_meta_functions": {"L_F": self.L_F},
            "fine_tuned_model_error": {
                "h": self.h, "h_prime": self.h_prime, "h_double_prime": self.h_double_prime,
            },
            "meta_gradient_bias_and_variance": {"mu_F": self.mu_F, "sigma_F_sq": self.sigma_F_sq},
            "meta_gradient_similarity": {"gamma_F_sq": self.gamma_F_sq},
            "stationarity_theorem": {
                "rhs": self.theorem_rhs, "terms": self.terms, "beta_hypothesis_ok": self.beta_ok,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.labeled(), indent=2)


def bound_report(c: TheoryConstants, alpha: float, beta: float, nu: int, tau: int, K: float,
                 r: float, n: int, plans, engine: str = "exact", delta: float = 1e-3,
                 F0_minus_Fstar: float = 1.0, big_O_const: float = 1.0) -> BoundReport:
    """Evaluate every bound for one configuration.

    ``plans`` is a single batch plan or one per client; the bias and variance
    bounds take the maximum over clients.
    """
    if isinstance(plans, (BatchPlan, int, np.integer)):
        plans = [plans]
    plans = [_plan(p, nu) for p in plans]
    moments = [engine_moments(engine, c, alpha, p, nu, delta) for p in plans]
    mu = max(m[0] for m in moments)
    s2 = max(m[1] for m in moments)
    L_F = smoothness_LF(c, alpha, nu)
    g2 = similarity_gamma_F(c, alpha, nu)
    h, hp, hpp = model_error_bounds(c, alpha, plans[0], nu)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rhs = theorem_rhs(c, {"L_F": L_F, "mu_F": mu, "sigma_F_sq": s2, "gamma_F_sq": g2},
                          beta, tau, K, r, n, F0_minus_Fstar, big_O_const)
    return BoundReport(nu, engine, L_F, h[1:].tolist(), hp[1:].tolist(), hpp[1:].tolist(),
                       mu, s2, g2, rhs["total"], rhs["terms"], rhs["beta_ok"])


# -- empirical constants -----------------------------------------------------

def _top_eigvec(spec, w, batch, start, iters):
    v = start / np.linalg.norm(start)
    lam = 0.0
    for _ in range(iters):
        u = nn.hvp(spec, w, v, batch)
        lam = float(np.linalg.norm(u))
        if lam == 0.0:
            break
        v = u / lam
    return lam, v


def estimate_constants(spec: nn.ModelSpec, clients: Sequence[ClientDataset], probe_count: int = 4,
                       seed: int = 0, *, center=None, radius: float = 0.5, directions: int = 4,
                       power_iters: int = 50, max_samples: int = 64) -> TheoryConstants:
    """Empirical lower estimates of the problem constants.

    Probes are ``center`` (default: the seeded initial model) and
    ``probe_count - 1`` random points at distance ``radius`` from it. At each
    probe and for each client this measures the full-batch gradient norm
    (B), the top Hessian eigenvalue by power iteration (L), the change in
    Hessian-vector products relative to the center (rho), per-sample
    gradient and Hessian deviation moments (sigma, kappa) and cross-client
    dispersion (gamma). Hessian deviations are measured along a few unit
    directions, and per-sample Hessian statistics use at most
    ``max_samples`` rows per client.
    """
    if probe_count < 2:
        raise ValueError("probe_count must be >= 2")
    rng = np.random.default_rng(seed)
    d = spec.dim
    w0 = nn._vec(center) if center is not None else nn.init_params(spec, seed).values
    probes = [w0]
    for _ in range(probe_count - 1):
        z = rng.standard_normal(d)
        probes.append(w0 + radius * z / np.linalg.norm(z))

    B = L = rho = sG2 = sH2 = kG = kH = gG2 = gH2 = 0.0
    dirs = [rng.standard_normal(d) for _ in range(directions)]
    dirs = [v / np.linalg.norm(v) for v in dirs]
    center_hv = {}
    for k, w in enumerate(probes):
        grads, hvs = [], []
        for c in clients:
            batch = c.train
            g = nn.grad(spec, w, batch)
            B = max(B, float(np.linalg.norm(g)))
            lam, top = _top_eigvec(spec, w, batch, rng.standard_normal(d), power_iters)
            L = max(L, lam)
            vs = dirs + [top]
            hv = [nn.hvp(spec, w, v, batch) for v in vs]
            if k == 0:
                center_hv[c.client_id] = [nn.hvp(spec, w0, v, batch) for v in dirs]
            else:
                dist = float(np.linalg.norm(w - w0))
                for a, b in zip(hv[:directions], center_hv[c.client_id]):
                    rho = max(rho, float(np.linalg.norm(a - b)) / dist)
            G = nn.per_sample_grads(spec, w, batch)
            dev = np.sum((G - g) ** 2, axis=1)
            sG2 = max(sG2, float(dev.mean()))
            kG = max(kG, float((dev**2).mean()))
            n = len(batch)
            rows = np.arange(n) if n <= max_samples else rng.choice(n, max_samples, replace=False)
            hdev = np.zeros(rows.size)
            for t, i in enumerate(rows):
                one = nn.Batch(batch.inputs[i:i + 1], batch.labels[i:i + 1])
                for v, full in zip(vs, hv):
                    hdev[t] = max(hdev[t], float(np.linalg.norm(nn.hvp(spec, w, v, one) - full)))
            sH2 = max(sH2, float((hdev**2).mean()))
            kH = max(kH, float((hdev**4).mean()))
            grads.append(g)
            hvs.append(np.stack(hv[:directions]))
        grads = np.stack(grads)
        gG2 = max(gG2, float(np.mean(np.sum((grads - grads.mean(axis=0)) ** 2, axis=1))))
        hvs = np.stack(hvs)
        spread = np.sum((hvs - hvs.mean(axis=0)) ** 2, axis=2)
        gH2 = max(gH2, float(spread.mean(axis=0).max()))
    return TheoryConstants(B=B, L=L, rho=rho, sigma_G=math.sqrt(sG2), sigma_H=math.sqrt(sH2),
                           kappa_G=kG, kappa_H=kH, gamma_G=math.sqrt(gG2), gamma_H=math.sqrt(gH2),
                           lower_estimate=True)


def constants_dict(c: TheoryConstants) -> dict:
    return asdict(c)
