"""1-Wasserstein distances between patch distributions.

Three solvers share one result type:

* ``exact``    assignment (uniform, equal sizes) or min-cost flow (general weights)
* ``sinkhorn`` log-domain entropic OT, reported as the cost of a rounded feasible plan
* ``dual``     a critic network trained with a gradient penalty

plus a brute-force permutation oracle and the pixel-mass distance that treats
a whole grayscale image as one distribution over pixel coordinates.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .diffcore import (NetworkSpec, backward, init_params, input_gradient, input_gradient_vjp,
                       forward, linear_head, make_optimizer, optimizer_step)
from .errors import ConvergenceError, DimensionError, NumericError, SizeError, ValidationError
from .patches import PatchDistribution, PatchGrid, as_image, extract_patches

SOLVERS = ("exact", "sinkhorn", "dual", "brute")


@dataclass
class TransportPlan:
    gamma: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def marginal_error(self):
        return float(np.abs(self.gamma.sum(1) - self.a).sum() + np.abs(self.gamma.sum(0) - self.b).sum())


@dataclass
class IwdValue:
    value: float
    solver: str
    plan: TransportPlan = None
    iterations: int = 0
    n: int = 0
    m: int = 0

    def to_dict(self):
        return {
            "solver": self.solver,
            "value": float(self.value),
            "n": int(self.n),
            "m": int(self.m),
            "marginal_error": None if self.plan is None else self.plan.marginal_error(),
            "iterations": int(self.iterations),
        }


def ground_cost(p, q):
    """Pairwise L1 distances between atoms of two patch distributions."""
    P = p.atoms if isinstance(p, PatchDistribution) else np.atleast_2d(p)
    Q = q.atoms if isinstance(q, PatchDistribution) else np.atleast_2d(q)
    if P.shape[1] != Q.shape[1]:
        raise DimensionError(f"atom dimensions differ: {P.shape[1]} vs {Q.shape[1]}")
    return kernels.l1_cost(P, Q)


def _check_weights(cost, a, b):
    n, m = cost.shape
    a = np.full(n, 1.0 / n) if a is None else np.asarray(a, dtype=np.float64)
    b = np.full(m, 1.0 / m) if b is None else np.asarray(b, dtype=np.float64)
    if a.shape != (n,) or b.shape != (m,):
        raise DimensionError(f"weights {a.shape}, {b.shape} do not match cost {cost.shape}")
    if np.any(a < 0) or np.any(b < 0):
        raise ValidationError("transport weights must be nonnegative")
    if abs(a.sum() - b.sum()) > 1e-9 or abs(a.sum() - 1.0) > 1e-9:
        raise ValidationError(f"weights must each sum to 1 (got {a.sum():.12g}, {b.sum():.12g})")
    return a, b


def _is_uniform(w):
    return np.all(w == w[0])


def exact_w1(cost, a=None, b=None):
    cost = np.asarray(cost, dtype=np.float64)
    a, b = _check_weights(cost, a, b)
    n, m = cost.shape
    if n == m and _is_uniform(a) and _is_uniform(b):
        cols = kernels.assignment(cost)
        gamma = np.zeros((n, m))
        gamma[np.arange(n), cols] = 1.0 / n
        value = float(cost[np.arange(n), cols].sum() / n)
        iters = n
    else:
        gamma, iters = kernels.transport_flow(cost, a, b)
        if iters < 0:
            raise NumericError("min-cost flow failed to route all mass")
        value = float((gamma * cost).sum())
    return IwdValue(value, "exact", TransportPlan(gamma, a, b), iters, n, m)


def brute_force_w1(cost):
    """Minimum over all permutations; the independent oracle for small N."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n != m:
        raise DimensionError("brute force needs a square cost matrix")
    if n > 8:
        raise SizeError(f"brute force is limited to N <= 8, got {n}")
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    totals = cost[np.arange(n)[None, :], perms].sum(axis=1)
    best = int(np.argmin(totals))
    gamma = np.zeros((n, n))
    gamma[np.arange(n), perms[best]] = 1.0 / n
    w = np.full(n, 1.0 / n)
    return IwdValue(float(totals[best] / n), "brute", TransportPlan(gamma, w, w), len(perms), n, n)


# ---------------------------------------------------------------------------
# Sinkhorn
# ---------------------------------------------------------------------------


@dataclass
class SinkhornConfig:
    reg: float = None            # absolute regularization; None -> reg_scale * max(cost)
    reg_scale: float = 0.05
    max_iter: int = 10_000
    tol: float = 1e-6
    log_domain: bool = True
    eps_scaling: bool = True
    stage_iter: int = 50

    def __post_init__(self):
        if not self.tol > 0:
            raise ValidationError("Sinkhorn tolerance must be positive")
        if self.max_iter < 1:
            raise ValidationError("Sinkhorn needs at least one iteration")
        if self.reg is not None and not self.reg > 0:
            raise ValidationError("regularization must be positive")


def round_plan(P, a, b):
    """Project a near-feasible plan onto the exact marginal constraints."""
    r = P.sum(1)
    P = P * np.minimum(1.0, np.divide(a, r, out=np.ones_like(a), where=r > 0))[:, None]
    c = P.sum(0)
    P = P * np.minimum(1.0, np.divide(b, c, out=np.ones_like(b), where=c > 0))[None, :]
    er = a - P.sum(1)
    ec = b - P.sum(0)
    s = er.sum()
    if s > 0:
        P = P + np.outer(er, ec) / s
    return P


def sinkhorn_w1(cost, a=None, b=None, cfg=SinkhornConfig()):
    cost = np.asarray(cost, dtype=np.float64)
    a, b = _check_weights(cost, a, b)
    n, m = cost.shape
    cmax = float(cost.max())
    if cmax == 0.0:
        gamma = np.outer(a, b)
        return IwdValue(0.0, "sinkhorn", TransportPlan(gamma, a, b), 0, n, m)
    target = cfg.reg if cfg.reg is not None else cfg.reg_scale * cmax
    with np.errstate(divide="ignore"):
        log_a, log_b = np.log(a), np.log(b)
    f = g = None
    used = 0
    eps = cmax if cfg.eps_scaling else target
    while True:
        eps = max(target, 0.5 * eps) if cfg.eps_scaling else target
        last = eps == target
        budget = cfg.max_iter - used if last else min(cfg.stage_iter, cfg.max_iter - used)
        f, g, it, err = kernels.sinkhorn_log(cost, log_a, log_b, eps, f, g, budget, cfg.tol)
        used += it
        if last or used >= cfg.max_iter:
            break
    if not (last and err <= cfg.tol):
        raise ConvergenceError(
            f"Sinkhorn did not reach tolerance {cfg.tol:g} in {used} iterations (error {err:.3g})",
            marginal_error=err, iterations=used,
        )
    P = np.exp((f[:, None] + g[None, :] - cost) / eps)
    gamma = round_plan(P, a, b)
    value = float((gamma * cost).sum())
    return IwdValue(value, "sinkhorn", TransportPlan(gamma, a, b), used, n, m)


def sinkhorn_unrolled(cost, eps, n_iter=50):
    """Transport cost <P, C> after ``n_iter`` log-domain sweeps from zero
    potentials (uniform weights), and its exact gradient w.r.t. ``cost``.

    ``eps`` is treated as a constant.
    """
    C = np.asarray(cost, dtype=np.float64)
    n, m = C.shape
    la, lb = -math.log(n), -math.log(m)
    f = np.zeros(n)
    g = np.zeros(m)
    hist = []
    for _ in range(n_iter):
        S = (g[None, :] - C) / eps
        S = np.exp(S - S.max(1, keepdims=True))
        S /= S.sum(1, keepdims=True)
        f = eps * la - eps * _lse_rows((g[None, :] - C) / eps)
        R = (f[:, None] - C) / eps
        R = np.exp(R - R.max(0, keepdims=True))
        R /= R.sum(0, keepdims=True)
        g = eps * lb - eps * _lse_cols((f[:, None] - C) / eps)
        hist.append((S, R))
    P = np.exp((f[:, None] + g[None, :] - C) / eps)
    value = float((P * C).sum())
    PC = P * C / eps
    gC = P - PC
    fbar = PC.sum(1)
    gbar = PC.sum(0)
    for S, R in reversed(hist):
        # g_j = eps*lb - eps*LSE_i((f_i - C_ij)/eps)
        gC += gbar[None, :] * R
        fbar = fbar - R @ gbar
        # f_i = eps*la - eps*LSE_j((g_j - C_ij)/eps)
        gC += fbar[:, None] * S
        gbar = -(S.T @ fbar)
        fbar = np.zeros(n)
    return value, P, gC


def _lse_rows(M):
    mx = M.max(1, keepdims=True)
    return (mx + np.log(np.exp(M - mx).sum(1, keepdims=True)))[:, 0]


def _lse_cols(M):
    mx = M.max(0, keepdims=True)
    return (mx + np.log(np.exp(M - mx).sum(0, keepdims=True)))[0]


def unrolled_patch_cost(U, V, eps, n_iter=50):
    """Unrolled Sinkhorn cost between atom sets U, V with gradients (dU, dV)."""
    C = kernels.l1_cost(U, V)
    value, _, gC = sinkhorn_unrolled(C, eps, n_iter)
    sgn = np.sign(U[:, None, :] - V[None, :, :])
    dU = np.einsum("ij,ijd->id", gC, sgn)
    dV = -np.einsum("ij,ijd->jd", gC, sgn)
    return value, dU, dV


def sinkhorn_divergence(U, V, eps, n_iter=50):
    """Debiased, symmetrized unrolled cost of V against fixed reference U.

    Returns (value, gradient w.r.t. V). The gradient is exactly zero when V
    equals U bitwise.
    """
    f_uv, _, dv1 = unrolled_patch_cost(U, V, eps, n_iter)
    f_vu, du2, _ = unrolled_patch_cost(V, U, eps, n_iter)
    f_vv, du3, dv3 = unrolled_patch_cost(V, V, eps, n_iter)
    f_uu, _, _ = unrolled_patch_cost(U, U, eps, n_iter)
    value = 0.5 * (f_uv + f_vu) - 0.5 * f_uu - 0.5 * f_vv
    grad = 0.5 * (dv1 - dv3) + 0.5 * (du2 - du3)
    return value, grad


# ---------------------------------------------------------------------------
# critic (dual) estimates
# ---------------------------------------------------------------------------


@dataclass
class CriticState:
    spec: NetworkSpec
    params: np.ndarray
    lam: float = 10.0
    n_critic: int = 5
    opt: object = field(default=None, repr=False)
    one_sided: bool = False
    penalty_norm: str = "l2"

    def __post_init__(self):
        if self.spec.output != "scalar":
            raise ValidationError("critic must have scalar output")
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise ValidationError("penalty weight must be finite and positive")
        if self.n_critic < 1:
            raise ValidationError("n_critic must be >= 1")


def make_critic(dim, rng, hidden=(64, 64), lam=10.0, n_critic=5, lr=5e-4, beta1=0.5, beta2=0.999,
                one_sided=False, penalty_norm="l2"):
    """A tanh MLP critic. ``rng`` may be a list of generators, one per
    critic in a stack; every critic then sees only its own patch sets."""
    spec = NetworkSpec((dim, *hidden, 1), "tanh", "scalar")
    if isinstance(rng, (list, tuple)):
        params = np.stack([init_params(spec, r) for r in rng])
    else:
        params = init_params(spec, rng)
    # zero output layer: the critic starts constant, so the data term alone
    # picks the sign of its slope (a two-sided penalty walls off a sign flip)
    params[..., spec.n_params - hidden[-1] - 1:] = 0.0
    opt = make_optimizer("adam", lr, params.shape, beta1, beta2)
    return CriticState(spec, params, lam, n_critic, opt, one_sided, penalty_norm)


def _interpolate(U, V, rho):
    r = np.asarray(rho, dtype=np.float64)[..., None]
    return r * U + (1.0 - r) * V


def gradient_penalty(critic, real_p, fake_p, rho):
    """Mean of (||∇f(x̂)||_2 - 1)^2 over interpolated atoms."""
    U = real_p.atoms if isinstance(real_p, PatchDistribution) else np.asarray(real_p)
    V = fake_p.atoms if isinstance(fake_p, PatchDistribution) else np.asarray(fake_p)
    if U.shape != V.shape:
        raise DimensionError(f"aligned patch sets required, got {U.shape} vs {V.shape}")
    G = input_gradient(critic.spec, critic.params, _interpolate(U, V, rho))
    if not np.all(np.isfinite(G)):
        raise NumericError("non-finite critic gradient")
    norms = np.sqrt((G * G).sum(-1))
    return float(((norms - 1.0) ** 2).mean())


def gradient_penalty_grad(spec, params, X, one_sided=False, norm="l2"):
    """Penalty value and its gradient w.r.t. critic parameters at points X.

    ``one_sided`` penalizes only norms above 1. ``norm="linf"`` measures the
    input gradient in the max norm, the dual of the L1 ground cost.
    """
    G = input_gradient(spec, params, X)
    if norm == "linf":
        k = np.abs(G).argmax(-1)[..., None]
        gk = np.take_along_axis(G, k, -1)[..., 0]
        norms = np.abs(gk)
        direction = np.zeros_like(G)
        np.put_along_axis(direction, k, np.sign(gk)[..., None], -1)
    else:
        norms = np.sqrt((G * G).sum(-1))
        direction = G / np.maximum(norms, 1e-12)[..., None]
    r = norms - 1.0
    if one_sided:
        r = np.maximum(r, 0.0)
    coef = 2.0 * r / X.shape[-2]
    _, dtheta = input_gradient_vjp(spec, params, X, coef[..., None] * direction)
    return float((r ** 2).mean()), dtheta


def critic_objective_grad(critic, U, V, rho):
    """Value of mean f(U) - mean f(V) and the gradient of
    mean f(U) - mean f(V) - lam * penalty w.r.t. critic parameters."""
    n, m = U.shape[-2], V.shape[-2]
    X = np.concatenate([U, V], axis=-2)
    coef = np.concatenate([np.full(n, 1.0 / n), np.full(m, -1.0 / m)])
    gb = backward(critic.spec, critic.params, X, linear_head(coef[:, None]))
    gp, dgp = gradient_penalty_grad(critic.spec, critic.params, _interpolate(U, V, rho), critic.one_sided,
                                   critic.penalty_norm)
    return gb.loss, gp, gb.grad_params - critic.lam * dgp


def critic_ascent_step(critic, U, V, rng):
    """One Adam ascent step on the penalized dual objective (in place)."""
    if isinstance(rng, (list, tuple)):
        rho = np.stack([r.uniform(0.0, 1.0, size=U.shape[-2]) for r in rng])
    else:
        rho = rng.uniform(0.0, 1.0, size=U.shape[:-1])
    value, gp, grad = critic_objective_grad(critic, U, V, rho)
    if not np.isfinite(value):
        raise NumericError("critic objective diverged")
    critic.params, critic.opt = optimizer_step(critic.opt, critic.params, -grad)
    return value, gp


def dual_w1(p, q, critic, steps=500, rng=None):
    """Kantorovich-Rubinstein estimate from a critic trained for ``steps``."""
    U = p.atoms if isinstance(p, PatchDistribution) else np.atleast_2d(p)
    V = q.atoms if isinstance(q, PatchDistribution) else np.atleast_2d(q)
    if U.shape != V.shape:
        raise DimensionError(f"aligned patch sets required, got {U.shape} vs {V.shape}")
    rng = np.random.default_rng(0) if rng is None else rng
    for _ in range(steps):
        critic_ascent_step(critic, U, V, rng)
    est = float(forward(critic.spec, critic.params, U).mean() - forward(critic.spec, critic.params, V).mean())
    if not np.isfinite(est):
        raise NumericError("critic estimate diverged")
    return est


def critic_dual_estimate(x, x_adv, grid=PatchGrid(), critic=None, steps=500, seed=0, lam=10.0, lr=5e-4):
    p = extract_patches(x, grid)
    q = extract_patches(x_adv, grid)
    rng = np.random.default_rng(seed)
    if critic is None:
        critic = make_critic(p.dim, rng, lam=lam, lr=lr)
    return dual_w1(p, q, critic, steps, rng)


# ---------------------------------------------------------------------------
# image-level distances
# ---------------------------------------------------------------------------


def _solve(cost, solver, sinkhorn_cfg=None):
    if solver == "exact":
        return exact_w1(cost)
    if solver == "brute":
        return brute_force_w1(cost)
    if solver == "sinkhorn":
        return sinkhorn_w1(cost, cfg=sinkhorn_cfg or SinkhornConfig())
    raise ValidationError(f"unknown solver {solver!r}; expected one of {SOLVERS}")


def iwd(x, x_adv, grid=PatchGrid(), solver="exact", sinkhorn_cfg=None, steps=500, seed=0):
    """Internal Wasserstein distance between two images on a shared patch grid."""
    x = as_image(x)
    x_adv = as_image(x_adv)
    if x.shape != x_adv.shape:
        raise DimensionError(f"image shapes differ: {x.shape} vs {x_adv.shape}")
    if solver == "dual":
        est = critic_dual_estimate(x, x_adv, grid, steps=steps, seed=seed)
        n = extract_patches(x, grid).n
        return IwdValue(est, "dual", None, steps, n, n)
    cost = ground_cost(extract_patches(x, grid), extract_patches(x_adv, grid))
    return _solve(cost, solver, sinkhorn_cfg)


def iwd_value(x, x_adv, grid=PatchGrid()):
    """Exact IWD as a float; the audit used throughout the attack code."""
    return iwd(x, x_adv, grid).value


def multiscale_iwd(x, x_adv, kernels_=(3,), weights=None, solver="exact"):
    ks = list(kernels_)
    w = np.full(len(ks), 1.0 / len(ks)) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(w) != len(ks):
        raise DimensionError("one weight per kernel size is required")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ValidationError("scale weights must be nonnegative and sum to 1")
    return float(sum(wi * iwd(x, x_adv, PatchGrid(k), solver).value for k, wi in zip(ks, w)))


def global_pixel_w1(x, x_adv):
    """W1 between the two images viewed as mass distributions over pixel sites,
    with L1 grid distance (in pixels) as ground cost."""
    x = as_image(x)
    y = as_image(x_adv)
    if x.shape != y.shape:
        raise DimensionError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.shape[2] != 1:
        raise ValidationError("pixel-mass distance is defined for grayscale images")
    mx, my = x[:, :, 0], y[:, :, 0]
    if mx.sum() <= 0 or my.sum() <= 0:
        raise ValidationError("pixel-mass distance needs nonzero total intensity")
    if np.array_equal(mx, my):
        return 0.0
    sx = np.argwhere(mx > 0)
    sy = np.argwhere(my > 0)
    a = mx[mx > 0] / mx.sum()
    b = my[my > 0] / my.sum()
    a = a / a.sum()
    b = b / b.sum()
    cost = np.abs(sx[:, None, :] - sy[None, :, :]).sum(-1).astype(np.float64)
    gamma, iters = kernels.transport_flow(cost, a, b)
    if iters < 0:
        raise NumericError("min-cost flow failed on pixel masses")
    return float((gamma * cost).sum())
