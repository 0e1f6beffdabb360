"""Adversarial reward objectives: the maximin policy search and its convex minimax twin.

For a policy ``pi`` and reward ``r`` the joint objective is::

    phi(pi, r) = eta * E_{x~d0}[ E_{a1~pi, a0~base}[r(x,a1) - r(x,a0)] - beta * KL(pi(.|x) || ref(.|x)) ]
                 + L_D(r)

It is linear plus convex in ``r`` and concave in ``pi``. The maximin side
``max_pi min_r phi`` is solved by ascent on the policy using the gradient at
the inner minimizer; the minimax side collapses (the inner max over ``pi`` has
the closed form ``beta * log Z_r``) to a convex program in ``r`` solved by
projected gradient descent. Both sides run over a box of reward tables.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CertificationError, InputError, SolverError
from .policy import TabularPolicy, check_support, kl_rows, optimal_kl_policy
from .preference import RewardTable, mle_gradient, mle_hessian, mle_loss, reward_array

INNER_TOL = 1e-8
OUTER_TOL = 1e-6


@dataclass(frozen=True)
class RewardClassSpec:
    """Box of reward tables ``lower <= r <= upper`` (defaults ``[0, R]``).

    ``lower`` and ``upper`` may be scalars or full tables; setting them equal
    gives a single-point class, which is useful for degenerate checks.
    """

    R: float
    lower: float | np.ndarray = 0.0
    upper: float | np.ndarray | None = None
    grid_step: float | None = None

    def __post_init__(self):
        if not self.R > 0:
            raise InputError("R must be positive")

    @classmethod
    def singleton(cls, r, R=None):
        r = reward_array(r)
        return cls(float(R if R is not None else max(r.max(), 1e-12)), r.copy(), r.copy())

    def bounds(self, K, M):
        lo = np.broadcast_to(np.asarray(self.lower, dtype=float), (K, M)).copy()
        hi = np.broadcast_to(np.asarray(self.R if self.upper is None else self.upper, dtype=float), (K, M)).copy()
        if np.any(lo > hi):
            raise InputError("reward class has lower > upper")
        return lo, hi

    @property
    def kind(self):
        return "box"


@dataclass
class SolveReport:
    maximin_value: float | None = None
    minimax_value: float | None = None
    duality_gap: float | None = None
    recovered_policy: TabularPolicy | None = None
    adversarial_reward: np.ndarray | None = None
    iterations: dict = field(default_factory=dict)
    inner_tolerance: float = INNER_TOL
    outer_tolerance: float = OUTER_TOL
    transfer_value: float | None = None
    maximin_policy: TabularPolicy | None = None
    base_policy: TabularPolicy | None = None

    def centered_reward(self):
        """Adversarial reward shifted per prompt so its ``base``-expectation is zero."""
        r = np.asarray(self.adversarial_reward, dtype=float)
        if self.base_policy is None:
            return r - r.mean(axis=1, keepdims=True)
        return r - np.sum(self.base_policy.probs() * r, axis=1, keepdims=True)

    def to_dict(self):
        def pol(p):
            return None if p is None else p.to_dict()

        def num(v):
            return None if v is None else float(v)

        r = self.adversarial_reward
        return {
            "maximin_value": num(self.maximin_value),
            "minimax_value": num(self.minimax_value),
            "duality_gap": num(self.duality_gap),
            "transfer_value": num(self.transfer_value),
            "recovered_policy": pol(self.recovered_policy),
            "maximin_policy": pol(self.maximin_policy),
            "adversarial_reward": None if r is None else np.asarray(r).tolist(),
            "adversarial_reward_centered": None if r is None else self.centered_reward().tolist(),
            "iterations": dict(self.iterations),
            "inner_tolerance": self.inner_tolerance,
            "outer_tolerance": self.outer_tolerance,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass(frozen=True)
class DescentResult:
    x: np.ndarray
    value: float
    iterations: int
    residual: float
    converged: bool
    history: list


def projected_descent(
    fun, grad, x0, lo, hi, tol=INNER_TOL, max_iter=200_000, keep_history=False, hess=None, project=None
):
    """Monotone projected descent on a box.

    Without ``hess``: projected gradient steps whose trial length follows the
    Barzilai-Borwein rule, halved until the descent-lemma condition holds and
    the objective does not increase. With ``hess`` (a function returning the
    Hessian of the flattened variable): projected Newton steps on the
    coordinates not held at a bound, with a tiny ridge so that flat directions
    run straight to their bound, and the Armijo rule along the projection arc.
    Stops when ``max |x - clip(x - grad(x))| <= tol``. ``project`` replaces the
    box projection (gradient mode only).
    """
    clip = (lambda z: np.clip(z, lo, hi)) if project is None else project
    x = clip(np.asarray(x0, dtype=float))
    fx, g = fun(x), grad(x)
    history = [fx] if keep_history else []
    step = 1.0
    x_prev = g_prev = None
    residual = float(np.max(np.abs(x - clip(x - g)), initial=0.0))
    it = 0
    while residual > tol and it < max_iter:
        it += 1
        slack = 1e-15 * (1.0 + abs(fx))
        if hess is not None:
            direction = _newton_direction(x, g, lo, hi, hess(x), residual)
            step = 1.0
        else:
            direction = -g
            if x_prev is not None:
                dx, dg = x - x_prev, g - g_prev
                curv = float(np.sum(dx * dg))
                step = float(np.sum(dx * dx)) / curv if curv > 0 else step * 2.0
                step = min(max(step, 1e-12), 1e12)
        while True:
            xn = clip(x + step * direction)
            d = xn - x
            fn = fun(xn)
            if hess is not None:
                ok = fn <= fx + 1e-4 * np.sum(g * d) + slack
            else:
                ok = fn <= fx + np.sum(g * d) + np.sum(d * d) / (2 * step) + slack
            if fn <= fx and ok:
                break
            step *= 0.5
            if step < 1e-300:
                break
        if step < 1e-300 or not np.any(d):
            if hess is not None:
                # fall back to gradient steps for the rest of the run
                hess = None
                step = 1.0
                continue
            break
        x_prev, g_prev = x, g
        x, fx, g = xn, fn, grad(xn)
        if keep_history:
            history.append(fx)
        residual = float(np.max(np.abs(x - clip(x - g)), initial=0.0))
    return DescentResult(x, fx, it, residual, residual <= tol, history)


def _newton_direction(x, g, lo, hi, H, residual):
    shape = x.shape
    x, g, lo, hi = x.ravel(), g.ravel(), lo.ravel(), hi.ravel()
    eps = min(1e-6, residual)
    held = ((x <= lo + eps) & (g > 0)) | ((x >= hi - eps) & (g < 0))
    free = ~held
    # held coordinates close the remaining gap to their bound
    d = np.where(held, np.where(g > 0, lo - x, hi - x), 0.0)
    if np.any(free):
        Hf = H[np.ix_(free, free)]
        ridge = 1e-10 * max(1.0, float(np.max(np.abs(np.diag(Hf)), initial=0.0)))
        d[free] = -np.linalg.solve(Hf + ridge * np.eye(int(free.sum())), g[free])
    return d.reshape(shape)


def _check_inputs(inst, base, beta, eta):
    if not beta > 0:
        raise InputError("beta must be positive")
    if not eta >= 0:
        raise InputError("eta must be nonnegative")
    check_support(base, inst.reference_policy)


def _linear_coef(pol, base, d0, eta):
    return eta * d0[:, None] * (pol.probs() - base.probs())


def phi(pol, r, inst, base, data, beta, eta):
    """Joint objective ``phi(pi, r)``, by exact summation over the finite spaces."""
    _check_inputs(inst, base, beta, eta)
    ref = inst.reference_policy
    check_support(pol, ref)
    r = reward_array(r)
    d0 = inst.prompt_dist
    adv = np.sum(pol.probs() * r, axis=1) - np.sum(base.probs() * r, axis=1)
    return float(eta * np.dot(d0, adv - beta * kl_rows(pol, ref)) + mle_loss(r, data))


def phi_reward_gradient(pol, r, inst, base, data, eta):
    return _linear_coef(pol, base, inst.prompt_dist, eta) + mle_gradient(r, data)


def policy_envelope_gradient(pol, r, inst, base, beta, eta):
    """Gradient of ``phi(pi, r)`` in the policy's logit coordinates, ``r`` held fixed.

    At the inner minimizer this is the gradient of ``T_adv`` (Danskin).
    """
    ref = inst.reference_policy
    r = reward_array(r)
    p = pol.probs()
    lp, lr = pol.log_probs(), ref.log_probs()
    log_ratio = np.where(pol.support, lp, 0.0) - np.where(pol.support, lr, 0.0)
    g_pi = inst.prompt_dist[:, None] * eta * (r - beta * (log_ratio + 1.0))
    g_pi = np.where(pol.support, g_pi, 0.0)
    return np.where(pol.support, p * (g_pi - np.sum(p * g_pi, axis=1, keepdims=True)), 0.0)


def t_adv(pol, inst, base, data, cls, beta, eta, tol=INNER_TOL, r0=None, max_iter=200_000):
    """``min_r phi(pol, r)`` over the box class; returns ``(value, r_adv)``.

    The objective is convex in ``r`` so the returned value is the global
    minimum up to the first-order tolerance ``tol``.
    """
    if not tol > 0:
        raise InputError("tol must be positive")
    _check_inputs(inst, base, beta, eta)
    check_support(pol, inst.reference_policy)
    lo, hi = cls.bounds(inst.K, inst.M)
    c = _linear_coef(pol, base, inst.prompt_dist, eta)
    res = projected_descent(
        lambda r: float(np.sum(c * r)) + mle_loss(r, data),
        lambda r: c + mle_gradient(r, data),
        (lo + hi) / 2 if r0 is None else r0,
        lo,
        hi,
        tol,
        max_iter,
        hess=lambda r: mle_hessian(r, data),
    )
    if not res.converged:
        raise SolverError(
            "inner minimization did not converge",
            {"iterations": res.iterations, "residual": res.residual, "tol": tol},
        )
    kl_term = eta * beta * float(np.dot(inst.prompt_dist, kl_rows(pol, inst.reference_policy)))
    return res.value - kl_term, res.x


def minimax_objective(r, inst, base, data, beta, eta):
    """``eta * E_{x~d0}[ -E_base[r(x,.)] + beta * log Z_r(x) ] + L_D(r)``."""
    r = reward_array(r)
    _, log_z = optimal_kl_policy(r, inst.reference_policy, beta)
    lin = -np.sum(base.probs() * r, axis=1) + beta * log_z
    return float(eta * np.dot(inst.prompt_dist, lin) + mle_loss(r, data))


def minimax_gradient(r, inst, base, data, beta, eta):
    r = reward_array(r)
    pi_r, _ = optimal_kl_policy(r, inst.reference_policy, beta)
    return eta * inst.prompt_dist[:, None] * (pi_r.probs() - base.probs()) + mle_gradient(r, data)


def solve_minimax(inst, base, data, cls, beta, eta, tol=INNER_TOL, r0=None, max_iter=200_000, keep_history=False):
    """Minimize the closed-form minimax objective over the box class.

    Returns a :class:`SolveReport` whose ``recovered_policy`` is the
    KL-regularized optimal policy of the minimizing reward.
    """
    if not tol > 0:
        raise InputError("tol must be positive")
    _check_inputs(inst, base, beta, eta)
    lo, hi = cls.bounds(inst.K, inst.M)
    res = projected_descent(
        lambda r: minimax_objective(r, inst, base, data, beta, eta),
        lambda r: minimax_gradient(r, inst, base, data, beta, eta),
        (lo + hi) / 2 if r0 is None else r0,
        lo,
        hi,
        tol,
        max_iter,
        keep_history,
    )
    if not res.converged:
        raise SolverError(
            "minimax descent did not converge",
            {"iterations": res.iterations, "residual": res.residual, "tol": tol},
        )
    pi_hat, _ = optimal_kl_policy(res.x, inst.reference_policy, beta)
    report = SolveReport(
        minimax_value=res.value,
        recovered_policy=pi_hat,
        adversarial_reward=res.x,
        iterations={"minimax": res.iterations},
        inner_tolerance=tol,
        base_policy=base,
    )
    if keep_history:
        report.iterations["history"] = res.history
    return report


def solve_maximin(
    inst, base, data, cls, beta, eta, tol=INNER_TOL, outer_tol=OUTER_TOL, init=None, max_outer=20_000
):
    """Ascent on ``T_adv`` over policies sharing the reference support.

    Each step solves the inner reward problem (warm-started) and moves the
    log-policy along ``r_adv - beta * log(pi / ref)``, the mirror-ascent
    direction of ``phi``; the step is halved until ``T_adv`` increases
    sufficiently. Stops when that direction, centred under ``pi`` and
    weighted by ``pi``, is below ``outer_tol`` everywhere, or when the
    closed-form best response to the current adversarial reward brackets the
    maximin value to within ``outer_tol``. At a kink of ``T_adv`` the ascent can
    stall; the report then carries ``status="stalled"`` and the value is still
    a lower bound on the maximin.
    """
    _check_inputs(inst, base, beta, eta)
    ref = inst.reference_policy
    pol = ref if init is None else init
    check_support(pol, ref)
    pol = TabularPolicy(np.where(ref.support, pol.log_probs(), 0.0), ref.support)
    value, r = t_adv(pol, inst, base, data, cls, beta, eta, tol)
    inner_calls = 1
    residual = bracket = math.nan
    if eta == 0:
        # phi no longer depends on the policy
        return SolveReport(maximin_value=value, maximin_policy=pol, recovered_policy=pol, adversarial_reward=r,
                           iterations={"outer": 0, "inner_calls": 1}, inner_tolerance=tol,
                           outer_tolerance=outer_tol, base_policy=base)

    lr = np.where(ref.support, ref.log_probs(), 0.0)
    step = 1.0 / beta
    outer = 0
    status = "iteration_cap"
    cuts = [r]
    while outer < max_outer:
        p = pol.probs()
        direction = np.where(ref.support, r - beta * (pol.log_probs() - lr), 0.0)
        centred = direction - np.sum(p * direction, axis=1, keepdims=True)
        residual = float(np.max(np.abs(p * centred)))
        # any reward gives an upper bound on the maximin value through the closed-form best response
        bracket = minimax_objective(r, inst, base, data, beta, eta) - value
        if residual <= outer_tol:
            status = "stationary"
            break
        if bracket <= outer_tol:
            status = "bracketed"
            break
        slope = float(np.sum(eta * inst.prompt_dist[:, None] * p * centred * direction))
        outer += 1
        step = min(step * 2.0, 1.0 / beta)
        while step >= 1e-14:
            cand = TabularPolicy(pol.logits + step * centred, ref.support)
            v_new, r_new = t_adv(cand, inst, base, data, cls, beta, eta, tol, r0=r)
            inner_calls += 1
            if v_new >= value + 1e-4 * step * slope:
                break
            step *= 0.5
        if step < 1e-14:
            # no ascent along the envelope direction: a kink of T_adv
            status = "stalled"
            break
        cuts.append(r_new)
        pol, value, r = cand, v_new, r_new
    if status == "stalled":
        pol, value, r, bracket, polish = _cutting_plane(
            inst, base, data, cls, beta, eta, tol, outer_tol, cuts, pol, value, r
        )
        inner_calls += polish
        if bracket <= outer_tol:
            status = "bracketed"
    if status == "iteration_cap":
        raise SolverError(
            "maximin ascent hit its iteration cap", {"outer": outer, "residual": residual, "bracket": bracket}
        )
    return SolveReport(
        maximin_value=value,
        maximin_policy=pol,
        recovered_policy=pol,
        adversarial_reward=r,
        iterations={
            "outer": outer,
            "inner_calls": inner_calls,
            "outer_residual": residual,
            "bracket": bracket,
            "status": status,
        },
        inner_tolerance=tol,
        outer_tolerance=outer_tol,
        base_policy=base,
    )


def project_simplex(v):
    """Euclidean projection onto the probability simplex."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1.0), 0.0)


def _cutting_plane(inst, base, data, cls, beta, eta, tol, outer_tol, cuts, pol, value, r, max_cuts=500):
    """Polish a stalled ascent with cutting planes on ``T_adv``.

    Every inner minimizer ``r_j`` met so far gives an upper model
    ``phi(pi, r_j) >= T_adv(pi)``. The best policy against the pointwise minimum
    of these models is ``pi_{r_bar}`` with ``r_bar = sum_j lam_j r_j``, where
    ``lam`` minimizes the dual of the model over the simplex; its value is an
    upper bound on the maximin. The policy is evaluated exactly, its inner
    minimizer becomes the next cut, and the loop stops once the best value
    found is within ``outer_tol`` of the bound.
    """
    ref, d0, b = inst.reference_policy, inst.prompt_dist, base.probs()
    lam = np.ones(1)
    bracket = math.inf
    calls = 0
    for _ in range(max_cuts):
        stack = np.array(cuts)
        losses = np.array([mle_loss(q, data) for q in stack])
        lam = np.concatenate([lam, np.zeros(len(cuts) - len(lam))])

        def model(l):
            rb = np.tensordot(l, stack, axes=1)
            _, log_z = optimal_kl_policy(rb, ref, beta)
            return float(l @ losses + eta * np.dot(d0, -np.sum(b * rb, axis=1) + beta * log_z))

        def model_grad(l):
            rb = np.tensordot(l, stack, axes=1)
            pi_rb, _ = optimal_kl_policy(rb, ref, beta)
            w = eta * d0[:, None] * (pi_rb.probs() - b)
            return losses + np.tensordot(stack, w, axes=([1, 2], [0, 1]))

        res = projected_descent(model, model_grad, lam, None, None, tol=1e-12, max_iter=20_000,
                                project=project_simplex)
        lam = res.x
        r_bar = np.tensordot(lam, stack, axes=1)
        upper = min(res.value, minimax_objective(r_bar, inst, base, data, beta, eta))
        cand, _ = optimal_kl_policy(r_bar, ref, beta)
        v, r_new = t_adv(cand, inst, base, data, cls, beta, eta, tol, r0=r_bar)
        calls += 1
        if v > value:
            pol, value, r = cand, v, r_new
        bracket = upper - value
        if bracket <= outer_tol:
            break
        cuts.append(r_new)
    return pol, value, r, bracket, calls


def duality_gap(inst, base, data, cls, beta, eta, tol=INNER_TOL, outer_tol=OUTER_TOL, certify_tol=1e-4):
    """Run both solvers and certify ``|maximin - minimax| <= certify_tol``.

    Also evaluates ``T_adv`` at the minimax side's recovered policy
    (``transfer_value``), which should attain the maximin value.
    """
    mm = solve_minimax(inst, base, data, cls, beta, eta, tol)
    mx = solve_maximin(inst, base, data, cls, beta, eta, tol, outer_tol)
    transfer, _ = t_adv(mm.recovered_policy, inst, base, data, cls, beta, eta, tol, r0=mm.adversarial_reward)
    report = SolveReport(
        maximin_value=mx.maximin_value,
        minimax_value=mm.minimax_value,
        duality_gap=abs(mx.maximin_value - mm.minimax_value),
        recovered_policy=mm.recovered_policy,
        adversarial_reward=mm.adversarial_reward,
        iterations={"minimax": mm.iterations["minimax"], **mx.iterations},
        inner_tolerance=tol,
        outer_tolerance=outer_tol,
        transfer_value=transfer,
        maximin_policy=mx.maximin_policy,
        base_policy=base,
    )
    if report.duality_gap > certify_tol or transfer < mx.maximin_value - certify_tol:
        raise CertificationError(
            f"duality gap {report.duality_gap:.3e} exceeds {certify_tol:.1e}",
            {"report": report.to_dict()},
        )
    return report


@dataclass(frozen=True)
class TheoryHyperparams:
    eta: float
    beta: float
    epsilon: float
    log_cover: float
    iota: float
    N: int
    delta: float
    R: float
    variant: str = "scaled"


def box_log_cover(epsilon, R, K, M):
    """Log of the sup-norm ``epsilon``-covering number of ``[0, R]^(K x M)`` (grid cover)."""
    return K * M * math.log(max(1, math.ceil(R / (2 * epsilon))))


def theory_hyperparams(N, delta, R, K, M, variant="scaled"):
    """Parameter schedule of the suboptimality bound.

    ``variant="scaled"`` uses ``eta = (1 + e^R)^-2 * sqrt(24 log(N_eps / delta) / N)``;
    ``variant="unscaled"`` drops the ``(1 + e^R)^-2`` factor.
    """
    if N < 1:
        raise InputError("N must be at least 1")
    if not 0 < delta < 1 / math.e:
        raise InputError("delta must lie in (0, 1/e)")
    if not R > 0:
        raise InputError("R must be positive")
    if variant not in ("scaled", "unscaled"):
        raise InputError("variant must be 'scaled' or 'unscaled'")
    eps = 1.0 / (6.0 * (1.0 + math.exp(R)) * N)
    log_cover = box_log_cover(eps, R, K, M)
    log_term = log_cover + math.log(1.0 / delta)
    eta = math.sqrt(24.0 * log_term / N)
    if variant == "scaled":
        eta /= (1.0 + math.exp(R)) ** 2
    return TheoryHyperparams(eta, 1.0 / math.sqrt(N), eps, log_cover, math.sqrt(log_term), int(N), delta, R, variant)


__all__ = [
    "RewardClassSpec",
    "RewardTable",
    "SolveReport",
    "TheoryHyperparams",
    "duality_gap",
    "minimax_gradient",
    "minimax_objective",
    "phi",
    "policy_envelope_gradient",
    "projected_descent",
    "solve_maximin",
    "solve_minimax",
    "t_adv",
    "theory_hyperparams",
]
