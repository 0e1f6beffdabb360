"""Self-check suites run by ``rpolab check``: analytic gradients against finite
differences, the KL-regularized closed form, maximin/minimax agreement and the
two-sided sigmoid Lipschitz bounds."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .adversarial import RewardClassSpec, duality_gap, minimax_gradient, minimax_objective
from .direct_opt import dpo_gradient, dpo_loss, rpo_gradient, rpo_loss
from .errors import CertificationError
from .instances import random_instance
from .policy import TabularPolicy, chosen_policy, kl_regularized_value, optimal_kl_policy
from .preference import generate_dataset, mle_gradient, mle_loss, sigmoid, sigmoid_kappa
from .rng import make_rng

FD_STEP = 1e-5


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    cases: int
    worst: float
    tol: float

    def to_dict(self):
        return asdict(self)


def central_difference(f, x, h=FD_STEP):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def relative_error(g, g_fd):
    """``max |g - g_fd| / max |g_fd|`` (denominator floored at 1e-12)."""
    return float(np.max(np.abs(g - g_fd)) / max(np.max(np.abs(g_fd)), 1e-12))


def random_problem(seed):
    """Small random instance, dataset, softmax policy and hyperparameters."""
    rng = make_rng(seed, 11)
    K, M = int(rng.integers(1, 4)), int(rng.integers(2, 6))
    inst = random_instance(K, M, R=float(rng.uniform(0.5, 2.0)), seed=seed)
    N = int(rng.integers(5, 40))
    data = generate_dataset(inst, N, rng)
    pol = TabularPolicy(rng.normal(size=(K, M)), np.ones((K, M), dtype=bool))
    beta, eta = float(rng.uniform(0.1, 2.0)), float(rng.uniform(0.0, 1.0))
    base = chosen_policy(data, inst)
    return inst, data, pol, base, beta, eta


def gradient_errors(seed):
    inst, data, pol, base, beta, eta = random_problem(seed)
    ref, d0 = inst.reference_policy, inst.prompt_dist
    rng = make_rng(seed, 12)
    r = rng.uniform(0.0, inst.R, size=(inst.K, inst.M))

    def at(z):
        return pol.with_params(z)

    errs = {
        "dpo": relative_error(
            dpo_gradient(pol, ref, data, beta), central_difference(lambda z: dpo_loss(at(z), ref, data, beta), pol.params)
        ),
        "rpo": relative_error(
            rpo_gradient(pol, ref, base, data, d0, beta, eta),
            central_difference(lambda z: rpo_loss(at(z), ref, base, data, d0, beta, eta).total, pol.params),
        ),
        "mle": relative_error(mle_gradient(r, data), central_difference(lambda q: mle_loss(q, data), r)),
        "minimax": relative_error(
            minimax_gradient(r, inst, base, data, beta, eta),
            central_difference(lambda q: minimax_objective(q, inst, base, data, beta, eta), r),
        ),
    }
    return errs


def gradient_suite(n=100, seed=0, tol=1e-5):
    worst = max(max(gradient_errors(seed * 100_003 + i).values()) for i in range(n))
    return SuiteResult("gradient", worst <= tol, n, worst, tol)


def closed_form_case(seed, perturbations=1000):
    """Returns ``(best perturbation advantage, |value - beta E log Z|)`` for one draw."""
    rng = make_rng(seed, 13)
    K, M = int(rng.integers(1, 4)), int(rng.integers(2, 7))
    r = rng.uniform(0.0, 1.0, size=(K, M))
    ref = TabularPolicy.from_probs(rng.dirichlet(np.ones(M), size=K))
    beta = float(rng.uniform(0.05, 2.0))
    d = rng.dirichlet(np.ones(K))
    pi_r, log_z = optimal_kl_policy(r, ref, beta)
    v = kl_regularized_value(pi_r, r, ref, beta, d)
    closed = beta * float(np.dot(d, log_z))
    # random mixtures of pi_r with Dirichlet draws, scored in one batch
    lam = rng.uniform(0.0, 1.0, size=(perturbations, 1, 1))
    Q = (1 - lam) * pi_r.probs()[None] + lam * rng.dirichlet(np.ones(M), size=(perturbations, K))
    lref = ref.log_probs()
    with np.errstate(divide="ignore", invalid="ignore"):
        kl = np.where(Q > 0, Q * (np.log(Q) - lref[None]), 0.0).sum(axis=2)
    vals = (np.sum(Q * r[None], axis=2) - beta * kl) @ d
    adv = float(np.max(vals) - v)
    return adv, abs(v - closed)


def closed_form_suite(n=50, perturbations=1000, seed=0, tol=1e-10):
    worst_adv, worst_eq = -np.inf, 0.0
    for i in range(n):
        adv, eq = closed_form_case(seed * 100_003 + i, perturbations)
        worst_adv, worst_eq = max(worst_adv, adv), max(worst_eq, eq)
    return SuiteResult("closed_form", worst_adv <= 0.0 and worst_eq <= tol, n, max(worst_eq, worst_adv), tol)


def duality_case(seed, N=50):
    rng = make_rng(seed, 14)
    K, M = int(rng.integers(1, 3)), int(rng.integers(3, 5))
    inst = random_instance(K, M, seed=seed)
    data = generate_dataset(inst, N, rng)
    base = chosen_policy(data, inst)
    beta, eta = float(rng.uniform(0.2, 1.0)), float(rng.uniform(0.1, 1.0))
    return inst, data, base, beta, eta


def duality_suite(n=20, seed=0, tol=1e-4):
    worst = 0.0
    ok = True
    for i in range(n):
        inst, data, base, beta, eta = duality_case(seed * 100_003 + i)
        try:
            rep = duality_gap(inst, base, data, RewardClassSpec(inst.R), beta, eta, certify_tol=tol)
            worst = max(worst, rep.duality_gap, rep.maximin_value - rep.transfer_value)
        except CertificationError:
            ok = False
            worst = np.inf
    return SuiteResult("duality", ok and worst <= tol, n, worst, tol)


def sigmoid_suite(pairs=100_000, Rs=(0.5, 1.0, 2.0), seed=0):
    """Counts violations of ``kappa |z1 - z2| <= |s(z1) - s(z2)| <= |z1 - z2|`` on ``[-R, R]``."""
    violations = 0
    for j, R in enumerate(Rs):
        rng = make_rng(seed, 15, j)
        z1, z2 = rng.uniform(-R, R, size=(2, pairs))
        d = np.abs(sigmoid(z1) - sigmoid(z2))
        dz = np.abs(z1 - z2)
        violations += int(np.sum(d < sigmoid_kappa(R) * dz) + np.sum(d > dz))
    return SuiteResult("sigmoid", violations == 0, pairs * len(Rs), float(violations), 0.0)


SUITES = {
    "gradient": gradient_suite,
    "closed_form": closed_form_suite,
    "duality": duality_suite,
    "sigmoid": sigmoid_suite,
}


def run_suites(names=None, seed=0):
    return [SUITES[name](seed=seed) for name in (names or SUITES)]


__all__ = ["SUITES", "SuiteResult", "run_suites"]
