"""Diagnostics and studies: coverage, prompt shift, sample-size sweeps, and the
three-response, overoptimization and MLE-concentration experiments."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linprog

from .adversarial import (
    RewardClassSpec,
    box_log_cover,
    projected_descent,
    solve_maximin,
    solve_minimax,
    theory_hyperparams,
)
from .direct_opt import TrainerConfig, dpo_loss, rpo_loss, train
from .errors import CertificationError, InputError, RPOLabError
from .instances import feature_instance, figure1_dataset, figure1_instance, multiscale_instance
from .policy import (
    TabularPolicy,
    chosen_policy,
    gap,
    kl_rows,
    optimal_policy,
    per_prompt_gap,
    value,
)
from .preference import (
    expected_hellinger_sq,
    generate_dataset,
    mle_gradient,
    mle_hessian,
    mle_loss,
    nested_dataset,
)
from .rng import make_rng

# ---------------------------------------------------------------------------
# coverage


@dataclass(frozen=True)
class CoverageEstimate:
    """``value`` is exact for ``mode`` in ``{"grid", "uncovered", "zero"}``; for
    ``"sampled"`` it is a lower bound of the supremum."""

    value: float
    mode: str
    argmax: np.ndarray | None = None

    @property
    def is_lower_bound(self):
        return self.mode == "sampled"

    def __float__(self):
        return float(self.value)


def _coverage_terms(inst, pol, base):
    """Numerator vector ``c`` and denominator form ``Q`` in terms of ``g = r* - r``."""
    K, M = inst.K, inst.M
    c = (inst.prompt_dist[:, None] * (pol.probs() - base.probs())).ravel()
    mu = inst.data_distribution()
    Q = np.zeros((K * M, K * M))
    for x, a1, a0 in zip(*np.nonzero(mu)):
        e = np.zeros(K * M)
        e[x * M + a1] += 1.0
        e[x * M + a0] -= 1.0
        Q += mu[x, a1, a0] * np.outer(e, e)
    return c, Q


def _uncovered_direction(c, Q, g_lo, g_hi):
    """Max of ``c.g`` over the box with every compared difference of ``g`` held at 0."""
    w, V = np.linalg.eigh(Q)
    rows = V[:, w > 1e-12 * max(1.0, w.max(initial=0.0))].T
    res = linprog(
        -c,
        A_eq=rows if rows.size else None,
        b_eq=np.zeros(len(rows)) if rows.size else None,
        bounds=list(zip(g_lo, g_hi)),
        method="highs",
    )
    if res.status != 0:
        return 0.0, None
    return float(-res.fun), res.x


def _ratio(c, Q, G):
    num = G @ c
    den2 = np.einsum("ij,jk,ik->i", G, Q, G)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den2 > 1e-300, num / np.sqrt(np.maximum(den2, 1e-300)), -np.inf)
    return out


def coverage_coefficient(inst, cls, pol, base, num_samples=2000, refine=True, seed=0, grid_step=0.01):
    """Partial coverage coefficient of the data law for ``pol`` against ``base``.

    The ratio of the mean reward-difference error under ``d0 x pol x base`` to
    its root-mean-square under the data law, maximized over the class and
    floored at zero. All expectations are exact sums. The method:

    * zero numerator (``pol == base``) gives 0 exactly;
    * a linear program over the directions the data cannot see detects an
      uncovered direction, giving ``+inf``;
    * single-prompt instances with ``M <= 4`` are searched exhaustively on a
      grid of reward differences (``mode="grid"``);
    * otherwise random class members are scored and the best few refined by
      projected gradient ascent; the result is a lower bound (``mode="sampled"``).
    """
    K, M = inst.K, inst.M
    lo, hi = cls.bounds(K, M)
    rstar = inst.true_reward.values
    c, Q = _coverage_terms(inst, pol, base)
    if not np.any(np.abs(c) > 0):
        return CoverageEstimate(0.0, "zero")
    g_lo, g_hi = (rstar - hi).ravel(), (rstar - lo).ravel()
    top, g_dir = _uncovered_direction(c, Q, g_lo, g_hi)
    if top > 1e-12:
        return CoverageEstimate(math.inf, "uncovered", None if g_dir is None else g_dir.reshape(K, M))

    if K == 1 and M <= 4:
        best, arg = _coverage_grid(c, Q, rstar.ravel(), float(lo.min()), float(hi.max()), grid_step, lo, hi)
        return CoverageEstimate(max(0.0, best), "grid", arg)

    rng = make_rng(seed, 303)
    G = rng.uniform(g_lo, g_hi, size=(num_samples, K * M))
    vals = _ratio(c, Q, G)
    order = np.argsort(vals)[::-1]
    best, arg = float(vals[order[0]]), G[order[0]]
    if refine:
        for i in order[:5]:
            g, v = _ascend_ratio(c, Q, G[i], g_lo, g_hi)
            if v > best:
                best, arg = v, g
    return CoverageEstimate(max(0.0, best), "sampled", arg.reshape(K, M))


def _ascend_ratio(c, Q, g, g_lo, g_hi, iters=500):
    def f(g):
        return float(_ratio(c, Q, g[None])[0])

    v = f(g)
    step = 1.0
    for _ in range(iters):
        s2 = float(g @ Q @ g)
        if s2 <= 1e-300:
            break
        s = math.sqrt(s2)
        grad = c / s - (c @ g) * (Q @ g) / s**3
        while step > 1e-12:
            gn = np.clip(g + step * grad, g_lo, g_hi)
            vn = f(gn)
            if vn > v:
                break
            step *= 0.5
        if step <= 1e-12:
            break
        g, v = gn, vn
        step *= 2.0
    return g, v


def _coverage_grid(c, Q, rstar, lo_s, hi_s, step, lo, hi):
    """Exhaustive search on single-prompt instances.

    Both the numerator and the denominator depend on ``r`` only through its
    differences from the first response, so the grid runs over those
    differences and keeps the ones realizable inside the box.
    """
    M = rstar.size
    width = hi_s - lo_s
    axis = np.round(np.arange(-width, width + step / 2, step), 12)
    best, arg = -np.inf, None
    for u0 in axis if M == 4 else [None]:
        mesh = np.meshgrid(*([axis] * (M - 2 if M == 4 else M - 1)), indexing="ij")
        diffs = np.stack([m.ravel() for m in mesh], axis=1)
        if u0 is not None:
            diffs = np.column_stack([np.full(len(diffs), u0), diffs])
        R_rows = np.column_stack([np.zeros(len(diffs)), diffs])
        # shift so the smallest entry sits at the lower bound; keep rows inside the box
        R_rows = R_rows - R_rows.min(axis=1, keepdims=True) + lo_s
        ok = np.all((R_rows >= lo.ravel() - 1e-12) & (R_rows <= hi.ravel() + 1e-12), axis=1)
        G = rstar[None] - R_rows[ok]
        if len(G) == 0:
            continue
        vals = _ratio(c, Q, G)
        i = int(np.argmax(vals))
        if vals[i] > best:
            best, arg = float(vals[i]), G[i]
    return best, None if arg is None else arg.reshape(1, M)


# ---------------------------------------------------------------------------
# prompt shift


def density_ratio(d0, d1):
    """``sup_x d1(x) / d0(x)`` with ``0/0 = 0`` and ``+inf`` where only ``d1`` has mass."""
    d0, d1 = np.asarray(d0, dtype=float), np.asarray(d1, dtype=float)
    if d0.shape != d1.shape:
        raise InputError("prompt laws must have the same length")
    if np.any(d1[d0 == 0] > 0):
        return math.inf
    pos = d0 > 0
    return float(np.max(d1[pos] / d0[pos], initial=0.0))


@dataclass(frozen=True)
class ShiftCheck:
    shifted_gap: float
    bound: float
    ratio: float
    unshifted_gap: float

    @property
    def slack(self):
        return self.bound - self.shifted_gap


def prompt_shift_check(inst, pol_hat, d1, slack=1e-9):
    """Compare the gap to the per-prompt optimum under a shifted prompt law ``d1``
    with the density ratio times the gap under ``d0``.

    Per-prompt gaps against the optimal policy are nonnegative, so the bound
    holds pointwise; a violation beyond ``slack`` raises :class:`CertificationError`.
    """
    d1 = np.asarray(d1, dtype=float)
    if d1.shape != (inst.K,) or d1.min() < 0 or not math.isclose(d1.sum(), 1.0, abs_tol=1e-9):
        raise InputError("d1 must be a probability vector over prompts")
    per_x = per_prompt_gap(pol_hat, optimal_policy(inst), inst)
    shifted = float(np.dot(d1, per_x))
    base_gap = float(np.dot(inst.prompt_dist, per_x))
    ratio = density_ratio(inst.prompt_dist, d1)
    bound = math.inf if math.isinf(ratio) else ratio * base_gap
    out = ShiftCheck(shifted, bound, ratio, base_gap)
    if shifted > bound + slack:
        raise CertificationError("prompt-shift bound violated", asdict(out))
    return out


# ---------------------------------------------------------------------------
# sample-size sweep


def rate_instance():
    """Default well-covered ``K=4, M=6`` instance for the sample-size sweep."""
    return multiscale_instance(K=4, M=6, R=1.5, top=1.425, min_gap=1.0 / 256, max_gap=1.4, pairs="star")


SWEEP_METHODS = ("maximin", "minimax", "rpo", "dpo")
SWEEP_COLUMNS = ("N", "seed", "gap", "method", "eta", "beta", "status")


@dataclass(frozen=True)
class SweepConfig:
    N_grid: tuple = (64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384)
    seeds_per_N: int = 20
    instance: object = None
    method: str = "minimax"
    hyper: str = "theory"
    delta: float = 0.1
    beta: float = 0.1
    eta: float = 0.005
    base: str = "chosen"
    seed: int = 0
    learning_rate: float = 0.1
    steps: int = 500
    tol: float = 1e-8
    bootstrap: int = 200

    def __post_init__(self):
        grid = tuple(int(n) for n in self.N_grid)
        if len(grid) < 1 or any(n < 1 for n in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise InputError("N_grid must be strictly increasing positive counts")
        object.__setattr__(self, "N_grid", grid)
        if self.seeds_per_N < 1:
            raise InputError("seeds_per_N must be at least 1")
        if self.method not in SWEEP_METHODS:
            raise InputError(f"method must be one of {SWEEP_METHODS}")
        if self.hyper not in ("theory", "fixed"):
            raise InputError("hyper must be 'theory' or 'fixed'")
        if self.base not in ("chosen", "ref"):
            raise InputError("base must be 'chosen' or 'ref'")


@dataclass(frozen=True)
class SweepCell:
    N: int
    seed: int
    gap: float
    method: str
    eta: float
    beta: float
    status: str


@dataclass
class SweepResult:
    cells: list
    medians: dict
    quantiles: dict
    slope: float
    intercept: float
    slope_ci: tuple
    failures: int
    comparator_kl: float

    def gaps(self, N):
        return np.array([c.gap for c in self.cells if c.N == N and c.status == "ok"])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for c in self.cells:
            w.writerow([c.N, c.seed, repr(float(c.gap)), c.method, repr(float(c.eta)), repr(float(c.beta)), c.status])
        return buf.getvalue()

    def summary(self):
        return {
            "medians": {str(k): v for k, v in self.medians.items()},
            "quantiles": {str(k): list(v) for k, v in self.quantiles.items()},
            "slope": self.slope,
            "intercept": self.intercept,
            "slope_ci": list(self.slope_ci),
            "failures": self.failures,
            "comparator_kl": self.comparator_kl,
        }


def gnuplot_script(csv_name, title="gap vs N"):
    """Log-log plot of per-cell gaps and their per-N medians."""
    return (
        "set datafile separator ','\n"
        "set logscale xy\n"
        "set key top right\n"
        f"set title '{title}'\n"
        "set xlabel 'N'\n"
        "set ylabel 'gap'\n"
        f"plot '{csv_name}' every ::1 using 1:3 with points pt 7 ps 0.4 title 'cells', \\\n"
        f"     '{csv_name}' every ::1 using 1:3 smooth unique with lines title 'mean'\n"
    )


def trace_gnuplot_script(csv_name, column="mean_chosen_logprob"):
    return (
        "set datafile separator ','\n"
        "set key autotitle columnhead\n"
        "set xlabel 'step'\n"
        f"set ylabel '{column}'\n"
        f"plot '{csv_name}' using 'step':'{column}' with lines\n"
    )


def _fit_slope(Ns, meds):
    X = np.log(np.asarray(Ns, dtype=float))
    Y = np.log(np.asarray(meds, dtype=float))
    slope, intercept = np.polyfit(X, Y, 1)
    return float(slope), float(intercept)


def run_cell(inst, cfg, N, s):
    """One sweep cell: draw a dataset of size ``N`` and return ``(gap, eta, beta)``."""
    data = nested_dataset(inst, N, cfg.seed, s)
    if cfg.hyper == "theory":
        hp = theory_hyperparams(N, cfg.delta, inst.R, inst.K, inst.M)
        eta, beta = hp.eta, hp.beta
    else:
        eta, beta = cfg.eta, cfg.beta
    base = chosen_policy(data, inst) if cfg.base == "chosen" else inst.reference_policy
    cls = RewardClassSpec(inst.R)
    if cfg.method == "minimax":
        pol = solve_minimax(inst, base, data, cls, beta, eta, cfg.tol).recovered_policy
    elif cfg.method == "maximin":
        pol = solve_maximin(inst, base, data, cls, beta, eta, cfg.tol).maximin_policy
    else:
        tc = TrainerConfig(
            beta=beta, eta=eta, learning_rate=cfg.learning_rate, steps=cfg.steps, baseline=base, log_every=cfg.steps or 1
        )
        pol, _ = train(inst, data, tc, cfg.method)
    return gap(pol, optimal_policy(inst), inst), eta, beta


def gap_sweep(cfg):
    """Gap to the per-prompt optimum over a grid of sample sizes and seeds.

    Cells are keyed and merged by ``(N, seed)``; each draws its data from its own
    generator stream, so cells are independent of evaluation order. A failing
    cell is recorded with its error class and excluded from the fit.
    """
    inst = rate_instance() if cfg.instance is None else cfg.instance
    cells = []
    for N in cfg.N_grid:
        for s in range(cfg.seeds_per_N):
            try:
                g, eta, beta = run_cell(inst, cfg, N, s)
                status = "ok" if math.isfinite(g) else "nonfinite"
            except RPOLabError as e:
                g, eta, beta, status = math.nan, math.nan, math.nan, f"error:{type(e).__name__}"
            cells.append(SweepCell(N, s, float(g), cfg.method, float(eta), float(beta), status))

    ok = {N: np.array([c.gap for c in cells if c.N == N and c.status == "ok"]) for N in cfg.N_grid}
    medians = {N: float(np.median(v)) for N, v in ok.items() if len(v)}
    quantiles = {N: tuple(float(q) for q in np.quantile(v, [0.1, 0.25, 0.75, 0.9])) for N, v in ok.items() if len(v)}
    fit_N = [N for N in cfg.N_grid if N in medians and medians[N] > 0]
    slope = intercept = math.nan
    ci = (math.nan, math.nan)
    if len(fit_N) >= 2:
        slope, intercept = _fit_slope(fit_N, [medians[N] for N in fit_N])
        rng = make_rng(cfg.seed, 404)
        boot = []
        for _ in range(cfg.bootstrap):
            meds = [np.median(rng.choice(ok[N], size=len(ok[N]), replace=True)) for N in fit_N]
            if min(meds) > 0:
                boot.append(_fit_slope(fit_N, meds)[0])
        if boot:
            ci = (float(np.quantile(boot, 0.025)), float(np.quantile(boot, 0.975)))
    pi_star = optimal_policy(inst)
    comp_kl = float(np.dot(inst.prompt_dist, kl_rows(pi_star, inst.reference_policy)))
    failures = sum(c.status != "ok" for c in cells)
    return SweepResult(cells, medians, quantiles, slope, intercept, ci, failures, comp_kl)


# ---------------------------------------------------------------------------
# three-response study


def simplex_grid(step=0.01):
    """All points of the 2-simplex whose coordinates are multiples of ``step``."""
    n = int(round(1.0 / step))
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    keep = i + j <= n
    i, j = i[keep], j[keep]
    return np.column_stack([i, j, n - i - j]) / n


def _grid_losses(P, fn):
    out = np.empty(len(P))
    for k, p in enumerate(P):
        out[k] = fn(TabularPolicy.from_probs([p]))
    return out


@dataclass
class Figure1Report:
    rows: list
    certificate: dict
    config: dict

    def to_dict(self):
        return {"rows": self.rows, "certificate": self.certificate, "config": self.config}

    def row(self, name):
        return next(r for r in self.rows if r["policy"] == name)


def figure1_study(eta_grid=(0.005,), beta=1.0, steps=2000, learning_rate=0.1, delta=1e-4, grid_step=0.01):
    """Three responses ``(a, b, c)`` with one observed comparison ``a > b``.

    Rows: the reference policy, the trained DPO policy, two exact DPO
    minimizer candidates that differ in the mass on ``c``, and per ``eta`` the
    trained RPO policy and the RPO grid minimizer. The certificate re-derives
    the DPO near-minimizer set from the simplex grid.
    """
    inst = figure1_instance()
    data = figure1_dataset()
    ref = inst.reference_policy
    base = chosen_policy(data, inst, smoothing=0.0)
    d0 = inst.prompt_dist

    def row(name, pol, loss=None, eta=None):
        p = pol.probs()[0]
        out = {"policy": name, "probs": [float(v) for v in p], "J": value(pol, inst)}
        if loss is not None:
            out["loss"] = float(loss)
        if eta is not None:
            out["eta"] = float(eta)
        return out

    rows = [row("ref", ref)]
    dpo_cfg = TrainerConfig(beta=beta, learning_rate=learning_rate, steps=steps, baseline=base, log_every=max(steps, 1))
    pol_dpo, _ = train(inst, data, dpo_cfg, "dpo")
    rows.append(row("dpo_trained", pol_dpo, dpo_loss(pol_dpo, ref, data, beta)))

    degenerate = [(0.5 - delta, delta, 0.5), (1.0 - 2 * delta, delta, delta)]
    deg_losses = []
    for k, p in enumerate(degenerate):
        pol = TabularPolicy.from_probs([p])
        deg_losses.append(dpo_loss(pol, ref, data, beta))
        rows.append(row(f"dpo_minimizer_{k + 1}", pol, deg_losses[-1]))

    P = simplex_grid(grid_step)
    grid_dpo = _grid_losses(P, lambda pol: dpo_loss(pol, ref, data, beta))
    near = grid_dpo <= grid_dpo.min() + 1e-3
    for eta in eta_grid:
        cfg = TrainerConfig(beta=beta, eta=eta, learning_rate=learning_rate, steps=steps, baseline=base,
                            log_every=max(steps, 1))
        pol_rpo, _ = train(inst, data, cfg, "rpo")
        rows.append(row("rpo_trained", pol_rpo, rpo_loss(pol_rpo, ref, base, data, d0, beta, eta).total, eta))
        grid_rpo = _grid_losses(P, lambda pol: rpo_loss(pol, ref, base, data, d0, beta, eta).total)
        k = int(np.argmin(grid_rpo))
        rows.append(row("rpo_grid", TabularPolicy.from_probs([P[k]]), grid_rpo[k], eta))

    certificate = {
        "delta": delta,
        "degenerate_points": [list(p) for p in degenerate],
        "degenerate_losses": [float(v) for v in deg_losses],
        "degenerate_spread": float(max(deg_losses) - min(deg_losses)),
        "grid_step": grid_step,
        "grid_min_loss": float(grid_dpo.min()),
        "near_minimizers": int(near.sum()),
        "near_minimizer_max_c": float(P[near, 2].max()),
        "near_minimizer_min_c": float(P[near, 2].min()),
    }
    config = {"eta_grid": list(eta_grid), "beta": beta, "steps": steps, "learning_rate": learning_rate}
    return Figure1Report(rows, certificate, config)


# ---------------------------------------------------------------------------
# overoptimization study


@dataclass(frozen=True)
class OveroptConfig:
    K: int = 4
    M: int = 6
    d: int = 2
    N: int = 200
    seeds: int = 20
    R: float = 1.0
    beta: float = 0.1
    eta: float = 0.005
    learning_rate: float = 0.1
    steps: int = 500
    eta_grid: tuple = (0.0, 0.005, 0.05, 0.5)
    feature_scale: float = 1.0
    log_every: int = 10

    def __post_init__(self):
        if not self.d < self.M:
            raise InputError("the feature-limited family needs d < M")
        if self.seeds < 1 or self.N < 1:
            raise InputError("seeds and N must be positive")


@dataclass
class OveroptReport:
    config: OveroptConfig
    dpo_final: np.ndarray
    rpo_final: np.ndarray
    eta_final: np.ndarray  # (seeds, len(eta_grid))
    eta0_matches_dpo: bool
    median_seed: int
    traces: dict = field(default_factory=dict)

    @property
    def fraction_rpo_ge_dpo(self):
        return float(np.mean(self.rpo_final >= self.dpo_final))

    @property
    def median_seed_curve(self):
        return self.eta_final[self.median_seed]

    @property
    def median_seed_monotone(self):
        return bool(np.all(np.diff(self.median_seed_curve) >= 0))

    def to_dict(self):
        return {
            "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.config).items()},
            "dpo_final_mean_chosen_logprob": self.dpo_final.tolist(),
            "rpo_final_mean_chosen_logprob": self.rpo_final.tolist(),
            "eta_grid_final": self.eta_final.tolist(),
            "fraction_rpo_ge_dpo": self.fraction_rpo_ge_dpo,
            "eta0_matches_dpo": self.eta0_matches_dpo,
            "median_seed": self.median_seed,
            "median_seed_curve": self.median_seed_curve.tolist(),
            "median_seed_monotone": self.median_seed_monotone,
        }


def overopt_study(cfg=None, keep_traces=False):
    """Paired DPO / RPO training on feature-limited instances.

    Per seed: a fresh instance and dataset; DPO and RPO share every setting
    except ``eta``. The ``eta_grid`` arms use the RPO trainer; the ``eta = 0``
    arm must reproduce the DPO trace exactly. The median seed is the one whose
    DPO final chosen log-probability is the (lower) median.
    """
    cfg = OveroptConfig() if cfg is None else cfg
    dpo_final, rpo_final, eta_final = [], [], []
    eta0_match = True
    traces = {}
    for s in range(cfg.seeds):
        inst = feature_instance(cfg.K, cfg.M, cfg.d, cfg.R, seed=s, feature_scale=cfg.feature_scale)
        data = generate_dataset(inst, cfg.N, make_rng(s, 7))

        def tc(eta):
            return TrainerConfig(beta=cfg.beta, eta=eta, learning_rate=cfg.learning_rate, steps=cfg.steps,
                                 log_every=cfg.log_every, seed=s)

        _, tr_dpo = train(inst, data, tc(cfg.eta), "dpo")
        _, tr_rpo = train(inst, data, tc(cfg.eta), "rpo")
        dpo_final.append(tr_dpo.rows[-1].mean_chosen_logprob)
        rpo_final.append(tr_rpo.rows[-1].mean_chosen_logprob)
        arms = []
        for eta in cfg.eta_grid:
            _, tr = train(inst, data, tc(eta), "rpo")
            arms.append(tr.rows[-1].mean_chosen_logprob)
            if eta == 0:
                eta0_match &= tr.to_csv() == tr_dpo.to_csv()
        eta_final.append(arms)
        if keep_traces:
            traces[s] = {"dpo": tr_dpo, "rpo": tr_rpo}
    dpo_final = np.array(dpo_final)
    order = np.argsort(dpo_final, kind="stable")
    median_seed = int(order[(len(order) - 1) // 2])
    return OveroptReport(cfg, dpo_final, np.array(rpo_final), np.array(eta_final), bool(eta0_match), median_seed,
                         traces)


# ---------------------------------------------------------------------------
# MLE concentration


def fit_mle(data, cls, K, M, tol=1e-9):
    """Maximum-likelihood reward table over the box class."""
    lo, hi = cls.bounds(K, M)
    res = projected_descent(
        lambda r: mle_loss(r, data),
        lambda r: mle_gradient(r, data),
        (lo + hi) / 2,
        lo,
        hi,
        tol,
        hess=lambda r: mle_hessian(r, data),
    )
    return res.x


@dataclass(frozen=True)
class ConcentrationResult:
    pass_fraction: float
    trials: int
    mean_margin: float
    min_margin: float
    threshold: float
    log_cover: float


def concentration_check(inst, class_sample, N, delta, trials, seed=0, include_mle=True):
    """Monte-Carlo check of the uniform MLE concentration bound.

    For each trial a dataset of size ``N`` is drawn and the bound
    ``L(r*) - L(r) <= -2 E[H^2(r*, r)] + (3 / N) log(N_eps / delta)`` is tested
    for every ``r`` in ``class_sample`` (an ``(S, K, M)`` array, or an integer
    count of uniform draws from the box) and, with ``include_mle``, for the
    box-constrained MLE of that dataset. A trial passes when every ``r`` does.
    The margin reported is the smallest slack of the trial.
    """
    if not 0 < delta < 1 / math.e:
        raise InputError("delta must lie in (0, 1/e)")
    K, M, R = inst.K, inst.M, inst.R
    cls = RewardClassSpec(R)
    if isinstance(class_sample, (int, np.integer)):
        sample = make_rng(seed, 505).uniform(0.0, R, size=(int(class_sample), K, M))
    else:
        sample = np.asarray(class_sample, dtype=float).reshape(-1, K, M)
    eps = 1.0 / (6.0 * (1.0 + math.exp(R)) * N)
    log_cover = box_log_cover(eps, R, K, M)
    threshold = 3.0 / N * (log_cover + math.log(1.0 / delta))
    mu = inst.data_distribution()
    rstar = inst.true_reward.values
    hell = np.array([expected_hellinger_sq(rstar, r, mu) for r in sample])
    margins = []
    for t in range(trials):
        data = generate_dataset(inst, N, make_rng(seed, 606, t))
        l_star = mle_loss(rstar, data)
        m = [threshold - 2.0 * h - (l_star - mle_loss(r, data)) for r, h in zip(sample, hell)]
        if include_mle:
            r_hat = fit_mle(data, cls, K, M)
            m.append(threshold - 2.0 * expected_hellinger_sq(rstar, r_hat, mu) - (l_star - mle_loss(r_hat, data)))
        margins.append(min(m))
    margins = np.array(margins)
    return ConcentrationResult(
        float(np.mean(margins >= 0)), trials, float(margins.mean()), float(margins.min()), threshold, log_cover
    )
