"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary) before it
asserts, so a failing criterion is reported rather than hidden.
"""

import json
import math
import time

import numpy as np
import pytest

import oracles
from rpolab import cli
from rpolab.adversarial import RewardClassSpec, duality_gap
from rpolab.analysis import concentration_check, coverage_coefficient, prompt_shift_check
from rpolab.checks import duality_suite, gradient_suite, closed_form_suite, sigmoid_suite
from rpolab.instances import random_instance
from rpolab.policy import TabularPolicy, chosen_policy
from rpolab.preference import generate_dataset
from rpolab.rng import make_rng


def run_cli(args, tmp_path, name):
    out = tmp_path / name
    code = cli.main(args + ["--out", str(out)])
    return code, out


def test_figure1_reproduction(tmp_path, report_criterion):
    t0 = time.perf_counter()
    code, out = run_cli(["figure1", "--seed", "0", "--format", "csv"], tmp_path, "fig1")
    elapsed = time.perf_counter() - t0
    rep = json.loads((out / "figure1.json").read_text())
    rows = {r["policy"]: r for r in rep["rows"]}
    cert = rep["certificate"]

    ref_ok = abs(rows["ref"]["J"] - 0.675) <= 1e-12
    rpo_ok = all(
        int(np.argmax(rows[k]["probs"])) == 0 and rows[k]["probs"][0] >= 0.95 and rows[k]["probs"][2] <= 0.02
        for k in ("rpo_trained", "rpo_grid")
    )
    losses = cert["degenerate_losses"]
    deg_ok = max(losses) - min(losses) <= 1e-3 and max(abs(v) for v in losses) <= 1e-3
    ok = code == 0 and ref_ok and rpo_ok and deg_ok and elapsed < 10
    detail = (
        f"J_ref={rows['ref']['J']:.6f} rpo={rows['rpo_trained']['probs'][0]:.4f}/"
        f"{rows['rpo_trained']['probs'][2]:.4f} losses={losses[0]:.2e},{losses[1]:.2e} {elapsed:.1f}s"
    )
    report_criterion(1, "three-response table", ok, detail)
    assert code == 0
    assert ref_ok and rpo_ok and deg_ok
    assert elapsed < 10


def test_gradient_suite(report_criterion):
    t0 = time.perf_counter()
    res = gradient_suite(n=100, tol=1e-5)
    elapsed = time.perf_counter() - t0
    ok = res.passed and res.cases == 100 and elapsed < 30
    report_criterion(2, "analytic gradients vs central differences", ok, f"worst={res.worst:.2e} {elapsed:.1f}s")
    assert res.passed and res.cases == 100
    assert elapsed < 30


def test_kl_closed_form_suite(report_criterion):
    t0 = time.perf_counter()
    res = closed_form_suite(n=50, perturbations=1000, tol=1e-10)
    elapsed = time.perf_counter() - t0
    ok = res.passed and elapsed < 10
    report_criterion(3, "KL-regularized closed form", ok, f"worst={res.worst:.2e} {elapsed:.1f}s")
    assert res.passed
    assert elapsed < 10


def grid_cases():
    for seed in range(3):
        inst = random_instance(1, 3, seed=100 + seed)
        data = generate_dataset(inst, 20, make_rng(100 + seed, 1))
        yield inst, data, chosen_policy(data, inst), 0.5, 1.0


def test_duality(report_criterion):
    t0 = time.perf_counter()
    res = duality_suite(n=20, tol=1e-4)
    worst_grid = 0.0
    for inst, data, base, beta, eta in grid_cases():
        rep = duality_gap(inst, base, data, RewardClassSpec(inst.R), beta, eta)
        triples = [(t.x, t.a1, t.a0, t.y) for t in data]
        b, ref = base.probs()[0], inst.reference_policy.probs()[0]
        mx, _ = oracles.grid_maximin(b, ref, triples, inst.R, beta, eta)
        mn, _ = oracles.grid_minimax(b, ref, triples, inst.R, beta, eta)
        worst_grid = max(worst_grid, abs(rep.maximin_value - mx), abs(rep.minimax_value - mn))
    elapsed = time.perf_counter() - t0
    ok = res.passed and worst_grid <= 5e-3 and elapsed < 300
    report_criterion(4, "maximin = minimax, transfer, grid oracles", ok,
                     f"worst_gap={res.worst:.2e} grid={worst_grid:.2e} {elapsed:.1f}s")
    assert res.passed
    assert worst_grid <= 5e-3
    assert elapsed < 300


def test_sigmoid_bounds(report_criterion):
    t0 = time.perf_counter()
    res = sigmoid_suite(pairs=100_000, Rs=(0.5, 1.0, 2.0))
    elapsed = time.perf_counter() - t0
    ok = res.passed and elapsed < 5
    report_criterion(5, "two-sided sigmoid Lipschitz bounds", ok, f"violations={int(res.worst)} {elapsed:.1f}s")
    assert res.worst == 0
    assert elapsed < 5


def test_rate(rate_sweep, report_criterion):
    res, elapsed = rate_sweep
    meds = [res.medians[N] for N in sorted(res.medians)]
    ok = -0.7 <= res.slope <= -0.3 and res.failures == 0 and elapsed < 900
    report_criterion(6, "gap vs N slope", ok,
                     f"slope={res.slope:.3f} ci=({res.slope_ci[0]:.3f},{res.slope_ci[1]:.3f}) {elapsed:.0f}s")
    assert res.failures == 0
    assert -0.7 <= res.slope <= -0.3
    assert meds[-1] <= meds[0]
    assert elapsed < 900


def test_overoptimization(overopt_report, report_criterion):
    rep, elapsed = overopt_report
    ok = rep.fraction_rpo_ge_dpo >= 0.8 and rep.eta0_matches_dpo and elapsed < 300
    report_criterion(7, "regularization keeps chosen log-prob up", ok,
                     f"fraction={rep.fraction_rpo_ge_dpo:.2f} eta0_exact={rep.eta0_matches_dpo} {elapsed:.1f}s")
    assert rep.fraction_rpo_ge_dpo >= 0.8
    assert rep.eta0_matches_dpo
    assert elapsed < 300


def test_coverage_and_shift(report_criterion):
    t0 = time.perf_counter()
    zero_ok = True
    for seed in range(5):
        inst = random_instance(1, 3, seed=200 + seed)
        data = generate_dataset(inst, 30, make_rng(seed, 2))
        base = chosen_policy(data, inst)
        est = coverage_coefficient(inst, RewardClassSpec(inst.R), base, base)
        mu = inst.data_distribution()[0]
        pairs = {(a1, a0): mu[a1, a0] for a1 in range(3) for a0 in range(3) if mu[a1, a0] > 0}
        grid = oracles.grid_coverage([0.0, 0.0, 0.0], pairs, inst.R, inst.true_reward.values[0])
        zero_ok &= est.value == 0.0 and grid == 0.0

    worst = -math.inf
    for i in range(50):
        rng = make_rng(9, i)
        K, M = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        inst = random_instance(K, M, seed=300 + i)
        pol = TabularPolicy(rng.normal(size=(K, M)), np.ones((K, M), dtype=bool))
        d1 = rng.dirichlet(np.ones(K)) if i % 2 else np.eye(K)[int(rng.integers(K))]
        chk = prompt_shift_check(inst, pol, d1)
        # independent re-summation of both sides
        r, p, d0 = inst.true_reward.values, pol.probs(), inst.prompt_dist
        per_x = [max(r[x]) - sum(p[x][a] * r[x][a] for a in range(M)) for x in range(K)]
        ratio = max(d1[x] / d0[x] for x in range(K))
        shifted = sum(d1[x] * per_x[x] for x in range(K))
        bound = ratio * sum(d0[x] * per_x[x] for x in range(K))
        assert abs(chk.shifted_gap - shifted) <= 1e-12 and abs(chk.bound - bound) <= 1e-12
        worst = max(worst, shifted - bound)
    elapsed = time.perf_counter() - t0
    ok = zero_ok and worst <= 1e-9 and elapsed < 30
    report_criterion(8, "coverage zero at base, prompt-shift bound", ok, f"worst excess={worst:.2e} {elapsed:.1f}s")
    assert zero_ok
    assert worst <= 1e-9
    assert elapsed < 30


@pytest.mark.slow
def test_mle_concentration(report_criterion):
    t0 = time.perf_counter()
    inst = random_instance(1, 3, seed=0)
    res = concentration_check(inst, 200, N=200, delta=0.1, trials=500, seed=0)
    elapsed = time.perf_counter() - t0
    ok = res.pass_fraction >= 1 - 0.1 - 0.02 and elapsed < 120
    report_criterion(9, "uniform MLE concentration", ok,
                     f"pass={res.pass_fraction:.3f} mean_margin={res.mean_margin:.3f} {elapsed:.1f}s")
    assert res.pass_fraction >= 0.88
    assert res.mean_margin > 0
    assert elapsed < 120


REPRO_CONFIGS = {
    "gen": {"instance": {"kind": "random", "K": 2, "M": 3}, "data": {"N": 50}},
    "train": {"instance": {"kind": "feature", "K": 3, "M": 4}, "data": {"N": 60},
              "train": {"steps": 40, "log_every": 5}},
    "solve": {"instance": {"kind": "random", "K": 1, "M": 3}, "data": {"N": 30}, "solve": {"mode": "duality"}},
    "sweep": {"sweep": {"N_grid": [32, 64], "seeds_per_N": 2, "bootstrap": 20}},
    "figure1": {"figure1": {"steps": 300}},
    "check": {"check": {"suites": ["closed_form", "sigmoid"]}},
}


def test_reproducibility(tmp_path, monkeypatch, report_criterion):
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)
    mismatched = []
    for command, body in REPRO_CONFIGS.items():
        path = tmp_path / f"{command}.json"
        path.write_text(json.dumps({"command": command, **body}))
        for fmt in ("csv", "json"):
            runs = []
            for k in range(2):
                code, out = run_cli([command, "--config", str(path), "--seed", "11", "--format", fmt],
                                    tmp_path, f"{command}-{fmt}-{k}")
                assert code == 0, command
                runs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
            if runs[0] != runs[1]:
                mismatched.append(f"{command}/{fmt}")
    ok = not mismatched
    report_criterion(10, "byte-identical artifacts", ok, ",".join(mismatched) or "6 commands x 2 formats")
    assert not mismatched
