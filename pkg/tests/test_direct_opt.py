import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from rpolab.analysis import simplex_grid
from rpolab.checks import central_difference, relative_error
from rpolab.direct_opt import (
    TRACE_COLUMNS,
    TrainerConfig,
    dpo_gradient,
    dpo_loss,
    mean_chosen_logprob,
    rpo_gradient,
    rpo_loss,
    sft_gradient,
    sft_loss,
    train,
)
from rpolab.errors import InputError
from rpolab.instances import feature_instance, random_instance
from rpolab.policy import TabularPolicy, chosen_policy
from rpolab.preference import generate_dataset
from rpolab.rng import make_rng

POINT_A = TabularPolicy.from_probs([[1.0, 0.0, 0.0]])


def full(z):
    return TabularPolicy(z, np.ones(np.shape(z), dtype=bool))


@given(arrays(float, (1, 3), elements=st.floats(-5, 5)), st.floats(0.1, 3.0))
def test_single_pair_loss_closed_form(fig1, z, beta):
    inst, data = fig1
    pol = full(z)
    p = pol.probs()[0]
    expected = math.log1p((p[1] / p[0]) ** beta)
    assert dpo_loss(pol, inst.reference_policy, data, beta) == pytest.approx(expected, rel=1e-10, abs=1e-14)


def test_loss_matches_record_oracle(small_problem):
    inst, data = small_problem
    pol = full(np.random.default_rng(1).normal(size=(2, 4)))
    triples = [(t.x, t.a1, t.a0, t.y) for t in data]
    expected = oracles.dpo_nll(pol.probs().tolist(), inst.reference_policy.probs().tolist(), triples, 0.8)
    assert dpo_loss(pol, inst.reference_policy, data, 0.8) == pytest.approx(expected, rel=1e-12)


def test_degenerate_minimizers(fig1):
    inst, data = fig1
    d = 1e-4
    losses = [dpo_loss(TabularPolicy.from_probs([p]), inst.reference_policy, data, 1.0)
              for p in ((1 - 2 * d, d, d), (0.5 - d, d, 0.5))]
    assert abs(losses[0] - losses[1]) <= 1e-3
    assert max(losses) <= 1e-3


def test_dpo_grid_minimizers_include_mass_on_c(fig1):
    inst, data = fig1
    # the face pol(b) = 0 is reached through the log-probability floor
    P = simplex_grid(0.01)
    P = P[P[:, 0] > 0]
    losses = np.array([dpo_loss(TabularPolicy.from_probs([p]), inst.reference_policy, data, 1.0) for p in P])
    near = P[losses <= losses.min() + 1e-3]
    assert near[:, 2].max() >= 0.45
    assert near[:, 2].min() <= 0.01


def test_sft_example():
    pol = TabularPolicy.from_probs([[0.45, 0.45, 0.1]])
    assert sft_loss(pol, POINT_A, np.ones(1)) == pytest.approx(0.7985076962177716, abs=1e-14)


def test_rpo_at_reference(fig1):
    inst, data = fig1
    loss = rpo_loss(inst.reference_policy, inst.reference_policy, POINT_A, data, inst.prompt_dist, 1.0, 0.005)
    assert loss.total == pytest.approx(math.log(2) + 0.005 * -math.log(0.45), abs=1e-14)
    assert loss.dpo_term == pytest.approx(math.log(2), abs=1e-15)


def test_rpo_grid_argmin_on_small_b_face(fig1):
    inst, data = fig1
    P = simplex_grid(0.01)
    P = P[(P[:, 1] > 0) & (P[:, 1] <= 0.01)]
    losses = [rpo_loss(TabularPolicy.from_probs([p]), inst.reference_policy, POINT_A, data, inst.prompt_dist,
                       1.0, 0.005).total for p in P]
    best = P[int(np.argmin(losses))]
    assert np.argmax(best) == 0 and best[0] >= 0.95


def test_dpo_gradient_at_reference(fig1):
    inst, data = fig1
    beta = 0.7
    g = dpo_gradient(inst.reference_policy, inst.reference_policy, data, beta)
    # loss = softplus(-h) with h = beta (z_a - z_b) at pi = ref: slope -beta/2 on a, +beta/2 on b
    assert np.allclose(g, [[-beta / 2, beta / 2, 0.0]], atol=1e-15)
    fd = central_difference(lambda z: dpo_loss(full(z), inst.reference_policy, data, beta), inst.reference_policy.logits)
    assert relative_error(g, fd) <= 1e-6


def test_regularizer_pushes_c_down(fig1):
    inst, data = fig1
    ref = inst.reference_policy
    g_dpo = dpo_gradient(ref, ref, data, 1.0)
    g_rpo = rpo_gradient(ref, ref, POINT_A, data, inst.prompt_dist, 1.0, 0.005)
    assert g_dpo[0, 2] == 0.0
    # descent step -g lowers the logit of c
    assert -g_rpo[0, 2] < 0


@pytest.mark.parametrize("seed", range(8))
@pytest.mark.parametrize("feature", [False, True])
def test_gradients_match_finite_differences(seed, feature):
    if feature:
        inst = feature_instance(3, 4, 2, seed=seed)
        pol = inst.reference_policy.with_params(make_rng(seed, 1).normal(size=2))
    else:
        inst = random_instance(2, 4, seed=seed)
        pol = full(make_rng(seed, 1).normal(size=(2, 4)))
    data = generate_dataset(inst, 30, make_rng(seed, 2))
    ref, d0 = inst.reference_policy, inst.prompt_dist
    base = chosen_policy(data, inst)

    def at(z):
        return pol.with_params(z)

    fd = central_difference(lambda z: rpo_loss(at(z), ref, base, data, d0, 0.6, 0.3).total, pol.params)
    assert relative_error(rpo_gradient(pol, ref, base, data, d0, 0.6, 0.3), fd) <= 1e-5
    fd = central_difference(lambda z: sft_loss(at(z), base, d0), pol.params)
    assert relative_error(sft_gradient(pol, base, d0), fd) <= 1e-5


@given(arrays(float, (2, 4), elements=st.floats(-4, 4)), st.floats(-10, 10))
def test_dpo_ignores_per_prompt_logit_shift(small_problem, z, c):
    inst, data = small_problem
    ref = inst.reference_policy
    a = dpo_loss(full(z), ref, data, 1.0)
    b = dpo_loss(full(z + np.array([[c], [0.0]])), ref, data, 1.0)
    assert a == pytest.approx(b, rel=1e-9, abs=1e-12)


def test_zero_eta_is_exactly_dpo(small_problem):
    inst, data = small_problem
    ref, d0 = inst.reference_policy, inst.prompt_dist
    pol = full(np.random.default_rng(4).normal(size=(2, 4)))
    base = chosen_policy(data, inst)
    assert rpo_loss(pol, ref, base, data, d0, 0.5, 0.0).total == dpo_loss(pol, ref, data, 0.5)
    assert np.array_equal(rpo_gradient(pol, ref, base, data, d0, 0.5, 0.0), dpo_gradient(pol, ref, data, 0.5))
    cfg = TrainerConfig(beta=0.5, eta=0.0, steps=50, log_every=5)
    _, t_rpo = train(inst, data, cfg, "rpo")
    _, t_dpo = train(inst, data, cfg, "dpo")
    assert t_rpo.to_csv() == t_dpo.to_csv()


def test_figure1_training_converges_to_a(fig1):
    inst, data = fig1
    base = chosen_policy(data, inst, smoothing=0.0)
    cfg = TrainerConfig(beta=1.0, eta=0.1, learning_rate=0.5, steps=2000, baseline=base, log_every=500)
    pol, trace = train(inst, data, cfg, "rpo")
    p = pol.probs()[0]
    assert p[0] >= 0.95 and p[2] <= 0.02
    assert [r.step for r in trace.rows] == [0, 500, 1000, 1500, 2000]


def test_rpo_keeps_chosen_logprob_above_dpo_on_feature_family():
    wins = 0
    for s in range(20):
        inst = feature_instance(4, 6, 2, seed=s)
        data = generate_dataset(inst, 200, make_rng(s, 7))
        cfg = TrainerConfig(beta=0.1, eta=0.005, steps=500, log_every=500)
        pol_d, _ = train(inst, data, cfg, "dpo")
        pol_r, _ = train(inst, data, cfg, "rpo")
        wins += mean_chosen_logprob(pol_r, data) >= mean_chosen_logprob(pol_d, data)
    assert wins >= 16


def test_trace_csv_layout(small_problem):
    inst, data = small_problem
    _, trace = train(inst, data, TrainerConfig(steps=7, log_every=3), "rpo")
    lines = trace.to_csv().splitlines()
    assert lines[0].split(",") == list(TRACE_COLUMNS)
    assert [r.step for r in trace.rows] == [0, 3, 6, 7]
    assert np.all(np.isfinite(trace.column("gap_vs_optimal")))


def test_minibatch_training_is_seeded(small_problem):
    inst, data = small_problem
    cfg = TrainerConfig(steps=20, batch=8, seed=3, log_every=5)
    _, a = train(inst, data, cfg, "rpo")
    _, b = train(inst, data, cfg, "rpo")
    _, c = train(inst, data, TrainerConfig(steps=20, batch=8, seed=4, log_every=5), "rpo")
    assert a.to_csv() == b.to_csv()
    assert a.to_csv() != c.to_csv()


def test_token_average_flag_changes_nothing(small_problem):
    inst, data = small_problem
    _, a = train(inst, data, TrainerConfig(steps=10), "rpo")
    _, b = train(inst, data, TrainerConfig(steps=10, token_average=True), "rpo")
    assert a.to_csv() == b.to_csv()


@pytest.mark.parametrize(
    "kwargs",
    [{"beta": 0.0}, {"eta": -0.1}, {"learning_rate": 0.0}, {"steps": -1}, {"batch": 0}, {"baseline": "nope"}],
)
def test_trainer_config_validation(kwargs):
    with pytest.raises(InputError):
        TrainerConfig(**kwargs)


def test_train_rejects_unknown_method(small_problem):
    inst, data = small_problem
    with pytest.raises(InputError):
        train(inst, data, TrainerConfig(steps=1), "ppo")


@pytest.mark.parametrize("seed", range(4))
def test_full_batch_descent_is_monotone(seed):
    inst = random_instance(2, 4, seed=seed)
    data = generate_dataset(inst, 60, make_rng(seed, 5))
    cfg = TrainerConfig(beta=0.5, eta=0.2, learning_rate=0.05, steps=50, log_every=1)
    _, trace = train(inst, data, cfg, "rpo")
    losses = trace.column("rpo_loss")
    assert len(losses) == 51
    assert np.all(np.diff(losses) <= 1e-12)


@given(arrays(float, (2, 4), elements=st.floats(-4, 4)), st.floats(-10, 10))
def test_rpo_ignores_per_prompt_logit_shift(small_problem, z, c):
    inst, data = small_problem
    base = chosen_policy(data, inst)
    args = (inst.reference_policy, base, data, inst.prompt_dist, 0.7, 0.4)
    a = rpo_loss(full(z), *args).total
    b = rpo_loss(full(z + np.array([[0.0], [c]])), *args).total
    assert a == pytest.approx(b, rel=1e-9, abs=1e-12)


def test_regularizer_separates_degenerate_minimizers(fig1):
    inst, data = fig1
    beta, eta, d = 1.0, 0.005, 1e-4
    args = (inst.reference_policy, POINT_A, data, inst.prompt_dist, beta, eta)
    spread = rpo_loss(TabularPolicy.from_probs([[0.5 - d, d, 0.5]]), *args).total
    peaked = rpo_loss(TabularPolicy.from_probs([[1 - 2 * d, d, d]]), *args).total
    # the SFT term drops from about ln 2 to about 2d while the DPO terms nearly agree
    assert spread - peaked >= eta * beta * (math.log(2) - 2 * d)
