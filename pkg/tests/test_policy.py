import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from rpolab.errors import ConfigurationError, DomainError, InputError
from rpolab.instances import figure1_instance, random_instance
from rpolab.policy import (
    TabularPolicy,
    chosen_policy,
    gap,
    implicit_reward,
    kl_regularized_value,
    kl_rows,
    kl_to_ref,
    optimal_kl_policy,
    optimal_policy,
    per_prompt_gap,
    probs,
    value,
)
from rpolab.preference import PreferenceDataset

logit_tables = arrays(float, (2, 4), elements=st.floats(-20, 20))


def test_softmax_example():
    pol = TabularPolicy([[math.log(2), 0.0]], np.ones((1, 2), dtype=bool))
    assert np.allclose(probs(pol, 0), [2 / 3, 1 / 3], atol=1e-15)
    with pytest.raises(InputError):
        probs(pol, 1)


@given(logit_tables)
def test_probs_match_scalar_softmax(z):
    pol = TabularPolicy(z, np.ones(z.shape, dtype=bool))
    for x in range(2):
        assert np.allclose(pol.probs()[x], oracles.softmax(list(z[x])), atol=1e-13)
    assert np.allclose(np.exp(pol.log_probs()), pol.probs(), atol=1e-13)


def test_support_mask_gives_exact_zeros():
    pol = TabularPolicy.from_probs([[0.5, 0.0, 0.5]])
    assert pol.probs()[0, 1] == 0.0
    assert pol.log_probs()[0, 1] == -np.inf
    with pytest.raises(ConfigurationError):
        TabularPolicy(np.zeros((1, 2)), np.zeros((1, 2), dtype=bool))


def test_feature_limited_policy():
    feats = np.arange(12, dtype=float).reshape(2, 3, 2) / 10
    pol = TabularPolicy.from_features(feats, [0.5, -1.0])
    assert pol.is_feature_limited
    assert np.allclose(pol.logits, feats @ np.array([0.5, -1.0]))
    back = TabularPolicy.from_dict(pol.to_dict())
    assert np.array_equal(back.theta, pol.theta) and np.array_equal(back.probs(), pol.probs())
    g = pol.params_gradient(np.ones((2, 3)))
    assert g.shape == (2,)


def test_kl_example():
    pol = TabularPolicy.from_probs([[1.0, 0.0]])
    ref = TabularPolicy.uniform(1, 2)
    assert kl_to_ref(pol, ref, 0) == pytest.approx(math.log(2), abs=1e-15)


def test_kl_outside_reference_support():
    ref = TabularPolicy.from_probs([[0.5, 0.5, 0.0]])
    pol = TabularPolicy.uniform(1, 3)
    with pytest.raises(DomainError):
        kl_rows(pol, ref)


@given(logit_tables, logit_tables)
def test_kl_nonnegative_and_matches_scalar(z1, z2):
    full = np.ones(z1.shape, dtype=bool)
    pol, ref = TabularPolicy(z1, full), TabularPolicy(z2, full)
    k = kl_rows(pol, ref)
    assert np.all(k >= -1e-12)
    for x in range(2):
        assert k[x] == pytest.approx(oracles.kl(pol.probs()[x], ref.probs()[x]), rel=1e-9, abs=1e-12)


def test_closed_form_example():
    beta = 0.7
    pi_r, log_z = optimal_kl_policy([[beta * math.log(2), 0.0]], TabularPolicy.uniform(1, 2), beta)
    assert np.allclose(pi_r.probs(), [[2 / 3, 1 / 3]], atol=1e-15)
    assert math.exp(log_z[0]) == pytest.approx(1.5, rel=1e-14)


def test_closed_form_requires_positive_beta():
    with pytest.raises(InputError):
        optimal_kl_policy([[0.0, 1.0]], TabularPolicy.uniform(1, 2), 0.0)


@given(arrays(float, (2, 3), elements=st.floats(0, 1)), st.floats(0.05, 3.0), arrays(float, (2, 3), elements=st.floats(0.01, 1)))
def test_closed_form_value_and_optimality(r, beta, w):
    ref = TabularPolicy.from_probs(w / w.sum(axis=1, keepdims=True))
    d = np.array([0.3, 0.7])
    pi_r, log_z = optimal_kl_policy(r, ref, beta)
    v = kl_regularized_value(pi_r, r, ref, beta, d)
    assert v == pytest.approx(beta * float(d @ log_z), abs=1e-10)
    for q in (ref, TabularPolicy.uniform(2, 3), TabularPolicy.from_probs(0.5 * pi_r.probs() + 0.5 * ref.probs())):
        assert kl_regularized_value(q, r, ref, beta, d) <= v + 1e-12


def test_closed_form_respects_reference_support():
    ref = TabularPolicy.from_probs([[0.5, 0.5, 0.0]])
    pi_r, _ = optimal_kl_policy([[0.0, 0.0, 1.0]], ref, 1.0)
    assert pi_r.probs()[0, 2] == 0.0


def test_implicit_reward_example():
    pol = TabularPolicy.from_probs([[2 / 3, 1 / 3]])
    r = implicit_reward(pol, TabularPolicy.uniform(1, 2), 1.0)
    assert r[0, 0] - r[0, 1] == pytest.approx(math.log(2), abs=1e-14)


def test_implicit_reward_needs_positive_mass():
    pol = TabularPolicy.from_probs([[1.0, 0.0]])
    with pytest.raises(DomainError):
        implicit_reward(pol, TabularPolicy.uniform(1, 2), 1.0)


@given(arrays(float, (2, 3), elements=st.floats(0, 1)), st.floats(0.1, 2.0))
def test_implicit_reward_inverts_closed_form(r, beta):
    ref = random_instance(2, 3, seed=1).reference_policy
    pi_r, _ = optimal_kl_policy(r, ref, beta)
    back = implicit_reward(pi_r, ref, beta)
    # equal up to a per-prompt constant
    diff = back - r
    assert np.allclose(diff - diff[:, :1], 0.0, atol=1e-9)


def test_value_and_gap_examples():
    inst = figure1_instance()
    assert value(inst.reference_policy, inst) == pytest.approx(0.675, abs=1e-15)
    star = optimal_policy(inst)
    assert np.array_equal(star.probs(), [[1.0, 0.0, 0.0]])
    assert gap(inst.reference_policy, star, inst) == pytest.approx(0.325, abs=1e-15)


def test_per_prompt_gap_nonnegative_against_optimum():
    inst = random_instance(4, 5, seed=6)
    pol = TabularPolicy(np.random.default_rng(0).normal(size=(4, 5)), np.ones((4, 5), dtype=bool))
    g = per_prompt_gap(pol, optimal_policy(inst), inst)
    assert np.all(g >= 0)
    assert float(inst.prompt_dist @ g) == pytest.approx(gap(pol, optimal_policy(inst), inst), rel=1e-12)


def test_optimal_policy_breaks_ties_low():
    inst = random_instance(1, 3)
    tied = type(inst)(type(inst.true_reward)([[0.5, 0.5, 0.1]], 1.0), inst.reference_policy, inst.prompt_dist)
    assert np.argmax(optimal_policy(tied).probs()[0]) == 0


def test_chosen_policy_counting():
    inst = figure1_instance()
    data = PreferenceDataset.from_triples([(0, 0, 1, 1), (0, 1, 0, 1)])
    assert np.allclose(chosen_policy(data, inst, smoothing=0).probs(), [[0.5, 0.5, 0.0]])
    smoothed = chosen_policy(data, inst, smoothing=0.5).probs()
    assert np.allclose(smoothed, [[1.5 / 3.5, 1.5 / 3.5, 0.5 / 3.5]])


def test_chosen_policy_unseen_prompt_falls_back_to_reference():
    inst = random_instance(2, 3, seed=0)
    data = PreferenceDataset.from_triples([(0, 0, 1, 0)])
    pol = chosen_policy(data, inst)
    assert np.allclose(pol.probs()[1], inst.reference_policy.probs()[1])
    with pytest.raises(InputError):
        chosen_policy(data, inst, smoothing=-1)
