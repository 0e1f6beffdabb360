"""Builders for the bandit instances used by the studies, tests and CLI."""

import numpy as np

from .policy import TabularPolicy
from .preference import BanditInstance, BehaviorSpec, PreferenceDataset, RewardTable
from .rng import make_rng

FIGURE1_REWARD = (1.0, 0.5, 0.0)
FIGURE1_REF = (0.45, 0.45, 0.1)


def figure1_instance(force_pair=True):
    """Single prompt, responses ``(a, b, c)``.

    With ``force_pair`` the data law only ever compares ``a`` against ``b``.
    """
    ref = TabularPolicy.from_probs([FIGURE1_REF])
    behavior = BehaviorSpec()
    if force_pair:
        w = np.zeros((1, 3, 3))
        w[0, 0, 1] = 1.0
        behavior = BehaviorSpec(pair_weights=w)
    return BanditInstance(RewardTable([FIGURE1_REWARD], 1.0), ref, np.ones(1), behavior)


def figure1_dataset():
    return PreferenceDataset.from_triples([(0, 0, 1, 1)])


def random_instance(K, M, R=1.0, seed=0, ref="random", d0="random"):
    """Rewards uniform on ``[0, R]``, Dirichlet(1) reference rows and prompt law."""
    rng = make_rng(seed, 101)
    r = rng.uniform(0.0, R, size=(K, M))
    if ref == "uniform":
        ref_p = np.full((K, M), 1.0 / M)
    else:
        ref_p = rng.dirichlet(np.ones(M), size=K)
        ref_p = np.maximum(ref_p, 1e-3)
        ref_p /= ref_p.sum(axis=1, keepdims=True)
    if d0 == "uniform":
        p0 = np.full(K, 1.0 / K)
    else:
        p0 = rng.dirichlet(np.ones(K))
        p0 = np.maximum(p0, 1e-3)
        p0 /= p0.sum()
    p0[-1] = 1.0 - p0[:-1].sum()
    return BanditInstance(RewardTable(r, R), TabularPolicy.from_probs(ref_p), p0)


def feature_instance(K=4, M=6, d=2, R=1.0, seed=0, feature_scale=1.0):
    """Instance whose reference policy is feature-limited: ``logits = Phi @ theta``.

    Features are standard normal scaled by ``feature_scale``; the reference
    parameter is standard normal. Rewards are uniform on ``[0, R]``.
    """
    rng = make_rng(seed, 202)
    phi = feature_scale * rng.standard_normal((K, M, d))
    theta = rng.standard_normal(d)
    r = rng.uniform(0.0, R, size=(K, M))
    ref = TabularPolicy.from_features(phi, theta)
    return BanditInstance(RewardTable(r, R), ref, np.full(K, 1.0 / K))


def multiscale_instance(K=4, M=6, R=1.0, top=None, min_gap=1.0 / 256, max_gap=0.5, pairs="all"):
    """Well-covered instance whose suboptimality gaps are spread log-uniformly.

    Every prompt has its best response at index 0 with reward ``top``; the
    remaining ``K * (M - 1)`` responses sit below it at gaps spaced
    geometrically between ``min_gap`` and ``max_gap`` (interleaved across
    prompts). The reference policy and prompt law are uniform. ``pairs="all"``
    compares every pair uniformly; ``pairs="star"`` only compares the best
    response with each of the others, which concentrates the data on the
    differences that decide the gap.
    """
    top = 0.75 * R if top is None else top
    n = K * (M - 1)
    gaps = np.geomspace(min_gap, max_gap, n)
    r = np.full((K, M), top)
    for j, g in enumerate(gaps):
        x, slot = j % K, 1 + j // K
        r[x, slot] = top - g
    ref = TabularPolicy.uniform(K, M)
    if pairs == "all":
        behavior = BehaviorSpec()
    elif pairs == "star":
        w = np.zeros((K, M, M))
        w[:, 0, 1:] = 1.0
        w[:, 1:, 0] = 1.0
        behavior = BehaviorSpec(pair_weights=w)
    else:
        raise ValueError("pairs must be 'all' or 'star'")
    return BanditInstance(RewardTable(r, R), ref, np.full(K, 1.0 / K), behavior)
