"""Softmax policies on a finite response set, and the KL-regularized closed form.

A :class:`TabularPolicy` is a table of logits plus a boolean support mask.
Responses outside the mask get probability exactly zero: they are dropped from
the normalization instead of being given ``-inf`` logits. A policy may instead
be *feature-limited*, in which case its logits are ``features @ theta`` and the
trainable parameter is ``theta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigurationError, DomainError, InputError
from .preference import reward_array


def _masked_logsumexp(z, support):
    return logsumexp(np.where(support, z, -np.inf), axis=-1)


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    logits: np.ndarray
    support: np.ndarray
    features: np.ndarray | None = None
    theta: np.ndarray | None = None

    def __post_init__(self):
        support = np.array(self.support, dtype=bool)
        if self.features is not None:
            feats = np.array(self.features, dtype=float)
            theta = np.array(self.theta, dtype=float).reshape(-1)
            if feats.ndim != 3 or feats.shape[2] != theta.size:
                raise ConfigurationError("features must be (K, M, d) with theta of length d")
            feats.setflags(write=False)
            theta.setflags(write=False)
            object.__setattr__(self, "features", feats)
            object.__setattr__(self, "theta", theta)
            logits = feats @ theta
        else:
            logits = np.array(self.logits, dtype=float)
        if logits.ndim != 2 or support.shape != logits.shape:
            raise ConfigurationError(f"logits {logits.shape} and support {support.shape} must be equal 2-D shapes")
        empty = np.flatnonzero(~support.any(axis=1))
        if empty.size:
            raise ConfigurationError(f"prompt {int(empty[0])} has an empty support")
        if not np.all(np.isfinite(logits[support])):
            raise ConfigurationError("logits must be finite on the support")
        logits = np.where(support, logits, 0.0)
        logits.setflags(write=False)
        support.setflags(write=False)
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "support", support)

    # construction helpers
    @classmethod
    def uniform(cls, K, M, support=None):
        support = np.ones((K, M), dtype=bool) if support is None else support
        return cls(np.zeros((K, M)), support)

    @classmethod
    def from_probs(cls, p, support=None):
        """Policy with the given probabilities; its support is ``p > 0`` (within ``support``)."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        if p.min() < 0:
            raise InputError("probabilities must be nonnegative")
        mask = p > 0
        if support is not None:
            mask &= np.asarray(support, dtype=bool)
        with np.errstate(divide="ignore"):
            logits = np.where(mask, np.log(np.where(mask, p, 1.0)), 0.0)
        return cls(logits, mask)

    @classmethod
    def from_features(cls, features, theta, support=None):
        features = np.asarray(features, dtype=float)
        support = np.ones(features.shape[:2], dtype=bool) if support is None else support
        return cls(None, support, features, theta)

    @property
    def shape(self):
        return self.logits.shape

    @property
    def is_feature_limited(self):
        return self.features is not None

    @property
    def params(self):
        """Trainable coordinates: ``theta`` when feature-limited, else the logit table."""
        return self.theta if self.is_feature_limited else self.logits

    def with_params(self, params):
        if self.is_feature_limited:
            return TabularPolicy(None, self.support, self.features, params)
        return TabularPolicy(params, self.support)

    def probs(self):
        z = np.where(self.support, self.logits, -np.inf)
        m = z.max(axis=1, keepdims=True)
        e = np.where(self.support, np.exp(z - m), 0.0)
        return e / e.sum(axis=1, keepdims=True)

    def log_probs(self):
        """Log-probabilities; ``-inf`` off the support."""
        lz = _masked_logsumexp(self.logits, self.support)
        return np.where(self.support, self.logits - lz[:, None], -np.inf)

    def params_gradient(self, logit_grad):
        """Map a gradient with respect to the logit table into parameter coordinates."""
        g = np.where(self.support, logit_grad, 0.0)
        if self.is_feature_limited:
            return np.einsum("kmd,km->d", self.features, g)
        return g

    def to_dict(self):
        K, M = self.shape
        out = {
            "K": K,
            "M": M,
            "logits": self.logits.ravel().tolist(),
            "support": self.support.ravel().tolist(),
        }
        if self.is_feature_limited:
            out["features"] = self.features.ravel().tolist()
            out["theta"] = self.theta.tolist()
        return out

    @classmethod
    def from_dict(cls, d):
        K, M = int(d["K"]), int(d["M"])
        support = np.asarray(d["support"], dtype=bool).reshape(K, M)
        if "features" in d:
            theta = np.asarray(d["theta"], dtype=float)
            feats = np.asarray(d["features"], dtype=float).reshape(K, M, theta.size)
            return cls(None, support, feats, theta)
        return cls(np.asarray(d["logits"], dtype=float).reshape(K, M), support)


def probs(pol, x):
    K = pol.shape[0]
    if not 0 <= x < K:
        raise InputError(f"prompt {x} out of range for K={K}")
    return pol.probs()[x]


def check_support(pol, ref):
    if np.any(pol.support & ~ref.support):
        bad = np.argwhere(pol.support & ~ref.support)[0]
        raise DomainError(f"policy puts mass on ({bad[0]}, {bad[1]}) outside the reference support")


def kl_rows(pol, ref):
    """``KL(pol(.|x) || ref(.|x))`` for every prompt."""
    check_support(pol, ref)
    p = pol.probs()
    lp, lr = pol.log_probs(), ref.log_probs()
    live = pol.support & (p > 0)
    terms = np.where(live, p * (np.where(live, lp, 0.0) - np.where(live, lr, 0.0)), 0.0)
    return terms.sum(axis=1)


def kl_to_ref(pol, ref, x):
    return float(kl_rows(pol, ref)[x])


def optimal_kl_policy(r, ref, beta):
    """Maximizer of ``E_pi[r] - beta * KL(pi || ref)`` per prompt.

    Returns ``(pi_r, log_z)`` where ``pi_r(a|x) ∝ ref(a|x) exp(r(x,a) / beta)`` on
    the reference support and ``log_z[x]`` is the log-partition function.
    """
    if not beta > 0:
        raise InputError("beta must be positive")
    r = reward_array(r)
    z = np.where(ref.support, ref.log_probs(), 0.0) + r / beta
    log_z = _masked_logsumexp(z, ref.support)
    return TabularPolicy(z, ref.support), log_z


def kl_regularized_value(pol, r, ref, beta, d):
    """``E_{x~d}[ E_{a~pol}[r(x,a)] - beta * KL(pol(.|x) || ref(.|x)) ]``."""
    r = reward_array(r)
    p = pol.probs()
    per_x = np.sum(np.where(pol.support, p * r, 0.0), axis=1) - beta * kl_rows(pol, ref)
    return float(np.dot(d, per_x))


def implicit_reward(pol, ref, beta):
    """``beta * log(pol / ref)`` on the reference support, zero elsewhere.

    The per-prompt constant ``beta * log Z(x)`` is dropped: preference
    probabilities only see reward differences within a prompt.
    """
    if not beta > 0:
        raise InputError("beta must be positive")
    check_support(pol, ref)
    p = pol.probs()
    if np.any(ref.support & (p <= 0)):
        raise DomainError("policy has zero probability on the reference support; floor it first")
    lp, lr = pol.log_probs(), ref.log_probs()
    return np.where(ref.support, beta * (lp - np.where(ref.support, lr, 0.0)), 0.0)


def value(pol, inst, d=None):
    """Expected true reward ``J(pi)`` under prompt law ``d`` (default ``d0``)."""
    d = inst.prompt_dist if d is None else np.asarray(d, dtype=float)
    p = pol.probs()
    return float(np.dot(d, np.sum(p * inst.true_reward.values, axis=1)))


def gap(pol_hat, pol_comp, inst, d=None):
    return value(pol_comp, inst, d) - value(pol_hat, inst, d)


def per_prompt_gap(pol_hat, pol_comp, inst):
    r = inst.true_reward.values
    return np.sum(pol_comp.probs() * r, axis=1) - np.sum(pol_hat.probs() * r, axis=1)


def optimal_policy(inst):
    """Point mass on the per-prompt argmax of ``r*`` over the reference support.

    Ties go to the lowest response index.
    """
    r = np.where(inst.reference_policy.support, inst.true_reward.values, -np.inf)
    best = np.argmax(r, axis=1)
    p = np.zeros(r.shape)
    p[np.arange(r.shape[0]), best] = 1.0
    return TabularPolicy.from_probs(p)


def chosen_policy(data, inst, smoothing=0.5, conditional=True):
    """Distribution of preferred responses in ``data``.

    Counts of the chosen response are smoothed by ``smoothing`` on every
    response of the reference support. With ``conditional`` the counts are kept
    per prompt and prompts absent from the data fall back to the reference row;
    otherwise the pooled (marginal) response distribution is used for every
    prompt.
    """
    if smoothing < 0:
        raise InputError("smoothing must be nonnegative")
    if len(data) == 0:
        raise InputError("chosen_policy needs a nonempty dataset")
    ref = inst.reference_policy
    K, M = ref.shape
    data.check_indices(K, M)
    counts = np.zeros((K, M))
    np.add.at(counts, (data.x, data.chosen), 1.0)
    if not conditional:
        counts = np.broadcast_to(counts.sum(axis=0), (K, M)).copy()
    seen = np.where(ref.support, counts, 0.0).sum(axis=1) > 0
    counts = np.where(ref.support, counts + smoothing, 0.0)
    ref_p = ref.probs()
    p = np.where(seen[:, None], counts / np.where(seen, counts.sum(axis=1), 1.0)[:, None], ref_p)
    return TabularPolicy.from_probs(p, ref.support)
