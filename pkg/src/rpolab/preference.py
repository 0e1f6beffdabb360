"""Bradley-Terry preferences over a finite contextual bandit.

Reward tables are ``(K, M)`` arrays indexed by ``(prompt, response)``. A
preference record ``(x, a1, a0, y)`` states that response ``a1`` was preferred
to ``a0`` under prompt ``x`` when ``y == 1``; records are kept in this order and
never reshuffled into chosen/rejected form (use :attr:`PreferenceDataset.chosen`
for that view).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import expit, log_expit

from .errors import ConfigurationError, InputError
from .rng import make_rng

if TYPE_CHECKING:
    from .policy import TabularPolicy

LN2 = float(np.log(2.0))
DATASET_SCHEMA = "pref-v1"


def sigmoid(z):
    return expit(z)


def softplus(z):
    """``log(1 + exp(z))`` without overflow."""
    return -log_expit(-np.asarray(z, dtype=float))


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def reward_array(r):
    """Accept a :class:`RewardTable` or anything array-like and return a 2-D float array."""
    if isinstance(r, RewardTable):
        return r.values
    a = np.asarray(r, dtype=float)
    if a.ndim != 2:
        raise InputError(f"reward table must be 2-D (prompts x responses), got shape {a.shape}")
    return a


@dataclass(frozen=True)
class RewardTable:
    """Reward per (prompt, response), every entry in ``[0, bound]``."""

    values: np.ndarray
    bound: float

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 2:
            raise InputError(f"reward table must be 2-D, got shape {v.shape}")
        if self.bound < 0:
            raise InputError("reward bound must be nonnegative")
        if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > self.bound:
            raise InputError(f"reward entries must lie in [0, {self.bound}]")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "bound", float(self.bound))

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class PreferenceTriple:
    x: int
    a1: int
    a0: int
    y: int


@dataclass(frozen=True, eq=False)
class PreferenceDataset:
    """Immutable ordered collection of ``(x, a1, a0, y)`` records."""

    x: np.ndarray
    a1: np.ndarray
    a0: np.ndarray
    y: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        cols = [_frozen(c, np.int64) for c in (self.x, self.a1, self.a0, self.y)]
        n = len(cols[0])
        if any(c.ndim != 1 or len(c) != n for c in cols):
            raise InputError("dataset columns must be 1-D and of equal length")
        if n and not np.all((cols[3] == 0) | (cols[3] == 1)):
            raise InputError("labels must be 0 or 1")
        for name, c in zip(("x", "a1", "a0", "y"), cols):
            object.__setattr__(self, name, c)

    @classmethod
    def from_triples(cls, triples, seed=None):
        rows = [tuple(t) if not isinstance(t, PreferenceTriple) else (t.x, t.a1, t.a0, t.y) for t in triples]
        if not rows:
            return cls(*(np.zeros(0, dtype=np.int64) for _ in range(4)), seed=seed)
        cols = np.array(rows, dtype=np.int64).T
        return cls(cols[0], cols[1], cols[2], cols[3], seed=seed)

    @property
    def N(self):
        return len(self.x)

    def __len__(self):
        return len(self.x)

    def __iter__(self):
        for row in zip(self.x.tolist(), self.a1.tolist(), self.a0.tolist(), self.y.tolist()):
            yield PreferenceTriple(*row)

    @property
    def chosen(self):
        return np.where(self.y == 1, self.a1, self.a0)

    @property
    def rejected(self):
        return np.where(self.y == 1, self.a0, self.a1)

    def check_indices(self, K, M):
        if self.N == 0:
            return
        if self.x.min() < 0 or self.x.max() >= K:
            raise InputError(f"prompt index out of range for K={K}")
        for c in (self.a1, self.a0):
            if c.min() < 0 or c.max() >= M:
                raise InputError(f"response index out of range for M={M}")

    @cached_property
    def pair_counts(self):
        """Sufficient statistics ``(x, a1, a0, n, n_pos)`` over the distinct ordered triples."""
        if self.N == 0:
            z = np.zeros(0, dtype=np.int64)
            return z, z, z, z, z
        keys = np.stack([self.x, self.a1, self.a0], axis=1)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        n = np.bincount(inv, minlength=len(uniq))
        pos = np.bincount(inv, weights=self.y, minlength=len(uniq)).astype(np.int64)
        return uniq[:, 0], uniq[:, 1], uniq[:, 2], n, pos

    # JSON Lines: header then one record per triple.
    def to_jsonl(self):
        lines = [json.dumps({"schema": DATASET_SCHEMA, "N": self.N, "seed": self.seed})]
        for t in self:
            lines.append(json.dumps({"x": t.x, "a1": t.a1, "a0": t.a0, "y": t.y}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ConfigurationError("empty dataset file")
        header = json.loads(lines[0])
        if header.get("schema") != DATASET_SCHEMA:
            raise ConfigurationError(f"unsupported dataset schema {header.get('schema')!r}")
        records = [json.loads(ln) for ln in lines[1:]]
        if len(records) != header["N"]:
            raise ConfigurationError(f"header says N={header['N']} but file holds {len(records)} records")
        return cls.from_triples([(d["x"], d["a1"], d["a0"], d["y"]) for d in records], seed=header.get("seed"))

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_jsonl(fh.read())


@dataclass(frozen=True)
class BehaviorSpec:
    """Sampling law of ``(x, a1, a0)``.

    ``prompt_weights`` defaults to the instance's ``d0`` and ``response_probs``
    to the reference policy. ``a1`` and ``a0`` are drawn independently from
    ``response_probs[x]`` and redrawn on ties (``exclude_ties``). An explicit
    ``pair_weights`` array of shape ``(K, M, M)`` overrides the response law.
    """

    prompt_weights: np.ndarray | None = None
    response_probs: np.ndarray | None = None
    pair_weights: np.ndarray | None = None
    exclude_ties: bool = True

    def to_dict(self):
        out = {"exclude_ties": self.exclude_ties}
        for name in ("prompt_weights", "response_probs", "pair_weights"):
            val = getattr(self, name)
            if val is not None:
                out[name] = np.asarray(val, dtype=float).tolist()
        return out

    @classmethod
    def from_dict(cls, d):
        kw = {k: (np.asarray(v, dtype=float) if k != "exclude_ties" else bool(v)) for k, v in d.items()}
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class BanditInstance:
    """Ground-truth environment: ``r*``, ``pi_ref``, prompt law ``d0`` and the data law."""

    true_reward: RewardTable
    reference_policy: TabularPolicy
    prompt_dist: np.ndarray
    behavior: BehaviorSpec = field(default_factory=BehaviorSpec)

    def __post_init__(self):
        K, M = self.true_reward.shape
        d0 = _frozen(self.prompt_dist)
        if d0.shape != (K,):
            raise ConfigurationError(f"prompt distribution must have length K={K}")
        if d0.min() < 0 or abs(d0.sum() - 1.0) > 1e-12:
            raise ConfigurationError("prompt distribution must be nonnegative and sum to 1")
        if self.reference_policy.shape != (K, M):
            raise ConfigurationError("reference policy shape does not match the reward table")
        object.__setattr__(self, "prompt_dist", d0)

    @property
    def K(self):
        return self.true_reward.shape[0]

    @property
    def M(self):
        return self.true_reward.shape[1]

    @property
    def R(self):
        return self.true_reward.bound

    def data_distribution(self):
        """Exact law ``mu_D`` as a ``(K, M, M)`` array over ``(x, a1, a0)``."""
        K, M = self.K, self.M
        b = self.behavior
        px = self.prompt_dist if b.prompt_weights is None else np.asarray(b.prompt_weights, dtype=float)
        if px.shape != (K,) or px.min() < 0 or px.sum() <= 0:
            raise ConfigurationError("behavior prompt weights must be a nonnegative length-K vector")
        px = px / px.sum()
        if b.pair_weights is not None:
            w = np.array(b.pair_weights, dtype=float)
            if w.shape != (K, M, M) or w.min() < 0:
                raise ConfigurationError("pair_weights must be a nonnegative (K, M, M) array")
        else:
            q = self.reference_policy.probs() if b.response_probs is None else np.asarray(b.response_probs, dtype=float)
            if q.shape != (K, M) or q.min() < 0:
                raise ConfigurationError("response_probs must be a nonnegative (K, M) array")
            w = q[:, :, None] * q[:, None, :]
        if b.exclude_ties:
            w = w * (1.0 - np.eye(M))[None]
        mu = np.zeros((K, M, M))
        for x in range(K):
            if px[x] == 0:
                continue
            tot = w[x].sum()
            if tot <= 0:
                raise ConfigurationError(f"behavior law has empty pair support at prompt {x}")
            mu[x] = px[x] * w[x] / tot
        return mu

    def to_dict(self):
        return {
            "K": self.K,
            "M": self.M,
            "R": self.R,
            "true_reward": self.true_reward.values.ravel().tolist(),
            "reference_policy": self.reference_policy.to_dict(),
            "prompt_dist": self.prompt_dist.tolist(),
            "behavior": self.behavior.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        from .policy import TabularPolicy

        K, M = int(d["K"]), int(d["M"])
        r = RewardTable(np.asarray(d["true_reward"], dtype=float).reshape(K, M), float(d["R"]))
        return cls(
            r,
            TabularPolicy.from_dict(d["reference_policy"]),
            np.asarray(d["prompt_dist"], dtype=float),
            BehaviorSpec.from_dict(d.get("behavior", {})),
        )


def _check_index(r, x, a1, a0):
    K, M = r.shape
    if not (0 <= x < K and 0 <= a1 < M and 0 <= a0 < M):
        raise InputError(f"index (x={x}, a1={a1}, a0={a0}) out of range for table {r.shape}")


def bt_prob(r, x, a1, a0):
    """Probability that ``a1`` is preferred to ``a0`` at prompt ``x``."""
    r = reward_array(r)
    _check_index(r, x, a1, a0)
    return float(sigmoid(r[x, a1] - r[x, a0]))


def sample_label(r, x, a1, a0, rng):
    r = reward_array(r)
    _check_index(r, x, a1, a0)
    return int(rng.random() < sigmoid(r[x, a1] - r[x, a0]))


def sample_labels(r, x, a1, a0, rng):
    """Vectorized :func:`sample_label`; one uniform draw per record, in order."""
    r = reward_array(r)
    p = sigmoid(r[x, a1] - r[x, a0])
    return (rng.random(len(p)) < p).astype(np.int64)


def generate_dataset(inst, N, rng, seed=None):
    """Draw ``N`` i.i.d. records from ``mu_D`` with labels under ``r*``."""
    if N < 1:
        raise InputError("N must be at least 1")
    mu = inst.data_distribution()
    flat = mu.ravel()
    flat = flat / flat.sum()
    idx = rng.choice(flat.size, size=int(N), p=flat)
    x, a1, a0 = np.unravel_index(idx, mu.shape)
    y = sample_labels(inst.true_reward, x, a1, a0, rng)
    return PreferenceDataset(x, a1, a0, y, seed=seed)


def nested_dataset(inst, N, seed, *stream):
    """Like :func:`generate_dataset`, but prefix-stable in ``N``.

    Comparisons and labels come from two uniform streams derived from
    ``(seed, *stream)``, one draw per record, so the first ``n`` records are the
    same for every ``N >= n``. Sweeps over ``N`` then compare nested datasets
    (common random numbers) instead of independent ones.
    """
    if N < 1:
        raise InputError("N must be at least 1")
    mu = inst.data_distribution()
    cdf = np.cumsum(mu.ravel())
    cdf /= cdf[-1]
    u = make_rng(seed, *stream, 0).random(int(N))
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)
    x, a1, a0 = np.unravel_index(idx, mu.shape)
    r = inst.true_reward.values
    y = (make_rng(seed, *stream, 1).random(int(N)) < sigmoid(r[x, a1] - r[x, a0])).astype(np.int64)
    return PreferenceDataset(x, a1, a0, y, seed=seed)


def _margins(r, data):
    x, a1, a0, n, pos = data.pair_counts
    return r[x, a1] - r[x, a0], n, pos


def mle_loss(r, data):
    """Average BT negative log-likelihood of ``data`` under reward ``r`` (natural log)."""
    if len(data) == 0:
        raise InputError("mle_loss needs a nonempty dataset")
    r = reward_array(r)
    d, n, pos = _margins(r, data)
    return float(np.sum(pos * softplus(-d) + (n - pos) * softplus(d)) / data.N)


def mle_gradient(r, data):
    """Exact gradient of :func:`mle_loss` with respect to every reward entry."""
    if len(data) == 0:
        raise InputError("mle_gradient needs a nonempty dataset")
    r = reward_array(r)
    x, a1, a0, n, pos = data.pair_counts
    d = r[x, a1] - r[x, a0]
    w = (n * sigmoid(d) - pos) / data.N
    g = np.zeros_like(r)
    np.add.at(g, (x, a1), w)
    np.add.at(g, (x, a0), -w)
    return g


def mle_hessian(r, data):
    """Hessian of :func:`mle_loss` over the flattened reward table (row-major)."""
    r = reward_array(r)
    K, M = r.shape
    x, a1, a0, n, _ = data.pair_counts
    s = sigmoid(r[x, a1] - r[x, a0])
    w = n * s * (1.0 - s) / data.N
    i, j = x * M + a1, x * M + a0
    H = np.zeros((K * M, K * M))
    np.add.at(H, (i, i), w)
    np.add.at(H, (j, j), w)
    np.add.at(H, (i, j), -w)
    np.add.at(H, (j, i), -w)
    return H


def tv_bt(r1, r2, x, a1, a0):
    """Total variation between the two Bernoulli BT laws of a comparison."""
    r1, r2 = reward_array(r1), reward_array(r2)
    _check_index(r1, x, a1, a0)
    return float(abs(sigmoid(r1[x, a1] - r1[x, a0]) - sigmoid(r2[x, a1] - r2[x, a0])))


def hellinger_sq_bt(r1, r2, x, a1, a0):
    """Squared Hellinger distance ``1/2 sum (sqrt p - sqrt q)^2`` between two BT laws."""
    r1, r2 = reward_array(r1), reward_array(r2)
    _check_index(r1, x, a1, a0)
    p = sigmoid(r1[x, a1] - r1[x, a0])
    q = sigmoid(r2[x, a1] - r2[x, a0])
    return float(0.5 * ((np.sqrt(p) - np.sqrt(q)) ** 2 + (np.sqrt(1 - p) - np.sqrt(1 - q)) ** 2))


def expected_hellinger_sq(r1, r2, mu):
    """``E_{mu}[D_H^2]`` over an exact ``(K, M, M)`` comparison law."""
    r1, r2 = reward_array(r1), reward_array(r2)
    p = sigmoid(r1[:, :, None] - r1[:, None, :])
    q = sigmoid(r2[:, :, None] - r2[:, None, :])
    h = 0.5 * ((np.sqrt(p) - np.sqrt(q)) ** 2 + (np.sqrt(1 - p) - np.sqrt(1 - q)) ** 2)
    return float(np.sum(mu * h))


def sigmoid_kappa(R):
    """Lower Lipschitz constant ``1 / (1 + e^R)^2`` of the sigmoid on ``[-R, R]``."""
    if R < 0:
        raise InputError("R must be nonnegative")
    return float(1.0 / (1.0 + np.exp(R)) ** 2)
