"""DPO, SFT and RPO objectives on softmax policies, with analytic gradients.

Gradients are returned in the policy's parameter coordinates: the logit table
for tabular policies, ``theta`` for feature-limited ones. Every log-probability
inside a loss is floored at ``log(epsilon_floor)``; where the floor is active
the corresponding gradient contribution is zero.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, InputError
from .policy import TabularPolicy, check_support, chosen_policy, gap, kl_rows, optimal_policy, value
from .preference import sigmoid, softplus
from .rng import make_rng

DEFAULT_FLOOR = 1e-12
TRACE_COLUMNS = (
    "step",
    "rpo_loss",
    "dpo_term",
    "sft_term",
    "mean_chosen_logprob",
    "mean_kl_to_ref",
    "J_pi",
    "gap_vs_optimal",
)


def _floored_log_probs(pol, floor):
    lp = pol.log_probs()
    log_floor = math.log(floor)
    active = pol.support & (lp >= log_floor)
    return np.maximum(lp, log_floor), active


def _logit_grad(pol, coef, active):
    """Chain rule from ``d loss / d log pi(x, a)`` (``coef``) to the logit table."""
    coef = np.where(active, coef, 0.0)
    p = pol.probs()
    return np.where(pol.support, coef - p * coef.sum(axis=1, keepdims=True), 0.0)


def _dpo_parts(pol, ref, data, beta, floor):
    if len(data) == 0:
        raise InputError("preference loss needs a nonempty dataset")
    check_support(pol, ref)
    lp, active = _floored_log_probs(pol, floor)
    lr, _ = _floored_log_probs(ref, floor)
    x, a1, a0, n, pos = data.pair_counts
    h = beta * ((lp[x, a1] - lr[x, a1]) - (lp[x, a0] - lr[x, a0]))
    return lp, active, (x, a1, a0, n, pos), h


def dpo_loss(pol, ref, data, beta, floor=DEFAULT_FLOOR):
    """BT cross-entropy at the implicit reward ``beta * log(pol / ref)``."""
    _, _, (_, _, _, n, pos), h = _dpo_parts(pol, ref, data, beta, floor)
    return float(np.sum(pos * softplus(-h) + (n - pos) * softplus(h)) / data.N)


def dpo_gradient(pol, ref, data, beta, floor=DEFAULT_FLOOR):
    _, active, (x, a1, a0, n, pos), h = _dpo_parts(pol, ref, data, beta, floor)
    # d loss / d h per distinct triple, then d h / d log pi = +beta at a1, -beta at a0
    w = beta * (n * sigmoid(h) - pos) / data.N
    coef = np.zeros(pol.shape)
    np.add.at(coef, (x, a1), w)
    np.add.at(coef, (x, a0), -w)
    return pol.params_gradient(_logit_grad(pol, coef, active))


def sft_loss(pol, base, d0, floor=DEFAULT_FLOOR):
    """``E_{x~d0, a~base}[-log pol(a|x)]``; terms with zero base mass are skipped."""
    lp, _ = _floored_log_probs(pol, floor)
    weights = np.asarray(d0, dtype=float)[:, None] * base.probs()
    return float(-np.sum(np.where(weights > 0, weights * lp, 0.0)))


def sft_gradient(pol, base, d0, floor=DEFAULT_FLOOR):
    _, active = _floored_log_probs(pol, floor)
    coef = -np.asarray(d0, dtype=float)[:, None] * base.probs()
    return pol.params_gradient(_logit_grad(pol, coef, active))


@dataclass(frozen=True)
class RPOLoss:
    total: float
    dpo_term: float
    sft_term: float


def rpo_loss(pol, ref, base, data, d0, beta, eta, floor=DEFAULT_FLOOR):
    """``eta * beta * SFT + DPO``; with ``eta == 0`` the total is the DPO loss exactly."""
    dpo = dpo_loss(pol, ref, data, beta, floor)
    sft = sft_loss(pol, base, d0, floor)
    total = dpo if eta == 0 else dpo + eta * beta * sft
    return RPOLoss(total, dpo, sft)


def rpo_gradient(pol, ref, base, data, d0, beta, eta, floor=DEFAULT_FLOOR):
    g = dpo_gradient(pol, ref, data, beta, floor)
    if eta == 0:
        return g
    return g + eta * beta * sft_gradient(pol, base, d0, floor)


@dataclass(frozen=True)
class TrainerConfig:
    """Hyperparameters of the gradient-descent trainer.

    ``baseline`` is ``"chosen"`` (smoothed distribution of preferred responses),
    ``"ref"``, or an explicit :class:`TabularPolicy`. ``token_average`` exists
    for parity with sequence-level trainers: in a bandit every response is a
    single token, so it changes nothing.
    """

    beta: float = 1.0
    eta: float = 0.005
    learning_rate: float = 0.1
    steps: int = 1000
    batch: str | int = "full"
    seed: int = 0
    baseline: str | TabularPolicy = "chosen"
    chosen_smoothing: float = 0.5
    epsilon_floor: float = DEFAULT_FLOOR
    log_every: int = 1
    token_average: bool = False

    def __post_init__(self):
        if not self.beta > 0:
            raise InputError("beta must be positive")
        if not self.eta >= 0:
            raise InputError("eta must be nonnegative")
        if not self.learning_rate > 0:
            raise InputError("learning_rate must be positive")
        if self.steps < 0 or self.log_every < 1:
            raise InputError("steps must be >= 0 and log_every >= 1")
        if self.batch != "full" and not (isinstance(self.batch, int) and self.batch >= 1):
            raise InputError("batch must be 'full' or a positive integer")
        if isinstance(self.baseline, str) and self.baseline not in ("chosen", "ref"):
            raise InputError("baseline must be 'chosen', 'ref' or a policy")


@dataclass(frozen=True)
class TraceRow:
    step: int
    rpo_loss: float
    dpo_term: float
    sft_term: float
    mean_chosen_logprob: float
    mean_kl_to_ref: float
    J_pi: float
    gap_vs_optimal: float


@dataclass
class TrainTrace:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.rows:
            w.writerow([r.step] + [repr(float(getattr(r, c))) for c in TRACE_COLUMNS[1:]])
        return buf.getvalue()


def resolve_baseline(baseline, data, inst, smoothing=0.5):
    if isinstance(baseline, TabularPolicy):
        return baseline
    if baseline == "ref":
        return inst.reference_policy
    return chosen_policy(data, inst, smoothing)


def mean_chosen_logprob(pol, data):
    lp = pol.log_probs()
    return float(np.mean(lp[data.x, data.chosen]))


def _subset(data, idx):
    from .preference import PreferenceDataset

    return PreferenceDataset(data.x[idx], data.a1[idx], data.a0[idx], data.y[idx])


def train(inst, data, config, method="rpo", init=None):
    """Plain gradient descent on the DPO or RPO loss, starting from ``pi_ref``.

    ``init`` overrides the starting policy; it must share the reference
    policy's support (feature-limited reference policies are trained in their
    ``theta`` coordinates). Returns the final policy and a :class:`TrainTrace`
    with one row every ``config.log_every`` steps plus the initial and final
    states.
    """
    if method not in ("dpo", "rpo"):
        raise InputError("method must be 'dpo' or 'rpo'")
    if len(data) == 0:
        raise InputError("training needs a nonempty dataset")
    data.check_indices(inst.K, inst.M)
    ref = inst.reference_policy
    eta = 0.0 if method == "dpo" else config.eta
    beta, floor = config.beta, config.epsilon_floor
    base = resolve_baseline(config.baseline, data, inst, config.chosen_smoothing)
    d0 = inst.prompt_dist
    pi_star = optimal_policy(inst)
    rng = make_rng(config.seed, 1) if config.batch != "full" else None

    pol = ref if init is None else init
    trace = TrainTrace()

    def record(step, pol):
        loss = rpo_loss(pol, ref, base, data, d0, beta, eta, floor)
        trace.rows.append(
            TraceRow(
                step,
                loss.total,
                loss.dpo_term,
                loss.sft_term,
                mean_chosen_logprob(pol, data),
                float(np.dot(d0, kl_rows(pol, ref))),
                value(pol, inst),
                gap(pol, pi_star, inst),
            )
        )
        if not math.isfinite(loss.total):
            raise DivergenceError(f"non-finite loss at step {step}", {"step": step, "loss": loss.total})

    record(0, pol)
    for step in range(1, config.steps + 1):
        batch = data
        if rng is not None:
            idx = rng.choice(len(data), size=min(config.batch, len(data)), replace=False)
            batch = _subset(data, np.sort(idx))
        g = rpo_gradient(pol, ref, base, batch, d0, beta, eta, floor)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient at step {step}", {"step": step})
        pol = pol.with_params(pol.params - config.learning_rate * g)
        if step % config.log_every == 0 or step == config.steps:
            record(step, pol)
    return pol, trace
