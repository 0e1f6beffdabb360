"""Regularized preference optimization on finite contextual bandits.

Submodules: ``preference`` (Bradley-Terry data and MLE), ``policy`` (softmax
policies, KL-regularized closed form), ``direct_opt`` (DPO/SFT/RPO losses and
trainer), ``adversarial`` (maximin and minimax solvers), ``analysis``
(coverage, prompt shift, sweeps and studies) and ``cli``.
"""

__version__ = "0.1.0"

from .adversarial import (
    RewardClassSpec,
    SolveReport,
    duality_gap,
    phi,
    solve_maximin,
    solve_minimax,
    t_adv,
    theory_hyperparams,
)
from .direct_opt import TrainerConfig, dpo_loss, rpo_loss, sft_loss, train
from .errors import (
    CertificationError,
    ConfigurationError,
    DivergenceError,
    DomainError,
    InputError,
    RPOLabError,
    SolverError,
)
from .policy import TabularPolicy, optimal_kl_policy
from .preference import BanditInstance, BehaviorSpec, PreferenceDataset, RewardTable, generate_dataset, mle_loss
from .rng import make_rng
