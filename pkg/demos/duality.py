"""The pessimistic maximin and the tractable minimax meet at the same value.

The maximin problem is a max over policies of a min over rewards. Swapping the
order gives a convex problem in the reward alone, whose solution yields a
policy in closed form. This script solves both on random instances and
prints the gap.

    python3 demos/duality.py
"""

from rpolab.adversarial import RewardClassSpec, duality_gap, theory_hyperparams
from rpolab.instances import random_instance
from rpolab.policy import chosen_policy
from rpolab.preference import generate_dataset
from rpolab.rng import make_rng


def main():
    for seed in range(4):
        inst = random_instance(2, 4, seed=seed)
        data = generate_dataset(inst, 100, make_rng(seed, 1))
        hp = theory_hyperparams(len(data), 0.1, inst.R, inst.K, inst.M)
        rep = duality_gap(inst, chosen_policy(data, inst), data, RewardClassSpec(inst.R), hp.beta, hp.eta)
        print(
            f"seed {seed}: maximin {rep.maximin_value:.6f}  minimax {rep.minimax_value:.6f}  "
            f"gap {rep.duality_gap:.1e}  recovered policy scores {rep.transfer_value:.6f}"
        )


if __name__ == "__main__":
    main()
