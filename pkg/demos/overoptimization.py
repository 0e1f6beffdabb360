"""How the SFT weight protects the likelihood of chosen responses.

On feature-limited policies DPO tends to push probability off the responses
it was told to prefer. Training the same seeds with a small SFT weight keeps
the mean chosen log-probability higher, and raising the weight keeps it
higher still.

    python3 demos/overoptimization.py
"""

from rpolab.analysis import OveroptConfig, overopt_study


def main():
    rep = overopt_study(OveroptConfig(seeds=20))
    print(f"seeds where RPO >= DPO: {rep.fraction_rpo_ge_dpo:.2f}")
    print(f"eta = 0 reproduces DPO exactly: {rep.eta0_matches_dpo}")
    print(f"median seed {rep.median_seed}:")
    for eta, value in zip(rep.config.eta_grid, rep.median_seed_curve):
        print(f"  eta={eta:<6} mean chosen log-prob {value:.4f}")


if __name__ == "__main__":
    main()
