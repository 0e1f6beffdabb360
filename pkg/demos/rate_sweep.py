"""Suboptimality gap of the maximin-trained policy as the dataset grows.

Each sample size gets a batch of seeds. Datasets are nested, so the first N
records at one size are exactly the records used at any smaller size. The
fitted log-log slope should sit near -1/2.

    python3 demos/rate_sweep.py
"""

import time

from rpolab.analysis import SweepConfig, gap_sweep


def main():
    start = time.perf_counter()
    res = gap_sweep(SweepConfig(seed=0))
    for N, med in res.medians.items():
        _, lo, hi, _ = res.quantiles[N]
        print(f"N={N:>6}  median gap {med:.5f}  (quartiles {lo:.5f} .. {hi:.5f})")
    lo, hi = res.slope_ci
    print(f"slope {res.slope:.3f}, bootstrap interval ({lo:.3f}, {hi:.3f})")
    print(f"failed cells: {res.failures}, elapsed {time.perf_counter() - start:.1f}s")


if __name__ == "__main__":
    main()
