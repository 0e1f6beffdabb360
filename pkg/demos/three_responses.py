"""One comparison, three responses, and why the SFT term matters.

The data says only that ``a`` beats ``b``. The DPO loss is flat along a whole
family of minimizers, including ones that move half the mass onto ``c``, a
response the data never saw. Adding the SFT term on the chosen response picks
the minimizer that concentrates on ``a``.

    python3 demos/three_responses.py
"""

from rpolab.analysis import figure1_study


def main():
    rep = figure1_study(eta_grid=(0.005, 0.1), steps=2000)
    print(f"{'policy':<22}{'pi(a)':>9}{'pi(b)':>9}{'pi(c)':>9}{'J':>9}")
    for row in rep.rows:
        a, b, c = row["probs"]
        name = row["policy"] + (f" eta={row['eta']}" if "eta" in row else "")
        print(f"{name:<22}{a:>9.4f}{b:>9.4f}{c:>9.4f}{row['J']:>9.4f}")
    print()
    for key, value in rep.certificate.items():
        print(f"{key}: {value}")


if __name__ == "__main__":
    main()
