#!/usr/bin/env python3
"""Render V(t) (and optionally the predicted dV/dt) from a diagnostics CSV.

Usage: plot_volume.py diagnostics.csv [out.png]

The package itself has no plotting dependency; this helper needs
matplotlib installed.
"""
import csv
import sys


def main(argv):
    if len(argv) < 2 or len(argv) > 3:
        print(__doc__.strip(), file=sys.stderr)
        return 2
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("plot_volume.py needs matplotlib (pip install matplotlib)",
              file=sys.stderr)
        return 2

    path = argv[1]
    out = argv[2] if len(argv) == 3 else "volume.png"
    t, v, pred = [], [], []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            t.append(float(row["t"]))
            v.append(float(row["V"]))
            pred.append(float(row["dVdt_predicted"]))

    fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(6, 6))
    ax1.plot(t, v, "o-", ms=3)
    ax1.set_ylabel("V")
    ax2.plot(t, pred, "s-", ms=3, color="tab:orange")
    ax2.set_ylabel("predicted dV/dt")
    ax2.set_xlabel("t")
    ax1.set_title(path)
    fig.tight_layout()
    fig.savefig(out, dpi=130)
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
