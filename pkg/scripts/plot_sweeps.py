"""Plot the CSVs written by ``splitecg sweep``.

    python scripts/plot_sweeps.py sweep_depth/ [--out depth.png]

Left panel: seed-averaged accuracy per axis point.  Right panel: max and
mean channel dCor per axis point.  Needs matplotlib (``pip install .[plot]``).
"""

import argparse
import csv
import math
import os


def read_summary(directory):
    with open(os.path.join(directory, "sweep_summary.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: float(v) for k, v in row.items()} for row in rows]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("directory")
    parser.add_argument("--out")
    args = parser.parse_args(argv)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_summary(args.directory)
    # the no-noise baseline of a DP sweep is drawn at the far left
    finite = [r["axis"] for r in rows if math.isfinite(r["axis"])]
    base = (max(finite) * 1.5) if finite else 1.0
    xs = [r["axis"] if math.isfinite(r["axis"]) else base for r in rows]
    labels = ["none" if math.isinf(r["axis"]) else f"{r['axis']:g}" for r in rows]

    fig, (acc_ax, dcor_ax) = plt.subplots(1, 2, figsize=(10, 4))
    acc_ax.errorbar(xs, [r["accuracy_mean"] for r in rows], yerr=[r["accuracy_std"] for r in rows],
                    marker="o", capsize=3)
    acc_ax.set_ylabel("test accuracy")
    dcor_ax.errorbar(xs, [r["max_dcor_mean"] for r in rows], yerr=[r["max_dcor_std"] for r in rows],
                     marker="o", capsize=3, label="max channel")
    dcor_ax.plot(xs, [r["mean_dcor"] for r in rows], marker="s", label="channel mean")
    dcor_ax.set_ylabel("dCor")
    dcor_ax.legend()
    for ax in (acc_ax, dcor_ax):
        ax.set_xticks(xs, labels)
        ax.set_xlabel("axis")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    out = args.out or os.path.join(args.directory, "sweep.png")
    fig.savefig(out, dpi=120)
    print(out)


if __name__ == "__main__":
    main()
