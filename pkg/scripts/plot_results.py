"""Plot the CSVs written by the other scripts (needs matplotlib, not a package dependency)."""
import argparse
import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_schedulers(rows, out):
    kernels = sorted({r["kernel"] for r in rows})
    fig, axes = plt.subplots(1, len(kernels), figsize=(5 * len(kernels), 3.5), squeeze=False)
    for ax, kernel in zip(axes[0], kernels):
        series = defaultdict(list)
        for r in rows:
            if r["kernel"] == kernel:
                series[r["policy"]].append((float(r["slo_ms"]), float(r["slo_attainment"])))
        for policy, pts in series.items():
            xs, ys = zip(*sorted(pts))
            ax.plot(xs, ys, marker="o", label=policy)
        ax.set(title=kernel, xlabel="SLO (ms per token)", ylabel="SLO attainment", ylim=(0, 1.02))
        ax.legend()
    fig.tight_layout()
    fig.savefig(out / "schedulers.png", dpi=120)


def plot_cold_start(rows, out):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    series = defaultdict(list)
    for r in rows:
        series[r["mode"]].append((float(r["rps"]), float(r["cold_start_share"])))
    for mode, pts in series.items():
        xs, ys = zip(*sorted(pts))
        ax.plot(xs, ys, marker="o", label=mode)
    ax.set(xlabel="requests per second", ylabel="cold-start share of latency")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "cold_start.png", dpi=120)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--results", default="results")
    args = p.parse_args()
    res = Path(args.results)
    if (res / "schedulers.csv").exists():
        plot_schedulers(read(res / "schedulers.csv"), res)
    if (res / "cold_start.csv").exists():
        plot_cold_start(read(res / "cold_start.csv"), res)


if __name__ == "__main__":
    main()
