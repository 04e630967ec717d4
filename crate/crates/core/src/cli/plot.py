# Renders the cost and residual history and the particle trails.
# Usage: python plot.py  (run inside the output directory)
import csv
import os

import matplotlib.pyplot as plt


def rows(name):
    with open(name) as f:
        lines = [l for l in f if not l.startswith("#")]
    return list(csv.DictReader(lines))


traj = rows("trajectory.csv")
fig, axes = plt.subplots(1, 2 if os.path.exists("history.csv") else 1, figsize=(10, 4))
axes = axes if hasattr(axes, "__len__") else [axes]

trails = {}
for r in traj:
    trails.setdefault(r["particle"], []).append(r)
ax = axes[0]
for pid, rs in trails.items():
    xs = [float(r["x0"]) for r in rs]
    ys = [float(r["x1"]) if "x1" in r else float(r["t"]) for r in rs]
    ax.plot(xs, ys, lw=0.8)
    ax.plot(xs[-1:], ys[-1:], "k.", ms=4)
ax.set_title("particle trails")

if os.path.exists("history.csv"):
    hist = rows("history.csv")
    it = [int(r["iteration"]) for r in hist]
    ax = axes[1]
    ax.semilogy(it, [max(float(r["residual"]), 1e-16) for r in hist], label="residual")
    ax2 = ax.twinx()
    ax2.plot(it, [float(r["cost"]) for r in hist], "C1", label="cost")
    ax.set_xlabel("iteration")
    ax.set_title("sweep history")

fig.tight_layout()
fig.savefig("plot.png", dpi=120)
