"""Static SVG figures for closed-loop runs.

All output is deterministic for fixed inputs: the SVG hash salt is pinned and
date metadata is stripped, so reruns produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .dynamics import IX_VLON, IX_PSIDOT, IX_ACC
from .simulate import SimLog
from .track import ReferenceTrajectory

matplotlib.rcParams["svg.hashsalt"] = "robustnmpc"


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_gg_diagram(log: SimLog, ccfg, path) -> None:
    """Longitudinal vs lateral acceleration of the true states with the
    admissible envelopes of the acceleration interface."""
    a_lon = log.X[:, IX_ACC]
    a_lat = log.X[:, IX_VLON] * log.X[:, IX_PSIDOT]
    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    ax.scatter(a_lat, a_lon, s=2.0, c="tab:blue", alpha=0.35, linewidths=0,
               label="closed loop", rasterized=False)
    th = np.linspace(0.0, np.pi, 200)
    for ax_acc, ax_dec, style, lab in (
            (ccfg.ax_accel[0], ccfg.ax_decel[0], "k-", "envelope, low speed"),
            (ccfg.ax_accel[1], ccfg.ax_decel[1], "k--", "envelope, high speed")):
        ax.plot(ccfg.ay_max * np.cos(th), ax_acc * np.sin(th), style, lw=1.0,
                label=lab)
        ax.plot(ccfg.ay_max * np.cos(th), -ax_dec * np.sin(th), style, lw=1.0)
    ax.set_xlabel(r"$a_\mathrm{lat}$ [m/s$^2$]")
    ax.set_ylabel(r"$a_\mathrm{lon}$ [m/s$^2$]")
    ax.set_title("gg-diagram")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(alpha=0.3)
    ax.set_aspect("equal")
    _save(fig, path)


def plot_track(log: SimLog, traj: ReferenceTrajectory, path) -> None:
    """Driven trace over the raceline."""
    fig, ax = plt.subplots(figsize=(7.0, 5.0))
    ax.plot(traj.x, traj.y, "k--", lw=1.0, label="raceline")
    pts = ax.scatter(log.X[:, 0], log.X[:, 1], c=log.X[:, IX_VLON], s=2.0,
                     cmap="viridis", linewidths=0, label="vehicle")
    fig.colorbar(pts, ax=ax, label=r"$v_\mathrm{lon}$ [m/s]")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title("track trace")
    ax.legend(loc="best", fontsize=8)
    ax.set_aspect("equal")
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_deviation(log: SimLog, path) -> None:
    """Signed lateral deviation and constraint value over time."""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7.0, 5.0), sharex=True)
    ax1.plot(log.t, log.lat_dev, lw=0.8, color="tab:blue")
    ax1.axhline(0.0, color="k", lw=0.5)
    ax1.set_ylabel("lateral deviation [m]")
    ax1.grid(alpha=0.3)
    ax2.plot(log.t, log.h_true, lw=0.8, color="tab:orange")
    ax2.axhline(1.0, color="k", lw=0.8, ls="--", label="constraint bound")
    ax2.set_ylabel("h (true state)")
    ax2.set_xlabel("t [s]")
    ax2.legend(loc="upper right", fontsize=8)
    ax2.grid(alpha=0.3)
    fig.suptitle("deviation over time")
    _save(fig, path)


def render_run_figures(log: SimLog, traj: ReferenceTrajectory, ccfg,
                       out_dir) -> list:
    """The three standard figures of one run; returns the written paths."""
    out = Path(out_dir)
    paths = [out / "gg_diagram.svg", out / "track_trace.svg", out / "deviation.svg"]
    plot_gg_diagram(log, ccfg, paths[0])
    plot_track(log, traj, paths[1])
    plot_deviation(log, paths[2])
    return paths
