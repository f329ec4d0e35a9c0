"""Static time-series figures from an exported trajectory CSV.

Three views: node voltages of the controlled units, their errors
against the references embedded in the CSV header comments, and a
zoomed error view that makes the post-event volt-level wiggles visible.
Everything renders to files; there is no interactive path.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

FIG_SIZE = (8.0, 4.5)     # inches
DPI = 140
RC = {
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.35,
    "lines.linewidth": 1.0,
    "legend.fontsize": 8,
    "figure.constrained_layout.use": True,
}


@dataclass
class TrajectoryTable:
    """Parsed trajectory CSV: columns by name plus header metadata."""

    t: np.ndarray
    columns: dict                 # column name -> 1-D array
    refs: dict = field(default_factory=dict)    # dgu id -> (Vd*, Vq*)
    events: list = field(default_factory=list)  # (time, description)

    @property
    def dgu_ids(self) -> list:
        return sorted(self.refs)

    def dgu_voltage(self, i: int) -> np.ndarray:
        return np.column_stack([self.columns[f"node{i}.Vd"],
                                self.columns[f"node{i}.Vq"]])


def read_trajectory_csv(path) -> TrajectoryTable:
    """Parse the simulator's CSV export, comments included.

    Column names contain dots, so this is a hand-rolled split rather
    than a structured-array load.
    """
    refs: dict = {}
    events: list = []
    header: list | None = None
    rows: list = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] == "ref":
                refs[int(parts[1].removeprefix("dgu"))] = (
                    float(parts[2]), float(parts[3]))
            elif parts and parts[0] == "event":
                events.append((float(parts[1].removeprefix("t=")),
                               " ".join(parts[2:])))
            continue
        if header is None:
            header = [c.strip() for c in line.split(",")]
            continue
        rows.append([float(v) for v in line.split(",")])
    if header is None or not rows:
        raise ValueError(f"{path}: no data rows found")
    data = np.asarray(rows)
    if data.shape[1] != len(header):
        raise ValueError(
            f"{path}: row width {data.shape[1]} != header {len(header)}")
    columns = {name: data[:, k] for k, name in enumerate(header)}
    return TrajectoryTable(t=columns["t"], columns=columns,
                           refs=refs, events=events)


def _mark_events(ax, table: TrajectoryTable) -> None:
    for (te, _desc) in table.events:
        ax.axvline(te, color="0.4", linestyle="--", linewidth=0.7,
                   zorder=0)


def _dgu_color(k: int):
    return plt.get_cmap("tab10")(k % 10)


def plot_voltages(table: TrajectoryTable, out_dir,
                  stem: str = "voltages") -> Path:
    """d- and q-axis node voltages of every referenced unit."""
    out = Path(out_dir) / f"{stem}.png"
    with plt.rc_context(RC):
        fig, axes = plt.subplots(2, 1, sharex=True, figsize=FIG_SIZE)
        for axis, ax in zip(("Vd", "Vq"), axes):
            for k, i in enumerate(table.dgu_ids):
                v = table.columns[f"node{i}.{axis}"]
                ax.plot(table.t, v / 1e3, color=_dgu_color(k),
                        label=f"unit {i}")
                ref = table.refs[i][0 if axis == "Vd" else 1]
                ax.axhline(ref / 1e3, color=_dgu_color(k),
                           linestyle=":", linewidth=0.6)
            _mark_events(ax, table)
            ax.set_ylabel(f"{axis} (kV)")
        axes[0].legend(ncol=min(6, len(table.dgu_ids)), loc="lower right")
        axes[1].set_xlabel("t (s)")
        fig.savefig(out, dpi=DPI)
        plt.close(fig)
    return out


def _plot_errors(table: TrajectoryTable, out: Path,
                 ylim: float | None) -> None:
    with plt.rc_context(RC):
        fig, axes = plt.subplots(2, 1, sharex=True, figsize=FIG_SIZE)
        for col, ax in zip((0, 1), axes):
            for k, i in enumerate(table.dgu_ids):
                err = table.dgu_voltage(i)[:, col] - table.refs[i][col]
                ax.plot(table.t, err, color=_dgu_color(k),
                        label=f"unit {i}")
            _mark_events(ax, table)
            ax.set_ylabel(("dVd" if col == 0 else "dVq") + " (V)")
            if ylim is not None:
                ax.set_ylim(-ylim, ylim)
        axes[0].legend(ncol=min(6, len(table.dgu_ids)), loc="upper right")
        axes[1].set_xlabel("t (s)")
        fig.savefig(out, dpi=DPI)
        plt.close(fig)


def plot_voltage_errors(table: TrajectoryTable, out_dir,
                        stem: str = "voltage_errors",
                        zoom: float = 20.0) -> list:
    """Error traces at full scale plus a +-zoom view (volts)."""
    out_dir = Path(out_dir)
    full = out_dir / f"{stem}.png"
    zoomed = out_dir / f"{stem}_zoom.png"
    _plot_errors(table, full, None)
    _plot_errors(table, zoomed, zoom)
    return [full, zoomed]


def plot_storage(table: TrajectoryTable, out_dir,
                 stem: str = "storage") -> Path | None:
    """Composite storage H_MG on a log axis, if the column is present."""
    if "H_MG" not in table.columns:
        return None
    out = Path(out_dir) / f"{stem}.png"
    h = table.columns["H_MG"]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(8.0, 3.0))
        ok = np.isfinite(h) & (h > 0)
        ax.semilogy(table.t[ok], h[ok], color="tab:purple", linewidth=1.0)
        _mark_events(ax, table)
        ax.set_xlabel("t (s)")
        ax.set_ylabel("H_MG (J)")
        fig.savefig(out, dpi=DPI)
        plt.close(fig)
    return out


def render_all(csv_path, out_dir) -> list:
    """Render every figure for one CSV; returns the written paths."""
    table = read_trajectory_csv(csv_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [plot_voltages(table, out_dir)]
    paths += plot_voltage_errors(table, out_dir)
    storage = plot_storage(table, out_dir)
    if storage is not None:
        paths.append(storage)
    return paths
