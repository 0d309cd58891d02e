"""Figures rendered from an evaluation report directory."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .evaluation import read_csv_rows  # noqa: E402
from .rink import RINK_LENGTH, RINK_WIDTH  # noqa: E402

# no timestamps or software tags, so reruns are byte-identical
_PNG_META = {"Software": None}
CURVES = ("overall", "x", "y")


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_phi(csv_path: Path, out: Path, title: str) -> None:
    rows = read_csv_rows(csv_path)
    ts = [float(r["tolerance_ft"]) for r in rows]
    phi = [100.0 * float(r["fraction"]) for r in rows]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(ts, phi, marker="o" if len(ts) == 1 else None)
    ax.set_xlabel("tolerance t (ft)")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    if len(ts) == 1:
        ax.set_xlim(ts[0] - 1, ts[0] + 1)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, out)


def plot_zones(csv_path: Path, out: Path, title: str) -> None:
    """Rink outline with each zone annotated by its accuracy; camera side at the bottom."""
    rows = read_csv_rows(csv_path)
    n = len(rows)
    # zone edges are not stored in the CSV; rebuild them from the built-in partitions
    from .rink import zone_partition

    try:
        edges = [0.0, *zone_partition(n).cut_xs, RINK_LENGTH]
    except ValueError:
        edges = [RINK_LENGTH * k / n for k in range(n + 1)]
    fig, ax = plt.subplots(figsize=(8, 3.8))
    ax.add_patch(Rectangle((0, 0), RINK_LENGTH, RINK_WIDTH, fill=False, linewidth=2))
    for (x0, x1), row in zip(zip(edges[:-1], edges[1:]), rows):
        if x0 > 0:
            ax.axvline(x0, color="tab:blue", linewidth=1.5)
        acc = row["accuracy"]
        text = "n/a" if acc == "" else f"{100.0 * float(acc):.1f}%"
        ax.text((x0 + x1) / 2, RINK_WIDTH / 2, f"{row['label']}\n{text}\n(n={row['n']})",
                ha="center", va="center", fontsize=8)
    ax.set_xlim(-5, RINK_LENGTH + 5)
    ax.set_ylim(-5, RINK_WIDTH + 5)
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, out)


def plot_report(report_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Render phi curves and zone diagrams; raises FileNotFoundError if a CSV is missing."""
    report_dir = Path(report_dir)
    out_dir = Path(out_dir) if out_dir is not None else report_dir
    curve_csvs = [report_dir / f"phi_{name}.csv" for name in CURVES]
    zone_csvs = sorted(report_dir.glob("zones_*.csv"))
    missing = [p for p in curve_csvs if not p.is_file()]
    if missing or not zone_csvs:
        what = ", ".join(str(p) for p in missing) or f"zones_*.csv in {report_dir}"
        raise FileNotFoundError(f"report is incomplete, missing {what}")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, csv_path in zip(CURVES, curve_csvs):
        path = out_dir / f"phi_{name}.png"
        plot_phi(csv_path, path, f"accuracy vs tolerance ({name})")
        written.append(path)
    for csv_path in zone_csvs:
        path = out_dir / f"{csv_path.stem}.png"
        plot_zones(csv_path, path, f"zone accuracy ({csv_path.stem.split('_', 1)[1]} zones)")
        written.append(path)
    return written
