"""
Trajectory Figures.

Overlays the reference trajectory and the observed states of one or more
episode CSVs, one SVG file per state coordinate.
"""

import csv
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from shiftguard.errors import PlotInputError

logger = logging.getLogger(__name__)

REFERENCE_COLOR = "tab:green"
SERIES_COLORS = ("tab:blue", "tab:red", "tab:orange", "tab:purple", "tab:brown", "tab:gray")
SVG_HASH_SALT = "shiftguard"


def read_episode(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """
    Columns of an episode CSV as float arrays (blank cells become NaN).

    Raises:
        PlotInputError: If the file is empty or has no rows
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if not reader.fieldnames:
            raise PlotInputError(f"{path} is empty")
        rows = list(reader)
    if not rows:
        raise PlotInputError(f"{path} has no rows")
    columns = {}
    for name in reader.fieldnames:
        if name == "solver_status":
            continue
        try:
            columns[name] = np.array([float(r[name]) if r[name] != "" else np.nan for r in rows])
        except ValueError:
            raise PlotInputError(f"{path}: column {name} is not numeric", column=name)
    return columns


def _require(columns: Dict[str, np.ndarray], name: str, path: Path) -> np.ndarray:
    if name not in columns:
        raise PlotInputError(f"{path} has no column {name}", column=name)
    return columns[name]


def state_count(columns: Dict[str, np.ndarray]) -> int:
    count = 0
    while f"s_{count}" in columns:
        count += 1
    return count


def plot_episodes(
    paths: Sequence[Union[str, Path]],
    out_dir: Union[str, Path],
    labels: Optional[Sequence[str]] = None,
) -> List[Path]:
    """
    Write ``state_<i>.svg`` for every state coordinate.

    The reference comes from the first episode; every episode adds its
    observed states as one labelled line.

    Args:
        paths: Episode CSV files
        out_dir: Output directory
        labels: Legend labels (file stems when None)

    Returns:
        The written files

    Raises:
        PlotInputError: On missing columns, empty files or mismatched labels
    """
    paths = [Path(p) for p in paths]
    if not paths:
        raise PlotInputError("no episode files given")
    labels = list(labels) if labels else [p.stem for p in paths]
    if len(labels) != len(paths):
        raise PlotInputError(f"{len(labels)} labels given for {len(paths)} files")

    episodes = [read_episode(p) for p in paths]
    for columns, path in zip(episodes, paths):
        _require(columns, "t", path)
    n = state_count(episodes[0])
    if n == 0:
        raise PlotInputError(f"{paths[0]} has no column s_0", column="s_0")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plt.rcParams["svg.hashsalt"] = SVG_HASH_SALT
    written = []
    for i in range(n):
        fig, ax = plt.subplots(figsize=(6.0, 3.5))
        reference = _require(episodes[0], f"ref_{i}", paths[0])
        ax.plot(episodes[0]["t"], reference, color=REFERENCE_COLOR, linewidth=2.0, label="reference")
        for k, (columns, path, label) in enumerate(zip(episodes, paths, labels)):
            ax.plot(
                _require(columns, "t", path),
                _require(columns, f"s_{i}", path),
                color=SERIES_COLORS[k % len(SERIES_COLORS)],
                linewidth=1.2,
                label=label,
            )
        ax.set_xlabel("step")
        ax.set_ylabel(f"s_{i}")
        ax.legend(loc="best")
        fig.tight_layout()
        target = out_dir / f"state_{i}.svg"
        fig.savefig(target, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(target)
    logger.info(f"Wrote {len(written)} figures to {out_dir}")
    return written
