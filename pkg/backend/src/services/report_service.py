# src/services/report_service.py

import logging
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
from matplotlib import pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from src.schemas.campaign_schema import CampaignSummary  # noqa: E402
from src.schemas.outcome_schema import DeltaVDistribution  # noqa: E402
from src.schemas.validation_schema import DmsAssessment, PercentileReport  # noqa: E402

logger = logging.getLogger(__name__)

# Fixed ids and no timestamp so reruns give identical SVG bytes
plt.rcParams["svg.hashsalt"] = "crashsim"
SVG_METADATA = {"Date": None}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", bbox_inches="tight", metadata=SVG_METADATA)
    plt.close(fig)
    logger.info("Rendered %s", path.name)
    return path


def histogram_table(dists: Mapping[str, DeltaVDistribution]) -> pd.DataFrame:
    """All distributions on one bin grid, one weight column per distribution."""
    widths = {d.bin_width for d in dists.values()}
    if len(widths) != 1:
        raise ValueError(f"histograms on different bin widths: {sorted(widths)}")
    width = widths.pop()
    n = max(d.n_bins for d in dists.values())

    table = pd.DataFrame({
        "bin_low_kmh": np.arange(n) * width,
        "bin_high_kmh": (np.arange(n) + 1) * width,
    })
    for name, dist in dists.items():
        table[name] = dist.padded(n) / max(dist.total_mass, 1e-300)
    return table


def render_histograms(dists: Mapping[str, DeltaVDistribution], path: Path, title: str = "") -> Path:
    """Overlaid step histograms with the mean of each distribution in the legend."""
    table = histogram_table(dists)
    edges = np.append(table["bin_low_kmh"].to_numpy(), table["bin_high_kmh"].iloc[-1])

    fig, ax = plt.subplots(figsize=(7, 4))
    for name, dist in dists.items():
        ax.stairs(table[name].to_numpy(), edges, label=f"{name} (mean {dist.mean:.2f} km/h)")
    ax.set_xlabel("Delta-v (km/h)")
    ax.set_ylabel("Share of crashes")
    ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)


def render_percentiles(report: PercentileReport, path: Path, title: str = "") -> Path:
    """Histogram of seed percentiles against the uniform count expected from an unbiased generator."""
    edges = np.asarray(report.bin_edges)
    counts = np.asarray(report.counts)

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", edgecolor="black")
    if counts.sum() > 0:
        ax.axhline(counts.sum() / report.n_bins, linestyle="--", color="grey", label="uniform")
        ax.legend(frameon=False)

    subtitle = f"{report.below_min} below / {report.above_max} above the generated range"
    if report.p_value is not None:
        subtitle += f", chi-square p={report.p_value:.3f}"
    ax.set_title(f"{title}\n{subtitle}" if title else subtitle)
    ax.set_xlabel("Percentile of seed delta-v among generated crashes")
    ax.set_ylabel("Seeds")
    return _save(fig, path)


def dms_table(assessments: Sequence[DmsAssessment]) -> pd.DataFrame:
    """One row per glance cut: avoidance, remaining-crash severity and injury risk reduction."""
    rows = []
    for a in assessments:
        row = {
            "cut_at_s": a.cut_at,
            "avoidance_rate": a.avoidance_rate,
            "seeds_without_crashes": a.seeds_without_crashes,
            "mean_delta_v": a.mean_delta_v,
            "baseline_mean_delta_v": a.baseline_mean_delta_v,
        }
        for level, risk in sorted(a.injury_risk.items()):
            base = a.baseline_injury_risk.get(level)
            row[f"risk_{level}"] = risk
            row[f"baseline_risk_{level}"] = base
            row[f"risk_reduction_{level}"] = (1.0 - risk / base) if base else None
        rows.append(row)
    return pd.DataFrame(rows)


def render_dms(assessments: Sequence[DmsAssessment], path: Path, title: str = "") -> Path:
    table = dms_table(assessments).sort_values("cut_at_s", ascending=False)
    labels = [f"cut {c:g} s" for c in table["cut_at_s"]]

    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 4))
    left.bar(labels, table["avoidance_rate"] * 100.0)
    left.set_ylabel("Crash avoidance (%)")

    means = table["mean_delta_v"].astype(float)
    right.bar(labels, means, label="with DMS")
    right.plot(labels, table["baseline_mean_delta_v"].astype(float), "k_", markersize=30, label="baseline")
    right.set_ylabel("Mean delta-v of remaining crashes (km/h)")
    right.legend(frameon=False)

    fig.suptitle(title)
    return _save(fig, path)


def summary_table(summaries: Sequence[CampaignSummary]) -> pd.DataFrame:
    """The simulation-set table: cells, kernel calls and crash cells per campaign."""
    return pd.DataFrame([{
        "campaign": s.name,
        "model": s.model.value,
        "seeds": s.n_seeds - s.n_excluded,
        "excluded": s.n_excluded,
        "theoretical_cells": s.theoretical_cells,
        "simulated": s.kernel_calls,
        "crash_cells": s.crash_cells,
    } for s in summaries])


def write_tables(tables: Dict[str, pd.DataFrame], out_dir: Path, float_format: Optional[str] = "%.10g") -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for name, table in tables.items():
        path = out_dir / f"{name}.csv"
        table.to_csv(path, index=False, float_format=float_format)
        written[name] = path
    return written
