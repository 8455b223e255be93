import json
import logging
from pathlib import Path

import pandas as pd
from fastapi import FastAPI, HTTPException, Query
from fastapi.middleware.cors import CORSMiddleware

from src.core.config import TOOL_VERSION, get_settings
from src.core.errors import CrashSimError
from src.services.outcome_service import delta_v, load_histogram

logger = logging.getLogger(__name__)

app = FastAPI(title="crashsim API", version=TOOL_VERSION)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_methods=["GET"],
    allow_headers=["*"],
)


def _output_root() -> Path:
    return get_settings().output_root


def _campaign_dir(name: str) -> Path:
    root = _output_root().resolve()
    campaign_dir = (root / name).resolve()
    if campaign_dir.parent != root or not (campaign_dir / "summary.json").exists():
        raise HTTPException(status_code=404, detail=f"Campaign '{name}' not found")
    return campaign_dir


# -------------------------
# Health
# -------------------------
@app.get("/health")
def health():
    return {"status": "ok", "version": TOOL_VERSION}


# -------------------------
# Campaign artifacts
# -------------------------
@app.get("/campaigns")
def list_campaigns():
    """Campaign directories under the output root that hold a summary."""
    root = _output_root()
    if not root.exists():
        return []
    return [p.parent.name for p in sorted(root.glob("*/summary.json"))]


@app.get("/campaigns/{name}/summary")
def campaign_summary(name: str):
    campaign_dir = _campaign_dir(name)
    summary = json.loads((campaign_dir / "summary.json").read_text(encoding="utf-8"))

    weighting = campaign_dir / "weighting.json"
    if weighting.exists():
        summary["weighting"] = json.loads(weighting.read_text(encoding="utf-8"))
    return summary


@app.get("/campaigns/{name}/histogram")
def campaign_histogram(
    name: str,
    transformed: bool = Query(default=False, description="Histogram after the selection-bias transfer function"),
):
    campaign_dir = _campaign_dir(name)
    path = campaign_dir / ("histogram_transformed.csv" if transformed else "histogram.csv")
    if not path.exists():
        raise HTTPException(status_code=404, detail=f"No {'transformed ' if transformed else ''}histogram for '{name}'")

    try:
        dist = load_histogram(path)
    except CrashSimError as exc:
        logger.error("Unreadable histogram %s: %s", path, exc)
        raise HTTPException(status_code=500, detail=str(exc)) from exc

    bins = pd.DataFrame({
        "bin_low_kmh": dist.bin_lows,
        "bin_high_kmh": dist.bin_highs,
        "weight": dist.weights_array,
    })
    return {
        "campaign": name,
        "transformed": transformed,
        "bin_width": dist.bin_width,
        "mean": dist.mean,
        "components": dist.components,
        "bins": bins.to_dict(orient="records"),
    }


# -------------------------
# Tools
# -------------------------
@app.get("/tools/delta-v")
def delta_v_tool(
    v1: float = Query(..., ge=0, description="Follower speed at impact (m/s)"),
    v2: float = Query(..., ge=0, description="Lead speed at impact (m/s)"),
    m1: float = Query(..., gt=0, description="Follower mass (kg)"),
    m2: float = Query(..., gt=0, description="Lead mass (kg)"),
):
    """Follower delta-v of a fully plastic rear-end impact."""
    if v1 < v2:
        raise HTTPException(status_code=422, detail="follower must be faster than the lead at impact")
    return {"delta_v_kmh": delta_v(v1, v2, m1, m2)}
