import json

import pytest
from click.testing import CliRunner

from src.cli.main import cli
from src.core.config import get_settings

SMALL_PIPELINE = {
    "synthesis": {
        "n_seeds": 6,
        "rng_seed": 2,
        "lead_behavior_counts": {"braking": 4, "non-braking": 1, "standstill-at-start": 1},
    },
    "campaign": {"name": "cbm-small", "synthetic_glances": {"n_glances": 300, "max_duration_s": 2.0}},
    "bias": {"synthetic_occupants": {"n_records": 300}, "grid": {"c1_step": 0.5, "c2_step": 0.05}},
    "sensitivity": {"n_variants": 2, "pdo_shares": [0.7]},
    "dms": {"cuts": [1.0]},
}


def _config(tmp_path, document, name="pipeline.json"):
    path = tmp_path / name
    path.write_text(json.dumps(document))
    return path


def _invoke(config, out, *args):
    return CliRunner().invoke(cli, ["--config", str(config), "--out", str(out), *args])


def _error(result):
    """The JSON error document among the stderr lines."""
    (line,) = [l for l in result.stderr.splitlines() if l.startswith("{")]
    return json.loads(line)


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    config = _config(root, SMALL_PIPELINE)
    out = root / "output"
    result = _invoke(config, out, "run")
    return result, config, out


def test_run_writes_every_artifact(pipeline_run):
    result, _, out = pipeline_run

    assert result.exit_code == 0, result.output
    campaign = out / "cbm-small"
    for name in [
        "outcomes.csv", "seed_meta.csv", "summary.json", "diagnostics.csv", "glance.csv", "overshoot.csv",
        "samples.csv", "weights.csv", "weighting.json", "histogram.csv", "histogram_transformed.csv",
        "stats.csv", "percentiles.csv", "percentile_histogram.json", "dms.csv", "dms.json",
        "report/histograms.svg", "report/dms.svg", "report/simulation_sets.csv", "simulate.manifest.json",
        "weight.manifest.json", "apply-bias.manifest.json", "validate.manifest.json", "assess-dms.manifest.json",
        "report/report.manifest.json",
    ]:
        assert (campaign / name).exists(), name
    for name in ["reference.csv", "reference_with_pdo.csv", "pdo_model.json", "transfer.json", "fit-bias.manifest.json"]:
        assert (out / "bias" / name).exists(), name
    assert len(list((out / "seeds").glob("seed-*.csv"))) == 6


def test_manifest_records_digests(pipeline_run):
    _, _, out = pipeline_run

    manifest = json.loads((out / "cbm-small" / "report" / "report.manifest.json").read_text())

    assert manifest["command"] == "report"
    assert "histograms.svg" in manifest["outputs"]
    assert all(len(digest) == 64 for digest in manifest["inputs"].values())
    assert len(manifest["digest"]) == 64


def test_sensitivity_command(pipeline_run):
    _, config, out = pipeline_run

    result = _invoke(config, out, "sensitivity")

    assert result.exit_code == 0, result.output
    assert (out / "cbm-small" / "sensitivity_fill.csv").exists()
    assert (out / "cbm-small" / "sensitivity_pdo_share.csv").exists()


def test_dms_without_a_cut_avoids_nothing(pipeline_run):
    _, config, out = pipeline_run

    result = _invoke(config, out, "assess-dms", "--cut", "inf")

    assert result.exit_code == 0, result.output
    (assessment,) = json.loads((out / "cbm-small" / "dms.json").read_text())
    assert assessment["avoidance_rate"] == pytest.approx(0.0, abs=1e-9)


def _tree(root):
    """Every file under root by relative path: bytes, or the digest for manifests."""
    tree = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        key = path.relative_to(root).as_posix()
        if path.name.endswith("manifest.json"):
            tree[key] = json.loads(path.read_text())["digest"]
        else:
            tree[key] = path.read_bytes()
    return tree


def test_pipeline_bytes_do_not_depend_on_workers_or_reruns(tmp_path):
    config = _config(tmp_path, SMALL_PIPELINE)
    trees = []
    for label, workers in (("first", 1), ("parallel", 2), ("rerun", 1)):
        out = tmp_path / label
        result = _invoke(config, out, "--workers", str(workers), "run")
        assert result.exit_code == 0, result.output
        trees.append(_tree(out))

    assert "cbm-small/report/histograms.svg" in trees[0]
    assert "bias/transfer.json" in trees[0]
    assert trees[1] == trees[0]
    assert trees[2] == trees[0]


def test_invalid_config_exits_with_2(tmp_path):
    config = _config(tmp_path, {"campaign": {"bogus": 1}})

    result = _invoke(config, tmp_path / "out", "synth")

    assert result.exit_code == 2
    error = _error(result)
    assert error["error"] == "ConfigError"
    assert error["exit_code"] == 2


def test_missing_prerequisite_exits_with_2(tmp_path):
    config = _config(tmp_path, SMALL_PIPELINE)

    result = _invoke(config, tmp_path / "out", "apply-bias")

    assert result.exit_code == 2
    assert "run `crashsim weight` first" in _error(result)["message"]


def test_brake_light_model_without_braking_leads_exits_with_3(tmp_path):
    config = _config(tmp_path, {
        "synthesis": {"n_seeds": 2, "lead_behavior_counts": {"standstill-at-start": 2}},
        "campaign": {"name": "blom", "model": "blom"},
    })
    out = tmp_path / "out"

    assert _invoke(config, out, "synth").exit_code == 0
    result = _invoke(config, out, "simulate")

    assert result.exit_code == 3
    assert _error(result)["error"] == "ModelUndefinedError"
    assert (out / "blom" / "summary.json").exists()


def test_serve_points_the_api_at_the_output_root(tmp_path, monkeypatch):
    calls = []
    monkeypatch.setenv("CRASHSIM_OUTPUT_ROOT", "unused")
    monkeypatch.setattr("uvicorn.run", lambda app, **kwargs: calls.append((app, kwargs)))

    result = CliRunner().invoke(cli, ["--out", str(tmp_path), "serve", "--port", "8123"])
    output_root = get_settings().output_root
    get_settings.cache_clear()

    assert result.exit_code == 0, result.output
    assert calls == [("src.api.main:app", {"host": "127.0.0.1", "port": 8123})]
    assert output_root == tmp_path
