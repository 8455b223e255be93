# src/cli/main.py
"""
crashsim: counterfactual rear-end crash generation and delta-v validation.

    crashsim --config pipeline.json --out output synth
    crashsim --config pipeline.json --out output simulate --workers 4
    crashsim --config pipeline.json --out output weight
    ...
    crashsim --out output serve --port 8000

Every command reads the artifacts of the previous ones from `--out`, writes
its own next to them and records a <command>.manifest.json of what it read and wrote.
"""

import functools
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import List, Optional

import click
import pandas as pd
import uvicorn

from src.core.config import get_settings
from src.core.errors import ConfigError, CrashSimError, ModelUndefinedError
from src.core.logging_config import configure_logging
from src.schemas.campaign_schema import CampaignSummary, PipelineConfig
from src.schemas.driver_schema import DriverModelKind
from src.schemas.validation_schema import DmsAssessment, PercentileReport
from src.services.bias_transform_service import (
    apply_transfer,
    augment_reference,
    build_pdo,
    fit_transfer,
    injury_histogram,
    load_occupants,
    load_transfer,
    save_model,
    save_occupants,
    synthesize_occupants,
)
from src.services.distribution_service import (
    cut_glances,
    load_glance_distribution,
    overshoot_transform,
    save_decel_distribution,
    save_glance_distribution,
)
from src.services.manifest_service import MANIFEST_FILE, write_manifest
from src.services.outcome_service import (
    build_histogram,
    load_histogram,
    max_severity_share,
    mix_no_response,
    no_response_delta_vs,
    prevalence_weights,
    save_histogram,
    weighted_crash_samples,
)
from src.services.report_service import (
    dms_table,
    histogram_table,
    render_dms,
    render_histograms,
    render_percentiles,
    summary_table,
    write_tables,
)
from src.services.scenario_service import load_seed_dir, save_seed, synthesize_seeds
from src.services.sensitivity_service import fill_perturbation_sensitivity, pdo_share_sensitivity
from src.services.sim_engine_service import (
    campaign_diagnostics,
    load_matrices,
    reweight_axis1,
    run_campaign,
    save_matrices,
)
from src.services.validation_service import (
    assess_dms,
    compare,
    injury_risk,
    load_risk_curve,
    percentile_histogram,
    percentile_table,
    seed_percentiles,
    stats_table,
)

logger = logging.getLogger("crashsim")

SEEDS_DIR = "seeds"
BIAS_DIR = "bias"
REPORT_DIR = "report"


def handle_errors(fn):
    """Turn pipeline errors into a JSON document on stderr and the error's exit code."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except CrashSimError as exc:
            click.echo(json.dumps({
                "error": type(exc).__name__,
                "message": str(exc),
                "exit_code": exc.exit_code,
            }), err=True)
            sys.exit(exc.exit_code)

    return wrapper


class Pipeline:
    """Shared state of one invocation: config, output root and worker count."""

    def __init__(self, config: PipelineConfig, out: Path, workers: int, config_path: Optional[Path]):
        self.config = config
        self.out = out
        self.workers = workers
        self.config_path = config_path

    @property
    def inputs(self) -> List[Path]:
        return [self.config_path] if self.config_path else []

    def campaign_dir(self, name: Optional[str] = None) -> Path:
        return self.out / (name or self.config.campaign.name)

    @property
    def bias_dir(self) -> Path:
        return self.out / BIAS_DIR


def wrote(paths) -> List[Path]:
    paths = [Path(p) for p in paths]
    for p in paths:
        click.echo(f"✅ wrote {p}")
    return paths


def require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{path} not found; run `crashsim {produced_by}` first")
    return path


def write_json(document, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True), encoding="utf-8")
    return path


def _occupants(p: Pipeline):
    bias = p.config.bias
    if bias.occupants is not None:
        return load_occupants(bias.occupants), [bias.occupants]
    return synthesize_occupants(bias.synthetic_occupants, bias.rng_seed), []


def _reference(p: Pipeline, occupants):
    bias = p.config.bias
    if bias.reference_histogram is not None:
        return load_histogram(bias.reference_histogram), [bias.reference_histogram]
    return injury_histogram(occupants, bias.bin_width), []


def _risk_curves(p: Pipeline):
    return [load_risk_curve(path) for path in p.config.validation.risk_curves]


# ---------------------------------------------------------
# Group
# ---------------------------------------------------------

@click.group()
@click.option("--config", "config_path", type=click.Path(path_type=Path, dir_okay=False),
              help="Pipeline configuration JSON; defaults apply when omitted.")
@click.option("--out", type=click.Path(path_type=Path, file_okay=False),
              help="Output root (default: CRASHSIM_OUTPUT_ROOT).")
@click.option("--workers", type=click.IntRange(min=1), help="Worker processes for simulate.")
@click.option("--seed", "rng_seed", type=click.IntRange(min=0), help="Overrides every rng_seed in the config.")
@click.option("--log-level", help="Overrides CRASHSIM_LOG_LEVEL.")
@click.pass_context
@handle_errors
def cli(ctx, config_path, out, workers, rng_seed, log_level):
    settings = get_settings()
    configure_logging(log_level or settings.log_level)

    config = PipelineConfig.load(config_path) if config_path else PipelineConfig()
    if rng_seed is not None:
        config = config.with_seed(rng_seed)

    ctx.obj = Pipeline(
        config=config,
        out=out or settings.output_root,
        workers=workers or settings.workers,
        config_path=config_path,
    )


# ---------------------------------------------------------
# Seeds and campaigns
# ---------------------------------------------------------

@cli.command()
@click.pass_obj
@handle_errors
def synth(p: Pipeline):
    """Synthesize seed crashes into OUT/seeds."""
    seed_dir = p.out / SEEDS_DIR
    seeds = synthesize_seeds(p.config.synthesis)

    outputs = []
    for seed in seeds:
        csv_path = save_seed(seed, seed_dir / f"{seed.id}.csv")
        outputs += [csv_path, csv_path.with_suffix(".json")]
    click.echo(f"✅ wrote {len(seeds)} seeds to {seed_dir}")
    write_manifest("synth", seed_dir, p.inputs, outputs, p.config.synthesis)


@cli.command()
@click.option("--seeds", "seed_dir", type=click.Path(path_type=Path, file_okay=False),
              help="Seed directory (default: OUT/seeds).")
@click.option("--exhaustive", is_flag=True, help="Simulate every cell instead of the reduced sweep.")
@click.pass_obj
@handle_errors
def simulate(p: Pipeline, seed_dir, exhaustive):
    """Sweep every seed over the campaign grid and store the outcome matrices."""
    cfg = p.config.campaign
    seed_dir = seed_dir or p.out / SEEDS_DIR
    out_dir = p.campaign_dir()

    seeds = load_seed_dir(seed_dir)
    result = run_campaign(seeds, cfg, workers=p.workers, exhaustive=exhaustive)
    summary = result.summary

    outputs = save_matrices(result.matrices, out_dir)
    outputs.append(write_json(summary.model_dump(mode="json"), out_dir / "summary.json"))
    diagnostics = out_dir / "diagnostics.csv"
    campaign_diagnostics(result.matrices).to_csv(diagnostics, index=False)
    outputs.append(diagnostics)

    axes = result.axes
    outputs.append(save_decel_distribution(axes.decels, out_dir / "decel.csv"))
    if axes.glance is not None:
        outputs.append(save_glance_distribution(axes.glance, out_dir / "glance.csv"))
        outputs.append(save_glance_distribution(axes.overshoot, out_dir / "overshoot.csv"))
    if axes.reaction is not None:
        reaction = out_dir / "reaction_time.csv"
        pd.DataFrame(axes.reaction.bins, columns=["reaction_time_s", "probability"]).to_csv(reaction, index=False)
        outputs.append(reaction)

    wrote(outputs)
    seed_inputs = sorted(seed_dir.glob("*.csv")) + sorted(seed_dir.glob("*.json"))
    seed_inputs = [s for s in seed_inputs if not s.name.endswith(MANIFEST_FILE)]
    write_manifest("simulate", out_dir, p.inputs + seed_inputs, outputs, cfg)

    click.echo(f"{summary.name}: {summary.n_seeds - summary.n_excluded} seeds, "
               f"{summary.theoretical_cells} cells, {summary.kernel_calls} simulated, "
               f"{summary.crash_cells} crash cells, {summary.n_excluded} excluded")
    if summary.n_excluded:
        click.echo(f"⚠️ {summary.n_excluded} seed(s) excluded: {', '.join(summary.excluded)}", err=True)
    if not result.matrices:
        raise ModelUndefinedError(
            f"{cfg.model.value} is undefined for all {summary.n_seeds} seeds; no outcome matrices produced"
        )


@cli.command()
@click.option("--campaign", "name", help="Campaign directory name (default: campaign.name).")
@click.pass_obj
@handle_errors
def weight(p: Pipeline, name):
    """Prevalence-weight the crash cells and build the delta-v histogram."""
    cfg = p.config.weighting
    campaign_dir = p.campaign_dir(name)
    matrices = load_matrices(campaign_dir)

    weights, excluded = prevalence_weights(matrices, cfg.trim_percentiles)
    samples = weighted_crash_samples(matrices, weights)
    unweighted = weighted_crash_samples(matrices, [w.model_copy(update={"w": 1.0}) for w in weights])
    histogram = build_histogram(samples["delta_v"], samples["weight"], cfg.bin_width)

    nr_fraction = p.config.campaign.cbm.no_response_fraction
    is_cbm = matrices[0].model == DriverModelKind.CBM
    if is_cbm and cfg.mix_no_response and nr_fraction > 0:
        no_response = no_response_delta_vs(matrices)
        if no_response:
            histogram = mix_no_response(histogram, no_response, nr_fraction)
        else:
            logger.warning("No seed crashes without a response; histogram left unmixed")

    samples_path = campaign_dir / "samples.csv"
    samples.to_csv(samples_path, index=False)
    weights_path = campaign_dir / "weights.csv"
    pd.DataFrame([w.model_dump() for w in weights]).to_csv(weights_path, index=False)

    untrimmed = [w.w_untrimmed for w in weights]
    trimmed = [w.w for w in weights]
    weighting_path = write_json({
        "seeds_weighted": len(weights),
        "excluded": excluded,
        "weight_span_untrimmed": max(untrimmed) / min(untrimmed),
        "weight_span_trimmed": max(trimmed) / min(trimmed),
        "max_severity_share_unweighted": max_severity_share(unweighted),
        "max_severity_share_weighted": max_severity_share(samples),
        "mean_delta_v": histogram.mean,
    }, campaign_dir / "weighting.json")

    outputs = wrote([samples_path, weights_path, weighting_path,
                     *save_histogram(histogram, campaign_dir / "histogram.csv")])
    write_manifest("weight", campaign_dir, p.inputs + [campaign_dir / "outcomes.csv", campaign_dir / "seed_meta.csv"],
                   outputs, cfg)


# ---------------------------------------------------------
# Selection bias
# ---------------------------------------------------------

@cli.command("fit-bias")
@click.pass_obj
@handle_errors
def fit_bias(p: Pipeline):
    """Fit the PDO model and the selection-bias transfer function into OUT/bias."""
    cfg = p.config.bias
    out_dir = p.bias_dir
    occupants, inputs = _occupants(p)
    reference, ref_inputs = _reference(p, occupants)

    pdo = build_pdo(occupants, cfg.p_pdo, cfg.n_fill_bins, cfg.bin_width, cfg.max_iterations, cfg.tolerance)
    with_pdo = augment_reference(reference, pdo.model, cfg.p_pdo)
    transfer = fit_transfer(with_pdo, reference, cfg.grid)

    outputs = []
    if not inputs:
        outputs.append(save_occupants(occupants, out_dir / "occupants.csv"))
    outputs += save_histogram(reference, out_dir / "reference.csv")
    outputs += save_histogram(with_pdo, out_dir / "reference_with_pdo.csv")
    outputs.append(save_model(
        pdo.model, out_dir / "pdo_model.json",
        pdo_present=pdo.pdo_present, pdo_total=pdo.pdo_total, deficit=pdo.deficit,
        fill=list(pdo.fill), iterations=pdo.iterations, residual=pdo.residuals[-1],
    ))
    outputs.append(save_model(
        transfer.transfer, out_dir / "transfer.json",
        cost=transfer.cost, degenerate=transfer.degenerate, grid_shape=list(transfer.grid_shape),
    ))
    wrote(outputs)
    write_manifest("fit-bias", out_dir, p.inputs + inputs + ref_inputs, outputs, cfg)


@cli.command("apply-bias")
@click.option("--campaign", "name", help="Campaign directory name (default: campaign.name).")
@click.pass_obj
@handle_errors
def apply_bias(p: Pipeline, name):
    """Censor the campaign histogram with the fitted transfer function."""
    campaign_dir = p.campaign_dir(name)
    hist_path = require(campaign_dir / "histogram.csv", "weight")
    tf_path = require(p.bias_dir / "transfer.json", "fit-bias")

    transformed = apply_transfer(load_histogram(hist_path), load_transfer(tf_path))
    outputs = wrote(save_histogram(transformed, campaign_dir / "histogram_transformed.csv"))
    click.echo(f"transformed mean delta-v {transformed.mean:.2f} km/h")
    write_manifest("apply-bias", campaign_dir, p.inputs + [hist_path, tf_path], outputs)


# ---------------------------------------------------------
# Validation
# ---------------------------------------------------------

@cli.command()
@click.option("--campaign", "name", help="Campaign directory name (default: campaign.name).")
@click.pass_obj
@handle_errors
def validate(p: Pipeline, name):
    """Compare the transformed model histogram with the reference and check seed percentiles."""
    cfg = p.config.validation
    campaign_dir = p.campaign_dir(name)
    paths = {
        "model": require(campaign_dir / "histogram.csv", "weight"),
        "transformed": require(campaign_dir / "histogram_transformed.csv", "apply-bias"),
        "reference": require(p.bias_dir / "reference.csv", "fit-bias"),
        "reference_with_pdo": require(p.bias_dir / "reference_with_pdo.csv", "fit-bias"),
    }
    hists = {key: load_histogram(path) for key, path in paths.items()}

    stats = {
        "transformed_vs_reference": compare(hists["transformed"], hists["reference"]),
        "model_vs_reference_with_pdo": compare(hists["model"], hists["reference_with_pdo"]),
    }

    matrices = load_matrices(campaign_dir)
    is_cbm = bool(matrices) and matrices[0].model == DriverModelKind.CBM
    percentiles = seed_percentiles(matrices, p.config.campaign.cbm.no_response_fraction if is_cbm else 0.0)
    report = percentile_histogram(percentiles, cfg.percentile_bins)

    curves = _risk_curves(p)
    risks = {
        c.level.value: {"model": injury_risk(hists["transformed"], c), "reference": injury_risk(hists["reference"], c)}
        for c in curves
    }

    stats_csv = campaign_dir / "stats.csv"
    stats_table(stats).to_csv(stats_csv, index=False)
    percentiles_csv = campaign_dir / "percentiles.csv"
    percentile_table(percentiles).to_csv(percentiles_csv, index=False)
    outputs = wrote([
        stats_csv,
        write_json({k: s.model_dump() for k, s in stats.items()}, campaign_dir / "stats.json"),
        percentiles_csv,
        write_json(report.model_dump(), campaign_dir / "percentile_histogram.json"),
        write_json(risks, campaign_dir / "injury_risk.json"),
    ])
    write_manifest("validate", campaign_dir, p.inputs + list(paths.values()) + list(cfg.risk_curves), outputs, cfg)


@cli.command("assess-dms")
@click.option("--campaign", "name", help="Baseline campaign directory name (default: campaign.name).")
@click.option("--cut", "cuts", type=float, multiple=True, help="Glance cut in seconds; repeatable (default: dms.cuts).")
@click.pass_obj
@handle_errors
def assess_dms_cmd(p: Pipeline, name, cuts):
    """Crash avoidance and severity of a DMS that cuts off-road glances at each threshold."""
    campaign_dir = p.campaign_dir(name)
    glance_path = require(campaign_dir / "glance.csv", "simulate")
    glance = load_glance_distribution(glance_path)
    baseline = load_matrices(campaign_dir)
    curves = _risk_curves(p)
    weighting = p.config.weighting

    assessments = []
    for cut in cuts or p.config.dms.cuts:
        axis1 = overshoot_transform(cut_glances(glance, cut)).axis()
        treatment = [reweight_axis1(m, axis1) for m in baseline]
        assessments.append(assess_dms(baseline, treatment, cut, curves, weighting.trim_percentiles, weighting.bin_width))

    dms_csv = campaign_dir / "dms.csv"
    dms_table(assessments).to_csv(dms_csv, index=False)
    outputs = wrote([dms_csv, write_json([a.model_dump() for a in assessments], campaign_dir / "dms.json")])
    for a in assessments:
        cut = "none" if math.isinf(a.cut_at) else f"{a.cut_at:g} s"
        click.echo(f"cut {cut}: crash avoidance {a.avoidance_rate:.1%}, {a.seeds_without_crashes} seed(s) no longer crash")
    write_manifest("assess-dms", campaign_dir,
                   p.inputs + [glance_path, campaign_dir / "outcomes.csv"] + list(p.config.validation.risk_curves),
                   outputs, p.config.dms)


# ---------------------------------------------------------
# Reports
# ---------------------------------------------------------

@cli.command()
@click.option("--campaign", "name", help="Campaign directory name (default: campaign.name).")
@click.pass_obj
@handle_errors
def report(p: Pipeline, name):
    """SVG figures and CSV tables from whatever artifacts the campaign has."""
    campaign_dir = p.campaign_dir(name)
    out_dir = campaign_dir / REPORT_DIR
    prefix = p.config.report.title_prefix
    inputs, outputs, tables = [], [], {}

    candidates = {
        "model": campaign_dir / "histogram.csv",
        "model (transformed)": campaign_dir / "histogram_transformed.csv",
        "reference": p.bias_dir / "reference.csv",
    }
    dists = {label: load_histogram(path) for label, path in candidates.items() if path.exists()}
    inputs += [path for path in candidates.values() if path.exists()]
    if dists:
        tables["histograms"] = histogram_table(dists)
        outputs.append(render_histograms(dists, out_dir / "histograms.svg", f"{prefix}delta-v distributions"))

    percentile_path = campaign_dir / "percentile_histogram.json"
    if percentile_path.exists():
        inputs.append(percentile_path)
        percentiles = PercentileReport.model_validate(json.loads(percentile_path.read_text(encoding="utf-8")))
        outputs.append(render_percentiles(percentiles, out_dir / "percentiles.svg", f"{prefix}seed percentiles"))

    dms_path = campaign_dir / "dms.json"
    if dms_path.exists():
        inputs.append(dms_path)
        assessments = [DmsAssessment.model_validate(a) for a in json.loads(dms_path.read_text(encoding="utf-8"))]
        tables["dms"] = dms_table(assessments)
        outputs.append(render_dms(assessments, out_dir / "dms.svg", f"{prefix}driver monitoring"))

    summaries = sorted(p.out.glob("*/summary.json"))
    if summaries:
        inputs += summaries
        tables["simulation_sets"] = summary_table(
            [CampaignSummary.model_validate_json(s.read_text(encoding="utf-8")) for s in summaries]
        )

    if not tables and not outputs:
        raise ConfigError(f"nothing to report in {campaign_dir}; run weight, validate or assess-dms first")
    outputs += write_tables(tables, out_dir).values()
    wrote(outputs)
    write_manifest("report", out_dir, p.inputs + inputs, outputs, p.config.report)


@cli.command()
@click.option("--campaign", "name", help="Campaign directory name (default: campaign.name).")
@click.pass_obj
@handle_errors
def sensitivity(p: Pipeline, name):
    """Transformed-mean sensitivity to the PDO fill allocation and the assumed PDO share."""
    cfg = p.config.sensitivity
    campaign_dir = p.campaign_dir(name)
    hist_path = require(campaign_dir / "histogram.csv", "weight")
    occupants, inputs = _occupants(p)
    reference, ref_inputs = _reference(p, occupants)
    model_dist = load_histogram(hist_path)

    fill = fill_perturbation_sensitivity(occupants, reference, model_dist, p.config.bias,
                                         cfg.n_variants, cfg.spread, cfg.rng_seed)
    shares = pdo_share_sensitivity(occupants, reference, model_dist, p.config.bias, cfg.pdo_shares)

    outputs = wrote(write_tables({"sensitivity_fill": fill, "sensitivity_pdo_share": shares}, campaign_dir).values())
    click.echo(f"largest fill-induced shift of the transformed mean: {fill['mean_shift'].abs().max():.3f} km/h")
    write_manifest("sensitivity", campaign_dir, p.inputs + inputs + ref_inputs + [hist_path], outputs, cfg)


@cli.command()
@click.pass_context
@handle_errors
def run(ctx):
    """Run the whole pipeline: synth through report."""
    p: Pipeline = ctx.obj
    for command in (synth, simulate, weight, fit_bias, apply_bias, validate):
        ctx.invoke(command)
    if p.config.campaign.model == DriverModelKind.CBM and p.config.dms.cuts:
        ctx.invoke(assess_dms_cmd)
    ctx.invoke(report)


@cli.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=click.IntRange(1, 65535))
@click.pass_obj
def serve(p: Pipeline, host, port):
    """Serve the read-only API over the output root."""
    os.environ["CRASHSIM_OUTPUT_ROOT"] = str(p.out)
    get_settings.cache_clear()
    logger.info("Serving %s on http://%s:%d", p.out, host, port)
    uvicorn.run("src.api.main:app", host=host, port=port)


def main():
    cli(prog_name="crashsim")


if __name__ == "__main__":
    main()
