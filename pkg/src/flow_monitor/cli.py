"""CLI interface for flow-monitor."""

from __future__ import annotations

import asyncio
import dataclasses
import functools
import json
import logging
import signal
import sys
from pathlib import Path
from typing import Optional

import click
import pandas as pd
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

from .analysis import (
    CLUSTER_ALGORITHMS,
    ClusterModel,
    cluster as cluster_rows,
    evaluate as evaluate_labels,
    explain,
    label_by_explanation,
    label_by_majority,
    localize as localize_row,
)
from .config import Config, get_config
from .conformance import Aligner, DiagnosisMatrix, diagnose_log
from .discovery import (
    ALGORITHMS,
    DiscoveryConfig,
    build_dfg,
    discover as discover_net,
    filter_variants,
    footprint_table,
)
from .errors import FlowMonitorError, ValidationError
from .events import default_component_map, format_from_path, read_log, write_log
from .experiment import ExperimentConfig, run_experiment
from .monitor import MonitorConfig, emit as emit_log, serve as serve_monitor
from .petri import soundness_report
from .pnml import read_pnml, write_pnml
from .scenario import (
    ANOMALY_TYPES,
    FaultSpec,
    PepConfig,
    anomaly_types_from,
    default_handover_scenario,
    inject as inject_faults,
    load_scenario,
    simulate as simulate_log,
)

console = Console(stderr=True)
logger = logging.getLogger(__name__)


class DomainError(click.ClickException):
    """A FlowMonitorError surfaced to the shell."""

    def __init__(self, message: str, exit_code: int = 1):
        super().__init__(message)
        self.exit_code = exit_code


def handle_errors(func):
    """Map domain errors to exit codes: 2 for invalid input, 1 otherwise."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ValidationError as e:
            raise DomainError(str(e), exit_code=2) from e
        except FlowMonitorError as e:
            raise DomainError(str(e)) from e
        except OSError as e:
            raise DomainError(str(e)) from e

    return wrapper


def setup_logging(level: str) -> None:
    root = logging.getLogger()
    root.handlers[:] = [RichHandler(console=console, show_path=False, rich_tracebacks=False)]
    root.setLevel(level.upper())


def _config(ctx: click.Context) -> Config:
    return ctx.obj["config"]


def _component_map(config: Config) -> dict[str, str]:
    return default_component_map(config.procs_per_component, config.components)


@click.group()
@click.option("--config", type=click.Path(exists=True, dir_okay=False, path_type=Path), help="Path to config file")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging")
@click.pass_context
def cli(ctx, config, verbose):
    """Process-mining monitor for distributed control-flow traces."""
    ctx.ensure_object(dict)
    ctx.obj["config"] = Config(config) if config else get_config()
    setup_logging("DEBUG" if verbose else ctx.obj["config"].log_level)


@cli.command()
@click.option("--scenario", type=click.Path(exists=True, dir_okay=False, path_type=Path), help="Scenario JSON (default: built-in handover)")
@click.option("--rho", type=float, help="Probability of the normal procedure")
@click.option("--n", "n_traces", type=click.IntRange(min=1), required=True, help="Number of traces")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--permutation-seed", type=int, help="Seed of the per-component procedure order")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.pass_context
@handle_errors
def simulate(ctx, scenario, rho, n_traces, seed, permutation_seed, out):
    """Simulate clean traces of the scenario."""
    config = _config(ctx)
    scenario = scenario or config.scenario_path
    scn = load_scenario(scenario) if scenario else default_handover_scenario()
    pep_cfg = PepConfig(
        rho=config.rho if rho is None else rho,
        procs_per_component=config.procs_per_component,
        comp_order=tuple(config.components),
        permutation_seed=config.permutation_seed if permutation_seed is None else permutation_seed,
    )
    log = simulate_log(scn, pep_cfg, n_traces, seed)
    write_log(log, out, format_from_path(out))
    console.print(f"[green]Wrote {len(log)} traces ({log.total_events} events) to {out}[/green]")


@cli.command()
@click.option("--in", "in_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--component", required=True, help="Component whose procedures receive faults")
@click.option("--prob", type=click.FloatRange(0.0, 1.0), default=1.0, show_default=True, help="Injection probability per target event")
@click.option("--types", default=",".join(ANOMALY_TYPES), show_default=True, help="Comma-separated anomaly types")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.pass_context
@handle_errors
def inject(ctx, in_path, component, prob, types, seed, out):
    """Inject control-flow anomalies into one component's events."""
    config = _config(ctx)
    log = read_log(in_path, format_from_path(in_path))
    spec = FaultSpec(
        target_component=component,
        anomaly_types=anomaly_types_from(types),
        injection_probability=prob,
        seed=seed,
        procs_per_component=config.procs_per_component,
        comp_order=tuple(config.components),
    )
    injected = inject_faults(log, spec)
    write_log(injected, out, format_from_path(out))
    console.print(f"[green]Injected {component} faults into {len(injected)} traces -> {out}[/green]")


@cli.command()
@click.option("--in", "in_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--algo", type=click.Choice(ALGORITHMS), help="Discovery algorithm")
@click.option("--coverage", type=click.FloatRange(0.0, 1.0, min_open=True), help="Variant coverage kept before mining")
@click.option("--min-edge", type=click.FloatRange(0.0, 1.0), help="Minimum relative edge frequency")
@click.option("--out-pnml", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--out-json", type=click.Path(dir_okay=False, path_type=Path), help="Also dump the net as JSON")
@click.option("--footprint", is_flag=True, help="Print the footprint matrix of the filtered log")
@click.pass_context
@handle_errors
def discover(ctx, in_path, algo, coverage, min_edge, out_pnml, out_json, footprint):
    """Discover a workflow net from an event log."""
    config = _config(ctx)
    cfg = DiscoveryConfig(
        algorithm=algo or config.discovery_algorithm,
        variant_coverage=coverage or config.variant_coverage,
        min_edge_frequency=config.min_edge_frequency if min_edge is None else min_edge,
    )
    log = read_log(in_path, format_from_path(in_path))
    if footprint:
        rows = footprint_table(build_dfg(filter_variants(log, cfg.variant_coverage)))
        table = Table(*rows[0], title="Footprint")
        for row in rows[1:]:
            table.add_row(*row)
        console.print(table)
    net = discover_net(log, cfg)
    write_pnml(net, out_pnml)
    if out_json:
        out_json.write_text(json.dumps(net.to_dict(), indent=2) + "\n", encoding="utf-8")
    console.print(
        f"[green]{cfg.algorithm}: {len(net.places)} places, {len(net.transitions)} transitions, "
        f"{len(net.arcs)} arcs -> {out_pnml}[/green]"
    )


@cli.command()
@click.option("--pnml", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--cap", type=click.IntRange(min=1), default=100_000, show_default=True, help="Maximum markings explored")
@handle_errors
def soundness(pnml, cap):
    """Bounded soundness check of a workflow net."""
    report = soundness_report(read_pnml(pnml), state_cap=cap)
    table = Table("check", "result", title=str(pnml))
    table.add_row("workflow net", str(report.is_workflow_net))
    table.add_row("dead transitions", ", ".join(report.dead_transitions) or "none")
    table.add_row("final reachable from all", str(report.final_reachable_from_all_explored))
    table.add_row("explored markings", str(report.explored))
    table.add_row("truncated", str(report.truncated))
    console.print(table)
    click.echo(json.dumps(report.to_dict()))


@cli.command()
@click.option("--pnml", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--in", "in_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--window", type=click.IntRange(min=1), help="Window length")
@click.option("--binary", is_flag=True, default=None, help="Record 0/1 flags instead of counts")
@click.option("--out-csv", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.pass_context
@handle_errors
def check(ctx, pnml, in_path, window, binary, out_csv):
    """Windowed conformance check; writes the diagnosis matrix."""
    config = _config(ctx)
    net = read_pnml(pnml)
    log = read_log(in_path, format_from_path(in_path))
    window = window or config.window_length
    matrix = diagnose_log(
        net,
        log,
        window,
        binary=config.binary_diagnosis if binary is None else binary,
        aligner=Aligner.from_config(net, config),
    )
    matrix.write_csv(out_csv)
    deviating = sum(1 for r in matrix.rows if r.total)
    console.print(f"[green]{matrix.k} x {matrix.m} diagnosis matrix, {deviating} deviating traces -> {out_csv}[/green]")


@cli.command()
@click.option("--in-csv", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--algo", type=click.Choice(CLUSTER_ALGORITHMS), help="Clustering algorithm")
@click.option("--k", type=click.IntRange(min=1), help="Number of clusters")
@click.option("--seed", type=int, help="Random seed")
@click.option("--normalize/--no-normalize", default=None, help="L2-normalize rows")
@click.option("--labeling", type=click.Choice(["explanation", "majority"]), default="explanation", show_default=True)
@click.option("--out-model", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--out-explanations", type=click.Path(dir_okay=False, path_type=Path), help="Per-cluster explanations as JSON")
@click.pass_context
@handle_errors
def cluster(ctx, in_csv, algo, k, seed, normalize, labeling, out_model, out_explanations):
    """Cluster training diagnoses and label the clusters."""
    config = _config(ctx)
    matrix = DiagnosisMatrix.read_csv(in_csv)
    model = cluster_rows(
        matrix,
        algo or config.cluster_algorithm,
        n_clusters=k or config.n_clusters,
        seed=config.cluster_seed if seed is None else seed,
        normalize=config.normalize if normalize is None else normalize,
        eps=config.dbscan_eps,
        min_samples=config.dbscan_min_samples,
    )
    explanations = explain(model, matrix, _component_map(config))
    if labeling == "majority":
        model.labels = label_by_majority(model, matrix.ground_truth)
    else:
        model.labels = label_by_explanation(explanations)
    model.save(out_model)
    if out_explanations:
        out_explanations.write_text(
            json.dumps([e.to_dict() for e in explanations], indent=2) + "\n", encoding="utf-8"
        )
    table = Table("cluster", "size", "label", "P(ARBC..RTM)", title=f"{model.algorithm} ({labeling} labels)")
    for e in explanations:
        probs = " ".join(f"{p:.2f}" for p in e.probabilities.values())
        table.add_row(str(e.cluster), str(e.size), model.labels.get(e.cluster, "none"), probs)
    console.print(table)


@cli.command()
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--in-csv", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.pass_context
@handle_errors
def localize(ctx, model_path, in_csv, out):
    """Localize each diagnosis to a component via its nearest cluster."""
    config = _config(ctx)
    model = ClusterModel.load(model_path)
    matrix = DiagnosisMatrix.read_csv(in_csv)
    component_map = _component_map(config)
    records = []
    for row in matrix.rows:
        found = localize_row(model, model.labels, row, component_map)
        records.append(
            {
                "trace_id": row.subject,
                "label": found.label,
                "cluster": found.cluster,
                "distance": found.distance,
                "ground_truth": row.ground_truth or "",
            }
        )
    pd.DataFrame.from_records(
        records, columns=["trace_id", "label", "cluster", "distance", "ground_truth"]
    ).to_csv(out, index=False, float_format="%.4f")
    console.print(f"[green]Localized {len(records)} traces -> {out}[/green]")


@cli.command()
@click.option("--pred", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True, help="CSV from 'localize'")
@click.option("--truth", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True, help="CSV with trace_id and ground_truth")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), help="Metrics JSON")
@handle_errors
def evaluate(pred, truth, out):
    """Balanced accuracy and V-measure of localizations."""
    predicted = pd.read_csv(pred, dtype={"trace_id": str, "label": str}, keep_default_na=False)
    expected = pd.read_csv(truth, dtype={"trace_id": str, "ground_truth": str}, keep_default_na=False)
    for frame, name, needed in ((predicted, pred, "label"), (expected, truth, "ground_truth")):
        if "trace_id" not in frame.columns or needed not in frame.columns:
            raise ValidationError(f"{name}: needs trace_id and {needed} columns")
    joined = predicted[["trace_id", "label"] + (["cluster"] if "cluster" in predicted else [])].merge(
        expected[["trace_id", "ground_truth"]], on="trace_id", how="inner"
    )
    if len(joined) != len(predicted):
        raise ValidationError("predictions and ground truth do not cover the same traces")
    clusters = joined["cluster"].tolist() if "cluster" in joined else None
    metrics = evaluate_labels(joined["ground_truth"].tolist(), joined["label"].tolist(), clusters)
    table = Table("metric", "value")
    for key in ("balanced_accuracy", "homogeneity", "completeness", "v_measure"):
        table.add_row(key, f"{getattr(metrics, key):.4f}")
    console.print(table)
    payload = json.dumps(metrics.to_dict(), indent=2) + "\n"
    if out:
        out.write_text(payload, encoding="utf-8")
    else:
        click.echo(payload, nl=False)


@cli.command()
@click.option("--config", "grid", type=click.Path(exists=True, dir_okay=False, path_type=Path), help="Experiment grid (YAML or JSON)")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=Path("report"), show_default=True)
@click.option("--seeds", type=click.IntRange(min=1), help="Use seeds 0..N-1")
@click.option("--jobs", type=click.IntRange(min=1), help="Worker processes")
@click.pass_context
@handle_errors
def experiment(ctx, grid, out, seeds, jobs):
    """Run the full experiment grid and write the report directory."""
    config = _config(ctx)
    exp = ExperimentConfig.load(grid, base=config) if grid else ExperimentConfig.from_config(config)
    overrides = {}
    if seeds:
        overrides["seeds"] = tuple(range(seeds))
    if jobs:
        overrides["jobs"] = jobs
    if overrides:
        exp = dataclasses.replace(exp, **overrides)

    per_seed = exp.n_cells // len(exp.seeds)
    with Progress(
        TextColumn("[bold cyan]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeElapsedColumn(),
        console=console,
    ) as progress:
        task = progress.add_task("grid cells", total=exp.n_cells)
        summary = run_experiment(exp, out, on_seed_done=lambda _: progress.advance(task, per_seed))

    console.print(f"[green]Report written to {summary.out_dir}[/green]")
    if not summary.success:
        for failure in summary.failures:
            console.print(f"[red]failed:[/red] {failure}")
        sys.exit(1)


@cli.command()
@click.option("--pnml", type=click.Path(exists=True, dir_okay=False, path_type=Path), help="Workflow net")
@click.option("--model", "model_path", type=click.Path(dir_okay=False, path_type=Path), help="Cluster model JSON")
@click.option("--window", type=click.IntRange(min=1), help="Window length")
@click.option("--host", help="Listen address")
@click.option("--port", type=click.IntRange(0, 65535), help="Listen port")
@click.option("--stdin", "use_stdin", is_flag=True, help="Read events from stdin instead of TCP")
@click.option("--verdicts", help='Verdict sink: file path or "-" for stdout')
@click.option("--idle-timeout", type=click.FloatRange(0.0, min_open=True), help="Seconds before an open trace is finalized")
@click.pass_context
@handle_errors
def serve(ctx, pnml, model_path, window, host, port, use_stdin, verdicts, idle_timeout):
    """Run the online monitor."""
    cfg = MonitorConfig.from_config(
        _config(ctx),
        net_path=pnml,
        cluster_model_path=model_path,
        window_length=window,
        host=host,
        port=port,
        use_stdin=use_stdin or None,
        verdict_sink=verdicts,
        idle_timeout=idle_timeout,
    )

    async def run() -> None:
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        await serve_monitor(cfg, stop)

    asyncio.run(run())


@cli.command()
@click.option("--in", "in_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--host", help="Monitor address")
@click.option("--port", type=click.IntRange(1, 65535), help="Monitor port")
@click.option("--seed", type=int, default=0, show_default=True, help="Interleaving seed")
@click.pass_context
@handle_errors
def emit(ctx, in_path, host, port, seed):
    """Stream an event log to a running monitor."""
    config = _config(ctx)
    log = read_log(in_path, format_from_path(in_path))
    sent = asyncio.run(emit_log(log, host or config.monitor_host, port or config.monitor_port, seed))
    console.print(f"[green]Sent {sent} lines for {len(log)} traces[/green]")


def main(argv: Optional[list[str]] = None) -> None:
    """Entry point for CLI."""
    cli(args=argv, obj={})


if __name__ == "__main__":
    main()
