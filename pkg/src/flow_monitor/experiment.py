"""End-to-end experiment: simulate, discover, inject, diagnose, cluster, evaluate."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import pandas as pd

from . import report
from .analysis import (
    CLUSTER_ALGORITHMS,
    MetricsReport,
    class_component_means,
    cluster,
    evaluate,
    evaluation_split,
    explain,
    label_by_explanation,
    label_by_majority,
    localize,
)
from .config import Config, load_yaml
from .conformance import Aligner, DiagnosisMatrix, diagnose_log
from .discovery import DiscoveryConfig, discover
from .errors import FlowMonitorError, ValidationError
from .events import DEFAULT_COMPONENTS, EventLog, default_component_map, write_log
from .petri import soundness_report
from .pnml import write_pnml
from .scenario import (
    ANOMALY_TYPES,
    FaultSpec,
    PepConfig,
    ScenarioModel,
    default_handover_scenario,
    inject,
    load_scenario,
    simulate,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    """The experiment grid; every field can be set from YAML/JSON."""

    seeds: tuple[int, ...] = tuple(range(10))
    n_clean: int = 100
    n_anomalous: int = 100
    window_lengths: tuple[int, ...] = (5, 10, 15)
    algorithms: tuple[str, ...] = ("kmeans", "ward", "spectral", "dbscan")
    cluster_counts: tuple[int, ...] = (10, 30, 50)
    test_fraction: float = 0.25
    rho: float = 0.99
    procs_per_component: int = 10
    components: tuple[str, ...] = DEFAULT_COMPONENTS
    anomaly_types: tuple[str, ...] = ANOMALY_TYPES
    injection_probability: float = 1.0
    discovery_algorithm: str = "dfg_net"
    variant_coverage: float = 0.75
    min_edge_frequency: float = 0.0
    normalize: bool = False
    dbscan_eps: float = 1.5
    dbscan_min_samples: int = 3
    node_cap: int = 1_000_000
    scenario_path: Optional[str] = None
    jobs: int = 1

    def __post_init__(self) -> None:
        for name in ("seeds", "window_lengths", "algorithms", "cluster_counts", "components", "anomaly_types"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.seeds:
            raise ValidationError("at least one seed is required")
        if self.n_clean < 1 or self.n_anomalous < 1:
            raise ValidationError("n_clean and n_anomalous must be >= 1")
        if any(w < 1 for w in self.window_lengths):
            raise ValidationError("window lengths must be >= 1")
        unknown = set(self.algorithms) - set(CLUSTER_ALGORITHMS)
        if unknown:
            raise ValidationError(f"unknown clustering algorithms {sorted(unknown)}")
        if self.jobs < 1:
            raise ValidationError("jobs must be >= 1")

    @classmethod
    def from_config(cls, config: Config, **overrides) -> "ExperimentConfig":
        values = dict(
            rho=config.rho,
            procs_per_component=config.procs_per_component,
            components=tuple(config.components),
            discovery_algorithm=config.discovery_algorithm,
            variant_coverage=config.variant_coverage,
            min_edge_frequency=config.min_edge_frequency,
            normalize=config.normalize,
            dbscan_eps=config.dbscan_eps,
            dbscan_min_samples=config.dbscan_min_samples,
            node_cap=config.node_cap,
            scenario_path=str(config.scenario_path) if config.scenario_path else None,
        )
        values.update(overrides)
        return cls(**values)

    @classmethod
    def load(cls, path: Path, base: Optional[Config] = None) -> "ExperimentConfig":
        data = load_yaml(Path(path))
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"{path}: unknown experiment keys {sorted(unknown)}")
        if base is not None:
            return cls.from_config(base, **data)
        return cls(**data)

    @property
    def n_cells(self) -> int:
        per_window = sum(1 if a == "dbscan" else len(self.cluster_counts) for a in self.algorithms)
        return len(self.seeds) * len(self.window_lengths) * per_window

    def scenario(self) -> ScenarioModel:
        if self.scenario_path:
            return load_scenario(Path(self.scenario_path))
        return default_handover_scenario()


@dataclass
class CellResult:
    seed: int
    window: int
    algorithm: str
    k: Optional[int]
    metrics: dict[str, MetricsReport] = field(default_factory=dict)
    n_clusters: int = 0
    error: Optional[str] = None

    def to_dict(self) -> dict:
        data = {
            "seed": self.seed,
            "window": self.window,
            "algorithm": self.algorithm,
            "k": self.k,
            "n_clusters": self.n_clusters,
            "metrics": {name: m.to_dict() for name, m in self.metrics.items()},
        }
        if self.error:
            data["error"] = self.error
        return data


@dataclass
class SeedResult:
    seed: int
    cells: list[CellResult] = field(default_factory=list)
    class_means: dict[int, pd.DataFrame] = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def failures(self) -> list[str]:
        found = [f"seed {self.seed}: {self.error}"] if self.error else []
        found += [
            f"seed {c.seed} w={c.window} {report.column_name(c.algorithm, c.k)}: {c.error}"
            for c in self.cells
            if c.error
        ]
        return found


@dataclass
class ExperimentSummary:
    out_dir: Path
    results: list[SeedResult]
    artifacts: list[str]

    @property
    def failures(self) -> list[str]:
        return [f for r in self.results for f in r.failures]

    @property
    def success(self) -> bool:
        return not self.failures


def anomalous_log(
    exp: ExperimentConfig, scn: ScenarioModel, pep_cfg: PepConfig, seed: int
) -> EventLog:
    """One injected batch per component, each simulated from its own seed."""
    batches = []
    for i, component in enumerate(exp.components):
        base = simulate(
            scn, pep_cfg, exp.n_anomalous, seed=seed * 1000 + i + 1, trace_prefix=f"{component.lower()}_"
        )
        spec = FaultSpec(
            target_component=component,
            anomaly_types=exp.anomaly_types,
            injection_probability=exp.injection_probability,
            seed=seed * 1000 + 100 + i,
            procs_per_component=exp.procs_per_component,
            comp_order=exp.components,
        )
        batches.append(inject(base, spec))
    log = EventLog.concat(*batches)
    unlabeled = [t for t in log if t.ground_truth is None]
    if unlabeled:
        logger.warning("Dropping %d traces without injected faults", len(unlabeled))
        log = EventLog(traces=tuple(t for t in log if t.ground_truth is not None))
    return log


def _run_cell(
    exp: ExperimentConfig,
    seed: int,
    window: int,
    algorithm: str,
    k: Optional[int],
    train: DiagnosisMatrix,
    test: DiagnosisMatrix,
    component_map: dict[str, str],
) -> CellResult:
    cell = CellResult(seed, window, algorithm, k)
    try:
        model = cluster(
            train,
            algorithm,
            n_clusters=k or 1,
            seed=seed,
            normalize=exp.normalize,
            eps=exp.dbscan_eps,
            min_samples=exp.dbscan_min_samples,
        )
        cell.n_clusters = model.n_clusters
        labelings = {
            "majority": label_by_majority(model, train.ground_truth),
            "explanation": label_by_explanation(explain(model, train, component_map)),
        }
        truth = [str(t) for t in test.ground_truth]
        for name, labels in labelings.items():
            found = [localize(model, labels, row, component_map) for row in test.rows]
            cell.metrics[name] = evaluate(
                truth, [f.label for f in found], [f.cluster for f in found]
            )
    except (FlowMonitorError, ValueError) as e:
        logger.error("Cell seed=%d w=%d %s k=%s failed: %s", seed, window, algorithm, k, e)
        cell.error = str(e)
    return cell


def run_seed(exp: ExperimentConfig, seed: int, out_dir: Path) -> SeedResult:
    """All grid cells for one seed; artifacts go to ``out_dir/seed_<seed>``."""
    result = SeedResult(seed)
    seed_dir = Path(out_dir) / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)

    def keep(name: str) -> Path:
        path = seed_dir / name
        result.artifacts.append(str(path.relative_to(out_dir)))
        return path

    try:
        scn = exp.scenario()
        pep_cfg = PepConfig(exp.rho, exp.procs_per_component, exp.components, permutation_seed=seed)
        clean = simulate(scn, pep_cfg, exp.n_clean, seed=seed, trace_prefix="n")
        write_log(clean, keep("clean.jsonl"))

        net = discover(
            clean,
            DiscoveryConfig(exp.discovery_algorithm, exp.variant_coverage, exp.min_edge_frequency),
        )
        write_pnml(net, keep("net.pnml"))
        soundness = soundness_report(net)
        if not soundness.sound:
            logger.warning("Seed %d: discovered net is not sound: %s", seed, soundness.to_dict())

        anomalous = anomalous_log(exp, scn, pep_cfg, seed)
        write_log(anomalous, keep("anomalous.jsonl"))
        component_map = default_component_map(exp.procs_per_component, exp.components)
        aligner = Aligner(net, node_cap=exp.node_cap)

        for window in exp.window_lengths:
            matrix = diagnose_log(net, anomalous, window, aligner=aligner)
            matrix.write_csv(keep(f"diagnosis_w{window}.csv"))
            train, test = evaluation_split(matrix, exp.test_fraction, seed)
            result.class_means[window] = class_component_means(test, component_map)
            cells = []
            for algorithm in exp.algorithms:
                for k in [None] if algorithm == "dbscan" else exp.cluster_counts:
                    cells.append(
                        _run_cell(exp, seed, window, algorithm, k, train, test, component_map)
                    )
            result.cells += cells
            keep(f"metrics_w{window}.json").write_text(
                json.dumps([c.to_dict() for c in cells], indent=2) + "\n", encoding="utf-8"
            )
    except (FlowMonitorError, ValueError, OSError) as e:
        logger.error("Seed %d failed: %s", seed, e)
        result.error = str(e)
    return result


def run_experiment(
    exp: ExperimentConfig,
    out_dir: Path,
    on_seed_done: Optional[Callable[[SeedResult], None]] = None,
) -> ExperimentSummary:
    """Run every seed, then assemble tables and charts in seed order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results: list[SeedResult] = []
    if exp.jobs > 1 and len(exp.seeds) > 1:
        with ProcessPoolExecutor(max_workers=exp.jobs) as pool:
            futures = [pool.submit(run_seed, exp, s, out_dir) for s in exp.seeds]
            for future in futures:
                results.append(future.result())
                if on_seed_done:
                    on_seed_done(results[-1])
    else:
        for s in exp.seeds:
            results.append(run_seed(exp, s, out_dir))
            if on_seed_done:
                on_seed_done(results[-1])
    results.sort(key=lambda r: r.seed)

    artifacts = [a for r in results for a in r.artifacts]
    for labeling, name in (("majority", "table1.csv"), ("explanation", "table1_explanation.csv")):
        report.write_table(report.accuracy_table(results, labeling), out_dir / name)
        artifacts.append(name)
    for window in exp.window_lengths:
        frame = report.component_frame(results, window)
        if frame.empty:
            continue
        report.write_table(frame, out_dir / f"fig5_{window}.csv")
        report.render_bars(frame, out_dir / f"fig5_{window}.svg", title=f"window length {window}")
        artifacts += [f"fig5_{window}.csv", f"fig5_{window}.svg"]

    summary = ExperimentSummary(out_dir, results, artifacts)
    manifest = {
        "config": asdict(exp),
        "artifacts": artifacts,
        "failures": summary.failures,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    logger.info("Experiment finished: %d seeds, %d failures", len(results), len(summary.failures))
    return summary
