"""Clustering of diagnosis vectors, anomaly explanation and localization."""

from __future__ import annotations

import json
import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.linalg import eigh
from scipy.spatial.distance import pdist, squareform
from sklearn.cluster import DBSCAN, AgglomerativeClustering, KMeans
from sklearn.exceptions import ConvergenceWarning
from sklearn.metrics import (
    balanced_accuracy_score,
    confusion_matrix,
    homogeneity_completeness_v_measure,
)
from sklearn.model_selection import train_test_split

from .conformance import DiagnosisMatrix, DiagnosisVector
from .errors import ClusteringError, ValidationError
from .events import DEFAULT_COMPONENTS

logger = logging.getLogger(__name__)

CLUSTER_ALGORITHMS = ("kmeans", "ward", "dbscan", "spectral")
CENTROID_ALGORITHMS = ("kmeans", "ward", "spectral")
OUTLIER = -1
NO_LABEL = "none"


@dataclass
class ClusterModel:
    """Fitted clustering: assignments over training rows plus per-cluster centroids."""

    algorithm: str
    params: dict
    columns: tuple[str, ...]
    assignments: tuple[int, ...]
    centroids: np.ndarray
    member_counts: tuple[int, ...]
    normalize: bool = False
    outlier_radius: Optional[float] = None
    labels: dict[int, str] = field(default_factory=dict)

    @property
    def n_clusters(self) -> int:
        return len(self.member_counts)

    @property
    def n_outliers(self) -> int:
        return sum(1 for a in self.assignments if a == OUTLIER)

    def members(self, cluster_id: int) -> list[int]:
        return [i for i, a in enumerate(self.assignments) if a == cluster_id]

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "params": self.params,
            "columns": list(self.columns),
            "assignments": list(self.assignments),
            "centroids": self.centroids.tolist(),
            "member_counts": list(self.member_counts),
            "normalize": self.normalize,
            "outlier_radius": self.outlier_radius,
            "labels": {str(k): v for k, v in sorted(self.labels.items())},
        }

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "ClusterModel":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            columns = tuple(data["columns"])
            centroids = np.asarray(data["centroids"], dtype=float).reshape(-1, len(columns))
            return cls(
                algorithm=data["algorithm"],
                params=dict(data.get("params", {})),
                columns=columns,
                assignments=tuple(int(a) for a in data.get("assignments", [])),
                centroids=centroids,
                member_counts=tuple(int(n) for n in data["member_counts"]),
                normalize=bool(data.get("normalize", False)),
                outlier_radius=data.get("outlier_radius"),
                labels={int(k): v for k, v in data.get("labels", {}).items()},
            )
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"{path}: invalid cluster model: {e}") from e


@dataclass(frozen=True)
class Explanation:
    """s_c, S_{c,i}, P(i) and the resulting label for one cluster."""

    cluster: int
    size: int
    columns: tuple[str, ...]
    s_c: tuple[float, ...]
    component_stats: Mapping[str, float]
    probabilities: Mapping[str, float]
    label: str

    def mean_misalignment(self) -> dict[str, float]:
        """Per-component statistics averaged over the cluster members."""
        if not self.size:
            return dict(self.component_stats)
        return {c: s / self.size for c, s in self.component_stats.items()}

    def to_dict(self) -> dict:
        return {
            "cluster": self.cluster,
            "size": self.size,
            "s_c": {c: v for c, v in zip(self.columns, self.s_c) if v},
            "component_stats": dict(self.component_stats),
            "probabilities": dict(self.probabilities),
            "label": self.label,
        }


@dataclass(frozen=True)
class Localization:
    label: str
    cluster: int
    distance: float
    outlier: bool = False


@dataclass(frozen=True)
class MetricsReport:
    balanced_accuracy: float
    homogeneity: float
    completeness: float
    v_measure: float
    classes: tuple[str, ...]
    confusion: tuple[tuple[int, ...], ...]

    def to_dict(self) -> dict:
        return {
            "balanced_accuracy": self.balanced_accuracy,
            "homogeneity": self.homogeneity,
            "completeness": self.completeness,
            "v_measure": self.v_measure,
            "classes": list(self.classes),
            "confusion": [list(r) for r in self.confusion],
        }


# -- helpers -------------------------------------------------------------


def _components(component_map: Mapping[str, str]) -> list[str]:
    present = set(component_map.values())
    ordered = [c for c in DEFAULT_COMPONENTS if c in present]
    return ordered + sorted(present - set(ordered))


def _prepare(x: np.ndarray, normalize: bool) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not normalize:
        return x
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def _compact(raw: np.ndarray) -> np.ndarray:
    """Renumber non-outlier labels to 0..K-1 in ascending order of the raw ids."""
    ids = sorted(set(int(r) for r in raw) - {OUTLIER})
    mapping = {old: new for new, old in enumerate(ids)}
    return np.array([mapping.get(int(r), OUTLIER) for r in raw], dtype=int)


def _spectral_embedding(x: np.ndarray, k: int) -> np.ndarray:
    distances = pdist(x)
    positive = distances[distances > 0]
    sigma = float(np.median(positive)) if positive.size else 1.0
    affinity = np.exp(-squareform(distances) ** 2 / (2 * sigma**2))
    np.fill_diagonal(affinity, 0.0)
    degree = affinity.sum(axis=1)
    inv_sqrt = np.divide(1.0, np.sqrt(degree), out=np.zeros_like(degree), where=degree > 0)
    laplacian = np.eye(len(x)) - inv_sqrt[:, None] * affinity * inv_sqrt[None, :]
    _, vectors = eigh(laplacian, subset_by_index=[0, k - 1])
    return _prepare(vectors, normalize=True)


def _kmeans(x: np.ndarray, k: int, seed: int) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        model = KMeans(
            n_clusters=k, init="k-means++", n_init=10, max_iter=300, tol=1e-6, random_state=seed
        )
        return model.fit_predict(x)


# -- operations ----------------------------------------------------------


def cluster(
    matrix: DiagnosisMatrix,
    algorithm: str = "kmeans",
    n_clusters: int = 50,
    seed: int = 0,
    normalize: bool = False,
    eps: float = 1.5,
    min_samples: int = 3,
) -> ClusterModel:
    """Cluster the training diagnoses with one of kmeans, ward, dbscan or spectral."""
    if algorithm not in CLUSTER_ALGORITHMS:
        raise ClusteringError(f"unknown algorithm {algorithm!r}; choose one of {CLUSTER_ALGORITHMS}")
    if matrix.k == 0:
        raise ClusteringError("cannot cluster an empty diagnosis matrix")
    if algorithm in CENTROID_ALGORITHMS and not 1 <= n_clusters <= matrix.k:
        raise ClusteringError(f"n_clusters={n_clusters} must be between 1 and {matrix.k} rows")

    x = _prepare(matrix.to_array(), normalize)
    params: dict = {"seed": seed}
    if algorithm == "dbscan":
        params.update(eps=eps, min_samples=min_samples)
    else:
        params["n_clusters"] = n_clusters

    if np.all(x == x[0]):
        logger.warning("All %d diagnosis rows are identical; returning a single cluster", matrix.k)
        raw = np.zeros(matrix.k, dtype=int)
    elif algorithm == "kmeans":
        raw = _kmeans(x, n_clusters, seed)
    elif algorithm == "ward":
        raw = AgglomerativeClustering(n_clusters=n_clusters, linkage="ward").fit_predict(x)
    elif algorithm == "dbscan":
        raw = DBSCAN(eps=eps, min_samples=min_samples).fit_predict(x)
    else:
        raw = _kmeans(_spectral_embedding(x, n_clusters), n_clusters, seed)

    assignments = _compact(raw)
    n = int(assignments.max()) + 1 if (assignments >= 0).any() else 0
    centroids = np.zeros((n, matrix.m))
    counts = []
    for c in range(n):
        mask = assignments == c
        centroids[c] = x[mask].mean(axis=0)
        counts.append(int(mask.sum()))
    model = ClusterModel(
        algorithm=algorithm,
        params=params,
        columns=matrix.columns,
        assignments=tuple(int(a) for a in assignments),
        centroids=centroids,
        member_counts=tuple(counts),
        normalize=normalize,
        outlier_radius=eps if algorithm == "dbscan" else None,
    )
    logger.info(
        "%s: %d clusters over %d rows (%d outliers)", algorithm, n, matrix.k, model.n_outliers
    )
    return model


def datapoint_stats(
    d: Union[DiagnosisVector, Mapping[str, int]], component_map: Mapping[str, str]
) -> dict[str, float]:
    """S_i per component for one diagnosis, in component order."""
    counts = d.nonzero() if isinstance(d, DiagnosisVector) else dict(d)
    stats = {c: 0.0 for c in _components(component_map)}
    for label, n in counts.items():
        if label not in component_map:
            raise ValidationError(f"label {label!r} has no component")
        stats[component_map[label]] += n
    return stats


def _probabilities(stats: Mapping[str, float]) -> tuple[dict[str, float], str]:
    total = sum(stats.values())
    if total <= 0:
        return {c: 1.0 / len(stats) for c in stats}, NO_LABEL
    probs = {c: s / total for c, s in stats.items()}
    return probs, max(probs, key=lambda c: probs[c])


def explain(
    model: ClusterModel, matrix: DiagnosisMatrix, component_map: Mapping[str, str]
) -> list[Explanation]:
    """One explanation per cluster: s_c sums member counts, P(i) normalizes S_{c,i}."""
    missing = [c for c in matrix.columns if c not in component_map]
    if missing:
        raise ValidationError(f"component map does not cover columns {missing}")
    if len(model.assignments) != matrix.k:
        raise ValidationError("cluster model was not fitted on this matrix")
    x = matrix.to_array()
    explanations = []
    for c in range(model.n_clusters):
        s_c = x[np.asarray(model.assignments) == c].sum(axis=0)
        stats = datapoint_stats(
            {col: v for col, v in zip(matrix.columns, s_c) if v}, component_map
        )
        probs, label = _probabilities(stats)
        explanations.append(
            Explanation(
                cluster=c,
                size=model.member_counts[c],
                columns=matrix.columns,
                s_c=tuple(float(v) for v in s_c),
                component_stats=stats,
                probabilities=probs,
                label=label,
            )
        )
    return explanations


def label_by_explanation(explanations: Sequence[Explanation]) -> dict[int, str]:
    return {e.cluster: e.label for e in explanations}


def label_by_majority(model: ClusterModel, ground_truth: Sequence[Optional[str]]) -> dict[int, str]:
    """Majority ground-truth label per cluster; ties go to the alphabetically first."""
    if len(ground_truth) != len(model.assignments):
        raise ValidationError("ground truth does not match the training rows")
    votes: dict[int, Counter] = {c: Counter() for c in range(model.n_clusters)}
    for a, truth in zip(model.assignments, ground_truth):
        if a != OUTLIER:
            votes[a][truth or NO_LABEL] += 1
    labels = {}
    for c, counter in votes.items():
        if not counter:
            labels[c] = NO_LABEL
            continue
        top = max(counter.values())
        labels[c] = min(label for label, n in counter.items() if n == top)
    return labels


def localize(
    model: ClusterModel,
    labels: Union[Sequence[Explanation], Mapping[int, str]],
    d_test: DiagnosisVector,
    component_map: Optional[Mapping[str, str]] = None,
) -> Localization:
    """Assign ``d_test`` to its nearest centroid and return that cluster's label."""
    if model.n_clusters == 0:
        raise ClusteringError("cluster model has no clusters")
    if tuple(d_test.columns) != tuple(model.columns):
        d_test = d_test.reindex(model.columns)
    mapping = labels if isinstance(labels, Mapping) else label_by_explanation(labels)
    point = _prepare(d_test.as_array(), model.normalize)
    distances = np.linalg.norm(model.centroids - point, axis=1)
    nearest = int(np.argmin(distances))
    distance = float(distances[nearest])

    if model.outlier_radius is not None and distance > model.outlier_radius:
        if component_map is None:
            raise ValidationError("localizing a density outlier needs a component map")
        _, label = _probabilities(datapoint_stats(d_test, component_map))
        return Localization(label, OUTLIER, distance, outlier=True)
    return Localization(mapping.get(nearest, NO_LABEL), nearest, distance)


def evaluate(
    true_labels: Sequence[str],
    predicted_labels: Sequence[str],
    cluster_assignments: Optional[Sequence[int]] = None,
) -> MetricsReport:
    """Balanced accuracy of the predictions plus homogeneity/completeness/V of the clusters."""
    if len(true_labels) != len(predicted_labels):
        raise ValidationError("true and predicted labels differ in length")
    if cluster_assignments is None:
        cluster_assignments = list(predicted_labels)
    if len(cluster_assignments) != len(true_labels):
        raise ValidationError("cluster assignments differ in length from the labels")
    if not true_labels:
        raise ValidationError("cannot evaluate an empty prediction")
    classes = tuple(sorted(set(true_labels) | set(predicted_labels)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        accuracy = float(balanced_accuracy_score(true_labels, predicted_labels))
    h, c, v = homogeneity_completeness_v_measure(list(true_labels), list(cluster_assignments))
    matrix = confusion_matrix(true_labels, predicted_labels, labels=list(classes))
    return MetricsReport(
        balanced_accuracy=accuracy,
        homogeneity=float(h),
        completeness=float(c),
        v_measure=float(v),
        classes=classes,
        confusion=tuple(tuple(int(n) for n in row) for row in matrix),
    )


def evaluation_split(
    matrix: DiagnosisMatrix, test_fraction: float = 0.25, seed: int = 0
) -> tuple[DiagnosisMatrix, DiagnosisMatrix]:
    """Stratified train/test split on the ground-truth labels."""
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError("test_fraction must be in (0, 1)")
    truth = matrix.ground_truth
    if any(t is None for t in truth):
        raise ValidationError("every row needs a ground_truth label to stratify")
    small = [label for label, n in Counter(truth).items() if n < 2]
    if small:
        raise ValidationError(f"classes with fewer than 2 rows cannot be split: {sorted(small)}")
    train, test = train_test_split(
        np.arange(matrix.k), test_size=test_fraction, stratify=truth, random_state=seed
    )
    return matrix.select(sorted(train)), matrix.select(sorted(test))


def class_component_means(
    matrix: DiagnosisMatrix, component_map: Mapping[str, str]
) -> pd.DataFrame:
    """Mean S_i per ground-truth class (rows) and component (columns)."""
    components = _components(component_map)
    records = []
    for row in matrix.rows:
        stats = datapoint_stats(row, component_map)
        stats["class"] = row.ground_truth or NO_LABEL
        records.append(stats)
    if not records:
        return pd.DataFrame(columns=components)
    frame = pd.DataFrame.from_records(records).groupby("class")[components].mean()
    return frame.reindex(columns=components)
