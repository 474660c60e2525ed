"""Everything downstream of the latent vectors.

Embedding tables, PCA projection for plotting, Ward hierarchical clustering,
majority-vote cluster labeling, the V-measure score and Euclidean
nearest-neighbor retrieval. All operations are pure over immutable tables;
clustering is single-threaded so the merge sequence is reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np
import torch
from scipy.cluster.hierarchy import fcluster, linkage

from .scenarios import ClassLabel, Scenario
from .seqdspn import SeqDSPN
from .training import (
    load_checkpoint,
    model_from_checkpoint,
    scenarios_to_frame_tensors,
    scenarios_to_grid_tensors,
)

# %.9g prints every float32 exactly enough to round-trip.
_FLOAT_FMT = "%.9g"


@dataclass(frozen=True)
class EmbeddingRecord:
    scenario_id: str
    vector: np.ndarray
    label: ClassLabel | None = None

    def __post_init__(self):
        vector = np.asarray(self.vector, dtype=np.float32)
        if vector.ndim != 1:
            raise ValueError(f"embedding must be a vector, got shape {vector.shape}")
        vector.setflags(write=False)
        object.__setattr__(self, "vector", vector)


@dataclass(frozen=True)
class EmbeddingTable:
    """Ordered (scenario_id -> latent vector [, label]) records.

    provenance carries free-form strings (model kind, checkpoint path,
    config hash) that are persisted as header comments.
    """

    records: tuple[EmbeddingRecord, ...]
    provenance: tuple[tuple[str, str], ...] = ()

    def __init__(self, records: Iterable[EmbeddingRecord], provenance=()):
        records = tuple(records)
        if not records:
            raise ValueError("embedding table must not be empty")
        ids = [r.scenario_id for r in records]
        if len(set(ids)) != len(ids):
            dupe = next(i for i in ids if ids.count(i) > 1)
            raise ValueError(f"duplicate scenario_id {dupe!r} in embedding table")
        widths = {r.vector.shape[0] for r in records}
        if len(widths) != 1:
            raise ValueError(f"inconsistent vector widths {sorted(widths)}")
        object.__setattr__(self, "records", records)
        object.__setattr__(self, "provenance", tuple((str(k), str(v)) for k, v in provenance))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def width(self) -> int:
        return self.records[0].vector.shape[0]

    @property
    def ids(self) -> list[str]:
        return [r.scenario_id for r in self.records]

    def vectors(self) -> np.ndarray:
        return np.stack([r.vector for r in self.records]).astype(np.float64)

    def record(self, scenario_id: str) -> EmbeddingRecord:
        for r in self.records:
            if r.scenario_id == scenario_id:
                return r
        raise KeyError(f"unknown scenario_id {scenario_id!r}")

    def labeled(self) -> "EmbeddingTable":
        kept = [r for r in self.records if r.label is not None]
        if not kept:
            raise ValueError("table has no labeled records")
        return EmbeddingTable(kept, self.provenance)


def write_table(path: str | Path, table: EmbeddingTable) -> None:
    """Persist a table as text: '#' header lines, then one record per line
    (scenario_id, the vector entries, optional label)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {key}={value}" for key, value in table.provenance]
    lines.append(f"# width={table.width}")
    for r in table.records:
        parts = [r.scenario_id] + [_FLOAT_FMT % v for v in r.vector.astype(np.float64)]
        if r.label is not None:
            parts.append(r.label.value)
        lines.append(" ".join(parts))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_table(path: str | Path) -> EmbeddingTable:
    provenance = []
    width = None
    records = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, value = body.split("=", 1)
                if key == "width":
                    width = int(value)
                else:
                    provenance.append((key, value))
            continue
        parts = line.split()
        if width is None:
            raise ValueError(f"line {line_no}: missing '# width=' header before records")
        if len(parts) not in (width + 1, width + 2):
            raise ValueError(f"line {line_no}: expected {width}+1 or +2 columns, got {len(parts)}")
        label = None
        if len(parts) == width + 2:
            label = ClassLabel(parts[-1])
            parts = parts[:-1]
        vector = np.array([float(v) for v in parts[1:]], dtype=np.float32)
        records.append(EmbeddingRecord(parts[0], vector, label))
    return EmbeddingTable(records, provenance)


def table_from_model(
    model: torch.nn.Module,
    scenarios: Sequence[Scenario],
    provenance: Sequence[tuple[str, str]] = (),
    batch_size: int = 256,
) -> EmbeddingTable:
    """Embed scenarios with a live model in eval mode; labels copied through."""
    model.eval()
    vectors = np.empty((len(scenarios), 64), dtype=np.float32)
    with torch.no_grad():
        if isinstance(model, SeqDSPN):
            el, m = scenarios_to_frame_tensors(scenarios, model.cfg)
            for start in range(0, len(scenarios), batch_size):
                vectors[start : start + batch_size] = (
                    model.embed(el[start : start + batch_size], m[start : start + batch_size])
                    .cpu()
                    .numpy()
                )
        else:
            x, _ = scenarios_to_grid_tensors(scenarios, model.cfg)
            for start in range(0, len(scenarios), batch_size):
                vectors[start : start + batch_size] = (
                    model.embed(x[start : start + batch_size]).cpu().numpy()
                )
    records = [
        EmbeddingRecord(s.scenario_id, vectors[i], s.label) for i, s in enumerate(scenarios)
    ]
    return EmbeddingTable(records, provenance)


def embed_dataset(
    checkpoint: str | Path | dict,
    scenarios: Sequence[Scenario],
    batch_size: int = 256,
) -> EmbeddingTable:
    """Embed scenarios with a trained checkpoint; labels are copied through."""
    payload = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint)
    model = model_from_checkpoint(payload)
    provenance = [("model", payload["kind"]), ("config_hash", payload.get("config_hash", ""))]
    return table_from_model(model, scenarios, provenance, batch_size)


def pca_project(table: EmbeddingTable, dims: int):
    """Mean-centered projection onto the top principal directions.

    Returns (projected (N, dims) array aligned with table order,
    explained-variance ratios (dims,), components (width, dims)). Component
    signs follow a fixed convention: the largest-magnitude entry of each
    direction is positive.
    """
    if dims < 1 or dims > table.width:
        raise ValueError(f"dims must be in [1, {table.width}], got {dims}")
    x = table.vectors()
    mean = x.mean(axis=0)
    xc = x - mean
    denom = max(len(table) - 1, 1)
    cov = (xc.T @ xc) / denom
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:dims]
    components = eigvecs[:, order]
    for j in range(components.shape[1]):
        pivot = np.argmax(np.abs(components[:, j]))
        if components[pivot, j] < 0:
            components[:, j] = -components[:, j]
    total = float(eigvals.sum())
    ratios = eigvals[order] / total if total > 0 else np.zeros(dims)
    return xc @ components, ratios, components


@dataclass(frozen=True)
class ClusterAssignment:
    """Cluster index per scenario_id plus the merge record that produced it."""

    assignment: Mapping[str, int]
    k: int
    linkage_matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "assignment", dict(self.assignment))
        object.__setattr__(self, "linkage_matrix", np.asarray(self.linkage_matrix, dtype=np.float64))

    def cluster_of(self, scenario_id: str) -> int:
        return self.assignment[scenario_id]


def _decorrelate(x: np.ndarray) -> np.ndarray:
    """Center the vectors and equalize variance along every principal
    direction (eigenvalues floored at 1e-6 of the largest, so noise-level
    directions are damped rather than amplified).

    Autoencoder latents put arbitrary per-direction gains on the factors
    they encode; one high-gain nuisance direction can stretch a class into
    a filament that dominates raw Euclidean merges. Whitening removes the
    gains while leaving the merge structure invariant under translation and
    uniform scaling of the table, and under rotations within degenerate
    eigenspaces (pairwise distances depend only on the metric)."""
    centered = x - x.mean(axis=0)
    eigvals, basis = np.linalg.eigh(np.cov(centered.T).reshape(x.shape[1], x.shape[1]))
    top = eigvals.max(initial=0.0)
    if top <= 0.0:  # all vectors identical: geometry is already degenerate
        return centered
    return (centered @ basis) / np.sqrt(np.maximum(eigvals, top * 1e-6))


def hierarchical_cluster(table: EmbeddingTable, k: int) -> ClusterAssignment:
    """Ward-linkage agglomerative clustering, cut at k clusters.

    Merges use Euclidean distances in the decorrelated latent basis (see
    _decorrelate), so results are comparable across encoders regardless of
    the scale each one assigns to individual latent directions. Cluster
    indices are renumbered by first appearance in table order, which makes
    the assignment deterministic."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > len(table):
        raise ValueError(f"k={k} exceeds table size {len(table)}")
    if len(table) == 1:
        return ClusterAssignment({table.ids[0]: 0}, 1, np.empty((0, 4)))
    z = linkage(_decorrelate(table.vectors()), method="ward")
    raw = fcluster(z, t=k, criterion="maxclust")
    remap: dict[int, int] = {}
    assignment = {}
    for scenario_id, cluster in zip(table.ids, raw):
        if cluster not in remap:
            remap[cluster] = len(remap)
        assignment[scenario_id] = remap[cluster]
    return ClusterAssignment(assignment, k, z)


def write_assignment(path: str | Path, assignment: ClusterAssignment, provenance=()) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {key}={value}" for key, value in provenance]
    lines.append(f"# k={assignment.k}")
    for scenario_id in assignment.assignment:
        lines.append(f"{scenario_id} {assignment.assignment[scenario_id]}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def majority_vote_assign(
    assignment: ClusterAssignment, table: EmbeddingTable
) -> dict[int, ClassLabel]:
    """Label each cluster with its most frequent class.

    Ties break toward the smallest class index; clusters containing only
    unlabeled points are left out of the result.
    """
    by_cluster: dict[int, list[ClassLabel]] = {}
    for record in table.records:
        cluster = assignment.assignment[record.scenario_id]
        if record.label is not None:
            by_cluster.setdefault(cluster, []).append(record.label)
    if not by_cluster:
        raise ValueError("no labeled points in any cluster")
    result = {}
    for cluster, labels in sorted(by_cluster.items()):
        counts = {label: labels.count(label) for label in set(labels)}
        best = max(counts.items(), key=lambda kv: (kv[1], -kv[0].index))
        result[cluster] = best[0]
    return result


def v_measure(
    labels: Sequence[Hashable], clusters: Sequence[Hashable], beta: float = 1.0
) -> float:
    """Harmonic-style mean of homogeneity and completeness.

    Both conditional entropies come straight from the contingency table;
    identical arithmetic on the degenerate single-cluster case makes the
    0.0 and 1.0 edges exact.
    """
    if len(labels) != len(clusters):
        raise ValueError(f"length mismatch: {len(labels)} labels vs {len(clusters)} clusters")
    if not labels:
        raise ValueError("need at least one point")
    n = len(labels)
    joint: dict[tuple[Hashable, Hashable], int] = {}
    label_counts: dict[Hashable, int] = {}
    cluster_counts: dict[Hashable, int] = {}
    for lab, clu in zip(labels, clusters):
        joint[(lab, clu)] = joint.get((lab, clu), 0) + 1
        label_counts[lab] = label_counts.get(lab, 0) + 1
        cluster_counts[clu] = cluster_counts.get(clu, 0) + 1

    label_keys = sorted(label_counts, key=repr)
    cluster_keys = sorted(cluster_counts, key=repr)

    def entropy(counts: dict, keys) -> float:
        h = 0.0
        for key in keys:
            p = counts[key] / n
            h -= p * math.log(p)
        return h

    h_c = entropy(label_counts, label_keys)
    h_k = entropy(cluster_counts, cluster_keys)

    h_c_given_k = 0.0
    for clu in cluster_keys:
        for lab in label_keys:
            count = joint.get((lab, clu), 0)
            if count:
                h_c_given_k -= (count / n) * math.log(count / cluster_counts[clu])
    h_k_given_c = 0.0
    for lab in label_keys:
        for clu in cluster_keys:
            count = joint.get((lab, clu), 0)
            if count:
                h_k_given_c -= (count / n) * math.log(count / label_counts[lab])

    homogeneity = 1.0 if h_c == 0.0 else 1.0 - h_c_given_k / h_c
    completeness = 1.0 if h_k == 0.0 else 1.0 - h_k_given_c / h_k
    denom = beta * homogeneity + completeness
    if denom == 0.0:
        return 0.0
    return (1.0 + beta) * homogeneity * completeness / denom


def clustering_v_measure(table: EmbeddingTable, assignment: ClusterAssignment) -> float:
    """V-measure of a cluster assignment against the table's labels,
    scored over labeled records only."""
    labeled = [r for r in table.records if r.label is not None]
    if not labeled:
        raise ValueError("table has no labeled records to score")
    labels = [r.label.index for r in labeled]
    clusters = [assignment.assignment[r.scenario_id] for r in labeled]
    return v_measure(labels, clusters)


def voted_v_measure(table: EmbeddingTable, assignment: ClusterAssignment) -> float:
    """V-measure after majority-vote cluster labeling.

    Each labeled record is scored with its cluster's voted class rather than
    the raw cluster index, so clusters that vote for the same class merge.
    With distinct votes this equals clustering_v_measure (the score is
    invariant under relabeling).
    """
    votes = majority_vote_assign(assignment, table)
    labeled = [r for r in table.records if r.label is not None]
    labels = [r.label.index for r in labeled]
    voted = [votes[assignment.assignment[r.scenario_id]].index for r in labeled]
    return v_measure(labels, voted)


def nearest_neighbors(
    query_id: str, table: EmbeddingTable, k: int
) -> list[tuple[str, float]]:
    """The k nearest records by Euclidean distance, ascending, excluding the
    query itself; exact ties order by scenario_id."""
    if k < 1 or k >= len(table):
        raise ValueError(f"k must be in [1, {len(table) - 1}], got {k}")
    query = table.record(query_id).vector.astype(np.float64)
    x = table.vectors()
    dists = np.sqrt(((x - query) ** 2).sum(axis=1))
    ranked = sorted(
        (
            (float(d), scenario_id)
            for scenario_id, d in zip(table.ids, dists)
            if scenario_id != query_id
        ),
    )
    return [(scenario_id, d) for d, scenario_id in ranked[:k]]
