"""Empirical graph neural tangent kernel of a graph-level flexible GCN."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .flexgcn import GcnParams, LayerSpec, output_jacobian
from .graph import Graph, collate


class UnsupportedTaskError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class KernelMatrix:
    entries: np.ndarray
    graph_ids: tuple[int, ...]
    theta_tag: str

    def __len__(self) -> int:
        return len(self.graph_ids)


def _check_scalar(spec: LayerSpec) -> None:
    if spec.node_level:
        raise UnsupportedTaskError("GNTK is only defined for graph-level (pooled) outputs")
    if spec.out_dim != 1:
        raise UnsupportedTaskError(f"GNTK needs a scalar output, spec has {spec.out_dim}")


def jacobians(params: GcnParams, spec: LayerSpec, graphs: Sequence[Graph], chunk: int = 128) -> np.ndarray:
    """Stacked output jacobians, one row per graph: shape ``(N, m)``."""
    _check_scalar(spec)
    rows = []
    for start in range(0, len(graphs), chunk):
        jac = output_jacobian(params, spec, collate(graphs[start:start + chunk]))
        rows.append(jac[:, 0, :])
    return np.concatenate(rows, axis=0)


def gntk_entry(params: GcnParams, spec: LayerSpec, g1: Graph, g2: Graph) -> float:
    _check_scalar(spec)
    j1 = output_jacobian(params, spec, g1)[0]
    j2 = output_jacobian(params, spec, g2)[0]
    return float(j1 @ j2)


def gntk_matrix(params: GcnParams, spec: LayerSpec, graphs: Sequence[Graph],
                graph_ids: Sequence[int] | None = None) -> KernelMatrix:
    """Gram matrix of the per-graph jacobians."""
    jac = jacobians(params, spec, graphs)
    k = jac @ jac.T
    # exact symmetry; the BLAS product can differ in the last bit across triangles
    k = np.triu(k) + np.triu(k, 1).T
    ids = tuple(range(len(graphs))) if graph_ids is None else tuple(int(i) for i in graph_ids)
    return KernelMatrix(k, ids, params.tag)


def kernel_drift(k1: KernelMatrix, k2: KernelMatrix) -> float:
    """Frobenius distance between two kernels over the same graphs."""
    if k1.graph_ids != k2.graph_ids:
        raise ValueError("kernel matrices cover different graph sets")
    return float(np.linalg.norm(k1.entries - k2.entries, "fro"))


def drift_sequence(kernels: Sequence[KernelMatrix]) -> list[float]:
    return [kernel_drift(a, b) for a, b in zip(kernels[:-1], kernels[1:])]


def save_kernel_csv(k: KernelMatrix, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["graph_id", *k.graph_ids])
        for gid, row in zip(k.graph_ids, k.entries):
            w.writerow([gid, *(repr(float(v)) for v in row)])


def load_kernel_csv(path: str | Path, theta_tag: str = "") -> KernelMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    ids = tuple(int(v) for v in rows[0][1:])
    entries = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return KernelMatrix(entries, ids, theta_tag)


def save_kernel_npz(k: KernelMatrix, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, entries=k.entries, graph_ids=np.asarray(k.graph_ids, dtype=np.int64),
             theta_tag=np.asarray(k.theta_tag))


def load_kernel_npz(path: str | Path) -> KernelMatrix:
    with np.load(path) as z:
        return KernelMatrix(z["entries"], tuple(int(i) for i in z["graph_ids"]), str(z["theta_tag"]))
