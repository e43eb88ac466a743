"""Graphs, datasets, structural operators and JSON-lines I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TASK_KINDS = (
    "graph-regression",
    "graph-classification",
    "node-regression",
    "node-classification",
)


class GraphError(ValueError):
    """Raised when a graph or dataset violates a structural invariant."""


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """A single graph with node features, dense adjacency and a target.

    ``y`` is a 1-D array of length ``c`` for graph-level targets and an
    ``(n, c)`` array for node-level targets. ``mask`` has the shape of ``y``
    and marks which labels are present (1) or missing (0).
    """

    x: np.ndarray
    adj: np.ndarray
    y: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        x = _frozen(self.x)
        adj = _frozen(self.adj)
        y = _frozen(self.y)
        if x.ndim != 2:
            raise GraphError(f"x must be 2-D, got shape {x.shape}")
        n = x.shape[0]
        if n < 1:
            raise GraphError("graph must have at least one node")
        if adj.shape != (n, n):
            raise GraphError(f"adj must be {n}x{n}, got {adj.shape}")
        if not np.array_equal(adj, adj.T):
            raise GraphError("adjacency is not symmetric")
        if np.any(np.diag(adj) != 0):
            raise GraphError("adjacency has nonzero diagonal (self-edge)")
        if y.ndim == 0:
            y = _frozen(y.reshape(1))
        if y.ndim == 2 and y.shape[0] != n:
            raise GraphError(f"node-level target has {y.shape[0]} rows for {n} nodes")
        if y.ndim > 2:
            raise GraphError(f"target must be scalar, 1-D or 2-D, got shape {y.shape}")
        mask = self.mask
        if mask is not None:
            mask = _frozen(mask)
            if mask.shape != y.shape:
                raise GraphError(f"mask shape {mask.shape} does not match target {y.shape}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "adj", adj)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "mask", mask)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def node_level(self) -> bool:
        return self.y.ndim == 2

    @property
    def c(self) -> int:
        return self.y.shape[-1]

    def label_mask(self) -> np.ndarray:
        return np.ones_like(self.y) if self.mask is None else self.mask

    def with_target(self, y, mask=None) -> "Graph":
        return Graph(self.x, self.adj, y, mask)

    def edges(self) -> list[list[int]]:
        i, j = np.nonzero(np.triu(self.adj, k=1))
        return [[int(a), int(b)] for a, b in zip(i, j)]


@dataclass(frozen=True, eq=False)
class Dataset:
    graphs: tuple[Graph, ...]
    task_kind: str
    d: int = field(default=-1)
    c: int = field(default=-1)

    def __post_init__(self):
        graphs = tuple(self.graphs)
        object.__setattr__(self, "graphs", graphs)
        if self.task_kind not in TASK_KINDS:
            raise GraphError(f"unknown task kind {self.task_kind!r}")
        node_level = self.task_kind.startswith("node")
        d, c = self.d, self.c
        for i, g in enumerate(graphs):
            if d < 0:
                d = g.d
            if c < 0:
                c = g.c
            if g.d != d:
                raise GraphError(f"graph {i}: feature dimension {g.d} != {d}")
            if g.node_level != node_level:
                raise GraphError(f"graph {i}: target level does not match task {self.task_kind}")
            if g.c != c:
                raise GraphError(f"graph {i}: target dimension {g.c} != {c}")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "c", c)

    def __len__(self) -> int:
        return len(self.graphs)

    def __getitem__(self, i: int) -> Graph:
        return self.graphs[i]

    def __iter__(self):
        return iter(self.graphs)

    @property
    def node_level(self) -> bool:
        return self.task_kind.startswith("node")

    @property
    def classification(self) -> bool:
        return self.task_kind.endswith("classification")

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.graphs[i] for i in indices), self.task_kind, self.d, self.c)


# --- structural operators ---------------------------------------------------


def adjacency_concat(adj: np.ndarray, kappa: int) -> np.ndarray:
    """Return ``[I | A | A^2 | ... | A^(kappa-1)]`` of shape ``n x kappa*n``."""
    adj = np.asarray(adj, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise GraphError(f"adjacency must be square, got shape {adj.shape}")
    if kappa < 1:
        raise GraphError(f"kappa must be >= 1, got {kappa}")
    n = adj.shape[0]
    blocks = [np.eye(n)]
    for _ in range(kappa - 1):
        blocks.append(blocks[-1] @ adj)
    return np.hstack(blocks)


def block_diag_features(x: np.ndarray, kappa: int) -> np.ndarray:
    """Place ``kappa`` copies of ``x`` on the diagonal of a zero matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise GraphError(f"features must be 2-D, got shape {x.shape}")
    if kappa < 1:
        raise GraphError(f"kappa must be >= 1, got {kappa}")
    n, d = x.shape
    out = np.zeros((kappa * n, kappa * d))
    for b in range(kappa):
        out[b * n:(b + 1) * n, b * d:(b + 1) * d] = x
    return out


# --- padded batches -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Zero-padded stack of graphs.

    Padding nodes have zero features and no edges, so they contribute nothing
    to the flexible GCN (no bias terms) and carry a zero label mask.
    """

    x: np.ndarray  # (B, n_max, d)
    adj: np.ndarray  # (B, n_max, n_max)
    node_mask: np.ndarray  # (B, n_max)
    y: np.ndarray  # (B, c) or (B, n_max, c)
    label_mask: np.ndarray  # same shape as y
    sizes: np.ndarray  # (B,)

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @property
    def node_level(self) -> bool:
        return self.y.ndim == 3


def collate(graphs: Sequence[Graph]) -> GraphBatch:
    if len(graphs) == 0:
        raise GraphError("cannot collate an empty batch")
    b = len(graphs)
    n_max = max(g.n for g in graphs)
    d = graphs[0].d
    c = graphs[0].c
    node_level = graphs[0].node_level
    x = np.zeros((b, n_max, d))
    adj = np.zeros((b, n_max, n_max))
    node_mask = np.zeros((b, n_max))
    if node_level:
        y = np.zeros((b, n_max, c))
    else:
        y = np.zeros((b, c))
    label_mask = np.zeros_like(y)
    sizes = np.empty(b, dtype=np.int64)
    for i, g in enumerate(graphs):
        n = g.n
        if g.d != d or g.c != c or g.node_level != node_level:
            raise GraphError(f"graph {i} is incompatible with the rest of the batch")
        x[i, :n] = g.x
        adj[i, :n, :n] = g.adj
        node_mask[i, :n] = 1.0
        # unlabelled entries may hold NaN placeholders; keep them out of the arithmetic
        lm = g.label_mask()
        target = np.where(lm > 0, g.y, 0.0)
        if node_level:
            y[i, :n] = target
            label_mask[i, :n] = lm
        else:
            y[i] = target
            label_mask[i] = lm
        sizes[i] = n
    return GraphBatch(x, adj, node_mask, y, label_mask, sizes)


# --- I/O ----------------------------------------------------------------------


def _default_kind(node_level: bool) -> str:
    # files without a task field are read as regression at the level their targets imply
    return ("node" if node_level else "graph") + "-regression"


def graph_from_record(rec: dict) -> tuple[Graph, str | None]:
    n = int(rec["n"])
    x = np.asarray(rec["x"], dtype=np.float64)
    if x.ndim == 1 and n > 0 and x.size % n == 0:
        x = x.reshape(n, -1)
    if x.shape[0] != n:
        raise GraphError(f"x has {x.shape[0]} rows but n={n}")
    adj = np.zeros((n, n))
    for e in rec.get("edges", []):
        i, j = int(e[0]), int(e[1])
        if not (0 <= i < n and 0 <= j < n):
            raise GraphError(f"edge ({i}, {j}) out of range for n={n}")
        if i == j:
            raise GraphError(f"self-edge ({i}, {i})")
        adj[i, j] = 1.0
        adj[j, i] = 1.0
    if "adj" in rec:
        adj = np.asarray(rec["adj"], dtype=np.float64)
    mask = rec.get("mask")
    g = Graph(x, adj, rec["y"], mask)
    return g, rec.get("task")


def graph_to_record(g: Graph, task_kind: str | None = None) -> dict:
    rec = {
        "n": g.n,
        "x": g.x.tolist(),
        "edges": g.edges(),
        "y": g.y.tolist(),
    }
    if g.mask is not None:
        rec["mask"] = g.mask.tolist()
    if task_kind is not None:
        rec["task"] = task_kind
    return rec


def load_dataset(path: str | Path, format: str = "jsonl", task_kind: str | None = None) -> Dataset:
    """Read a JSON-lines dataset; one graph per non-empty line, order preserved."""
    if format != "jsonl":
        raise ValueError(f"unsupported dataset format {format!r}")
    graphs = []
    kinds = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc.msg}") from exc
            idx = len(graphs)
            try:
                g, kind = graph_from_record(rec)
            except (GraphError, KeyError, TypeError, ValueError) as exc:
                raise GraphError(f"graph {idx} (line {lineno}): {exc}") from exc
            graphs.append(g)
            if kind is not None:
                kinds.add(kind)
    if task_kind is None:
        if len(kinds) > 1:
            raise GraphError(f"mixed task kinds in {path}: {sorted(kinds)}")
        if kinds:
            task_kind = kinds.pop()
        elif graphs:
            task_kind = _default_kind(graphs[0].node_level)
        else:
            task_kind = "graph-regression"
    return Dataset(tuple(graphs), task_kind)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for g in ds.graphs:
            fh.write(json.dumps(graph_to_record(g, ds.task_kind), separators=(",", ":")))
            fh.write("\n")


def split_dataset(ds: Dataset, counts: tuple[int, int, int], seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle deterministically by ``seed`` then cut into contiguous parts."""
    counts = tuple(int(c) for c in counts)
    if any(c < 0 for c in counts) or sum(counts) > len(ds):
        raise GraphError(f"split counts {counts} exceed dataset size {len(ds)}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    a, b, c = counts
    return (
        ds.subset(perm[:a]),
        ds.subset(perm[a:a + b]),
        ds.subset(perm[a + b:a + b + c]),
    )
