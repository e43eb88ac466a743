"""Synthetic graphon datasets labelled by a fixed teacher GCN."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .flexgcn import GcnParams, LayerSpec, init_params, predict, save_checkpoint
from .graph import Dataset, Graph, save_dataset, split_dataset

GRAPHON_KINDS = ("constant", "gradient", "sbm")


@dataclass(frozen=True, eq=False)
class Graphon:
    grid: np.ndarray
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float64)
        if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
            raise ValueError(f"graphon grid must be square, got {grid.shape}")
        if grid.min() < 0 or grid.max() > 1:
            raise ValueError("graphon entries must lie in [0, 1]")
        if not np.allclose(grid, grid.T):
            raise ValueError("graphon grid must be symmetric")
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)

    @property
    def resolution(self) -> int:
        return self.grid.shape[0]

    def lookup(self, u: np.ndarray) -> np.ndarray:
        """Edge probabilities for latent positions ``u`` (nearest grid cell)."""
        idx = np.minimum((np.asarray(u) * self.resolution).astype(np.int64), self.resolution - 1)
        return self.grid[np.ix_(idx, idx)]


def make_graphon(kind: str, resolution: int = 1000, p: float = 0.3, p_in: float = 0.5,
                 p_out: float = 0.1, split: float = 0.5) -> Graphon:
    """Build one of the shipped graphons on a ``resolution`` x ``resolution`` grid.

    constant: W = p. gradient: W(u, v) = u v. sbm: two blocks split at
    ``split`` with ``p_in`` inside a block and ``p_out`` across.
    """
    centers = (np.arange(resolution) + 0.5) / resolution
    if kind == "constant":
        grid = np.full((resolution, resolution), float(p))
        params = {"p": p}
    elif kind == "gradient":
        grid = np.outer(centers, centers)
        params = {}
    elif kind == "sbm":
        block = centers >= split
        grid = np.where(block[:, None] == block[None, :], p_in, p_out).astype(np.float64)
        params = {"p_in": p_in, "p_out": p_out, "split": split}
    else:
        raise ValueError(f"unknown graphon kind {kind!r}; expected one of {GRAPHON_KINDS}")
    return Graphon(grid, kind, params)


def sample_graph(graphon: Graphon, n: int, seed, feature_dim: int = 40) -> Graph:
    """Sample an ``n``-node graph, ordered by nondecreasing degree.

    The target is a placeholder of zeros (one per node); see
    :func:`label_with_teacher`.
    """
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    rng = np.random.default_rng(seed)
    u = rng.random(n)
    prob = graphon.lookup(u)
    upper = np.triu(rng.random((n, n)) < prob, k=1)
    adj = (upper | upper.T).astype(np.float64)
    deg = adj.sum(axis=1)
    order = np.lexsort((u, deg))
    adj = adj[np.ix_(order, order)]
    x = rng.standard_normal((n, feature_dim))
    return Graph(x, adj, np.zeros((n, 1)))


def label_with_teacher(graphs: Sequence[Graph], teacher: GcnParams, task: str = "reg",
                       percentile: float = 80.0) -> list[np.ndarray]:
    """Targets from a teacher network.

    reg: the teacher outputs themselves. cls: 1 where the output exceeds the
    given percentile of all teacher outputs in ``graphs``, else 0.
    """
    spec = teacher.spec
    if spec.out_dim != 1:
        raise ValueError("teacher must have a single output")
    for i, g in enumerate(graphs):
        if g.d != spec.in_dim:
            raise ValueError(f"graph {i} has d={g.d}, teacher expects {spec.in_dim}")
    outs = predict(teacher, list(graphs))
    if task == "reg":
        return outs
    if task != "cls":
        raise ValueError(f"task must be 'reg' or 'cls', got {task!r}")
    threshold = float(np.percentile(np.concatenate([o.ravel() for o in outs]), percentile))
    return [(o > threshold).astype(np.float64) for o in outs]


@dataclass
class SynthConfig:
    graphon: str = "gradient"
    graphon_p: float = 0.3
    sbm_p_in: float = 0.5
    sbm_p_out: float = 0.1
    sbm_split: float = 0.5
    resolution: int = 1000
    nodes_mean: int = 100
    num_graphs: int = 50000
    feature_dim: int = 40
    task: str = "reg"
    target_level: str = "node"
    teacher_hidden: int = 16
    teacher_kappas: tuple[int, ...] = (2, 2)
    teacher_seed: int = 1
    teacher_scale: float = 1.0
    normalize_teacher: bool = True
    cls_percentile: float = 80.0
    seed: int = 0
    split: tuple[int, int, int] = (30000, 10000, 10000)

    def validate(self) -> None:
        if self.nodes_mean < 2:
            raise ValueError("nodes_mean must be >= 2")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.num_graphs < 1:
            raise ValueError("num_graphs must be >= 1")
        if self.task not in ("reg", "cls"):
            raise ValueError(f"task must be 'reg' or 'cls', got {self.task!r}")
        if self.target_level not in ("node", "graph"):
            raise ValueError(f"target_level must be 'node' or 'graph', got {self.target_level!r}")
        if sum(self.split) > self.num_graphs:
            raise ValueError(f"split {tuple(self.split)} exceeds num_graphs={self.num_graphs}")

    @property
    def task_kind(self) -> str:
        return f"{self.target_level}-{'regression' if self.task == 'reg' else 'classification'}"

    def teacher_spec(self) -> LayerSpec:
        pooling = "none" if self.target_level == "node" else "sum"
        return LayerSpec((self.feature_dim, self.teacher_hidden, 1), tuple(self.teacher_kappas), pooling)


def node_count_range(nodes_mean: int) -> tuple[int, int]:
    lo = max(2, math.ceil(0.9 * nodes_mean))
    hi = max(lo, math.floor(1.1 * nodes_mean))
    return lo, hi


def sample_graphs(cfg: SynthConfig) -> list[Graph]:
    graphon = make_graphon(cfg.graphon, cfg.resolution, cfg.graphon_p, cfg.sbm_p_in, cfg.sbm_p_out, cfg.sbm_split)
    lo, hi = node_count_range(cfg.nodes_mean)
    # one independent stream per graph index
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.num_graphs)
    graphs = []
    for child in children:
        size_seed, graph_seed = child.spawn(2)
        n = int(np.random.default_rng(size_seed).integers(lo, hi + 1))
        graphs.append(sample_graph(graphon, n, graph_seed, cfg.feature_dim))
    return graphs


def build_teacher(cfg: SynthConfig, graphs: Sequence[Graph]) -> tuple[GcnParams, float]:
    """Teacher network; optionally rescaled so its outputs have unit RMS on ``graphs``."""
    teacher = init_params(cfg.teacher_spec(), cfg.teacher_seed, cfg.teacher_scale)
    if not cfg.normalize_teacher:
        return teacher, 1.0
    outs = np.concatenate([o.ravel() for o in predict(teacher, list(graphs))])
    rms = float(np.sqrt(np.mean(outs * outs)))
    if rms == 0:
        return teacher, 1.0
    weights = [np.array(w) for w in teacher.weights]
    weights[-1] = weights[-1] / rms
    return GcnParams.from_weights(teacher.spec, weights), 1.0 / rms


def generate_dataset(cfg: SynthConfig, out_dir: str | Path | None = None) -> dict:
    """Sample, label and split a synthetic dataset; write it when ``out_dir`` is given.

    Returns the three datasets, the teacher and the metadata record.
    """
    cfg.validate()
    graphs = sample_graphs(cfg)
    teacher, out_scale = build_teacher(cfg, graphs)
    targets = label_with_teacher(graphs, teacher, cfg.task, cfg.cls_percentile)
    threshold = None
    if cfg.task == "cls":
        all_out = np.concatenate([o.ravel() for o in predict(teacher, graphs)])
        threshold = float(np.percentile(all_out, cfg.cls_percentile))
    labelled = []
    for g, y in zip(graphs, targets):
        labelled.append(g.with_target(y if cfg.target_level == "node" else np.atleast_1d(y)))
    ds = Dataset(tuple(labelled), cfg.task_kind)
    train, val, test = split_dataset(ds, tuple(cfg.split), cfg.seed)
    meta = {
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
        "task_kind": cfg.task_kind,
        "graphon": {"kind": cfg.graphon, "resolution": cfg.resolution},
        "teacher_checkpoint": "teacher.json",
        "teacher_output_scale": out_scale,
        "threshold": threshold,
        "sizes": {"train": len(train), "val": len(val), "test": len(test)},
        "positive_fraction": (
            float(np.mean(np.concatenate([t.ravel() for t in targets]))) if cfg.task == "cls" else None
        ),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_dataset(train, out / "train.jsonl")
        save_dataset(val, out / "val.jsonl")
        save_dataset(test, out / "test.jsonl")
        save_checkpoint(teacher, out / "teacher.json")
        (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"train": train, "val": val, "test": test, "teacher": teacher, "metadata": meta}
