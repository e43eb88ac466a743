"""Flexible GCN with per-order weight blocks and an explicit backward pass.

Layer ``l`` computes ``Z = [X, AX, ..., A^(k-1) X] @ W`` where ``W`` stacks
one ``h_{l-1} x h_l`` block per convolutional order. Hidden layers apply ReLU;
the last layer is linear and optionally sum-pooled over nodes.

The flat parameter vector lists layers from last to first, each weight matrix
flattened column by column.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import Graph, GraphBatch, collate

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    widths: tuple[int, ...]
    kappas: tuple[int, ...]
    pooling: str = "sum"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        kappas = tuple(int(k) for k in self.kappas)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "kappas", kappas)
        if len(kappas) < 1 or len(widths) != len(kappas) + 1:
            raise ShapeError(f"need len(widths) == len(kappas) + 1 >= 2, got {widths} / {kappas}")
        if any(w < 1 for w in widths) or any(k < 1 for k in kappas):
            raise ShapeError("widths and kappas must be positive")
        if self.pooling not in ("sum", "none"):
            raise ShapeError(f"pooling must be 'sum' or 'none', got {self.pooling!r}")

    @property
    def num_layers(self) -> int:
        return len(self.kappas)

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    @property
    def node_level(self) -> bool:
        return self.pooling == "none"

    def weight_shapes(self) -> list[tuple[int, int]]:
        return [(k * self.widths[i], self.widths[i + 1]) for i, k in enumerate(self.kappas)]

    @property
    def num_params(self) -> int:
        return sum(r * c for r, c in self.weight_shapes())

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "kappas": list(self.kappas), "pooling": self.pooling}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(tuple(d["widths"]), tuple(d["kappas"]), d.get("pooling", "sum"))


class GcnParams:
    """Weights of a flexible GCN backed by one flat vector ``theta``.

    ``weights[l]`` is a (read-only) view into ``theta`` for layer ``l + 1``.
    """

    def __init__(self, spec: LayerSpec, theta: np.ndarray):
        theta = np.array(theta, dtype=np.float64).ravel()
        if theta.size != spec.num_params:
            raise ShapeError(f"expected {spec.num_params} parameters, got {theta.size}")
        theta.setflags(write=False)
        self.spec = spec
        self.theta = theta
        self.weights = _weight_views(spec, theta)

    @classmethod
    def from_weights(cls, spec: LayerSpec, weights: Sequence[np.ndarray]) -> "GcnParams":
        shapes = spec.weight_shapes()
        if len(weights) != len(shapes):
            raise ShapeError(f"expected {len(shapes)} weight matrices, got {len(weights)}")
        parts = []
        for w, shape in zip(reversed(list(weights)), reversed(shapes)):
            w = np.asarray(w, dtype=np.float64)
            if w.shape != shape:
                raise ShapeError(f"weight shape {w.shape} != {shape}")
            parts.append(w.ravel(order="F"))
        return cls(spec, np.concatenate(parts))

    @property
    def tag(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        h.update(self.theta.tobytes())
        return h.hexdigest()[:16]


def _layer_offsets(spec: LayerSpec) -> list[int]:
    """Offset of each layer's block in the flat vector (last layer first)."""
    shapes = spec.weight_shapes()
    offsets = [0] * len(shapes)
    pos = 0
    for layer in reversed(range(len(shapes))):
        offsets[layer] = pos
        pos += shapes[layer][0] * shapes[layer][1]
    return offsets


def _weight_views(spec: LayerSpec, theta: np.ndarray) -> list[np.ndarray]:
    views = []
    for (rows, cols), off in zip(spec.weight_shapes(), _layer_offsets(spec)):
        # column-major block: reshape to (cols, rows) then transpose
        views.append(theta[off:off + rows * cols].reshape(cols, rows).T)
    return views


def init_params(spec: LayerSpec, seed: int, scale: float = 1.0) -> GcnParams:
    """Gaussian init with std ``scale / sqrt(fan_in)`` where fan_in = kappa * h_prev."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    rng = np.random.default_rng(seed)
    weights = [rng.standard_normal(shape) * (scale / np.sqrt(shape[0])) for shape in spec.weight_shapes()]
    return GcnParams.from_weights(spec, weights)


def zero_params(spec: LayerSpec) -> GcnParams:
    return GcnParams(spec, np.zeros(spec.num_params))


# --- forward ------------------------------------------------------------------


@dataclass
class ForwardCache:
    adj: np.ndarray
    node_mask: np.ndarray
    lifted: list[np.ndarray]  # per layer, (B, n, kappa * h_prev)
    pre: list[np.ndarray]  # per layer, (B, n, h)
    nodes_out: np.ndarray  # final pre-pooling node matrix (B, n, c)
    owner: int = 0


def lift(adj: np.ndarray, x: np.ndarray, kappa: int) -> np.ndarray:
    """Batched ``A^[kappa] diag(X; kappa)`` computed as ``[X, AX, A^2 X, ...]``."""
    blocks = [x]
    for _ in range(kappa - 1):
        blocks.append(adj @ blocks[-1])
    return np.concatenate(blocks, axis=-1)


def _as_batch(g) -> tuple[GraphBatch, bool]:
    if isinstance(g, GraphBatch):
        return g, False
    if isinstance(g, Graph):
        return collate([g]), True
    return collate(list(g)), False


def forward_batch(params: GcnParams, batch: GraphBatch) -> tuple[np.ndarray, ForwardCache]:
    spec = params.spec
    if batch.x.shape[-1] != spec.in_dim:
        raise ShapeError(f"feature dimension {batch.x.shape[-1]} != spec input width {spec.in_dim}")
    h = batch.x
    lifted, pre = [], []
    z = h
    last = spec.num_layers - 1
    for layer, (w, kappa) in enumerate(zip(params.weights, spec.kappas)):
        lf = lift(batch.adj, h, kappa)
        z = lf @ w
        lifted.append(lf)
        pre.append(z)
        if layer < last:
            h = np.maximum(z, 0.0)
    nodes_out = z
    out = nodes_out.sum(axis=1) if spec.pooling == "sum" else nodes_out
    cache = ForwardCache(batch.adj, batch.node_mask, lifted, pre, nodes_out, id(params.theta))
    return out, cache


def forward(params: GcnParams, spec: LayerSpec, g) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the network on a graph (unbatched output) or a batch/list."""
    if spec != params.spec:
        raise ShapeError("spec does not match parameters")
    batch, single = _as_batch(g)
    out, cache = forward_batch(params, batch)
    if single:
        out = out[0]
        if spec.node_level:
            out = out[: batch.sizes[0]]
    return out, cache


def predict(params: GcnParams, graphs: Sequence[Graph], chunk: int = 256) -> list[np.ndarray]:
    """Per-graph outputs, trimmed to each graph's node count at node level."""
    outs = []
    for start in range(0, len(graphs), chunk):
        part = graphs[start:start + chunk]
        out, _ = forward_batch(params, collate(part))
        for i, g in enumerate(part):
            outs.append(out[i, : g.n] if params.spec.node_level else out[i])
    return outs


# --- backward -----------------------------------------------------------------


def backward(params: GcnParams, cache: ForwardCache, d_out: np.ndarray, per_graph: bool = False) -> np.ndarray:
    """Reverse pass from output cotangent ``d_out`` to the flat parameter gradient.

    With ``per_graph`` the gradients are kept separate, shape ``(B, m)``;
    otherwise they are summed over the batch, shape ``(m,)``.
    """
    spec = params.spec
    if cache.owner != id(params.theta) or len(cache.lifted) != spec.num_layers:
        raise ShapeError("forward cache does not belong to these parameters")
    b = cache.nodes_out.shape[0]
    if spec.pooling == "sum":
        if d_out.shape != (b, spec.out_dim):
            raise ShapeError(f"d_out shape {d_out.shape} != {(b, spec.out_dim)}")
        dz = d_out[:, None, :] * cache.node_mask[:, :, None]
    else:
        if d_out.shape != cache.nodes_out.shape:
            raise ShapeError(f"d_out shape {d_out.shape} != {cache.nodes_out.shape}")
        dz = d_out * cache.node_mask[:, :, None]

    offsets = _layer_offsets(spec)
    grad = np.empty((b, spec.num_params)) if per_graph else np.empty(spec.num_params)
    adj_t = np.swapaxes(cache.adj, 1, 2)
    for layer in reversed(range(spec.num_layers)):
        lf = cache.lifted[layer]
        rows, cols = spec.weight_shapes()[layer]
        off = offsets[layer]
        if per_graph:
            # (B, cols, rows) flattened row-wise == column-major of (rows, cols)
            dw_t = np.einsum("bnh,bnk->bhk", dz, lf)
            grad[:, off:off + rows * cols] = dw_t.reshape(b, -1)
        else:
            dw_t = np.einsum("bnh,bnk->hk", dz, lf)
            grad[off:off + rows * cols] = dw_t.ravel()
        if layer == 0:
            break
        d_lift = dz @ params.weights[layer].T
        h_prev = spec.widths[layer]
        kappa = spec.kappas[layer]
        # sum_b (A^T)^b d_lift_b, by Horner's rule
        acc = d_lift[..., (kappa - 1) * h_prev:]
        for blk in reversed(range(kappa - 1)):
            acc = adj_t @ acc + d_lift[..., blk * h_prev:(blk + 1) * h_prev]
        # ReLU subgradient at 0 is 0
        dz = acc * (cache.pre[layer - 1] > 0)
    return grad


def output_jacobian(params: GcnParams, spec: LayerSpec, g, cache: ForwardCache | None = None) -> np.ndarray:
    """Jacobian of every scalar output w.r.t. the flat parameters.

    For a single graph with sum pooling this returns ``(c, m)``; with no
    pooling ``(n, c, m)``. For a batch the leading batch axis is added.
    """
    batch, single = _as_batch(g)
    if cache is None:
        _, cache = forward_batch(params, batch)
    elif cache.nodes_out.shape[:2] != batch.x.shape[:2]:
        raise ShapeError("stale forward cache")
    b, n = batch.x.shape[:2]
    c = spec.out_dim
    m = spec.num_params
    if spec.pooling == "sum":
        jac = np.empty((b, c, m))
        for k in range(c):
            d_out = np.zeros((b, c))
            d_out[:, k] = 1.0
            jac[:, k] = backward(params, cache, d_out, per_graph=True)
    else:
        jac = np.zeros((b, n, c, m))
        for i in range(n):
            for k in range(c):
                d_out = np.zeros((b, n, c))
                d_out[:, i, k] = 1.0
                jac[:, i, k] = backward(params, cache, d_out, per_graph=True)
    if single:
        jac = jac[0]
        if spec.node_level:
            jac = jac[: batch.sizes[0]]
    return jac


# --- losses -------------------------------------------------------------------

LOSS_KINDS = ("mse", "bce")


def _loss_terms(out: np.ndarray, y: np.ndarray, loss: str) -> tuple[np.ndarray, np.ndarray]:
    if loss == "mse":
        r = out - y
        return 0.5 * r * r, r
    if loss == "bce":
        # softplus(z) - y z, numerically stable
        value = np.logaddexp(0.0, out) - y * out
        return value, sigmoid(out) - y
    raise ValueError(f"unknown loss {loss!r}")


def sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def batch_loss(out: np.ndarray, batch: GraphBatch, loss: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-graph losses ``(B,)`` and ``d(per-graph loss)/d out``.

    Each graph's loss is the mean over its present labels (nodes x outputs
    at node level, outputs at graph level).
    """
    value, d = _loss_terms(out, batch.y, loss)
    mask = batch.label_mask
    axes = tuple(range(1, out.ndim))
    count = np.maximum(mask.sum(axis=axes), 1.0)
    per_graph = (value * mask).sum(axis=axes) / count
    shape = (-1,) + (1,) * (out.ndim - 1)
    return per_graph, d * mask / count.reshape(shape)


def loss_grad(params: GcnParams, spec: LayerSpec, batch, loss: str = "mse") -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. the flat parameters."""
    if spec != params.spec:
        raise ShapeError("spec does not match parameters")
    if not isinstance(batch, GraphBatch):
        batch = list(batch) if not isinstance(batch, Graph) else [batch]
        if not batch:
            raise ValueError("empty batch")
        batch = collate(batch)
    out, cache = forward_batch(params, batch)
    per_graph, d_out = batch_loss(out, batch, loss)
    b = batch.size
    grad = backward(params, cache, d_out / b)
    return float(per_graph.sum() / b), grad


# --- checkpoints ----------------------------------------------------------------


def save_checkpoint(params: GcnParams, path: str | Path, **extra) -> None:
    """JSON checkpoint: spec plus each weight matrix row-major. Round-trips exactly."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "spec": params.spec.to_dict(),
        "theta_tag": params.tag,
        "weights": [w.tolist() for w in params.weights],
    }
    doc.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path: str | Path) -> GcnParams:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    spec = LayerSpec.from_dict(doc["spec"])
    return GcnParams.from_weights(spec, [np.asarray(w, dtype=np.float64) for w in doc["weights"]])
