"""Gradient-descent training loop with optional GraNT selection."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import metrics as M
from .flexgcn import GcnParams, LayerSpec, batch_loss, forward_batch, init_params, loss_grad, sigmoid
from .gntk import UnsupportedTaskError, gntk_matrix
from .graph import Dataset, Graph, GraphBatch, collate
from .teaching import (
    SelectionPolicy,
    build_schedule,
    keep_count,
    select_batches_B,
    select_graphs_S,
)

CSV_COLUMNS = (
    "epoch", "wallclock_ms", "train_evals", "forward_evals",
    "train_loss", "val_loss", "metric", "lr", "selection_event",
)

# one forward-only evaluation costs about a third of a forward+backward step
FORWARD_COST = 1.0 / 3.0


class ConfigError(ValueError):
    pass


class NumericError(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    lr: float = 0.01
    batch_size: int = 64
    epochs: int = 100
    stop_epsilon: float = 0.0
    loss: str = "mse"
    plateau: bool = False
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    plateau_min_lr: float = 1e-6
    restart_on_selection: bool = True
    max_interval: int = 0
    seed: int = 0
    init_scale: float = 1.0

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.stop_epsilon < 0:
            raise ConfigError(f"stop_epsilon must be >= 0, got {self.stop_epsilon}")
        if self.loss not in ("mse", "bce"):
            raise ConfigError(f"loss must be 'mse' or 'bce', got {self.loss!r}")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1:
            raise ConfigError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if self.plateau_min_lr < 0:
            raise ConfigError("plateau_min_lr must be >= 0")


# --- optimizer pieces -----------------------------------------------------------


def sgd_step(params: GcnParams, grad: np.ndarray, lr: float) -> GcnParams:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.theta.shape:
        raise ValueError(f"gradient has shape {grad.shape}, parameters {params.theta.shape}")
    return GcnParams(params.spec, params.theta - lr * grad)


@dataclass
class PlateauState:
    """Reduce-on-plateau bookkeeping for a minimized validation loss."""

    lr: float
    factor: float = 0.5
    patience: int = 10
    min_lr: float = 1e-6
    threshold: float = 1e-8
    best: float = math.inf
    stale: int = 0

    def reset(self, lr: float) -> None:
        self.lr = lr
        self.best = math.inf
        self.stale = 0


def plateau_step(state: PlateauState, val_loss: float) -> float:
    if val_loss < state.best - state.threshold:
        state.best = val_loss
        state.stale = 0
    else:
        state.stale += 1
        if state.stale >= state.patience:
            # the floor never raises a learning rate that is already below it
            state.lr = min(state.lr, max(state.lr * state.factor, state.min_lr))
            state.stale = 0
    return state.lr


# --- evaluation -------------------------------------------------------------------


def _chunks(graphs: Sequence[Graph], size: int = 256) -> list[GraphBatch]:
    return [collate(graphs[i:i + size]) for i in range(0, len(graphs), size)]


@dataclass
class _PoolPass:
    losses: np.ndarray  # per-graph loss
    scores: np.ndarray  # per-graph residual score for selection
    sq_residual: float  # squared norm of all residuals


def _pool_pass(params: GcnParams, chunks: Sequence[GraphBatch], loss: str) -> _PoolPass:
    node_level = params.spec.node_level
    losses, scores, sq = [], [], 0.0
    for batch in chunks:
        out, _ = forward_batch(params, batch)
        per_graph, _ = batch_loss(out, batch, loss)
        pred = sigmoid(out) if loss == "bce" else out
        r = (pred - batch.y) * batch.label_mask
        axes = tuple(range(1, r.ndim))
        norm2 = (r * r).sum(axis=axes)
        s = np.sqrt(norm2)
        if node_level:
            s = s / batch.sizes
        losses.append(per_graph)
        scores.append(s)
        sq += float(norm2.sum())
    return _PoolPass(np.concatenate(losses), np.concatenate(scores), sq)


def default_loss(ds: Dataset) -> str:
    return "bce" if ds.classification else "mse"


def evaluate(params: GcnParams, spec: LayerSpec, ds: Dataset, metrics: Sequence[str] | None = None,
             loss: str | None = None) -> dict:
    """Loss plus MAE (regression) or ROC-AUC/AP (classification).

    Node-level metrics pool every labelled node of every graph.
    """
    if spec != params.spec:
        raise ConfigError("spec does not match parameters")
    if len(ds) == 0:
        raise ConfigError("cannot evaluate an empty dataset")
    if ds.d != spec.in_dim:
        raise ConfigError(f"dataset feature dimension {ds.d} != model input {spec.in_dim}")
    loss = loss or default_loss(ds)
    if metrics is None:
        metrics = ("roc_auc", "ap") if ds.classification else ("mae",)
    for name in metrics:
        if name not in ("mae", "roc_auc", "ap"):
            raise ConfigError(f"unknown metric {name!r}")
        if name in ("roc_auc", "ap") and not ds.classification:
            raise ConfigError(f"metric {name} needs a classification dataset")
    preds, ys, masks, losses = [], [], [], []
    for batch in _chunks(ds.graphs):
        out, _ = forward_batch(params, batch)
        per_graph, _ = batch_loss(out, batch, loss)
        losses.append(per_graph)
        if spec.node_level:
            for i, n in enumerate(batch.sizes):
                preds.append(out[i, :n])
                ys.append(batch.y[i, :n])
                masks.append(batch.label_mask[i, :n])
        else:
            preds.extend(out)
            ys.extend(batch.y)
            masks.extend(batch.label_mask)
    pred = np.vstack([np.atleast_2d(p) for p in preds])
    y = np.vstack([np.atleast_2d(v) for v in ys])
    mask = np.vstack([np.atleast_2d(v) for v in masks])
    report = {"loss": float(np.concatenate(losses).mean())}
    for name in metrics:
        if name == "mae":
            report["mae"] = M.mae(pred, y, mask > 0)
        elif name == "roc_auc":
            report["roc_auc"] = M.multitask(M.roc_auc, pred, y, mask)
        else:
            report["ap"] = M.multitask(M.average_precision, pred, y, mask)
    return report


# --- loss-reduction probe -------------------------------------------------------------


@dataclass(frozen=True)
class LossReductionProbe:
    tau: float
    gamma: float

    @property
    def lr_bound(self) -> float:
        return 1.0 / (2.0 * self.tau * self.gamma)


SMOOTHNESS = {"mse": 1.0}


def estimate_descent_bound(spec: LayerSpec, params: GcnParams, probe: Sequence[Graph],
                           loss: str = "mse") -> LossReductionProbe:
    """Largest learning rate ``1 / (2 tau gamma)`` with gamma the max kernel diagonal."""
    if loss not in SMOOTHNESS:
        raise ConfigError(f"no smoothness constant for loss {loss!r}")
    if spec.node_level:
        raise UnsupportedTaskError("descent bound needs graph-level outputs")
    k = gntk_matrix(params, spec, probe)
    gamma = float(np.max(np.diag(k.entries)))
    if not gamma > 0:
        raise NumericError("zero kernel: all probe jacobians vanish")
    return LossReductionProbe(SMOOTHNESS[loss], gamma)


@dataclass
class DescentTrace:
    params: GcnParams
    losses: list[float]
    grad_norms: list[float]
    converged: bool


def full_batch_descent(params: GcnParams, graphs: Sequence[Graph], lr: float, max_steps: int,
                       loss: str = "mse", grad_tol: float = 0.0,
                       callback: Callable[[int, GcnParams], None] | None = None) -> DescentTrace:
    """Plain gradient descent on the whole set.

    ``losses[t]`` and ``grad_norms[t]`` are measured at step ``t`` before the
    update. Stops once the gradient norm drops below ``grad_tol``.
    ``callback(t, params)`` runs at every step including the last.
    """
    batch = collate(list(graphs))
    losses, norms = [], []
    converged = False
    for t in range(max_steps + 1):
        value, grad = loss_grad(params, params.spec, batch, loss)
        gn = float(np.linalg.norm(grad))
        losses.append(value)
        norms.append(gn)
        if callback is not None:
            callback(t, params)
        if gn < grad_tol:
            converged = True
            break
        if t == max_steps:
            break
        params = sgd_step(params, grad, lr)
    return DescentTrace(params, losses, norms, converged)


# --- training log -------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    wallclock_ms: float
    train_evals: int
    forward_evals: int
    train_loss: float
    val_loss: float
    metric: float
    lr: float
    selection_event: bool

    @property
    def graphs_processed(self) -> float:
        return self.train_evals + FORWARD_COST * self.forward_evals


@dataclass
class TrainingLog:
    metric_name: str = ""
    records: list[EpochRecord] = field(default_factory=list)
    selection_events: list[dict] = field(default_factory=list)
    stopped_early: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records:
            w.writerow([
                r.epoch, f"{r.wallclock_ms:.3f}", r.train_evals, r.forward_evals,
                repr(r.train_loss), repr(r.val_loss), repr(r.metric), repr(r.lr),
                int(r.selection_event),
            ])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    def summary(self) -> dict:
        last = self.records[-1] if self.records else None
        return {
            "epochs_run": len(self.records),
            "stopped_early": self.stopped_early,
            "metric_name": self.metric_name,
            "final": asdict(last) if last else None,
            "total_wallclock_ms": last.wallclock_ms if last else 0.0,
            "total_train_evals": last.train_evals if last else 0,
            "total_forward_evals": last.forward_evals if last else 0,
            "graphs_processed": last.graphs_processed if last else 0.0,
            "selection_event_count": len(self.selection_events),
        }


def evals_to_reach(log: TrainingLog, target_loss: float) -> int | None:
    """Cumulative train_evals at the first epoch whose train loss is <= target."""
    for r in log.records:
        if r.train_loss <= target_loss:
            return r.train_evals
    return None


# --- training loop -------------------------------------------------------------------


def _check_compatible(config: TrainerConfig, spec: LayerSpec, train_ds: Dataset, val_ds: Dataset | None,
                      policy: SelectionPolicy) -> None:
    config.validate()
    if len(train_ds) == 0:
        raise ConfigError("training set is empty")
    if train_ds.d != spec.in_dim:
        raise ConfigError(f"training features have d={train_ds.d}, model expects {spec.in_dim}")
    if train_ds.c != spec.out_dim:
        raise ConfigError(f"training targets have c={train_ds.c}, model outputs {spec.out_dim}")
    if train_ds.node_level != spec.node_level:
        raise ConfigError("model pooling does not match the task level")
    if val_ds is not None and len(val_ds) and val_ds.task_kind != train_ds.task_kind:
        raise ConfigError(f"validation task {val_ds.task_kind} != training task {train_ds.task_kind}")
    if train_ds.classification and config.loss != "bce":
        raise ConfigError("classification tasks need loss=bce")
    if not train_ds.classification and config.loss != "mse":
        raise ConfigError("regression tasks need loss=mse")
    if policy.enabled and (policy.level == "node") != train_ds.node_level:
        raise ConfigError("selection level does not match the task level")


def _metric(params: GcnParams, val_ds: Dataset) -> float:
    try:
        rep = evaluate(params, params.spec, val_ds, ("roc_auc",) if val_ds.classification else ("mae",))
    except M.DegenerateLabelsError:
        return float("nan")
    return rep["roc_auc"] if val_ds.classification else rep["mae"]


def train(config: TrainerConfig, spec: LayerSpec, train_ds: Dataset, val_ds: Dataset | None = None,
          policy: SelectionPolicy | None = None, params: GcnParams | None = None,
          checkpoint_every: int = 0,
          on_checkpoint: Callable[[int, GcnParams], None] | None = None) -> tuple[GcnParams, TrainingLog]:
    """Epoch loop: shuffle, select (at curriculum events), step per batch, validate.

    Per-epoch ``train_loss`` is the mean loss over the full training set after
    the epoch; this monitoring pass is not counted in ``forward_evals``, which
    only tracks the scoring passes done for selection.
    """
    policy = policy or SelectionPolicy()
    _check_compatible(config, spec, train_ds, val_ds, policy)
    if params is None:
        params = init_params(spec, config.seed, config.init_scale)
    rng = np.random.default_rng(config.seed)
    graphs = train_ds.graphs
    n_train = len(graphs)
    train_chunks = _chunks(graphs)
    val_chunks = _chunks(val_ds.graphs) if val_ds is not None and len(val_ds) else []
    metric_name = "roc_auc" if train_ds.classification else "mae"
    log = TrainingLog(metric_name=metric_name)
    schedule = build_schedule(policy.start_ratio, max(config.epochs, 1), config.max_interval)
    plateau = PlateauState(config.lr, config.plateau_factor, config.plateau_patience, config.plateau_min_lr)
    lr = config.lr
    active = np.arange(n_train)
    train_evals = forward_evals = 0
    elapsed = 0.0
    residual_norm = math.inf
    if config.stop_epsilon > 0:
        residual_norm = math.sqrt(_pool_pass(params, train_chunks, config.loss).sq_residual)

    for epoch in range(1, config.epochs + 1):
        # stopping rule: residual norm over the full training set
        if residual_norm < config.stop_epsilon:
            log.stopped_early = True
            break
        t0 = time.perf_counter()
        event = policy.enabled and schedule.is_event(epoch)
        pool = np.arange(n_train) if event else active
        order = pool[rng.permutation(pool.size)]
        batches = [order[i:i + config.batch_size] for i in range(0, order.size, config.batch_size)]
        if event:
            scores = _pool_pass(params, train_chunks, config.loss).scores
            forward_evals += n_train
            ratio = schedule.ratio_at(epoch)
            if policy.variant == "B":
                means = [float(scores[b].mean()) for b in batches]
                chosen = select_batches_B(means, keep_count(len(batches), ratio))
                batches = [batches[i] for i in chosen]
            else:
                batches = [np.asarray(b) for b in select_graphs_S(batches, scores, ratio, config.batch_size)]
            active = np.sort(np.concatenate(batches))
            picked = scores[active]
            log.selection_events.append({
                "epoch": epoch,
                "variant": policy.variant,
                "ratio": ratio,
                "selected_count": int(active.size),
                "score_min": float(picked.min()),
                "score_max": float(picked.max()),
            })
            if config.restart_on_selection:
                lr = config.lr
                plateau.reset(lr)
        for b in batches:
            _, grad = loss_grad(params, spec, collate([graphs[i] for i in b]), config.loss)
            params = sgd_step(params, grad, lr)
            train_evals += len(b)
        elapsed += time.perf_counter() - t0

        train_pass = _pool_pass(params, train_chunks, config.loss)
        train_loss = float(train_pass.losses.mean())
        residual_norm = math.sqrt(train_pass.sq_residual)
        if not np.isfinite(train_loss):
            raise NumericError(f"training loss diverged at epoch {epoch}")
        if val_chunks:
            val_loss = float(_pool_pass(params, val_chunks, config.loss).losses.mean())
            metric = _metric(params, val_ds)
        else:
            val_loss = metric = float("nan")
        log.records.append(EpochRecord(
            epoch=epoch, wallclock_ms=elapsed * 1e3, train_evals=train_evals, forward_evals=forward_evals,
            train_loss=train_loss, val_loss=val_loss, metric=metric, lr=lr, selection_event=bool(event),
        ))
        if config.plateau and val_chunks:
            lr = plateau_step(plateau, val_loss)
        if on_checkpoint is not None and checkpoint_every > 0 and epoch % checkpoint_every == 0:
            on_checkpoint(epoch, params)
    return params, log
