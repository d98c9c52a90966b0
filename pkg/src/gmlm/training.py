"""Contrastive pretraining, supervised fine-tuning, optimisation and metrics."""
from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, EpochError, SamplingError, ValidationError
from .graph import SplitAssignment, TextGraph, degree_weighted_sample
from .model import GMLM, GraphInputs
from .tensor import Tensor, backward, no_grad


# --- configuration ----------------------------------------------------------------

@dataclass
class PretrainConfig:
    epochs: int = 30
    beta: float = 0.7
    tau: float = 0.1
    mask_range: tuple[float, float] = (0.2, 0.4)
    lr: float = 1e-4
    weight_decay: float = 0.05
    t0: int = 10
    t_mult: int = 2
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        self.mask_range = tuple(self.mask_range)
        lo, hi = self.mask_range
        if self.tau <= 0:
            raise ValidationError("tau must be positive")
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValidationError(f"mask_range must satisfy 0 <= low <= high <= 1, got {self.mask_range}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValidationError("beta must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1 or self.t0 < 1 or self.t_mult < 1:
            raise ValidationError("epochs, batch_size, t0 and t_mult must be positive")


@dataclass
class FinetuneConfig:
    max_epochs: int = 500
    patience: int = 30
    active_range: tuple[float, float] = (0.3, 0.8)
    beta: float = 0.7
    label_smoothing: float = 0.2
    lr_graph: float = 1e-4
    lr_bert: float = 1e-5
    lr_other: float = 1e-4
    wd_graph: float = 0.05
    wd_text: float = 0.01
    wd_other: float = 0.05
    warmup_fraction: float = 0.10
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.active_range = tuple(self.active_range)
        lo, hi = self.active_range
        if not self.patience < self.max_epochs:
            raise ValidationError("patience must be smaller than max_epochs")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValidationError("label_smoothing must lie in [0, 1)")
        if not 0.0 < lo <= hi <= 1.0:
            raise ValidationError(f"active_range must satisfy 0 < low <= high <= 1, got {self.active_range}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValidationError("beta must lie in [0, 1]")
        if not 0.0 <= self.warmup_fraction < 1.0 or self.clip_norm <= 0:
            raise ValidationError("warmup_fraction must lie in [0, 1) and clip_norm be positive")


# --- losses -------------------------------------------------------------------------

def _l2_normalize(Z: Tensor) -> Tensor:
    return Z / T.sqrt(T.tsum(Z * Z, axis=-1, keepdims=True))


def nt_xent_loss(Z1, Z2, tau: float) -> Tensor:
    """Normalised-temperature cross entropy over two aligned views.

    Each of the 2B embeddings is an anchor whose positive is the same row
    in the other view; the denominator runs over the other 2B - 1
    embeddings. Returns the mean over all 2B anchors.
    """
    Z1, Z2 = T.as_tensor(Z1), T.as_tensor(Z2)
    if tau <= 0:
        raise ContractError("tau must be positive")
    if Z1.shape != Z2.shape or Z1.ndim != 2 or Z1.shape[0] < 1:
        raise ContractError(f"views must be equal-shape B x d with B >= 1, got {Z1.shape}, {Z2.shape}")
    for Z in (Z1, Z2):
        if (np.linalg.norm(Z.data, axis=1) == 0).any():
            raise ContractError("cosine similarity undefined for a zero-norm embedding")
    B = Z1.shape[0]
    Z = T.concat([_l2_normalize(Z1), _l2_normalize(Z2)], axis=0)
    sim = T.matmul(Z, T.transpose(Z)) * (1.0 / tau)
    sim = T.masked_fill(sim, np.eye(2 * B, dtype=bool), -np.inf)
    logp = T.log_softmax(sim, axis=-1)
    pos = np.concatenate([np.arange(B, 2 * B), np.arange(B)])
    return -T.mean(logp[np.arange(2 * B), pos])


def _smoothed_targets(labels, num_classes: int, smoothing: float) -> np.ndarray:
    if not 0.0 <= smoothing < 1.0:
        raise ContractError("smoothing must lie in [0, 1)")
    labels = np.asarray(labels, dtype=np.int64)
    target = np.full((len(labels), num_classes), smoothing / num_classes)
    target[np.arange(len(labels)), labels] += 1.0 - smoothing
    return target


def label_smoothed_ce(probs, labels, smoothing: float) -> Tensor:
    """Mean over rows of ``-sum_c target_c log p_c`` with ``target = (1-s) onehot + s/|Y|``."""
    probs = T.as_tensor(probs)
    target = _smoothed_targets(labels, probs.shape[-1], smoothing)
    # zero-target entries never contribute; keep log(0) out of the graph
    logp = T.log(T.masked_fill(probs, target == 0, 1.0))
    return -T.tsum(logp * target) * (1.0 / len(target))


def label_smoothed_ce_from_logits(logits, labels, smoothing: float) -> Tensor:
    logits = T.as_tensor(logits)
    target = _smoothed_targets(labels, logits.shape[-1], smoothing)
    return -T.tsum(T.log_softmax(logits, axis=-1) * target) * (1.0 / len(target))


# --- optimisation -------------------------------------------------------------------

@dataclass
class ParamGroup:
    params: dict[str, Tensor]
    lr: float
    weight_decay: float


class AdamW:
    """Adam with decoupled weight decay and bias correction, over named groups."""

    def __init__(self, groups: dict[str, ParamGroup], betas=(0.9, 0.999), eps: float = 1e-8):
        seen: set[int] = set()
        for g in groups.values():
            for p in g.params.values():
                if id(p) in seen:
                    raise ValidationError("a parameter appears in more than one group")
                seen.add(id(p))
        self.groups = groups
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: {k: np.zeros_like(p.data) for k, p in g.params.items()} for name, g in groups.items()}
        self.v = {name: {k: np.zeros_like(p.data) for k, p in g.params.items()} for name, g in groups.items()}

    def parameters(self) -> list[Tensor]:
        return [p for g in self.groups.values() for p in g.params.values()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def step(self, lr_scale: float = 1.0) -> None:
        optimizer_step(self, lr_scale)


def optimizer_step(opt: AdamW, lr_scale: float = 1.0) -> None:
    """``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``; missing grads count as zero."""
    b1, b2 = opt.betas
    opt.step_count += 1
    t = opt.step_count
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, group in opt.groups.items():
        lr = group.lr * lr_scale
        for k, p in group.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = opt.m[name][k]
            v = opt.v[name][k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + opt.eps) + group.weight_decay * p.data
            p.data -= lr * update


def global_grad_norm(params) -> float:
    return math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    params = list(params)
    total = global_grad_norm(params)
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def schedule_factor(step: int, total_steps: int, kind: str, warmup_fraction: float = 0.1,
                    t0: int = 10, t_mult: int = 2) -> float:
    """Learning-rate multiplier at ``step`` (0-based).

    ``warmup-linear`` ramps 0 -> 1 over the first ``warmup_fraction`` of
    ``total_steps`` and then decays linearly to 0 at ``total_steps``.
    ``cosine-warm-restarts`` anneals 1 -> 0 over ``t0`` steps, restarting
    with the period multiplied by ``t_mult``.
    """
    if step < 0:
        raise ContractError("step must be non-negative")
    if kind == "warmup-linear":
        warm = warmup_fraction * total_steps
        if step < warm:
            return step / warm
        if total_steps <= warm:
            return 0.0
        return max(0.0, (total_steps - step) / (total_steps - warm))
    if kind == "cosine-warm-restarts":
        period, t = t0, step
        while t >= period:
            t -= period
            period *= t_mult
        return 0.5 * (1.0 + math.cos(math.pi * t / period))
    if kind == "constant":
        return 1.0
    raise ContractError(f"unknown schedule {kind!r}")


# --- metrics and early stopping ------------------------------------------------------

def classification_metrics(pred, truth) -> tuple[float, float]:
    """Accuracy and macro F1 over the classes present in ``truth``."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if len(truth) == 0:
        raise ContractError("cannot score an empty node set")
    acc = float(np.mean(pred == truth))
    f1s = []
    for c in np.unique(truth):
        tp = np.sum((pred == c) & (truth == c))
        fp = np.sum((pred == c) & (truth != c))
        fn = np.sum((pred != c) & (truth == c))
        f1s.append(2.0 * tp / (2.0 * tp + fp + fn))
    return acc, float(np.mean(f1s))


def predict(model: GMLM, inputs: GraphInputs) -> np.ndarray:
    """Class probabilities with every node active, no perturbation, no dropout."""
    with no_grad():
        return model.forward(inputs, train=False).probs.data


def evaluate(model: GMLM, inputs: GraphInputs, labels, node_set) -> tuple[float, float]:
    node_set = np.asarray(node_set, dtype=np.int64)
    if len(node_set) == 0:
        raise ContractError("cannot evaluate on an empty node set")
    pred = predict(model, inputs).argmax(axis=1)
    return classification_metrics(pred[node_set], np.asarray(labels)[node_set])


@dataclass
class EarlyStopState:
    patience: int
    best_f1: float | None = None
    best_epoch: int | None = None
    snapshot: dict | None = None
    since_improvement: int = 0


def early_stop_update(state: EarlyStopState, epoch: int, val_f1: float, params) -> bool:
    """Record an epoch; returns False once ``patience`` epochs pass without strict improvement."""
    if state.best_f1 is None or val_f1 > state.best_f1:
        state.best_f1 = val_f1
        state.best_epoch = epoch
        state.snapshot = params.state_dict() if hasattr(params, "state_dict") else {
            k: np.array(v, copy=True) for k, v in params.items()
        }
        state.since_improvement = 0
    else:
        state.since_improvement += 1
    return state.since_improvement < state.patience


# --- training state and epochs -------------------------------------------------------

@dataclass
class TrainState:
    rng: np.random.Generator
    inputs: GraphInputs
    optimizer: AdamW
    step: int = 0
    early_stop: EarlyStopState | None = None


def pretrain_state(model: GMLM, g: TextGraph, cfg: PretrainConfig, text_matrix=None) -> TrainState:
    """Optimizer over the GNN branch and mask token only; everything else stays frozen."""
    params = {f"gnn.{k}": p for k, p in model.gnn.named_parameters()}
    opt = AdamW({"graph": ParamGroup(params, cfg.lr, cfg.weight_decay)})
    return TrainState(np.random.default_rng(cfg.seed), model.prepare(g, text_matrix), opt)


def finetune_state(model: GMLM, g: TextGraph, cfg: FinetuneConfig, text_matrix=None) -> TrainState:
    groups = model.param_groups()
    opt = AdamW({
        "graph": ParamGroup(groups["graph"], cfg.lr_graph, cfg.wd_graph),
        "text": ParamGroup(groups["text"], cfg.lr_bert, cfg.wd_text),
        "other": ParamGroup(groups["other"], cfg.lr_other, cfg.wd_other),
    })
    return TrainState(np.random.default_rng(cfg.seed), model.prepare(g, text_matrix), opt,
                      early_stop=EarlyStopState(cfg.patience))


def pretrain_epoch(model: GMLM, g: TextGraph, cfg: PretrainConfig, state: TrainState) -> float:
    """Two degree-weighted soft-masked views, shared GNN, NT-Xent, one optimizer step."""
    rng = state.rng
    n = g.num_nodes
    p = rng.uniform(*cfg.mask_range)
    everyone = np.ones(n, dtype=bool)
    m1 = degree_weighted_sample(g, everyone, p, rng)
    m2 = degree_weighted_sample(g, everyone, p, rng)
    H1 = model.graph_embedding(state.inputs, m1, cfg.beta, train=True, rng=rng)
    H2 = model.graph_embedding(state.inputs, m2, cfg.beta, train=True, rng=rng)
    batch = np.sort(rng.choice(n, size=min(n, cfg.batch_size), replace=False))
    loss = nt_xent_loss(H1[batch], H2[batch], cfg.tau)
    model.zero_grad()
    backward(loss)
    factor = schedule_factor(state.step, cfg.epochs, "cosine-warm-restarts", t0=cfg.t0, t_mult=cfg.t_mult)
    state.optimizer.step(factor)
    state.step += 1
    return loss.item()


def pretrain_objective(model: GMLM, g: TextGraph, inputs: GraphInputs, cfg: PretrainConfig,
                       draws: int = 8, seed: int = 0) -> float:
    """Contrastive loss averaged over ``draws`` fixed view pairs, dropout off.

    Uses its own generator, so repeated calls on the same parameters agree
    exactly; suited to before/after comparisons.
    """
    rng = np.random.default_rng(seed)
    n = g.num_nodes
    everyone = np.ones(n, dtype=bool)
    values = []
    with no_grad():
        for _ in range(draws):
            p = rng.uniform(*cfg.mask_range)
            m1 = degree_weighted_sample(g, everyone, p, rng)
            m2 = degree_weighted_sample(g, everyone, p, rng)
            batch = np.sort(rng.choice(n, size=min(n, cfg.batch_size), replace=False))
            H1 = model.graph_embedding(inputs, m1, cfg.beta)
            H2 = model.graph_embedding(inputs, m2, cfg.beta)
            values.append(nt_xent_loss(H1[batch], H2[batch], cfg.tau).item())
    return float(np.mean(values))


def finetune_epoch(model: GMLM, g: TextGraph, splits: SplitAssignment, cfg: FinetuneConfig,
                   state: TrainState) -> tuple[float, dict]:
    """Active-node training step followed by a full-graph evaluation."""
    rng = state.rng
    p = rng.uniform(*cfg.active_range)
    try:
        active = degree_weighted_sample(g, splits.mask("train"), p, rng)
    except SamplingError as exc:
        raise EpochError(f"no active training nodes: {exc}") from None
    out = model.forward(state.inputs, active=active, pert_mask=active, beta=cfg.beta, train=True, rng=rng)
    idx = np.flatnonzero(active)
    loss = label_smoothed_ce_from_logits(out.logits[idx], g.labels[idx], cfg.label_smoothing)
    model.zero_grad()
    backward(loss)
    grad_norm = clip_grad_norm(state.optimizer.parameters(), cfg.clip_norm)
    factor = schedule_factor(state.step, cfg.max_epochs, "warmup-linear", warmup_fraction=cfg.warmup_fraction)
    state.optimizer.step(factor)
    state.step += 1

    pred = predict(model, state.inputs).argmax(axis=1)
    val_nodes = splits.nodes("val")
    train_nodes = splits.nodes("train")
    val_acc, val_f1 = classification_metrics(pred[val_nodes], g.labels[val_nodes]) if len(val_nodes) else (0.0, 0.0)
    train_acc, _ = classification_metrics(pred[train_nodes], g.labels[train_nodes])
    metrics = {
        "val_acc": val_acc,
        "val_f1": val_f1,
        "train_acc": train_acc,
        "active": int(active.sum()),
        "grad_norm": grad_norm,
        "lr_factors": {name: factor for name in state.optimizer.groups},
        "fusion_weights": model.gnn.fusion.weights().data.tolist(),
    }
    return loss.item(), metrics


@dataclass
class FinetuneResult:
    best_epoch: int
    best_val_f1: float
    epochs_run: int
    history: list[dict] = field(default_factory=list)


def run_pretraining(model: GMLM, g: TextGraph, cfg: PretrainConfig, text_matrix=None,
                    log: Callable[[dict], None] | None = None) -> list[float]:
    state = pretrain_state(model, g, cfg, text_matrix)
    losses = []
    for epoch in range(1, cfg.epochs + 1):
        factor = schedule_factor(state.step, cfg.epochs, "cosine-warm-restarts", t0=cfg.t0, t_mult=cfg.t_mult)
        loss = pretrain_epoch(model, g, cfg, state)
        losses.append(loss)
        if log is not None:
            log({"stage": "pretrain", "epoch": epoch, "loss": loss, "val_acc": None, "val_f1": None,
                 "lr_factors": {"graph": factor},
                 "fusion_weights": model.gnn.fusion.weights().data.tolist()})
    return losses


def run_finetuning(model: GMLM, g: TextGraph, splits: SplitAssignment, cfg: FinetuneConfig,
                   text_matrix=None, log: Callable[[dict], None] | None = None) -> FinetuneResult:
    """Train until early stopping or ``max_epochs``; leaves the best-F1 snapshot loaded."""
    state = finetune_state(model, g, cfg, text_matrix)
    history = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        loss, metrics = finetune_epoch(model, g, splits, cfg, state)
        record = {"stage": "finetune", "epoch": epoch, "loss": loss, **metrics}
        history.append(record)
        if log is not None:
            log(record)
        if not early_stop_update(state.early_stop, epoch, metrics["val_f1"], model):
            break
    es = state.early_stop
    model.load_state_dict(es.snapshot)
    return FinetuneResult(es.best_epoch, es.best_f1, epoch, history)
