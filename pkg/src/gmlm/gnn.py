"""Relational GCN branch: soft input masking, residual blocks, multi-scale fusion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .nn import LayerNorm, Linear, Module, xavier_uniform
from .tensor import Tensor, parameter


@dataclass(frozen=True)
class RelationIndex:
    """Per-relation edge lists with the ``1/c_{i,r}`` weight of each edge.

    ``c_{i,r}`` counts the edges of relation ``r`` arriving at node ``i``.
    """

    num_nodes: int
    src: tuple[np.ndarray, ...]
    dst: tuple[np.ndarray, ...]
    inv_count: tuple[np.ndarray, ...]

    @classmethod
    def build(cls, edges: np.ndarray, num_nodes: int, num_relations: int) -> RelationIndex:
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
        srcs, dsts, invs = [], [], []
        for r in range(num_relations):
            sel = edges[edges[:, 2] == r]
            src, dst = sel[:, 0], sel[:, 1]
            count = np.bincount(dst, minlength=num_nodes).astype(np.float64)
            srcs.append(src)
            dsts.append(dst)
            invs.append((1.0 / count[dst])[:, None] if len(dst) else np.zeros((0, 1)))
        return cls(num_nodes, tuple(srcs), tuple(dsts), tuple(invs))

    @property
    def num_relations(self) -> int:
        return len(self.src)


def soft_mask(X, mask, beta: float, e_mask: Tensor) -> Tensor:
    """Interpolate masked rows toward the mask token: ``(1-beta) x_i + beta e_mask``."""
    X = T.as_tensor(X)
    mask = np.asarray(mask, dtype=bool)
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"beta must lie in [0, 1], got {beta}")
    if mask.shape != (X.shape[0],):
        raise ContractError(f"mask length {mask.shape} does not match {X.shape[0]} nodes")
    if e_mask.shape != (X.shape[1],):
        raise ContractError(f"mask token width {e_mask.shape} does not match feature width {X.shape[1]}")
    m = mask.astype(np.float64)[:, None]
    if not mask.any() or beta == 0.0:
        return X
    return X * (1.0 - beta * m) + (beta * m) * e_mask


class RGCNLayer(Module):
    """Relation-specific weights ``W_r`` plus a self-loop weight ``W_0``; no activation."""

    def __init__(self, d_in: int, d_out: int, num_relations: int, rng: np.random.Generator):
        self.self_weight = parameter(xavier_uniform(rng, d_in, d_out, (d_in, d_out)))
        self.rel_weights = [
            parameter(xavier_uniform(rng, d_in, d_out, (d_in, d_out))) for _ in range(num_relations)
        ]

    def __call__(self, H, rel: RelationIndex) -> Tensor:
        return rgcn_forward(H, rel, self)


def rgcn_forward(H, rel: RelationIndex, params: RGCNLayer) -> Tensor:
    """Mean-normalised relational message passing plus self loop."""
    if rel.num_relations != len(params.rel_weights):
        raise ContractError(f"{rel.num_relations} relations in graph, {len(params.rel_weights)} in layer")
    out = T.matmul(H, params.self_weight)
    for r, W in enumerate(params.rel_weights):
        src = rel.src[r]
        if not len(src):
            continue
        msg = T.matmul(H, W)[src] * rel.inv_count[r]
        out = out + T.index_add_rows(msg, rel.dst[r], rel.num_nodes)
    return out


class GraphNorm(Module):
    """Per-feature normalisation over the nodes with a learnable mean scale.

    ``(h - alpha * mean) / sqrt(mean((h - alpha * mean)^2) + eps) * gamma + beta``.
    """

    def __init__(self, d: int, eps: float = 1e-5):
        self.alpha = parameter(np.ones(d))
        self.gamma = parameter(np.ones(d))
        self.beta = parameter(np.zeros(d))
        self._eps = eps

    def __call__(self, H) -> Tensor:
        return graph_norm(H, self, self._eps)


def graph_norm(H, params: GraphNorm, eps: float = 1e-5) -> Tensor:
    H = T.as_tensor(H)
    if H.shape[0] < 1:
        raise ContractError("graph_norm needs at least one node")
    shifted = H - T.mean(H, axis=0, keepdims=True) * params.alpha
    var = T.mean(shifted * shifted, axis=0, keepdims=True)
    return shifted / T.sqrt(var + eps) * params.gamma + params.beta


class GnnBlock(Module):
    def __init__(self, d_in: int, d_out: int, d_residual: int, num_relations: int,
                 rng: np.random.Generator, keep_prob: float = 0.8):
        self.rgcn = RGCNLayer(d_in, d_out, num_relations, rng)
        self.norm = GraphNorm(d_out)
        self.residual = Linear(d_residual, d_out, rng)
        self._keep_prob = keep_prob

    def __call__(self, H_prev, H_res, rel, train: bool = False, rng=None) -> Tensor:
        return gnn_block_forward(H_prev, H_res, rel, self, train, rng)


def gnn_block_forward(H_prev, H_prev2, rel: RelationIndex, block: GnnBlock,
                      train: bool = False, rng=None) -> Tensor:
    """``Dropout(GELU(GraphNorm(RGCN(H_prev)))) + Proj(H_prev2)``."""
    Z = T.gelu(block.norm(block.rgcn(H_prev, rel)))
    return T.dropout(Z, block._keep_prob, rng, train) + block.residual(H_prev2)


class MultiScaleFusion(Module):
    def __init__(self, num_layers: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.projections = [Linear(d_hidden, d_out, rng) for _ in range(num_layers)]
        self.logits = parameter(np.zeros(num_layers))
        self.norm = LayerNorm(d_out)

    def weights(self) -> Tensor:
        return T.softmax(self.logits)

    def combine(self, layers) -> Tensor:
        """Softmax-weighted sum of the projected layer outputs, before LayerNorm."""
        if len(layers) != len(self.projections):
            raise ContractError(f"expected {len(self.projections)} layer outputs, got {len(layers)}")
        w = self.weights()
        total = None
        for l, (proj, H) in enumerate(zip(self.projections, layers)):
            term = proj(H) * w[l]
            total = term if total is None else total + term
        return total

    def __call__(self, layers) -> Tensor:
        return self.norm(self.combine(layers))


def multi_scale_fuse(layers, params: MultiScaleFusion) -> Tensor:
    return params(layers)


class GnnBranch(Module):
    """Soft masking, a stack of residual RGCN blocks, and multi-scale fusion.

    Block ``l`` adds a projection of ``H^(l-2)``; blocks 1 and 2 both take
    the soft-masked input ``X'`` as that residual source.
    """

    def __init__(self, d_x: int, d_hidden: int, d_out: int, num_relations: int,
                 rng: np.random.Generator, num_blocks: int = 4, keep_prob: float = 0.8):
        self.mask_token = parameter(xavier_uniform(rng, d_x, d_x, (d_x,)))
        blocks = []
        for l in range(num_blocks):
            d_in = d_x if l == 0 else d_hidden
            d_res = d_x if l < 2 else d_hidden
            blocks.append(GnnBlock(d_in, d_hidden, d_res, num_relations, rng, keep_prob))
        self.blocks = blocks
        self.fusion = MultiScaleFusion(num_blocks, d_hidden, d_out, rng)

    def layers(self, X, rel, pert_mask=None, beta: float = 0.7, train: bool = False, rng=None):
        """Return ``(X', [H^(1), ..., H^(L)])``."""
        X = T.as_tensor(X)
        if pert_mask is not None:
            X = soft_mask(X, pert_mask, beta, self.mask_token)
        hs = [X]
        for l, block in enumerate(self.blocks):
            res = hs[0] if l == 0 else hs[l - 1]
            hs.append(block(hs[l], res, rel, train, rng))
        return X, hs[1:]

    def __call__(self, X, rel, pert_mask=None, beta: float = 0.7, train: bool = False, rng=None) -> Tensor:
        _, hs = self.layers(X, rel, pert_mask, beta, train, rng)
        return self.fusion(hs)
