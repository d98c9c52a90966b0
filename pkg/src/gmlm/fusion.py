"""Bi-directional cross-attention between modalities, fusion network and classifier."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError
from .nn import LayerNorm, Linear, Module, MultiHeadAttention, scaled_dot_attention
from .tensor import Tensor

__all__ = ["scaled_dot_attention", "BidirectionalFusion", "FusionHead", "bidirectional_fuse",
           "fuse_and_classify"]


class BidirectionalFusion(Module):
    """Text queries over graph keys/values, and graph queries over text keys/values.

    ``mode="full"`` lets every node attend to all N nodes of the other
    modality; ``mode="diagonal"`` restricts each node to its own row.
    With ``mask_inactive_keys`` the text rows of inactive nodes are
    excluded as keys in the graph-to-text-keys direction.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, mode: str = "full",
                 mask_inactive_keys: bool = False):
        if mode not in ("full", "diagonal"):
            raise ContractError(f"unknown attention mode {mode!r}")
        self.graph_to_text = MultiHeadAttention(d, heads, rng)
        self.text_to_graph = MultiHeadAttention(d, heads, rng)
        self._mode = mode
        self._mask_inactive_keys = mask_inactive_keys

    @property
    def mode(self) -> str:
        return self._mode

    def __call__(self, H_G, H_PLM, active=None) -> tuple[Tensor, Tensor]:
        return bidirectional_fuse(H_G, H_PLM, self, active)


def bidirectional_fuse(H_G, H_PLM, params: BidirectionalFusion, active=None) -> tuple[Tensor, Tensor]:
    """Return ``(H_GtoT, H_TtoG)``.

    ``H_GtoT`` uses the text rows as queries over the graph rows;
    ``H_TtoG`` uses the graph rows as queries over the text rows.
    """
    if H_G.shape != H_PLM.shape:
        raise ContractError(f"graph {H_G.shape} and text {H_PLM.shape} matrices must align")
    diagonal = params.mode == "diagonal"
    text_key_mask = None
    if params._mask_inactive_keys and active is not None and not diagonal:
        active = np.asarray(active, dtype=bool)
        if active.any():
            text_key_mask = ~active
    g2t = params.graph_to_text(H_PLM, H_G, diagonal=diagonal)
    t2g = params.text_to_graph(H_G, H_PLM, key_mask=text_key_mask, diagonal=diagonal)
    return g2t, t2g


class FusionHead(Module):
    """Concatenate, FusionNet (Linear, LayerNorm, GELU, Dropout), then an MLP classifier."""

    def __init__(self, d: int, d_fused: int, num_classes: int, rng: np.random.Generator,
                 keep_prob: float = 0.8):
        self.fusion_linear = Linear(2 * d, d_fused, rng)
        self.fusion_norm = LayerNorm(d_fused)
        self.hidden = Linear(d_fused, d_fused, rng)
        self.out = Linear(d_fused, num_classes, rng)
        self._keep_prob = keep_prob

    def fused(self, H_GtoT, H_TtoG, train: bool = False, rng=None) -> Tensor:
        h = T.concat([H_GtoT, H_TtoG], axis=-1)
        h = T.gelu(self.fusion_norm(self.fusion_linear(h)))
        return T.dropout(h, self._keep_prob, rng, train)

    def logits(self, fused, train: bool = False, rng=None) -> Tensor:
        h = T.dropout(T.gelu(self.hidden(fused)), self._keep_prob, rng, train)
        return self.out(h)

    def __call__(self, H_GtoT, H_TtoG, train: bool = False, rng=None) -> Tensor:
        return fuse_and_classify(H_GtoT, H_TtoG, self, train, rng)


def fuse_and_classify(H_GtoT, H_TtoG, params: FusionHead, train: bool = False, rng=None) -> Tensor:
    """Per-node class probabilities."""
    if H_GtoT.shape[0] != H_TtoG.shape[0]:
        raise ContractError("attended matrices have different node counts")
    return T.softmax(params.logits(params.fused(H_GtoT, H_TtoG, train, rng), train, rng), axis=-1)
