"""The full model: GNN branch, text branch, cross-attention fusion and classifier."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .fusion import BidirectionalFusion, FusionHead
from .gnn import GnnBranch, RelationIndex
from .graph import TextGraph
from .nn import Module
from .tensor import Tensor
from .text import TextEncoder, TextEncoderConfig, TokenBatch, Vocabulary, assemble_text_matrix, gate_rows, \
    tokenize_batch

TEXT_SOURCES = ("internal-encoder", "precomputed-file")


@dataclass
class ModelConfig:
    d_x: int
    num_relations: int
    num_classes: int
    d_hidden: int = 64
    d_plm: int = 128
    d_fused: int | None = None
    cross_heads: int = 4
    gnn_blocks: int = 4
    keep_prob: float = 0.8
    text_layers: int = 2
    text_heads: int = 2
    max_len: int = 32
    d_ff: int | None = None
    attention_mode: str = "full"
    mask_inactive_keys: bool = False
    text_source: str = "internal-encoder"
    micro_batch: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.d_fused is None:
            self.d_fused = self.d_plm
        if self.d_ff is None:
            self.d_ff = 2 * self.d_plm
        if self.text_source not in TEXT_SOURCES:
            raise ValidationError(f"text_source must be one of {TEXT_SOURCES}")
        if self.d_plm % self.cross_heads:
            raise ValidationError(f"d_plm={self.d_plm} not divisible by cross_heads={self.cross_heads}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValidationError("keep_prob must lie in (0, 1]")


@dataclass
class GraphInputs:
    """Graph tensors prepared once per dataset for repeated forward passes."""

    features: np.ndarray
    relations: RelationIndex
    tokens: TokenBatch | None
    text_matrix: np.ndarray | None
    num_nodes: int


@dataclass
class ForwardOutput:
    graph_embedding: Tensor
    text_embedding: Tensor
    graph_to_text: Tensor
    text_to_graph: Tensor
    fused: Tensor
    logits: Tensor
    extras: dict = field(default_factory=dict)

    @property
    def probs(self) -> Tensor:
        return T.softmax(self.logits, axis=-1)

    @property
    def log_probs(self) -> Tensor:
        return T.log_softmax(self.logits, axis=-1)


class GMLM(Module):
    def __init__(self, config: ModelConfig, vocab: Vocabulary | None = None):
        self._config = config
        self._vocab = vocab
        rng = np.random.default_rng(config.seed)
        self.gnn = GnnBranch(config.d_x, config.d_hidden, config.d_plm, config.num_relations, rng,
                             num_blocks=config.gnn_blocks, keep_prob=config.keep_prob)
        if config.text_source == "internal-encoder":
            if vocab is None:
                raise ValidationError("the internal text encoder needs a vocabulary")
            enc_cfg = TextEncoderConfig(vocab.size, config.d_plm, config.text_layers, config.text_heads,
                                        config.max_len, config.d_ff)
            self.text = TextEncoder(enc_cfg, rng)
        else:
            self.text = None
        self.cross = BidirectionalFusion(config.d_plm, config.cross_heads, rng, config.attention_mode,
                                         config.mask_inactive_keys)
        self.head = FusionHead(config.d_plm, config.d_fused, config.num_classes, rng, config.keep_prob)

    @property
    def config(self) -> ModelConfig:
        return self._config

    @property
    def vocab(self) -> Vocabulary | None:
        return self._vocab

    @classmethod
    def for_graph(cls, g: TextGraph, text_source: str = "internal-encoder", text_dim: int | None = None,
                  **kwargs) -> GMLM:
        vocab = Vocabulary.build(g.texts) if text_source == "internal-encoder" else None
        if text_dim is not None:
            kwargs["d_plm"] = text_dim
        cfg = ModelConfig(d_x=g.feature_dim, num_relations=g.num_relations, num_classes=g.num_classes,
                          text_source=text_source, **kwargs)
        return cls(cfg, vocab)

    def check_graph(self, g: TextGraph) -> None:
        cfg = self._config
        for what, ours, theirs in (("feature width", cfg.d_x, g.feature_dim),
                                   ("relation count", cfg.num_relations, g.num_relations),
                                   ("class count", cfg.num_classes, g.num_classes)):
            if ours != theirs:
                raise ValidationError(f"{what} mismatch: model has {ours}, graph has {theirs}")

    def prepare(self, g: TextGraph, text_matrix: np.ndarray | None = None) -> GraphInputs:
        self.check_graph(g)
        cfg = self._config
        tokens = None
        if cfg.text_source == "internal-encoder":
            tokens = tokenize_batch(g.texts, self._vocab, cfg.max_len)
        else:
            if text_matrix is None:
                raise ValidationError("precomputed text source needs an embedding matrix")
            text_matrix = np.asarray(text_matrix, dtype=np.float64)
            if text_matrix.shape != (g.num_nodes, cfg.d_plm):
                raise ValidationError(
                    f"embedding matrix shape {text_matrix.shape} != ({g.num_nodes}, {cfg.d_plm})"
                )
        return GraphInputs(g.features, RelationIndex.build(g.edges, g.num_nodes, g.num_relations),
                           tokens, text_matrix, g.num_nodes)

    def param_groups(self) -> dict[str, dict[str, Tensor]]:
        """Optimizer groups: ``graph`` (GNN minus mask token), ``text``, ``other``."""
        graph = {f"gnn.{k}": p for k, p in self.gnn.named_parameters() if k != "mask_token"}
        text = {f"text.{k}": p for k, p in self.text.named_parameters()} if self.text is not None else {}
        other = {"gnn.mask_token": self.gnn.mask_token}
        other.update({f"cross.{k}": p for k, p in self.cross.named_parameters()})
        other.update({f"head.{k}": p for k, p in self.head.named_parameters()})
        return {"graph": graph, "text": text, "other": other}

    def graph_embedding(self, inputs: GraphInputs, pert_mask=None, beta: float = 0.7,
                        train: bool = False, rng=None) -> Tensor:
        return self.gnn(inputs.features, inputs.relations, pert_mask, beta, train, rng)

    def text_embedding(self, inputs: GraphInputs, active) -> Tensor:
        if self.text is not None:
            return assemble_text_matrix(inputs.tokens, active, self.text, micro_batch=self._config.micro_batch)
        return gate_rows(inputs.text_matrix, active)

    def forward(self, inputs: GraphInputs, active=None, pert_mask=None, beta: float = 0.7,
                train: bool = False, rng=None) -> ForwardOutput:
        """One pass over the whole graph.

        ``active`` gates which nodes' texts are encoded (default: all).
        ``pert_mask`` selects the rows soft-masked before the GNN (default:
        none).
        """
        if active is None:
            active = np.ones(inputs.num_nodes, dtype=bool)
        active = np.asarray(active, dtype=bool)
        H_G = self.graph_embedding(inputs, pert_mask, beta, train, rng)
        H_PLM = self.text_embedding(inputs, active)
        g2t, t2g = self.cross(H_G, H_PLM, active)
        fused = self.head.fused(g2t, t2g, train, rng)
        logits = self.head.logits(fused, train, rng)
        return ForwardOutput(H_G, H_PLM, g2t, t2g, fused, logits)

    __call__ = forward


# --- checkpoints ----------------------------------------------------------------

def _encode_params(state: dict[str, np.ndarray]) -> dict:
    return {k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()} for k, v in state.items()}


def _decode_params(doc: dict) -> dict[str, np.ndarray]:
    return {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in doc.items()}


def checkpoint_document(model: GMLM, meta: dict | None = None) -> dict:
    return {
        "config": asdict(model.config),
        "vocab": model.vocab.token_to_id if model.vocab is not None else None,
        "params": _encode_params(model.state_dict()),
        "meta": meta or {},
    }


def save_checkpoint(model: GMLM, path, meta: dict | None = None) -> None:
    """JSON name -> {shape, values}; Python float repr makes the round trip bit-exact."""
    Path(path).write_text(json.dumps(checkpoint_document(model, meta)))


def load_checkpoint(path) -> tuple[GMLM, dict]:
    doc = json.loads(Path(path).read_text())
    cfg = ModelConfig(**doc["config"])
    vocab = Vocabulary(doc["vocab"]) if doc.get("vocab") is not None else None
    model = GMLM(cfg, vocab)
    model.load_state_dict(_decode_params(doc["params"]))
    return model, doc.get("meta", {})
