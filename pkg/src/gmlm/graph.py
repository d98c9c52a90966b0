"""Text-attributed graphs: storage, ingestion, splits and node sampling."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, SamplingError, StratificationError, ValidationError

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}


@dataclass(frozen=True)
class TextGraph:
    """Node features, typed directed edges ``(src, dst, relation)``, texts and labels.

    An edge ``(j, i, r)`` makes ``j`` a neighbour of ``i`` under relation ``r``.
    """

    features: np.ndarray
    edges: np.ndarray
    texts: tuple[str, ...]
    labels: np.ndarray
    num_classes: int
    num_relations: int = 1

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "texts", tuple(self.texts))
        self.validate()

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def validate(self) -> None:
        n = self.num_nodes
        if self.features.ndim != 2:
            raise ValidationError(f"features must be N x d, got shape {self.features.shape}")
        if len(self.texts) != n:
            raise ValidationError(f"{len(self.texts)} texts for {n} nodes")
        if self.labels.shape != (n,):
            raise ValidationError(f"labels shape {self.labels.shape} does not match {n} nodes")
        if self.num_classes < 2:
            raise ValidationError(f"need at least 2 classes, got {self.num_classes}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")
        if len(self.edges):
            src, dst, rel = self.edges.T
            bad = (src < 0) | (src >= n) | (dst < 0) | (dst >= n)
            if bad.any():
                k = int(np.flatnonzero(bad)[0])
                raise ValidationError(f"edge {tuple(self.edges[k, :2])} references a node outside [0, {n})")
            if rel.min() < 0 or rel.max() >= self.num_relations:
                raise ValidationError(f"relation ids must lie in [0, {self.num_relations})")

    def degrees(self) -> np.ndarray:
        """In-degree plus out-degree over all relations."""
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        if len(self.edges):
            np.add.at(deg, self.edges[:, 0], 1)
            np.add.at(deg, self.edges[:, 1], 1)
        return deg

    def edge_heterophily(self) -> float:
        """Fraction of edges joining nodes with different labels."""
        if not len(self.edges):
            return 0.0
        return float(np.mean(self.labels[self.edges[:, 0]] != self.labels[self.edges[:, 1]]))

    def permute(self, perm) -> TextGraph:
        """Relabel nodes so that new node ``k`` is old node ``perm[k]``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        edges = self.edges.copy()
        if len(edges):
            edges[:, 0] = inv[edges[:, 0]]
            edges[:, 1] = inv[edges[:, 1]]
        return TextGraph(
            self.features[perm],
            edges,
            [self.texts[i] for i in perm],
            self.labels[perm],
            self.num_classes,
            self.num_relations,
        )


# --- ingestion ----------------------------------------------------------------

def graph_to_json(g: TextGraph) -> dict:
    return {
        "nodes": [
            {"id": i, "features": g.features[i].tolist(), "text": g.texts[i], "label": int(g.labels[i])}
            for i in range(g.num_nodes)
        ],
        "edges": g.edges.tolist(),
        "meta": {"num_classes": g.num_classes, "num_relations": g.num_relations},
    }


def save_graph(g: TextGraph, path) -> None:
    Path(path).write_text(json.dumps(graph_to_json(g)))


def graph_from_json(doc: dict) -> TextGraph:
    try:
        nodes = sorted(doc["nodes"], key=lambda n: n["id"])
        meta = doc.get("meta", {})
        edges = doc.get("edges", [])
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed graph document: {exc!r}") from None
    ids = [n["id"] for n in nodes]
    if ids != list(range(len(nodes))):
        raise ValidationError("node ids must be exactly 0..N-1")
    for n in nodes:
        if n.get("label") is None:
            raise ValidationError(f"node {n['id']} has no label")
    for e in edges:
        if len(e) != 3:
            raise ValidationError(f"edge {e} is not a [src, dst, rel] triple")
    labels = [int(n["label"]) for n in nodes]
    num_rel = meta.get("num_relations")
    if num_rel is None:
        num_rel = max((int(e[2]) for e in edges), default=0) + 1
    num_classes = meta.get("num_classes", max(labels, default=0) + 1)
    d = len(nodes[0]["features"]) if nodes else 0
    return TextGraph(
        np.array([n["features"] for n in nodes], dtype=np.float64).reshape(len(nodes), d),
        np.array(edges, dtype=np.int64).reshape(-1, 3),
        [n.get("text") or "" for n in nodes],
        labels,
        int(num_classes),
        int(num_rel),
    )


def _read_tsv_edges(path) -> np.ndarray:
    edges = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) == 2:
                parts.append("0")
            if len(parts) != 3:
                raise ParseError(f"expected src<TAB>dst[<TAB>rel], got {line!r}", lineno)
            try:
                edges.append([int(p) for p in parts])
            except ValueError:
                raise ParseError(f"non-integer field in {line!r}", lineno) from None
    return np.array(edges, dtype=np.int64).reshape(-1, 3)


def load_graph(path, format: str = "canonical-json", base: TextGraph | None = None) -> TextGraph:
    """Load a graph.

    ``canonical-json`` reads a full document. ``tsv-triple`` reads an edge
    list (``src  dst  [rel]`` per line) and attaches it to the nodes of
    ``base``, replacing its edges.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format == "canonical-json":
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, exc.lineno) from None
        return graph_from_json(doc)
    if format == "tsv-triple":
        if base is None:
            raise ValidationError("tsv-triple holds edges only; pass the node table as base")
        edges = _read_tsv_edges(path)
        num_rel = max(base.num_relations, int(edges[:, 2].max()) + 1 if len(edges) else 1)
        return TextGraph(base.features, edges, base.texts, base.labels, base.num_classes, num_rel)
    raise ValidationError(f"unknown graph format {format!r}")


def add_reverse_relations(g: TextGraph) -> TextGraph:
    """Add relation ``r + |R|`` holding every edge of relation ``r`` reversed."""
    rev = g.edges[:, [1, 0, 2]].copy()
    rev[:, 2] += g.num_relations
    return TextGraph(
        g.features,
        np.concatenate([g.edges, rev]),
        g.texts,
        g.labels,
        g.num_classes,
        2 * g.num_relations,
    )


# --- splits -------------------------------------------------------------------

@dataclass(frozen=True)
class SplitAssignment:
    assignment: np.ndarray
    seed: int | None = None

    def nodes(self, split) -> np.ndarray:
        tag = SPLIT_NAMES[split] if isinstance(split, str) else split
        return np.flatnonzero(self.assignment == tag)

    def mask(self, split) -> np.ndarray:
        tag = SPLIT_NAMES[split] if isinstance(split, str) else split
        return self.assignment == tag

    def counts(self) -> tuple[int, int, int]:
        return tuple(int((self.assignment == t).sum()) for t in (TRAIN, VAL, TEST))

    def to_json(self) -> dict:
        return {"seed": self.seed, "assignment": self.assignment.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> SplitAssignment:
        a = np.asarray(doc["assignment"], dtype=np.int64)
        if not np.isin(a, (TRAIN, VAL, TEST)).all():
            raise ValidationError("split assignment values must be 0, 1 or 2")
        return cls(a, doc.get("seed"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> SplitAssignment:
        return cls.from_json(json.loads(Path(path).read_text()))


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def make_splits(g: TextGraph, ratios=(0.48, 0.32, 0.20), seed: int = 0) -> SplitAssignment:
    """Stratified random train/val/test split; test takes each class's remainder."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValidationError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    assignment = np.full(g.num_nodes, TEST, dtype=np.int64)
    for c in range(g.num_classes):
        members = np.flatnonzero(g.labels == c)
        if len(members) == 0:
            continue
        if len(members) < 3:
            raise StratificationError(f"class {c} has {len(members)} nodes; need at least 3 to stratify")
        members = rng.permutation(members)
        n_train = _round_half_up(ratios[0] * len(members))
        n_val = min(_round_half_up(ratios[1] * len(members)), len(members) - n_train)
        assignment[members[:n_train]] = TRAIN
        assignment[members[n_train:n_train + n_val]] = VAL
    return SplitAssignment(assignment, seed)


# --- sampling -----------------------------------------------------------------

def degree_weighted_sample(g: TextGraph, eligible, proportion: float, seed) -> np.ndarray:
    """Draw ``round(proportion * |eligible|)`` distinct eligible nodes.

    Successive draws without replacement with weight ``degree + 1``.
    ``seed`` may be an int or a ``numpy.random.Generator``. Returns a
    boolean node mask.
    """
    eligible = np.asarray(eligible, dtype=bool)
    if eligible.shape != (g.num_nodes,):
        raise SamplingError(f"eligible mask has shape {eligible.shape}, expected ({g.num_nodes},)")
    if not 0.0 < proportion <= 1.0:
        raise SamplingError(f"proportion must lie in (0, 1], got {proportion}")
    pool = np.flatnonzero(eligible)
    if len(pool) == 0:
        raise SamplingError("no eligible nodes to sample from")
    k = min(len(pool), max(1, _round_half_up(proportion * len(pool))))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    w = (g.degrees()[pool] + 1).astype(np.float64)
    chosen = rng.choice(pool, size=k, replace=False, p=w / w.sum())
    out = np.zeros(g.num_nodes, dtype=bool)
    out[chosen] = True
    return out


# --- synthetic corpus ---------------------------------------------------------

def generate_synthetic(
    num_nodes: int,
    classes: int,
    heterophily: float,
    vocab: int = 12,
    seed: int = 0,
    *,
    feature_dim: int = 16,
    avg_degree: float = 4.0,
    feature_noise: float = 1.0,
    text_signal: float = 0.7,
    text_length: tuple[int, int] = (4, 12),
) -> TextGraph:
    """Class-conditional features/texts with a controlled edge heterophily.

    Features are a per-class Gaussian prototype plus isotropic noise. Each
    class owns ``vocab`` words; a text draws each token from its own
    class's words with probability ``text_signal`` and from a shared
    filler pool otherwise. Each directed edge starts at a uniform node and
    ends at a node of a different class with probability ``heterophily``.
    """
    if not 0.0 <= heterophily <= 1.0:
        raise ValidationError(f"heterophily must lie in [0, 1], got {heterophily}")
    if classes < 2 or num_nodes < classes:
        raise ValidationError("need at least 2 classes and one node per class")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(num_nodes) % classes)
    prototypes = rng.normal(size=(classes, feature_dim))
    features = prototypes[labels] + feature_noise * rng.normal(size=(num_nodes, feature_dim))

    class_words = [[f"c{c}w{k}" for k in range(vocab)] for c in range(classes)]
    filler = [f"f{k}" for k in range(vocab)]
    texts = []
    for y in labels:
        n_tok = rng.integers(text_length[0], text_length[1] + 1)
        own = rng.random(n_tok) < text_signal
        words = [
            class_words[y][rng.integers(vocab)] if o else filler[rng.integers(vocab)]
            for o in own
        ]
        texts.append(" ".join(words))

    by_class = [np.flatnonzero(labels == c) for c in range(classes)]
    target = int(round(avg_degree * num_nodes / 2))
    edges: set[tuple[int, int]] = set()
    attempts = 0
    while len(edges) < target and attempts < 50 * target:
        attempts += 1
        src = int(rng.integers(num_nodes))
        y = labels[src]
        if rng.random() < heterophily:
            other = rng.choice([c for c in range(classes) if c != y])
            dst = int(rng.choice(by_class[other]))
        else:
            same = by_class[y]
            if len(same) < 2:
                continue
            dst = int(rng.choice(same))
            if dst == src:
                continue
        edges.add((src, dst))
    edge_arr = np.array([(s, d, 0) for s, d in sorted(edges)], dtype=np.int64).reshape(-1, 3)
    return TextGraph(features, edge_arr, texts, labels, classes, 1)
