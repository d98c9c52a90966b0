"""Multi-seed experiment runs: configuration, per-seed pipeline, aggregate report."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .graph import SplitAssignment, TextGraph, add_reverse_relations, generate_synthetic, load_graph, make_splits
from .model import GMLM, ModelConfig, TEXT_SOURCES, save_checkpoint
from .text import load_precomputed_embeddings
from .training import FinetuneConfig, PretrainConfig, evaluate, run_finetuning, run_pretraining

log = logging.getLogger(__name__)

_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"d_x", "num_relations", "num_classes", "text_source", "seed"}


@dataclass
class RunConfig:
    dataset: str | None = None
    dataset_format: str = "canonical-json"
    nodes: str | None = None  # canonical-json node table for tsv-triple edge files
    synthetic: dict | None = None
    reverse_relations: bool = True
    text_source: str = "internal-encoder"
    embeddings: str | None = None
    model: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    split_ratios: tuple[float, float, float] = (0.48, 0.32, 0.20)
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs"
    skip_pretrain: bool = False
    skip_finetune: bool = False
    workers: int = 1

    def validate(self, base_dir: Path | None = None) -> None:
        """Check everything that can be checked before any compute starts."""
        if (self.dataset is None) == (self.synthetic is None):
            raise ValidationError("set exactly one of 'dataset' and 'synthetic'")
        if self.dataset is not None and not self.resolve(self.dataset, base_dir).exists():
            raise ValidationError(f"dataset {self.dataset} not found")
        if self.dataset_format not in ("canonical-json", "tsv-triple"):
            raise ValidationError(f"unknown dataset_format {self.dataset_format!r}")
        if self.dataset_format == "tsv-triple":
            if self.nodes is None or not self.resolve(self.nodes, base_dir).exists():
                raise ValidationError("tsv-triple datasets need an existing 'nodes' graph file")
        if self.text_source not in TEXT_SOURCES:
            raise ValidationError(f"text_source must be one of {TEXT_SOURCES}")
        if self.text_source == "precomputed-file":
            if self.embeddings is None or not self.resolve(self.embeddings, base_dir).exists():
                raise ValidationError("precomputed-file text source needs an existing 'embeddings' path")
        if not self.seeds:
            raise ValidationError("seeds must be non-empty")
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValidationError(f"split_ratios must be three values summing to 1, got {self.split_ratios}")
        unknown = set(self.model) - _MODEL_KEYS
        if unknown:
            raise ValidationError(f"unknown model fields {sorted(unknown)}")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        try:
            PretrainConfig(**self.pretrain)
            FinetuneConfig(**self.finetune)
        except TypeError as exc:
            raise ValidationError(str(exc)) from None

    @staticmethod
    def resolve(path: str, base_dir: Path | None) -> Path:
        p = Path(path)
        return p if p.is_absolute() or base_dir is None else base_dir / p

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown config fields {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)


def derive_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def prepare_graph(cfg: RunConfig, base_dir: Path | None = None) -> TextGraph:
    if cfg.dataset is not None:
        base = load_graph(cfg.resolve(cfg.nodes, base_dir)) if cfg.dataset_format == "tsv-triple" else None
        g = load_graph(cfg.resolve(cfg.dataset, base_dir), cfg.dataset_format, base=base)
    else:
        params = dict(cfg.synthetic)
        g = generate_synthetic(params.pop("num_nodes"), params.pop("classes"), params.pop("heterophily"), **params)
    return add_reverse_relations(g) if cfg.reverse_relations else g


class JsonLines:
    """Append-only JSON-lines writer; each record is flushed as it is written."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, record: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
            fh.flush()


def run_seed(cfg: RunConfig, seed: int, base_dir: Path | None = None) -> dict:
    out = Path(cfg.out) / f"seed_{seed}"
    out.mkdir(parents=True, exist_ok=True)
    g = prepare_graph(cfg, base_dir)
    text_matrix = None
    if cfg.text_source == "precomputed-file":
        text_matrix = load_precomputed_embeddings(cfg.resolve(cfg.embeddings, base_dir), g.num_nodes)
    splits = make_splits(g, cfg.split_ratios, seed)
    splits.save(out / "splits.json")

    model_kwargs = dict(cfg.model)
    if text_matrix is not None:
        model_kwargs["d_plm"] = text_matrix.shape[1]
    model = GMLM.for_graph(g, text_source=cfg.text_source, seed=derive_seed(seed, 0), **model_kwargs)
    metrics = JsonLines(out / "metrics.jsonl")
    meta = {
        "seed": seed,
        "reverse_relations": cfg.reverse_relations,
        "embeddings": cfg.embeddings,
        "splits": splits.to_json(),
    }

    if not cfg.skip_pretrain:
        pre_cfg = PretrainConfig(**{**cfg.pretrain, "seed": derive_seed(seed, 1)})
        losses = run_pretraining(model, g, pre_cfg, text_matrix, log=metrics)
        save_checkpoint(model, out / "pretrain.ckpt.json", {**meta, "stage": "pretrain", "losses": losses})

    best_epoch, best_val_f1 = None, None
    if not cfg.skip_finetune:
        ft_cfg = FinetuneConfig(**{**cfg.finetune, "seed": derive_seed(seed, 2)})
        result = run_finetuning(model, g, splits, ft_cfg, text_matrix, log=metrics)
        best_epoch, best_val_f1 = result.best_epoch, result.best_val_f1
        save_checkpoint(model, out / "finetune.ckpt.json",
                        {**meta, "stage": "finetune", "best_epoch": best_epoch, "best_val_f1": best_val_f1})

    inputs = model.prepare(g, text_matrix)
    test_acc, test_f1 = evaluate(model, inputs, g.labels, splits.nodes("test"))
    report = {"test_acc": test_acc, "test_f1": test_f1, "best_epoch": best_epoch,
              "best_val_f1": best_val_f1, "seed": seed}
    (out / "report.json").write_text(json.dumps(report))
    log.info("seed %d: test_acc=%.4f test_f1=%.4f best_epoch=%s", seed, test_acc, test_f1, best_epoch)
    return report


def aggregate(reports: list[dict]) -> dict:
    """Mean and population standard deviation (ddof=0) over seeds."""
    acc = np.array([r["test_acc"] for r in reports])
    f1 = np.array([r["test_f1"] for r in reports])
    return {
        "seeds": [r["seed"] for r in reports],
        "runs": len(reports),
        "test_acc_mean": float(np.mean(acc)),
        "test_acc_std": float(np.std(acc)),
        "test_f1_mean": float(np.mean(f1)),
        "test_f1_std": float(np.std(f1)),
        "std_ddof": 0,
        "per_seed": reports,
    }


def run_experiment(cfg: RunConfig, base_dir: Path | None = None) -> dict:
    cfg.validate(base_dir)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2))
    workers = min(cfg.workers, len(cfg.seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds, [base_dir] * len(cfg.seeds)))
    else:
        reports = [run_seed(cfg, s, base_dir) for s in cfg.seeds]
    summary = aggregate(reports)
    (out / "aggregate.json").write_text(json.dumps(summary, indent=2))
    return summary
