import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from gmlm.cli import main
from gmlm.errors import ValidationError
from gmlm.experiment import RunConfig, aggregate, derive_seed
from gmlm.graph import generate_synthetic, load_graph, save_graph
from gmlm.model import GMLM, load_checkpoint, save_checkpoint
from gmlm.text import save_embeddings

from conftest import tiny_graph, tiny_model

SMALL_MODEL = {"d_hidden": 8, "d_plm": 8, "cross_heads": 2, "text_heads": 2, "max_len": 8, "d_ff": 16}


def run(argv):
    """Call the entry point in-process, folding argparse exits into return codes."""
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


@pytest.fixture
def graph_file(tmp_path):
    path = tmp_path / "g.json"
    assert run(["synth", "--nodes", 40, "--classes", 2, "--heterophily", 0.7, "--seed", 1,
                "--feature-dim", 6, "--out", path]) == 0
    return path


def write_config(tmp_path, **fields):
    doc = {"dataset": "g.json", "model": SMALL_MODEL, "pretrain": {"epochs": 2},
           "finetune": {"max_epochs": 8, "patience": 3}, "seeds": [0], "out": str(tmp_path / "run")}
    doc.update(fields)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


# --- model and checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    g = tiny_graph()
    model = tiny_model(g, seed=4)
    save_checkpoint(model, tmp_path / "m.json", {"note": 1})
    loaded, meta = load_checkpoint(tmp_path / "m.json")
    assert meta == {"note": 1}
    for k, v in model.state_dict().items():
        assert loaded.state_dict()[k].tobytes() == v.tobytes()
    a = model.forward(model.prepare(g)).logits.data
    b = loaded.forward(loaded.prepare(g)).logits.data
    assert a.tobytes() == b.tobytes()


def test_dimension_mismatch_names_both_dims():
    model = tiny_model(tiny_graph())
    other = generate_synthetic(8, 2, 0.5, feature_dim=5)
    with pytest.raises(ValidationError, match="model has 3, graph has 5"):
        model.check_graph(other)


def test_model_permutation_equivariance():
    g = tiny_graph()
    model = tiny_model(g)
    perm = np.random.default_rng(0).permutation(g.num_nodes)
    gp = g.permute(perm)
    out = model.forward(model.prepare(g))
    outp = model.forward(model.prepare(gp))
    for name in ("graph_embedding", "text_embedding", "fused", "logits"):
        np.testing.assert_allclose(getattr(outp, name).data, getattr(out, name).data[perm], rtol=0, atol=1e-9)


def test_precomputed_text_source(tmp_path):
    g = tiny_graph()
    M = np.random.default_rng(0).normal(size=(g.num_nodes, 6))
    model = GMLM.for_graph(g, text_source="precomputed-file", text_dim=6, d_hidden=4, cross_heads=2)
    active = np.arange(g.num_nodes) % 2 == 0
    out = model.forward(model.prepare(g, M), active=active)
    np.testing.assert_array_equal(out.text_embedding.data[active], M[active])
    assert not out.text_embedding.data[~active].any()
    assert model.text is None and model.param_groups()["text"] == {}


def test_seed_streams_are_distinct():
    assert len({derive_seed(s, k) for s in range(3) for k in range(3)}) == 9
    assert derive_seed(5, 1) == derive_seed(5, 1)


def test_aggregate_uses_population_std():
    reports = [{"test_acc": a, "test_f1": a / 2, "seed": i} for i, a in enumerate([0.5, 0.7, 0.9])]
    agg = aggregate(reports)
    assert agg["test_acc_mean"] == np.mean([0.5, 0.7, 0.9])
    assert agg["test_acc_std"] == np.std([0.5, 0.7, 0.9], ddof=0)


def test_run_config_rejects_unknown_fields():
    with pytest.raises(ValidationError):
        RunConfig.from_dict({"dataset": "x", "learning_rate": 1})


# --- synth ---------------------------------------------------------------------------------

def test_synth_writes_requested_graph(tmp_path, capsys):
    path = tmp_path / "g.json"
    assert run(["synth", "--nodes", 200, "--classes", 4, "--heterophily", 0.8, "--seed", 1, "--out", path]) == 0
    g = load_graph(path)
    assert g.num_nodes == 200 and g.num_classes == 4
    summary = json.loads(capsys.readouterr().out)
    assert summary["nodes"] == 200 and summary["edges"] == len(g.edges)
    assert abs(summary["heterophily"] - g.edge_heterophily()) < 1e-6


def test_synth_is_byte_identical(tmp_path):
    for name in ("a.json", "b.json"):
        assert run(["synth", "--nodes", 50, "--seed", 7, "--out", tmp_path / name]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_synth_rejects_bad_heterophily(tmp_path):
    assert run(["synth", "--heterophily", 1.2, "--out", tmp_path / "g.json"]) == 2
    assert not (tmp_path / "g.json").exists()


def test_synth_unwritable_path_is_runtime_error(tmp_path):
    assert run(["synth", "--nodes", 10, "--out", tmp_path / "missing" / "dir" / "g.json"]) == 1


def test_console_entry_point_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "gmlm", "synth", "--nodes", "20", "--out", str(tmp_path / "g.json")],
                        capture_output=True, text=True)
    bad = subprocess.run([sys.executable, "-m", "gmlm", "synth", "--heterophily", "-0.1", "--out", "x.json"],
                         capture_output=True, text=True)
    assert ok.returncode == 0 and bad.returncode == 2


# --- train / eval / dump ----------------------------------------------------------------------

def test_train_writes_all_artifacts(tmp_path, graph_file):
    cfg = write_config(tmp_path)
    assert run(["train", "--config", cfg]) == 0
    seed_dir = tmp_path / "run" / "seed_0"
    for name in ("splits.json", "metrics.jsonl", "pretrain.ckpt.json", "finetune.ckpt.json", "report.json"):
        assert (seed_dir / name).exists(), name
    lines = [json.loads(l) for l in (seed_dir / "metrics.jsonl").read_text().splitlines()]
    assert [l["stage"] for l in lines[:2]] == ["pretrain", "pretrain"]
    assert all({"stage", "epoch", "loss", "val_acc", "val_f1", "lr_factors"} <= l.keys() for l in lines)
    report = json.loads((seed_dir / "report.json").read_text())
    assert {"test_acc", "test_f1", "best_epoch", "seed"} <= report.keys()


def test_skip_pretrain_starts_from_initialisation(tmp_path, graph_file):
    cfg = write_config(tmp_path)
    assert run(["train", "--config", cfg, "--skip-pretrain"]) == 0
    seed_dir = tmp_path / "run" / "seed_0"
    assert not (seed_dir / "pretrain.ckpt.json").exists()
    lines = [json.loads(l) for l in (seed_dir / "metrics.jsonl").read_text().splitlines()]
    assert lines[0]["stage"] == "finetune"


def test_ten_seed_aggregate_recomputes(tmp_path, graph_file):
    cfg = write_config(tmp_path, pretrain={"epochs": 1}, finetune={"max_epochs": 3, "patience": 1})
    assert run(["train", "--config", cfg, "--seeds", "1..10", "--skip-pretrain"]) == 0
    agg = json.loads((tmp_path / "run" / "aggregate.json").read_text())
    per_seed = [json.loads((tmp_path / "run" / f"seed_{s}" / "report.json").read_text()) for s in range(1, 11)]
    acc = [r["test_acc"] for r in per_seed]
    assert agg["runs"] == 10 and agg["seeds"] == list(range(1, 11))
    assert agg["test_acc_mean"] == float(np.mean(acc))
    assert agg["test_acc_std"] == float(np.std(acc))


def test_parallel_workers_match_sequential(tmp_path, graph_file):
    cfg = write_config(tmp_path, finetune={"max_epochs": 3, "patience": 1})
    assert run(["train", "--config", cfg, "--seeds", "0,1", "--out", tmp_path / "seq"]) == 0
    assert run(["train", "--config", cfg, "--seeds", "0,1", "--workers", 2, "--out", tmp_path / "par"]) == 0
    for s in (0, 1):
        a = (tmp_path / "seq" / f"seed_{s}" / "report.json").read_text()
        b = (tmp_path / "par" / f"seed_{s}" / "report.json").read_text()
        assert a == b


def test_metrics_log_is_append_only(tmp_path, graph_file):
    cfg = write_config(tmp_path, finetune={"max_epochs": 3, "patience": 1})
    log = tmp_path / "run" / "seed_0" / "metrics.jsonl"
    log.parent.mkdir(parents=True)
    log.write_text('{"stage": "earlier", "epoch": 1}\n')
    assert run(["train", "--config", cfg, "--skip-pretrain"]) == 0
    assert log.read_text().splitlines()[0] == '{"stage": "earlier", "epoch": 1}'


def test_invalid_config_fails_before_compute(tmp_path, graph_file):
    cfg = write_config(tmp_path, finetune={"max_epochs": 5, "patience": 9})
    assert run(["train", "--config", cfg]) == 2
    assert not (tmp_path / "run" / "seed_0").exists()
    cfg = write_config(tmp_path, dataset="nope.json")
    assert run(["train", "--config", cfg]) == 2
    cfg = write_config(tmp_path, seeds=[])
    assert run(["train", "--config", cfg]) == 2


def test_eval_reproduces_logged_best_f1(tmp_path, graph_file, capsys):
    cfg = write_config(tmp_path)
    assert run(["train", "--config", cfg]) == 0
    ckpt = tmp_path / "run" / "seed_0" / "finetune.ckpt.json"
    capsys.readouterr()
    assert run(["eval", "--checkpoint", ckpt, "--graph", graph_file, "--split", "val"]) == 0
    first = capsys.readouterr().out
    assert run(["eval", "--checkpoint", ckpt, "--graph", graph_file, "--split", "val"]) == 0
    assert capsys.readouterr().out == first
    best = json.loads(ckpt.read_text())["meta"]["best_val_f1"]
    assert json.loads(first)["macro_f1"] == best


def test_eval_unknown_split(tmp_path, graph_file):
    cfg = write_config(tmp_path)
    assert run(["train", "--config", cfg, "--skip-pretrain"]) == 0
    ckpt = tmp_path / "run" / "seed_0" / "finetune.ckpt.json"
    assert run(["eval", "--checkpoint", ckpt, "--graph", graph_file, "--split", "holdout"]) == 2


def test_eval_dimension_mismatch(tmp_path, graph_file):
    cfg = write_config(tmp_path)
    assert run(["train", "--config", cfg, "--skip-pretrain"]) == 0
    ckpt = tmp_path / "run" / "seed_0" / "finetune.ckpt.json"
    other = tmp_path / "other.json"
    save_graph(generate_synthetic(40, 2, 0.5, feature_dim=9), other)
    assert run(["eval", "--checkpoint", ckpt, "--graph", other, "--split", "test"]) == 2


@pytest.mark.parametrize("which,width", [("gnn", 8), ("text", 8), ("fused", 12)])
def test_dump_embeddings_shape(tmp_path, graph_file, which, width):
    cfg = write_config(tmp_path, model={**SMALL_MODEL, "d_fused": 12})
    assert run(["train", "--config", cfg, "--skip-pretrain"]) == 0
    ckpt = tmp_path / "run" / "seed_0" / "finetune.ckpt.json"
    out = tmp_path / f"{which}.csv"
    assert run(["dump-embeddings", "--checkpoint", ckpt, "--graph", graph_file, "--which", which, "--out", out]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0][:2] == ["node_id", "label"] and len(rows[0]) == 2 + width
    assert len(rows) - 1 == 40


def test_train_with_precomputed_embeddings(tmp_path, graph_file):
    save_embeddings(np.random.default_rng(0).normal(size=(40, 6)), tmp_path / "emb.csv")
    cfg = write_config(tmp_path, text_source="precomputed-file", embeddings="emb.csv",
                       model={"d_hidden": 8, "cross_heads": 2}, finetune={"max_epochs": 3, "patience": 1})
    assert run(["train", "--config", cfg]) == 0
    ckpt = tmp_path / "run" / "seed_0" / "finetune.ckpt.json"
    model, _ = load_checkpoint(ckpt)
    assert model.config.d_plm == 6
    out = tmp_path / "t.csv"
    assert run(["dump-embeddings", "--checkpoint", ckpt, "--graph", graph_file, "--which", "text",
                "--embeddings", tmp_path / "emb.csv", "--out", out]) == 0


def test_train_from_tsv_edges_with_node_table(tmp_path, graph_file):
    g = load_graph(graph_file)
    (tmp_path / "edges.tsv").write_text("".join(f"{s}\t{d}\t{r}\n" for s, d, r in g.edges[::-1]))
    cfg = write_config(tmp_path, dataset="edges.tsv", dataset_format="tsv-triple", nodes="g.json",
                       pretrain={"epochs": 1}, finetune={"max_epochs": 2, "patience": 1})
    assert run(["train", "--config", cfg]) == 0
    assert (tmp_path / "run" / "seed_0" / "report.json").exists()
    cfg = write_config(tmp_path, dataset="edges.tsv", dataset_format="tsv-triple")
    assert run(["train", "--config", cfg]) == 2
    cfg = write_config(tmp_path, dataset_format="graphml")
    assert run(["train", "--config", cfg]) == 2
