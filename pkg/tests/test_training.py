import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmlm import tensor as T
from gmlm.errors import ContractError, EpochError, ValidationError
from gmlm.gradcheck import grad_check
from gmlm.graph import SplitAssignment, make_splits
from gmlm.tensor import backward, parameter
from gmlm.training import (
    AdamW,
    EarlyStopState,
    FinetuneConfig,
    ParamGroup,
    PretrainConfig,
    classification_metrics,
    clip_grad_norm,
    early_stop_update,
    evaluate,
    finetune_epoch,
    finetune_state,
    global_grad_norm,
    label_smoothed_ce,
    label_smoothed_ce_from_logits,
    nt_xent_loss,
    pretrain_epoch,
    pretrain_objective,
    pretrain_state,
    run_finetuning,
    run_pretraining,
    schedule_factor,
)

from conftest import tiny_graph, tiny_model


def nt_xent_oracle(Z1, Z2, tau):
    """Direct double sum over the 2B pooled embeddings."""
    Z = np.concatenate([Z1, Z2])
    B = len(Z1)
    n = 2 * B
    total = 0.0
    for a in range(n):
        pos = (a + B) % n
        cos = lambda i, j: float(Z[i] @ Z[j] / (np.linalg.norm(Z[i]) * np.linalg.norm(Z[j])))
        denom = sum(math.exp(cos(a, k) / tau) for k in range(n) if k != a)
        total += -math.log(math.exp(cos(a, pos) / tau) / denom)
    return total / n


def quarter_splits(g):
    return make_splits(g, (0.5, 0.25, 0.25), seed=0)


# --- NT-Xent ----------------------------------------------------------------------------

def test_nt_xent_single_identical_pair_is_zero():
    z = np.array([[0.3, -1.2, 2.0]])
    assert abs(nt_xent_loss(z, z, 0.1).item()) < 1e-9


def test_nt_xent_orthonormal_pair_matches_oracle():
    I = np.eye(2)
    got = nt_xent_loss(I, I, 0.1).item()
    # each anchor: positive cos 1, two negatives with cos 0
    closed = -math.log(math.exp(10.0) / (math.exp(10.0) + 2.0))
    assert abs(got - nt_xent_oracle(I, I, 0.1)) < 1e-9
    assert abs(got - closed) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.floats(0.05, 2.0))
def test_nt_xent_matches_oracle_and_is_nonnegative(seed, B, tau):
    rng = np.random.default_rng(seed)
    Z1, Z2 = rng.normal(size=(B, 3)), rng.normal(size=(B, 3))
    got = nt_xent_loss(Z1, Z2, tau).item()
    assert abs(got - nt_xent_oracle(Z1, Z2, tau)) < 1e-9
    assert got >= 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_nt_xent_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    Z1, Z2 = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    base = nt_xent_loss(Z1, Z2, 0.1).item()
    Z1s = Z1.copy()
    Z1s[seed % 4] *= c
    assert abs(nt_xent_loss(Z1s, Z2, 0.1).item() - base) < 1e-9


def test_nt_xent_zero_norm_rejected():
    with pytest.raises(ContractError):
        nt_xent_loss(np.zeros((1, 2)), np.ones((1, 2)), 0.1)


def test_nt_xent_grad_check(rng):
    params = {"Z1": parameter(rng.normal(size=(3, 4))), "Z2": parameter(rng.normal(size=(3, 4)))}
    assert grad_check(lambda p: nt_xent_loss(p["Z1"], p["Z2"], 0.5), params).max_rel_err < 1e-5


# --- label smoothing ------------------------------------------------------------------------

def test_exact_one_hot_without_smoothing_is_zero():
    assert label_smoothed_ce(np.eye(3), [0, 1, 2], 0.0).item() == 0.0


@pytest.mark.parametrize("s", [0.0, 0.2, 0.7])
def test_uniform_probs_give_log_classes(s):
    assert abs(label_smoothed_ce(np.full((2, 4), 0.25), [1, 3], s).item() - math.log(4)) < 1e-12


def test_binary_hand_value():
    got = label_smoothed_ce(np.array([[0.9, 0.1]]), [0], 0.2).item()
    assert abs(got - (0.9 * -math.log(0.9) + 0.1 * -math.log(0.1))) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.9))
def test_logit_and_probability_forms_agree(seed, s):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(5, 3))
    labels = rng.integers(3, size=5)
    a = label_smoothed_ce_from_logits(logits, labels, s).item()
    b = label_smoothed_ce(T.softmax(logits).data, labels, s).item()
    assert abs(a - b) < 1e-12


def test_smoothing_bounds():
    with pytest.raises(ContractError):
        label_smoothed_ce(np.full((1, 2), 0.5), [0], 1.0)


# --- AdamW --------------------------------------------------------------------------------

def one_param_opt(value, lr, wd):
    p = parameter(np.array([value]))
    return p, AdamW({"g": ParamGroup({"p": p}, lr, wd)})


def test_constant_gradient_steps_have_size_lr():
    p, opt = one_param_opt(1.0, 1e-2, 0.0)
    prev = p.data.copy()
    for t in range(200):
        p.grad = np.array([0.37])
        opt.step()
        # with constant g, m_hat = g and v_hat = g^2 exactly
        assert abs((prev - p.data)[0] - 1e-2 * 0.37 / (0.37 + 1e-8)) < 1e-15
        prev = p.data.copy()


def test_zero_gradient_is_pure_decay():
    p, opt = one_param_opt(2.0, 0.1, 0.05)
    p.grad = np.zeros(1)
    opt.step()
    assert p.data[0] == 2.0 - 0.1 * 0.05 * 2.0


def test_missing_gradient_counts_as_zero():
    p, opt = one_param_opt(1.0, 0.1, 0.0)
    opt.step()
    assert p.data[0] == 1.0


def test_group_learning_rates_scale_steps():
    g, t = parameter(np.zeros(3)), parameter(np.zeros(3))
    opt = AdamW({"graph": ParamGroup({"g": g}, 1e-4, 0.0), "text": ParamGroup({"t": t}, 1e-5, 0.0)})
    g.grad, t.grad = np.ones(3), np.ones(3)
    opt.step()
    np.testing.assert_allclose(np.abs(g.data) / np.abs(t.data), 10.0, rtol=1e-12)


def test_lr_scale_multiplies_every_group():
    p, opt = one_param_opt(0.0, 1e-3, 0.0)
    p.grad = np.ones(1)
    opt.step(lr_scale=0.5)
    assert abs(p.data[0] + 0.5e-3 / (1 + 1e-8)) < 1e-18


def test_parameter_in_two_groups_rejected():
    p = parameter(np.zeros(1))
    with pytest.raises(ValidationError):
        AdamW({"a": ParamGroup({"p": p}, 1e-3, 0), "b": ParamGroup({"q": p}, 1e-3, 0)})


def test_finetune_groups_partition_trainable_parameters():
    model = tiny_model(tiny_graph())
    groups = model.param_groups()
    ids = [id(p) for grp in groups.values() for p in grp.values()]
    assert len(ids) == len(set(ids)) == len(model.parameters())
    assert "gnn.mask_token" in groups["other"] and "gnn.mask_token" not in groups["graph"]
    assert all(k.startswith("text.") for k in groups["text"])


# --- schedules ------------------------------------------------------------------------------

@pytest.mark.parametrize("total", [10, 37, 500])
def test_warmup_linear_endpoints(total):
    f = lambda s: schedule_factor(s, total, "warmup-linear", warmup_fraction=0.1)
    assert abs(f(0)) < 1e-12
    assert abs(f(0.1 * total) - 1.0) < 1e-12
    assert abs(f(total)) < 1e-12


def test_warmup_linear_is_piecewise_linear():
    f = lambda s: schedule_factor(s, 100, "warmup-linear", warmup_fraction=0.1)
    assert abs(f(5) - 0.5) < 1e-12 and abs(f(55) - 0.5) < 1e-12


def test_cosine_restarts_return_to_one():
    f = lambda s: schedule_factor(s, 1000, "cosine-warm-restarts", t0=10, t_mult=2)
    for boundary in (0, 10, 30, 70, 150):
        assert abs(f(boundary) - 1.0) < 1e-12
    assert abs(f(5) - 0.5) < 1e-12
    assert abs(f(20) - 0.5) < 1e-12
    assert f(9) < f(8) < 1.0


def test_unknown_schedule_rejected():
    with pytest.raises(ContractError):
        schedule_factor(0, 10, "step")


# --- metrics --------------------------------------------------------------------------------

def test_perfect_predictions():
    assert classification_metrics([0, 1, 2, 1], [0, 1, 2, 1]) == (1.0, 1.0)


def test_constant_predictions_on_balanced_binary():
    acc, f1 = classification_metrics([0, 0, 0, 0], [0, 0, 1, 1])
    assert acc == 0.5 and abs(f1 - 1.0 / 3.0) < 1e-15


def test_absent_classes_are_excluded():
    # class 2 is predicted but absent from truth; it contributes no F1 term
    acc, f1 = classification_metrics([0, 2, 1], [0, 1, 1])
    assert abs(f1 - (1.0 + 2.0 / 3.0) / 2) < 1e-15


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_metrics_order_invariant(seed):
    rng = np.random.default_rng(seed)
    pred, truth = rng.integers(3, size=12), rng.integers(3, size=12)
    perm = rng.permutation(12)
    assert classification_metrics(pred, truth) == classification_metrics(pred[perm], truth[perm])


def test_empty_node_set_rejected():
    with pytest.raises(ContractError):
        classification_metrics([], [])


# --- early stopping ------------------------------------------------------------------------

def walk(sequence, patience):
    state = EarlyStopState(patience)
    for epoch, f1 in enumerate(sequence, 1):
        if not early_stop_update(state, epoch, f1, {"w": np.array([f1])}):
            return epoch, state
    return None, state


def test_monotone_improvement_never_stops():
    stop, state = walk(np.linspace(0.1, 0.9, 50), patience=5)
    assert stop is None and state.best_epoch == 50


def test_stops_exactly_patience_after_best():
    stop, state = walk([0.1, 0.2, 0.5] + [0.5] * 40, patience=7)
    assert state.best_epoch == 3 and stop == 3 + 7


def test_ties_do_not_reset_patience():
    stop, state = walk([0.4, 0.4, 0.4, 0.4], patience=2)
    assert state.best_epoch == 1 and stop == 3


def test_snapshot_holds_best_parameters():
    _, state = walk([0.1, 0.8, 0.3, 0.2, 0.1], patience=3)
    np.testing.assert_array_equal(state.snapshot["w"], [0.8])


# --- clipping -------------------------------------------------------------------------------

def grads_with_norm(rng, norm):
    ps = [parameter(rng.normal(size=s)) for s in [(3, 2), (4,), (1,)]]
    for p in ps:
        p.grad = rng.normal(size=p.shape)
    scale = norm / global_grad_norm(ps)
    for p in ps:
        p.grad *= scale
    return ps


def test_clip_to_unit_norm_preserves_direction(rng):
    ps = grads_with_norm(rng, 7.5)
    before = np.concatenate([p.grad.ravel() for p in ps])
    assert abs(clip_grad_norm(ps, 1.0) - 7.5) < 1e-12
    after = np.concatenate([p.grad.ravel() for p in ps])
    assert abs(np.linalg.norm(after) - 1.0) < 1e-9
    cos = after @ before / (np.linalg.norm(after) * np.linalg.norm(before))
    assert abs(cos - 1.0) < 1e-12


def test_clip_below_threshold_is_untouched(rng):
    ps = grads_with_norm(rng, 0.4)
    before = [p.grad.copy() for p in ps]
    clip_grad_norm(ps, 1.0)
    for p, b in zip(ps, before):
        assert p.grad.tobytes() == b.tobytes()


# --- configs --------------------------------------------------------------------------------

def test_config_invariants():
    with pytest.raises(ValidationError):
        FinetuneConfig(max_epochs=10, patience=10)
    with pytest.raises(ValidationError):
        PretrainConfig(tau=0.0)
    with pytest.raises(ValidationError):
        PretrainConfig(mask_range=(0.5, 0.2))
    with pytest.raises(ValidationError):
        FinetuneConfig(label_smoothing=1.0)


# --- stages -----------------------------------------------------------------------------------

def test_pretraining_only_moves_gnn_and_mask_token():
    g = tiny_graph()
    model = tiny_model(g)
    before = model.state_dict()
    run_pretraining(model, g, PretrainConfig(epochs=3, lr=1e-2, seed=1))
    after = model.state_dict()
    for name in before:
        if name.startswith("gnn."):
            assert not np.array_equal(before[name], after[name]), name
        else:
            assert before[name].tobytes() == after[name].tobytes(), name


def test_pretraining_deterministic():
    g = tiny_graph()
    runs = [run_pretraining(tiny_model(g), g, PretrainConfig(epochs=4, seed=5)) for _ in range(2)]
    assert runs[0] == runs[1]


def test_pretrain_objective_is_repeatable():
    g = tiny_graph()
    model = tiny_model(g)
    inputs = model.prepare(g)
    cfg = PretrainConfig()
    assert pretrain_objective(model, g, inputs, cfg, seed=3) == pretrain_objective(model, g, inputs, cfg, seed=3)


def test_finetuning_deterministic_trajectory():
    g = tiny_graph()
    splits = quarter_splits(g)
    cfg = FinetuneConfig(max_epochs=12, patience=4, seed=2)
    runs = [run_finetuning(tiny_model(g), g, splits, cfg).history for _ in range(2)]
    assert [(h["loss"], h["val_f1"]) for h in runs[0]] == [(h["loss"], h["val_f1"]) for h in runs[1]]


def test_restored_snapshot_reproduces_best_f1():
    g = tiny_graph()
    splits = quarter_splits(g)
    model = tiny_model(g)
    result = run_finetuning(model, g, splits, FinetuneConfig(max_epochs=15, patience=5, seed=0))
    _, f1 = evaluate(model, model.prepare(g), g.labels, splits.nodes("val"))
    assert f1 == result.best_val_f1
    assert result.epochs_run <= 15


def test_finetune_epoch_clips_and_logs():
    g = tiny_graph()
    model = tiny_model(g)
    cfg = FinetuneConfig(max_epochs=20, patience=5, lr_other=1e-2)
    state = finetune_state(model, g, cfg)
    loss, metrics = finetune_epoch(model, g, quarter_splits(g), cfg, state)
    assert np.isfinite(loss) and metrics["active"] >= 1
    assert set(metrics["lr_factors"]) == {"graph", "text", "other"}
    assert abs(sum(metrics["fusion_weights"]) - 1.0) < 1e-12
    # the step used warmup factor 0, so parameters are still where they started
    assert metrics["lr_factors"]["graph"] == 0.0


def test_clipped_gradient_within_norm_during_finetuning():
    g = tiny_graph()
    model = tiny_model(g)
    cfg = FinetuneConfig(max_epochs=20, patience=5, clip_norm=1e-3)
    state = finetune_state(model, g, cfg)
    _, metrics = finetune_epoch(model, g, quarter_splits(g), cfg, state)
    assert metrics["grad_norm"] > cfg.clip_norm
    assert global_grad_norm(state.optimizer.parameters()) <= cfg.clip_norm + 1e-9


def test_no_training_nodes_is_an_epoch_error():
    g = tiny_graph()
    model = tiny_model(g)
    cfg = FinetuneConfig(max_epochs=5, patience=2)
    splits = SplitAssignment(np.full(g.num_nodes, 2))
    with pytest.raises(EpochError):
        finetune_epoch(model, g, splits, cfg, finetune_state(model, g, cfg))


@pytest.mark.parametrize("mode", ["diagonal", "full"])
def test_inactive_nodes_receive_no_classification_gradient(mode):
    g = tiny_graph()
    model = tiny_model(g, attention_mode=mode)
    inputs = model.prepare(g)
    active = np.zeros(g.num_nodes, bool)
    active[[0, 3, 5]] = True
    out = model.forward(inputs, active=active, pert_mask=active, train=True, rng=np.random.default_rng(0))
    idx = np.flatnonzero(active)
    backward(label_smoothed_ce_from_logits(out.logits[idx], g.labels[idx], 0.2))
    inactive = ~active
    assert not out.logits.grad[inactive].any()
    assert not out.fused.grad[inactive].any()
    if mode == "diagonal":
        assert not out.graph_embedding.grad[inactive].any()
        assert not out.text_embedding.grad[inactive].any()
    else:
        # full attention lets inactive graph rows act as keys and values
        assert out.graph_embedding.grad[inactive].any()


def test_pretrain_epoch_seed_controls_views():
    g = tiny_graph()
    losses = []
    for seed in (1, 1, 2):
        model = tiny_model(g)
        cfg = PretrainConfig(seed=seed)
        losses.append(pretrain_epoch(model, g, cfg, pretrain_state(model, g, cfg)))
    assert losses[0] == losses[1] != losses[2]
