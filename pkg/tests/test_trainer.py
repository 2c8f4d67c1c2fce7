import dataclasses

import numpy as np
import pytest

from slalab.data import generate_task, no_shift_spec
from slalab.mathcore import make_rng
from slalab.nnet import TrainingError, backward_entropy, init_model, params_digest
from slalab.sla import CorrectionMode
from slalab.trainer import (MODES, RunRecord, TrainConfig, accuracy, config_for_mode, train,
                            train_ideally_adapted, train_oracle, unlabeled_loss_entropy)

from conftest import rel_err
from oracles import finite_difference, mlp_loss_reference

SHORT = dict(total_iters=400, eval_every=50)


def digests(task, cfg):
    out = []
    rec = train(task, cfg, callback=lambda e, m: out.append(params_digest(m)))
    return rec, out


def test_warmup_steps_bitwise_identical(small_task):
    W = 150
    _, st = digests(small_task, config_for_mode("st", seed=3, **SHORT))
    _, sla = digests(small_task, config_for_mode("sla", seed=3, warmup=W, update_interval=50,
                                                 **SHORT))
    assert st[:W] == sla[:W]
    assert st[W] != sla[W]  # adaptation and lr restart kick in right after


def test_alpha_zero_reproduces_st_stream(small_task):
    kw = dict(seed=4, warmup=100, **SHORT)
    sla = train(small_task, config_for_mode("sla", alpha=0.0, update_interval=50, **kw))
    st = train(small_task, config_for_mode("st", force_scheduler_refresh=True, **kw))
    assert sla.metric_stream() == st.metric_stream()
    assert params_digest(sla.model) == params_digest(st.model)
    assert len(sla.refresh_events) > 0


def test_st_has_no_scheduler_refresh(small_task):
    kw = dict(seed=4, warmup=100, **SHORT)
    plain = train(small_task, config_for_mode("st", **kw))
    forced = train(small_task, config_for_mode("st", force_scheduler_refresh=True, **kw))
    assert plain.metric_stream() != forced.metric_stream()


def test_seed_reproducibility(small_task):
    cfg = config_for_mode("sla+ent", seed=5, warmup=100, update_interval=60, **SHORT)
    a, b = train(small_task, cfg), train(small_task, cfg)
    assert a.metric_stream() == b.metric_stream()
    assert a.kl == b.kl and a.refresh_events == b.refresh_events
    assert np.array_equal(a.ppc.centers, b.ppc.centers)
    assert params_digest(a.model) == params_digest(b.model)


def test_loss_decomposition(small_task):
    for mode in ("st", "ent", "sla+ent", "self-pred"):
        rec = train(small_task, config_for_mode(mode, seed=1, warmup=100, **SHORT))
        for r in rec.metrics:
            parts = r["loss_source"] + r["loss_labeled"] + r["loss_unlabeled"]
            assert abs(r["loss_total"] - parts) <= 1e-9


def test_entropy_weight_zero_is_plain(small_task):
    a = train(small_task, config_for_mode("ent", seed=2, entropy_weight=0.0, **SHORT))
    b = train(small_task, config_for_mode("st", seed=2, **SHORT))
    assert [r["test_acc"] for r in a.metrics] == [r["test_acc"] for r in b.metrics]
    assert params_digest(a.model) == params_digest(b.model)


def test_non_oracle_runs_never_read_audit_labels():
    task = generate_task(no_shift_spec(dim=8, n_source_per_class=30, n_unlabeled_per_class=30,
                                       n_test_per_class=10), 3, 0)
    for mode in ("st", "ent", "sla", "sla+ent", "self-pred"):
        rec = train(task, config_for_mode(mode, seed=0, warmup=50, update_interval=40,
                                          total_iters=120))
        assert rec.audit_accesses == []
    assert task.audit_log == []
    train_oracle(task, config_for_mode("st", oracle_iters=10))
    assert task.audit_log == ["train_oracle"]


def test_oracle_never_reads_source(small_task):
    cfg = config_for_mode("st", seed=6, oracle_iters=200)
    poisoned = small_task.with_source(np.full_like(small_task.source_x, np.nan),
                                      -np.ones_like(small_task.source_y))
    a, b = train_oracle(small_task, cfg), train_oracle(poisoned, cfg)
    assert params_digest(a) == params_digest(b)
    assert params_digest(a) == params_digest(train_oracle(small_task, cfg))


def test_oracle_beats_st_on_default(default_task):
    cfg = config_for_mode("st", seed=0)
    orc = train_oracle(default_task, cfg)
    st = train(default_task, cfg)
    assert accuracy(orc, default_task.test_x, default_task.test_y) >= st.final["test_acc"]


def test_ideally_adapted_is_deterministic_and_skips_refresh(small_task):
    cfg = config_for_mode("sla", seed=7, warmup=50, update_interval=50, **SHORT)
    orc = train_oracle(small_task, dataclasses.replace(cfg, oracle_iters=300))
    a = train_ideally_adapted(small_task, cfg, orc)
    b = train_ideally_adapted(small_task, cfg, orc)
    assert a.metric_stream() == b.metric_stream()
    assert a.refresh_events == [] and a.ppc is None


def test_ideally_adapted_without_shift_matches_st():
    task = generate_task(no_shift_spec(dim=8), 3, 0)
    accs_st, accs_ideal = [], []
    for seed in range(3):
        cfg = config_for_mode("st", seed=seed, total_iters=1500)
        accs_st.append(train(task, cfg).final["test_acc"])
        accs_ideal.append(train_ideally_adapted(task, cfg, train_oracle(task, cfg))
                          .final["test_acc"])
    assert abs(np.mean(accs_st) - np.mean(accs_ideal)) <= 0.02


def test_unlabeled_entropy_contribution():
    model = init_model(3, 4, (4,), 4, make_rng(0))
    model.weights[-1][:] = 0
    model.biases[-1][:] = 0
    grads, val = unlabeled_loss_entropy(model, np.ones((6, 3)), 0.1)
    assert val == pytest.approx(0.1 * np.log(4), abs=1e-12)
    g0, v0 = unlabeled_loss_entropy(model, np.ones((6, 3)), 0.0)
    assert v0 == 0.0 and all(not g.any() for g in g0)
    with pytest.raises(ValueError):
        unlabeled_loss_entropy(model, np.ones((6, 3)), -1.0)


def test_unlabeled_entropy_gradient():
    model = init_model(3, 3, (4,), 4, make_rng(1))
    x = np.random.default_rng(1).normal(size=(5, 3))
    lam = 0.1
    grads, _ = unlabeled_loss_entropy(model, x, lam)
    num = finite_difference(
        lambda: lam * mlp_loss_reference(model.weights, model.biases, x, None, "entropy"),
        model.params())
    assert max(float(rel_err(g, n).max()) for g, n in zip(grads, num)) < 1e-4
    g_plain, _, _ = backward_entropy(model, x)
    assert all(np.allclose(lam * a, b, rtol=0, atol=1e-15) for a, b in zip(g_plain, grads))


def test_run_record_invariants(small_task):
    rec = train(small_task, config_for_mode("st", seed=0, total_iters=230, eval_every=100))
    assert [r["step"] for r in rec.metrics] == [100, 200, 230]
    assert len(rec.kl) == 230 and rec.wall_clock > 0
    with pytest.raises(ValueError):
        rec._append({"step": 230})
    with pytest.raises(ValueError):
        RunRecord(rec.config)._append({"step": 231})


def test_refresh_events_logged(small_task):
    rec = train(small_task, config_for_mode("sla", seed=0, warmup=100, update_interval=100,
                                            eval_ppc_as_classifier=True, **SHORT))
    assert [ev["step"] for ev in rec.refresh_events] == [101, 201, 301]
    K = small_task.n_classes
    for ev in rec.refresh_events:
        assert sum(ev["counts"]) == len(small_task.unlabeled_x) and len(ev["counts"]) == K
        assert 0 <= ev["ppc_test_acc"] <= 1
    assert rec.refresh_events[0]["displacement"] == 0.0
    assert rec.ppc.built_at_step == 301


def test_non_finite_loss_aborts(small_task):
    bad = small_task.with_source(np.full_like(small_task.source_x, np.nan), small_task.source_y)
    with pytest.raises(TrainingError, match="at step 1"):
        train(bad, config_for_mode("st", seed=0, total_iters=5))


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        config_for_mode("sla", warmup=5000, total_iters=5000)
    with pytest.raises(ValueError):
        config_for_mode("nope")
    with pytest.raises(ValueError):
        TrainConfig(unlabeled_loss="mme")
    with pytest.raises(ValueError):
        TrainConfig(entropy_weight=-0.1)
    for mode in MODES:
        cfg = config_for_mode(mode, seed=3, alpha=0.5)
        back = TrainConfig.from_dict(cfg.to_dict())
        assert back == cfg and back.config_hash() == cfg.config_hash()
    assert config_for_mode("sla").sla.correction_mode is CorrectionMode.PPC
    assert config_for_mode("self-pred").sla.correction_mode is CorrectionMode.SELF_PREDICTION
    assert config_for_mode("st").config_hash() != config_for_mode("ent").config_hash()
