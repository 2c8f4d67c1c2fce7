import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from slalab.data import (BatchPlan, DomainSpec, GenerationError, TaskFileError, export_task,
                         generate_task, import_task, next_batch, no_shift_spec,
                         source_only_error, task_from_dict, task_to_dict)
from slalab.trainer import accuracy, config_for_mode, train, train_oracle

from conftest import SMALL_SPEC


def test_generation_is_deterministic():
    a = generate_task(SMALL_SPEC, 3, 5)
    b = generate_task(SMALL_SPEC, 3, 5)
    assert a.equals(b)
    assert not a.equals(generate_task(SMALL_SPEC, 3, 6))


def test_counts_and_sizes(default_task):
    t = default_task
    assert len(t.labeled_y) == 15
    assert Counter(t.labeled_y.tolist()) == {k: 3 for k in range(5)}
    assert len(t.source_y) >= 20 * len(t.labeled_y)
    assert len(t.unlabeled_x) >= 20 * len(t.labeled_y)
    assert len(t.test_y) == 500 and len(t.val_y) == 15
    one = generate_task(DomainSpec(), 1, 0)
    assert Counter(one.labeled_y.tolist()) == {k: 1 for k in range(5)}


def test_two_dim_spec_counts():
    spec = DomainSpec(dim=2)
    t = generate_task(spec, 3, 0)
    assert t.labeled_x.shape == (15, 2)
    assert Counter(t.labeled_y.tolist()) == {k: 3 for k in range(5)}


def test_misalignment_precondition_on_default_spec():
    for seed in range(5):
        assert source_only_error(generate_task(DomainSpec(), 3, seed)) >= 0.2


def test_generation_error_when_shift_too_small():
    spec = no_shift_spec(dim=8, min_source_error=0.2, max_retries=3,
                         n_source_per_class=30, n_unlabeled_per_class=30, n_test_per_class=30)
    with pytest.raises(GenerationError, match="increase the rotation"):
        generate_task(spec, 3, 0)


def test_no_shift_task_close_to_supervised():
    spec = no_shift_spec(dim=8)
    t = generate_task(spec, 3, 0)
    assert np.allclose(t.source_x.mean(axis=0), t.unlabeled_x.mean(axis=0), atol=0.1)
    cfg = config_for_mode("st", total_iters=1500, seed=0)
    st_acc = train(t, cfg).final["test_acc"]
    sup_acc = accuracy(train_oracle(t, cfg), t.test_x, t.test_y)
    assert abs(st_acc - sup_acc) <= 0.03


def test_bad_n_shot():
    with pytest.raises(ValueError):
        generate_task(SMALL_SPEC, 2, 0)


def test_spec_validation():
    with pytest.raises(ValueError):
        DomainSpec(n_classes=1)
    with pytest.raises(ValueError):
        DomainSpec(cov_scale=0.0)
    with pytest.raises(ValueError):
        DomainSpec(translation=(1.0, 0.0))
    assert DomainSpec.from_dict(DomainSpec().to_dict()) == DomainSpec()


def test_arrays_are_read_only(small_task):
    with pytest.raises(ValueError):
        small_task.source_x[0, 0] = 1.0


def test_audit_accessor_logs_callers():
    t = generate_task(SMALL_SPEC, 3, 1)
    assert t.audit_log == []
    t.audit_labels("me")
    assert t.audit_log == ["me"]


def test_full_unlabeled_batch_covers_u_once(small_task):
    n = len(small_task.unlabeled_x)
    plan = BatchPlan.for_task(small_task, b_u=n, seed=3)
    b = next_batch(small_task, plan)
    assert sorted(b.unlabeled_ids.tolist()) == list(range(n))


def test_same_seed_plans_match(small_task):
    p1 = BatchPlan.for_task(small_task, seed=4)
    p2 = BatchPlan.for_task(small_task, seed=4)
    for _ in range(20):
        a, b = next_batch(small_task, p1), next_batch(small_task, p2)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_source_cycle_is_a_permutation(small_task):
    n = len(small_task.source_y)
    plan = BatchPlan.for_task(small_task, b_s=n // 4, seed=5)
    seen = np.concatenate([small_task.source_x[0:0]] + [
        next_batch(small_task, plan).source_x for _ in range(4)])
    assert sorted(map(tuple, seen.tolist())) == sorted(map(tuple, small_task.source_x.tolist()))
    assert plan.epochs[0] == 0
    next_batch(small_task, plan)
    assert plan.epochs[0] == 1


def test_batch_sizes_exact(small_task):
    plan = BatchPlan.for_task(small_task, b_s=7, b_l=11, b_u=13, seed=0)
    for _ in range(30):
        b = next_batch(small_task, plan)
        assert (len(b.source_y), len(b.labeled_y), len(b.unlabeled_ids)) == (7, 11, 13)


def test_task_file_round_trip(tmp_path, small_task):
    export_task(small_task, tmp_path / "t.json")
    back = import_task(tmp_path / "t.json")
    assert back.equals(small_task)
    assert np.array_equal(back.audit_labels("test"), small_task.audit_labels("test"))


def test_task_file_corruption(tmp_path, small_task):
    doc = task_to_dict(small_task)
    doc["body"]["source_x"][0][0] += 1e-9
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(TaskFileError, match="checksum"):
        import_task(tmp_path / "bad.json")


def test_task_file_version(small_task):
    doc = task_to_dict(small_task)
    doc["header"]["version"] = 2
    with pytest.raises(TaskFileError, match="version"):
        task_from_dict(doc)


def test_task_file_malformed(tmp_path):
    (tmp_path / "junk.json").write_text("{not json")
    with pytest.raises(TaskFileError):
        import_task(tmp_path / "junk.json")
    with pytest.raises(TaskFileError):
        task_from_dict({"hello": 1})


@pytest.mark.property
@given(st.integers(0, 2**32), st.sampled_from([1, 3]), st.integers(2, 6))
def test_labeled_split_is_balanced(seed, n_shot, K):
    spec = DomainSpec(n_classes=K, dim=3, n_source_per_class=5, n_unlabeled_per_class=5,
                      n_test_per_class=5, min_source_error=0.0)
    t = generate_task(spec, n_shot, seed)
    assert np.array_equal(np.bincount(t.labeled_y, minlength=K), np.full(K, n_shot))
