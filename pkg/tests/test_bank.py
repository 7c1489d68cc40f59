import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from minivlp.bank import Center, FeatureQueue, MomentumBank, ema_update, make_teacher
from minivlp.model import VLModel

from conftest import tiny_model_cfg


def unit_rows(n, d, seed=0):
    g = torch.Generator().manual_seed(seed)
    return F.normalize(torch.randn(n, d, generator=g), dim=1)


# --------------------------------------------------------------------------
# EMA teacher
# --------------------------------------------------------------------------


def make_student(seed=0):
    torch.manual_seed(seed)
    return VLModel(tiny_model_cfg())


def test_ema_momentum_one_keeps_teacher():
    student = make_student(0)
    teacher = make_teacher(make_student(1))
    before = {k: v.clone() for k, v in teacher.state_dict().items()}
    ema_update(student, teacher, 1.0)
    for k, v in teacher.state_dict().items():
        assert torch.equal(v, before[k])


def test_ema_momentum_zero_copies_student():
    student = make_student(0)
    teacher = make_teacher(make_student(1))
    ema_update(student, teacher, 0.0)
    for (_, sp), (_, tp) in zip(student.named_parameters(), teacher.named_parameters()):
        assert torch.equal(sp, tp)


def test_ema_published_momentum_arithmetic():
    # teacher 0, student 1, m=0.995 -> teacher becomes 0.005
    student = torch.nn.Linear(3, 3)
    teacher = torch.nn.Linear(3, 3)
    with torch.no_grad():
        student.weight.fill_(1.0)
        teacher.weight.fill_(0.0)
    ema_update(student, teacher, 0.995)
    assert torch.allclose(teacher.weight, torch.full((3, 3), 0.005))


def test_ema_closed_form_over_many_steps():
    # after s steps with constant student p: teacher = p + m^s (t0 - p)
    torch.manual_seed(3)
    student = torch.nn.Linear(4, 4).double()
    teacher = torch.nn.Linear(4, 4).double()
    t0 = {k: v.clone() for k, v in teacher.named_parameters()}
    m = 0.995
    s = 50
    for _ in range(s):
        ema_update(student, teacher, m)
    for (name, p), (_, t) in zip(student.named_parameters(), teacher.named_parameters()):
        expected = p.detach() + m**s * (t0[name].detach() - p.detach())
        assert torch.allclose(t, expected, atol=1e-12, rtol=0)


def test_ema_shape_mismatch_rejected():
    a = torch.nn.Linear(3, 3)
    b = torch.nn.Linear(4, 4)
    with pytest.raises(ValueError):
        ema_update(a, b, 0.9)


def test_teacher_never_requires_grad():
    bank = MomentumBank(make_student(0))
    assert all(not p.requires_grad for p in bank.teacher.parameters())


# --------------------------------------------------------------------------
# weighted feature queue
# --------------------------------------------------------------------------


def test_enqueue_into_empty_queue():
    q = FeatureQueue(capacity=16, dim=8, decay=0.99)
    q.enqueue(unit_rows(4, 8))
    assert q.fill_count == 4
    feats, weights = q.snapshot()
    assert feats.shape == (4, 8)
    assert torch.equal(weights, torch.ones(4))


def test_weight_after_three_iterations_matches_repeated_multiply():
    q = FeatureQueue(capacity=16, dim=8, decay=0.99)
    q.enqueue(unit_rows(1, 8, seed=1))
    for it in range(3):
        q.enqueue(unit_rows(1, 8, seed=2 + it))
    _, weights = q.snapshot()
    oracle = 1.0
    for _ in range(3):
        oracle *= 0.99
    assert abs(weights[0].item() - oracle) < 1e-12
    assert abs(weights[0].item() - 0.970299) < 1e-6


def test_full_queue_evicts_fifo():
    q = FeatureQueue(capacity=4, dim=4, decay=0.99)
    batches = [unit_rows(2, 4, seed=s) for s in range(4)]
    q.enqueue(batches[0])
    q.enqueue(batches[1])
    assert q.fill_count == 4
    q.enqueue(batches[2])  # evicts batch 0
    assert q.fill_count == 4
    feats, _ = q.snapshot()
    for row in batches[0]:
        assert not any(torch.allclose(row, f) for f in feats)
    for row in batches[2]:
        assert any(torch.equal(row, f) for f in feats)


def test_non_normalized_input_normalized_with_warning(caplog):
    q = FeatureQueue(capacity=4, dim=4, decay=0.99)
    with caplog.at_level("WARNING"):
        q.enqueue(torch.full((1, 4), 2.0))
    assert "normalizing" in caplog.text
    feats, _ = q.snapshot()
    assert torch.allclose(feats.norm(dim=1), torch.ones(1), atol=1e-6)


def test_enqueue_more_than_capacity_rejected():
    q = FeatureQueue(capacity=2, dim=4, decay=0.99)
    with pytest.raises(ValueError):
        q.enqueue(unit_rows(3, 4))


def test_exhaustive_simulation_weights_and_fifo():
    """Oracle simulation: dict of (insert_iter -> ids), weights 0.99^(t-t0)."""
    capacity, dim, iters = 8, 4, 50
    q = FeatureQueue(capacity=capacity, dim=dim, decay=0.99)
    rng = np.random.default_rng(0)
    live: list[tuple[int, torch.Tensor]] = []  # (insert_iter, feature), FIFO order
    for t in range(1, iters + 1):
        n = int(rng.integers(1, 4))
        feats = unit_rows(n, dim, seed=1000 + t)
        q.enqueue(feats)
        for i in range(n):
            live.append((t, feats[i]))
        live = live[-capacity:] if len(live) > capacity else live
        feats_q, weights_q = q.snapshot()
        assert feats_q.shape[0] == len(live)
        # match each oracle item to the queue and check its exact weight
        for t0, vec in live:
            hits = [j for j in range(feats_q.shape[0]) if torch.equal(feats_q[j], vec)]
            assert len(hits) == 1
            assert weights_q[hits[0]].item() == 0.99 ** (t - t0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(min_value=1, max_value=5), min_size=1, max_size=12))
def test_queue_weight_age_consistency_property(batch_sizes):
    q = FeatureQueue(capacity=8, dim=4, decay=0.99)
    for s, n in enumerate(batch_sizes):
        q.enqueue(unit_rows(min(n, 8), 4, seed=s))
        occupied = q.occupied_mask()
        w = q.weights[occupied]
        ages = q.ages[occupied]
        assert torch.equal(w, 0.99 ** ages.to(w.dtype))
        assert ((w > 0) & (w <= 1)).all()
        assert q.fill_count <= q.capacity


# --------------------------------------------------------------------------
# distillation center
# --------------------------------------------------------------------------


def test_center_momentum_one_keeps_mu():
    c = Center(4)
    c.update(torch.randn(3, 4), momentum=1.0)
    assert torch.equal(c.mu, torch.zeros(4))


def test_center_first_update_arithmetic():
    c = Center(4)
    batch = torch.randn(5, 4)
    c.update(batch, momentum=0.9)
    assert torch.allclose(c.mu, 0.1 * batch.mean(0))


def test_center_converges_geometrically_to_constant():
    # closed form: mu_s = (1 - m^s) * c for constant teacher output c
    c = Center(4, dtype=torch.float64)
    const = torch.tensor([0.5, -1.0, 2.0, 0.25], dtype=torch.float64)
    batch = const.expand(6, 4)
    m = 0.9
    for s in range(1, 40):
        c.update(batch, momentum=m)
        expected = (1 - m**s) * const
        assert torch.allclose(c.mu, expected, atol=1e-12)


def test_center_rejects_empty_batch():
    with pytest.raises(ValueError):
        Center(4).update(torch.empty(0, 4), momentum=0.9)
