"""Contrastive loss tests against the independent scalar-loop oracles in
``oracles.py`` (pure-Python loops sharing no code with the tensor side)."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ultraseg.errors import ValidationError
from ultraseg.losses import (
    QueueState,
    info_nce,
    momentum_update,
    neg_cosine,
    nt_xent,
    queue_push,
    simsiam_loss,
)

from oracles import oracle_info_nce, oracle_nt_xent


def _unit_rows(rng, b, d):
    rows = rng.normal(size=(b, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# info_nce
# ---------------------------------------------------------------------------

def test_info_nce_zero_when_query_equals_key_and_queue_empty():
    q = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
    queue = QueueState.create(8, 3, dtype=torch.float64)
    assert info_nce(q, q.clone(), queue, tau=1.0).item() == pytest.approx(0.0, abs=1e-12)


def test_info_nce_two_orthogonal_negatives():
    q = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
    queue = QueueState.create(4, 3, dtype=torch.float64)
    queue = queue_push(queue, torch.tensor([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], dtype=torch.float64))
    expected = -math.log(math.e / (math.e + 2.0))
    assert info_nce(q, q.clone(), queue, tau=1.0).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.551445, abs=5e-7)


def test_info_nce_matches_oracle_on_random_instances():
    rng = np.random.default_rng(11)
    for _ in range(300):
        b = int(rng.integers(1, 9))
        d = int(rng.integers(2, 17))
        filled = int(rng.integers(0, 6))
        tau = float(rng.uniform(0.05, 2.0))
        q = _unit_rows(rng, b, d)
        k = _unit_rows(rng, b, d)
        negatives = _unit_rows(rng, max(filled, 1), d)[:filled]
        queue = QueueState.create(8, d, dtype=torch.float64)
        if filled:
            queue = queue_push(queue, torch.from_numpy(negatives))
        got = info_nce(torch.from_numpy(q), torch.from_numpy(k), queue, tau).item()
        want = oracle_info_nce(q.tolist(), k.tolist(), negatives.tolist(), tau)
        assert got == pytest.approx(want, abs=1e-9)


def test_info_nce_nonnegative_and_monotone_in_positive_similarity():
    d = 8
    rng = np.random.default_rng(3)
    negatives = torch.from_numpy(_unit_rows(rng, 4, d))
    queue = queue_push(QueueState.create(4, d, dtype=torch.float64), negatives)
    previous = None
    for angle in np.linspace(0.0, math.pi / 2, 12):
        q = torch.zeros(1, d, dtype=torch.float64)
        q[0, 0] = 1.0
        k = torch.zeros(1, d, dtype=torch.float64)
        k[0, 0] = math.cos(angle)
        k[0, 1] = math.sin(angle)
        loss = info_nce(q, k, queue, tau=0.2).item()
        assert loss >= 0.0
        if previous is not None:
            assert loss >= previous  # lower q.k+ means higher loss
        previous = loss


def test_info_nce_validation():
    q = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    queue = QueueState.create(2, 2, dtype=torch.float64)
    with pytest.raises(ValidationError):
        info_nce(q, q, queue, tau=0.0)
    with pytest.raises(ValidationError):
        info_nce(2 * q, 2 * q, queue, tau=1.0)


# ---------------------------------------------------------------------------
# nt_xent
# ---------------------------------------------------------------------------

def test_nt_xent_single_pair_is_zero():
    z = torch.tensor([[0.3, 0.4], [5.0, -1.0]], dtype=torch.float64)
    assert nt_xent(z, tau=0.7).item() == pytest.approx(0.0, abs=1e-12)


def test_nt_xent_hand_fixed_two_pairs():
    z = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 1.0]], dtype=torch.float64)
    got = nt_xent(z, tau=0.5).item()
    want = oracle_nt_xent(z.tolist(), 0.5)
    assert got == pytest.approx(want, abs=1e-9)


def test_nt_xent_matches_oracle_on_random_instances():
    rng = np.random.default_rng(23)
    for _ in range(300):
        n = int(rng.integers(1, 5))
        d = int(rng.integers(2, 17))
        tau = float(rng.uniform(0.05, 2.0))
        rows = rng.normal(size=(2 * n, d)) * rng.uniform(0.2, 5.0)
        got = nt_xent(torch.from_numpy(rows), tau).item()
        want = oracle_nt_xent(rows.tolist(), tau)
        assert got == pytest.approx(want, abs=1e-9)


def test_nt_xent_permutation_invariant():
    rng = np.random.default_rng(5)
    rows = rng.normal(size=(6, 4))
    base = nt_xent(torch.from_numpy(rows), tau=0.5).item()
    swap = np.concatenate([rows[3:], rows[:3]])  # swap the two view blocks
    assert nt_xent(torch.from_numpy(swap), tau=0.5).item() == pytest.approx(base, abs=1e-12)


def test_nt_xent_validation():
    with pytest.raises(ValidationError):
        nt_xent(torch.ones(4, 3, dtype=torch.float64), tau=-1.0)
    with pytest.raises(ValidationError):
        nt_xent(torch.ones(3, 3, dtype=torch.float64), tau=1.0)


# ---------------------------------------------------------------------------
# Momentum update
# ---------------------------------------------------------------------------

def test_momentum_fixed_points():
    theta_k = torch.tensor([0.5, -2.0])
    theta_q = torch.tensor([1.0, 3.0])
    assert torch.equal(momentum_update(theta_k, theta_q, 1.0), theta_k)
    assert torch.equal(momentum_update(theta_k, theta_q, 0.0), theta_q)


def test_momentum_scalar_value():
    out = momentum_update(torch.tensor(0.5, dtype=torch.float64), torch.tensor(1.0, dtype=torch.float64), 0.999)
    assert float(out) == pytest.approx(0.5005, abs=1e-12)


def test_momentum_mapping_and_errors():
    k = {"w": torch.zeros(2, dtype=torch.float64), "b": torch.ones(3, dtype=torch.float64)}
    q = {"w": torch.ones(2, dtype=torch.float64), "b": torch.zeros(3, dtype=torch.float64)}
    out = momentum_update(k, q, 0.9)
    assert torch.allclose(out["w"], torch.full((2,), 0.1, dtype=torch.float64))
    assert torch.allclose(out["b"], torch.full((3,), 0.9, dtype=torch.float64))
    with pytest.raises(ValidationError):
        momentum_update(k, {"w": q["w"]}, 0.9)
    with pytest.raises(ValidationError):
        momentum_update(torch.zeros(2), torch.zeros(3), 0.9)
    with pytest.raises(ValidationError):
        momentum_update(torch.zeros(2), torch.zeros(2), 1.5)


@settings(max_examples=50, deadline=None)
@given(
    m=st.floats(min_value=0.0, max_value=1.0),
    scale=st.floats(min_value=-3.0, max_value=3.0),
)
def test_momentum_output_between_inputs(m, scale):
    theta_k = torch.tensor([scale, -1.0, 0.25], dtype=torch.float64)
    theta_q = torch.tensor([0.0, 2.0, 0.25], dtype=torch.float64)
    out = momentum_update(theta_k, theta_q, m)
    low = torch.minimum(theta_k, theta_q)
    high = torch.maximum(theta_k, theta_q)
    assert bool(((out >= low - 1e-12) & (out <= high + 1e-12)).all())


def test_momentum_geometric_contraction():
    theta_q = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    theta_k = torch.tensor([4.0, 0.0, -1.5], dtype=torch.float64)
    initial = float(torch.norm(theta_k - theta_q))
    m = 0.9
    current = theta_k
    for t in range(1, 51):
        current = momentum_update(current, theta_q, m)
        assert float(torch.norm(current - theta_q)) == pytest.approx(m**t * initial, rel=1e-12)


# ---------------------------------------------------------------------------
# Queue
# ---------------------------------------------------------------------------

def _unit_batch(*rows):
    t = torch.tensor(rows, dtype=torch.float64)
    return torch.nn.functional.normalize(t, dim=1)


def test_queue_fifo_trace_by_hand():
    queue = QueueState.create(4, 2, dtype=torch.float64)
    a, b, c, d, e, f = (_unit_batch([1.0, i]) for i in range(6))
    queue = queue_push(queue, torch.cat([a, b]))
    queue = queue_push(queue, torch.cat([c, d]))
    queue = queue_push(queue, torch.cat([e, f]))
    held = queue.fifo_order()
    assert torch.equal(held, torch.cat([c, d, e, f]))  # a, b evicted first


def test_queue_push_empty_is_identity():
    queue = QueueState.create(4, 2, dtype=torch.float64)
    queue = queue_push(queue, _unit_batch([1.0, 0.0]))
    after = queue_push(queue, torch.zeros(0, 2, dtype=torch.float64))
    assert torch.equal(after.keys, queue.keys)
    assert after.write_cursor == queue.write_cursor and after.filled == queue.filled


def test_queue_exact_fill_wraps_cursor():
    queue = QueueState.create(4, 2, dtype=torch.float64)
    queue = queue_push(queue, _unit_batch([1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, -1.0]))
    assert queue.filled == 4
    assert queue.write_cursor == 0


def test_queue_rejects_oversized_batch_and_unnormalized_keys():
    queue = QueueState.create(2, 2, dtype=torch.float64)
    with pytest.raises(ValidationError):
        queue_push(queue, _unit_batch([1.0, 0.0], [0.0, 1.0], [1.0, 1.0]))
    with pytest.raises(ValidationError):
        queue_push(queue, torch.tensor([[2.0, 0.0]], dtype=torch.float64))


@settings(max_examples=60, deadline=None)
@given(
    capacity=st.integers(min_value=1, max_value=12),
    pushes=st.lists(st.integers(min_value=0, max_value=12), min_size=1, max_size=12),
    seed=st.integers(min_value=0, max_value=2**31 - 1),
)
def test_queue_matches_list_oracle(capacity, pushes, seed):
    rng = np.random.default_rng(seed)
    queue = QueueState.create(capacity, 3, dtype=torch.float64)
    oracle: list[tuple] = []
    total = 0
    for count in pushes:
        count = min(count, capacity)
        rows = rng.normal(size=(count, 3))
        rows = rows / np.maximum(np.linalg.norm(rows, axis=1, keepdims=True), 1e-12)
        queue = queue_push(queue, torch.from_numpy(rows))
        oracle.extend(map(tuple, rows.tolist()))
        oracle = oracle[-capacity:]  # oldest evicted first
        total += count
        assert queue.filled == min(total, capacity)
    assert [tuple(r) for r in queue.fifo_order().tolist()] == oracle


# ---------------------------------------------------------------------------
# Cosine losses
# ---------------------------------------------------------------------------

def test_neg_cosine_analytic_cases():
    p = torch.tensor([[3.0, 0.0]], dtype=torch.float64)
    z = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    orthogonal = torch.tensor([[0.0, 2.0]], dtype=torch.float64)
    assert neg_cosine(p, z).item() == pytest.approx(-1.0, abs=1e-12)
    assert neg_cosine(p, orthogonal).item() == pytest.approx(0.0, abs=1e-12)
    assert neg_cosine(p, -z).item() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValidationError):
        neg_cosine(torch.zeros(1, 2, dtype=torch.float64), z)


def test_simsiam_matched_and_orthogonal():
    p1 = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    z1 = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    assert simsiam_loss(z1, p1, p1, z1).item() == pytest.approx(-1.0, abs=1e-12)
    # every prediction orthogonal to its target
    a = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    b = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    assert simsiam_loss(a, a, b, b).item() == pytest.approx(0.0, abs=1e-12)


def test_simsiam_range():
    rng = np.random.default_rng(17)
    for _ in range(100):
        mats = [torch.from_numpy(rng.normal(size=(5, 6))) for _ in range(4)]
        value = simsiam_loss(*mats).item()
        assert -1.0 <= value <= 1.0


@settings(max_examples=50, deadline=None)
@given(scale=st.floats(min_value=0.01, max_value=100.0))
def test_cosine_losses_scale_invariant(scale):
    rng = np.random.default_rng(31)
    p = torch.from_numpy(rng.normal(size=(4, 5)))
    z = torch.from_numpy(rng.normal(size=(4, 5)))
    base = neg_cosine(p, z).item()
    assert neg_cosine(p * scale, z).item() == pytest.approx(base, rel=1e-9, abs=1e-12)
    assert neg_cosine(p, z * scale).item() == pytest.approx(base, rel=1e-9, abs=1e-12)
    sim_base = simsiam_loss(p, z, z, p).item()
    assert simsiam_loss(p * scale, z, z, p * scale).item() == pytest.approx(sim_base, rel=1e-9, abs=1e-12)


# ---------------------------------------------------------------------------
# Stop-gradient semantics
# ---------------------------------------------------------------------------

def test_simsiam_stop_gradient_blocks_target_branch():
    # Two independent parameters: one produces the predictions, one the targets.
    theta_p = torch.tensor([0.7, -0.2], dtype=torch.float64, requires_grad=True)
    theta_z = torch.tensor([0.3, 0.9], dtype=torch.float64, requires_grad=True)
    base = torch.tensor([[1.0, 2.0], [0.5, -1.0]], dtype=torch.float64)

    def forward(tp, tz):
        p1 = base * tp[0] + tp[1]
        p2 = base * tp[1] + tp[0]
        z1 = base * tz[0] + tz[1]
        z2 = base * tz[1] + tz[0]
        return simsiam_loss(p1, z1, p2, z2).value

    loss = forward(theta_p, theta_z)
    loss.backward()
    # Backprop never reaches the target producer (grad stays unset or zero) ...
    assert theta_z.grad is None or float(theta_z.grad.abs().max()) <= 1e-8
    # ... while the value itself does depend on it (the detach is load-bearing):
    with torch.no_grad():
        bumped = forward(theta_p, theta_z + torch.tensor([1e-3, 0.0], dtype=torch.float64))
        assert abs(float(bumped - loss)) > 1e-7
    # and the prediction branch carries real gradient, matching finite differences
    # of the loss with the targets held fixed.
    assert float(theta_p.grad.abs().max()) > 1e-3
    h = 1e-6
    with torch.no_grad():
        z1_fixed = base * theta_z[0] + theta_z[1]
        z2_fixed = base * theta_z[1] + theta_z[0]

    def predictor_loss(tp):
        p1 = base * tp[0] + tp[1]
        p2 = base * tp[1] + tp[0]
        return simsiam_loss(p1, z1_fixed, p2, z2_fixed).value

    for i in range(2):
        offset = torch.zeros(2, dtype=torch.float64)
        offset[i] = h
        with torch.no_grad():
            fd = (predictor_loss(theta_p + offset) - predictor_loss(theta_p - offset)) / (2 * h)
        assert float(fd) == pytest.approx(float(theta_p.grad[i]), rel=1e-5, abs=1e-9)
