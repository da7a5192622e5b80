import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from globalmem import diffcore as dc

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def _reference_softmax(row):
    # Plain-Python exp with compensated summation, independent of numpy.
    m = max(row)
    ex = [math.exp(x - m) for x in row]
    s = math.fsum(ex)
    return [e / s for e in ex]


# --- softmax ----------------------------------------------------------------


def test_softmax_symmetric_pair():
    np.testing.assert_allclose(dc.softmax([0.0, 0.0]), [0.5, 0.5], atol=1e-15)


def test_softmax_one_two_three():
    np.testing.assert_allclose(dc.softmax([1, 2, 3]), [0.09003, 0.24473, 0.66524], atol=1e-5)
    np.testing.assert_allclose(dc.softmax([1, 2, 3]), _reference_softmax([1, 2, 3]), atol=1e-15)


def test_softmax_large_inputs_do_not_overflow():
    np.testing.assert_array_equal(dc.softmax([1000.0, 1000.0]), [0.5, 0.5])


@pytest.mark.parametrize("bad", [[], [1.0, float("nan")], [float("inf"), 0.0]])
def test_softmax_rejects_bad_rows(bad):
    with pytest.raises(dc.ContractError):
        dc.softmax(bad)


@given(st.lists(finite, min_size=1, max_size=20), st.floats(-1e3, 1e3))
def test_softmax_sums_to_one_and_ignores_shift(row, c):
    p = dc.softmax(row)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all((p > 0) & (p <= 1))
    np.testing.assert_allclose(dc.softmax(np.asarray(row) + c), p, atol=1e-12)


# --- cross entropy ---------------------------------------------------------------


@pytest.mark.parametrize("target", range(4))
def test_cross_entropy_uniform_is_log_classes(target):
    assert dc.cross_entropy([0.3] * 4, target) == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_single_class_is_zero():
    assert dc.cross_entropy([7.0], 0) == 0.0


def test_cross_entropy_two_logits():
    expected = -math.log(math.exp(2) / (math.exp(2) + 1))
    assert dc.cross_entropy([2.0, 0.0], 0) == pytest.approx(0.12693, abs=1e-5)
    assert dc.cross_entropy([2.0, 0.0], 0) == pytest.approx(expected, abs=1e-14)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(dc.ContractError):
        dc.cross_entropy([1.0, 2.0], 2)


@given(st.lists(finite, min_size=1, max_size=12), st.data())
def test_cross_entropy_non_negative(row, data):
    t = data.draw(st.integers(0, len(row) - 1))
    ce = dc.cross_entropy(row, t)
    assert ce >= 0.0
    assert ce == pytest.approx(-math.log(_reference_softmax(row)[t]), abs=1e-9)


# --- tensors and the tape ----------------------------------------------------------


def test_tensor_values_is_flat_row_major_view():
    t = dc.Tensor(np.arange(6.0).reshape(2, 3))
    assert t.shape == (2, 3)
    assert t.values.tolist() == [0, 1, 2, 3, 4, 5]
    assert t.values.size == math.prod(t.shape)


def test_ops_reject_non_finite_results():
    a = dc.Tensor(np.array([1e308]), requires_grad=True)
    with pytest.raises(dc.NumericError):
        dc.mul(a, dc.Tensor(np.array([1e10])))


def test_square_gradient_matches_analytic():
    w = dc.Tensor(np.array(3.0), requires_grad=True)
    err = dc.grad_check(lambda: dc.mul(w, w), [w], eps=1e-5)
    [g] = dc.tape_grads(lambda: dc.mul(w, w), [w])
    assert g == pytest.approx(6.0, abs=1e-12)
    assert err < 1e-8


def test_linear_softmax_ce_gradient_is_p_minus_onehot():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 5))
    W = dc.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    target = np.array([2])

    def loss():
        return dc.nll(dc.matmul(dc.Tensor(x), W), target)

    [g] = dc.tape_grads(loss, [W])
    p = dc.softmax((x @ W.data)[0])
    onehot = np.eye(4)[2]
    np.testing.assert_allclose(g, np.outer(x[0], p - onehot), atol=1e-12)
    assert dc.grad_check(loss, [W]) < 1e-6


def test_grad_check_detects_nondeterminism():
    w = dc.Tensor(np.array([1.0]), requires_grad=True)
    rng = np.random.default_rng(0)
    with pytest.raises(dc.ContractError):
        dc.grad_check(lambda: dc.summed(dc.scale(w, float(rng.normal()))), [w])


def test_grad_check_needs_positive_eps():
    w = dc.Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(dc.ContractError):
        dc.grad_check(lambda: dc.mul(w, w), [w], eps=0.0)


def test_replay_reproduces_outputs_bit_exactly():
    rng = np.random.default_rng(1)
    a = dc.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = dc.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    g = dc.Tensor(np.ones(2), requires_grad=True)
    z = dc.Tensor(np.zeros(2), requires_grad=True)
    with dc.recording() as tape:
        out = dc.layer_norm(dc.gelu(dc.matmul(a, b)), g, z)
        dc.mean(dc.log_softmax(out))
    assert len(tape) >= 4
    outputs = {id(n.output): i for i, n in enumerate(tape.nodes)}
    for i, node in enumerate(tape.nodes):
        assert all(outputs.get(id(t), -1) < i for t in node.inputs)
    assert tape.replay()


def test_no_tape_without_grad_inputs():
    a = dc.Tensor(np.ones(3))
    with dc.recording() as tape:
        dc.add(a, a)
    assert len(tape) == 0


def test_matmul_associativity():
    rng = np.random.default_rng(2)
    A, B, C = (dc.Tensor(rng.normal(size=(4, 4))) for _ in range(3))
    left = dc.matmul(dc.matmul(A, B), C).data
    right = dc.matmul(A, dc.matmul(B, C)).data
    assert np.max(np.abs(left - right)) < 1e-10


# --- gradient properties over random small shapes -----------------------------------

small = arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=st.floats(-2, 2))


def _composites(x, w, gamma, beta):
    h = dc.layer_norm(dc.matmul(x, w), gamma, beta)
    att = dc.softmax_rows(dc.matmul(h, dc.transpose(h, (1, 0))))
    mix = dc.matmul(att, dc.gelu(h))
    return dc.add(dc.mean(dc.mul(mix, mix)), dc.mean(dc.relu(dc.sub(h, dc.scale(mix, 0.5)))))


# Layer norm over 2 features is degenerate (normalized values are +-1, true
# gradients ~1e-8, below central-difference resolution); widths start at 4.
@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(2, 4), st.integers(2, 3), st.integers(0, 10_000))
def test_composite_gradients_match_central_differences(n, d_in, d_out_half, seed):
    rng = np.random.default_rng(seed)
    d_out = 2 * d_out_half
    x = dc.Tensor(rng.normal(size=(n, d_in)), requires_grad=True)
    w = dc.Tensor(rng.normal(size=(d_in, d_out)), requires_grad=True)
    gamma = dc.Tensor(1 + 0.1 * rng.normal(size=d_out), requires_grad=True)
    beta = dc.Tensor(0.1 * rng.normal(size=d_out), requires_grad=True)
    err = dc.grad_check(lambda: _composites(x, w, gamma, beta), [x, w, gamma, beta])
    assert err < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(2, 6), st.integers(0, 10_000))
def test_nll_and_embedding_gradients(n, vocab, seed):
    rng = np.random.default_rng(seed)
    table = dc.Tensor(rng.normal(size=(vocab, 3)), requires_grad=True)
    proj = dc.Tensor(rng.normal(size=(3, vocab)), requires_grad=True)
    ids = rng.integers(vocab, size=n)
    targets = rng.integers(vocab, size=n)

    def loss():
        return dc.nll(dc.matmul(dc.embedding(table, ids), proj), targets)

    assert dc.grad_check(loss, [table, proj]) < 1e-4


@settings(max_examples=20, deadline=None)
@given(small)
def test_masked_softmax_rows_are_distributions(x):
    mask = np.tril(np.ones((x.shape[0], x.shape[1]), dtype=bool)) | (np.arange(x.shape[1]) == 0)
    p = dc.softmax_rows(dc.Tensor(x), mask).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(p[~mask] == 0)
