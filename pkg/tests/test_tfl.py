"""Feedback loop, fixed-point iteration and the contraction bound."""
import numpy as np
import pytest

from affectfuse import tensor as tn
from affectfuse.layers import LinearParams
from affectfuse.tensor import ContractError, Tensor
from affectfuse.tfl import (classify_direct, contraction_bound, feedback_map, init_tfl, iterate_fixed_point,
                            run_sequence, tfl_step, uniform)

D, K = 8, 4


def params(seed=0, scale=1.0, hidden=6):
    return init_tfl(np.random.default_rng(seed), D, K, hidden, scale)


def zero_y_block(p):
    p.feedback.weight.data[:, D:] = 0.0
    return p


def test_zero_classifier_gives_uniform(rng):
    p = params()
    for layer in p.classifier:
        layer.weight.data[:] = 0.0
        layer.bias.data[:] = 0.0
    y, _ = tfl_step(Tensor(rng.normal(size=D)), uniform(K), p)
    np.testing.assert_allclose(y.data, 0.25, atol=1e-15)


def test_zero_y_block_ignores_previous(rng):
    p = zero_y_block(params())
    z = Tensor(rng.normal(size=D))
    a, _ = tfl_step(z, [1.0, 0, 0, 0], p)
    b, _ = tfl_step(z, [0, 0, 0.5, 0.5], p)
    np.testing.assert_array_equal(a.data, b.data)


def test_step_matches_composition_oracle(rng):
    p = params()
    z, y = rng.normal(size=D), rng.dirichlet(np.ones(K))
    out, zt = tfl_step(Tensor(z), y, p)
    u = p.feedback.weight.data @ np.concatenate([z, y]) + p.feedback.bias.data
    np.testing.assert_allclose(zt.data, u, atol=1e-12)
    h = np.maximum(p.classifier[0].weight.data @ u + p.classifier[0].bias.data, 0)
    logits = p.classifier[1].weight.data @ h + p.classifier[1].bias.data
    e = np.exp(logits - logits.max())
    np.testing.assert_allclose(out.data, e / e.sum(), atol=1e-12)
    np.testing.assert_allclose(feedback_map(z, y, p), out.data, atol=1e-12)


def test_step_rejects_off_simplex(rng):
    with pytest.raises(ContractError):
        tfl_step(Tensor(rng.normal(size=D)), [0.5, 0.5, 0.5, 0.0], params())


def test_sequence_length_one_is_single_step(rng):
    p = params()
    Z = rng.normal(size=(1, D))
    seq = run_sequence(Tensor(Z), p).data
    step, _ = tfl_step(Tensor(Z[0]), uniform(K), p)
    np.testing.assert_array_equal(seq[0], step.data)


def test_sequence_independent_of_y0_without_feedback(rng):
    p = zero_y_block(params())
    Z = Tensor(rng.normal(size=(5, D)))
    a = run_sequence(Z, p, y0=np.array([1.0, 0, 0, 0])).data
    b = run_sequence(Z, p).data
    np.testing.assert_array_equal(a, b)


def test_sequence_batched_on_simplex(rng):
    Y = run_sequence(Tensor(rng.normal(size=(3, 7, D)) * 5), params()).data
    assert Y.shape == (3, 7, K)
    assert np.all(Y >= 0) and np.max(np.abs(Y.sum(-1) - 1)) < 1e-9


def test_constant_input_steps_shrink(rng):
    p = params(scale=0.3)
    assert contraction_bound(p) < 1
    z = rng.normal(size=D)
    Y = run_sequence(Tensor(np.tile(z, (10, 1))), p).data
    assert np.linalg.norm(Y[-1] - Y[-2]) <= np.linalg.norm(Y[1] - Y[0])


def test_feedback_grad_reaches_earlier_steps(rng):
    p = params()
    Z = Tensor(rng.normal(size=(3, D)), requires_grad=True)
    for fg, expect_nonzero in ((False, False), (True, True)):
        Z.grad = None
        with tn.Tape() as tape:
            Y = run_sequence(Z, p, feedback_grad=fg)
            loss = tn.sum_all(tn.take(Y, (2, 0)))
        tape.backward(loss, [Z])
        assert (np.abs(Z.grad[0]).max() > 0) == expect_nonzero


def test_classify_direct_matches_zero_feedback(rng):
    p = params()
    Z = rng.normal(size=(4, D))
    out = classify_direct(Tensor(Z), p).data
    assert out.shape == (4, K)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)


def test_fixed_point_y_independent_converges_immediately(rng):
    p = zero_y_block(params())
    z = rng.normal(size=D)
    y_star, traj, ok = iterate_fixed_point(z, uniform(K), p)
    assert ok and len(traj) == 3
    np.testing.assert_array_equal(y_star, feedback_map(z, uniform(K), p))


def test_fixed_point_contractive_regime(rng):
    p = params(scale=0.05)
    bound = contraction_bound(p)
    assert bound < 1
    z = rng.normal(size=D)
    ys = []
    for y0 in (uniform(K), np.array([1.0, 0, 0, 0])):
        y_star, traj, ok = iterate_fixed_point(z, y0, p, max_iter=500, tol=1e-9)
        assert ok
        y_next = feedback_map(z, y_star, p)
        assert np.sum(y_star * np.log(y_star / y_next)) < 1e-8
        ys.append(y_star)
        steps = [np.linalg.norm(b - a) for a, b in zip(traj, traj[1:])]
        for prev, cur in zip(steps, steps[1:]):
            if prev > 1e-14:
                assert cur / prev <= bound + 1e-6
    assert np.max(np.abs(ys[0] - ys[1])) < 1e-8


def test_fixed_point_rejects_bad_tol():
    with pytest.raises(ContractError):
        iterate_fixed_point(np.zeros(D), uniform(K), params(), tol=0.0)


def test_contraction_bound_zero():
    p = params()
    p.feedback.weight.data[:] = 0.0
    assert contraction_bound(p) == 0.0


def test_contraction_bound_homogeneous():
    p = params()
    base = contraction_bound(p)
    c = 1.7
    p.feedback.weight.data *= c
    for layer in p.classifier:
        layer.weight.data *= c
    assert contraction_bound(p) == pytest.approx(base * c ** 3, rel=1e-6)


def test_contraction_bound_diagonal_closed_form():
    fb = np.zeros((D, D + K))
    fb[np.arange(K), D + np.arange(K)] = [0.5, -2.0, 1.0, 0.25]
    W1 = np.diag([3.0, 1.0, -0.5, 2.0, 1.0, 1.0, 1.0, 1.0])
    W2 = np.zeros((K, D))
    W2[np.arange(K), np.arange(K)] = [0.1, 0.4, -0.3, 0.2]
    layers = [LinearParams(Tensor(W1), Tensor(np.zeros(D))), LinearParams(Tensor(W2), Tensor(np.zeros(K)))]
    from affectfuse.tfl import TflParams
    p = TflParams(LinearParams(Tensor(fb), Tensor(np.zeros(D))), layers)
    assert contraction_bound(p) == pytest.approx(2.0 * 3.0 * 0.4 * 0.5, rel=1e-6)
