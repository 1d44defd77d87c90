import numpy as np
import pytest

from ldva import tensorcore as tc
from ldva.tensorcore import (AdamState, NonFiniteError, ParamSet, ShapeError,
                             Tensor, adam_step, grad_check)


def test_sigmoid_of_zero_is_half():
    out = tc.sigmoid(Tensor(np.zeros((3, 2))))
    assert np.array_equal(out.data, np.full((3, 2), 0.5))


def test_relu_clamps_negatives():
    out = tc.relu(Tensor([-1.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 2.0])


def test_dense_layer_matches_hand_multiply():
    w = Tensor([[1.0, 2.0], [3.0, 4.0]])
    x = Tensor([[1.0, 1.0]])
    assert np.array_equal(tc.linear(x, w).data, [[3.0, 7.0]])


def test_shape_mismatch_names_offending_op():
    with pytest.raises(ShapeError, match="matmul"):
        tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        tc.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeError, match="conv2d"):
        tc.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((4, 3, 3, 3))))


def test_non_finite_result_rejected():
    big = Tensor(np.full((2,), 1e308))
    with np.errstate(over="ignore"):
        with pytest.raises(NonFiniteError, match="mul"):
            tc.mul(big, big)
    with pytest.raises(NonFiniteError):
        Tensor([np.nan, 1.0])


def test_backward_squared_norm_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    tc.sq_norm(x).backward()
    assert np.allclose(x.grad, [2.0, 4.0], atol=1e-12)


def test_backward_sigmoid_slope_at_zero():
    w = Tensor(np.zeros((1,)), requires_grad=True)
    tc.tsum(tc.sigmoid(w)).backward()
    assert abs(w.grad[0] - 0.25) < 1e-12


def test_backward_requires_scalar_output():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError, match="scalar"):
        tc.mul(x, x).backward()


def test_backward_linearity():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    a, b = 2.5, -1.25

    def grads_of(fn):
        x.grad = None
        fn().backward()
        return x.grad.copy()

    loss1 = lambda: tc.sq_norm(x)
    loss2 = lambda: tc.tsum(tc.sigmoid(x))
    combined = grads_of(lambda: a * loss1() + b * loss2())
    separate = a * grads_of(loss1) + b * grads_of(loss2)
    assert np.max(np.abs(combined - separate)) < 1e-10


def test_forward_and_gradients_deterministic():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(2, 3, 6, 6)))
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        y = tc.max_pool2d(tc.relu(tc.conv2d(x, w, padding=1)), 2)
        loss = tc.sq_norm(y)
        loss.backward()
        return loss.item(), w.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    assert np.array_equal(g1, g2)


def test_maximum_routes_ties_to_first_operand():
    a = Tensor([1.0, 3.0], requires_grad=True)
    b = Tensor([1.0, 5.0], requires_grad=True)
    tc.tsum(tc.maximum(a, b)).backward()
    assert np.array_equal(a.grad, [1.0, 0.0])
    assert np.array_equal(b.grad, [0.0, 1.0])


def test_cross_entropy_against_closed_form():
    logits = Tensor(np.log(np.array([[0.2, 0.5, 0.3]])), requires_grad=True)
    ce = tc.cross_entropy(logits, [1])
    assert abs(ce.data[0] + np.log(0.5)) < 1e-12


def test_softmax_rows_sum_to_one():
    out = tc.softmax(Tensor(np.random.default_rng(1).normal(size=(5, 7))), axis=1)
    assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-12)


def test_take_and_concat_roundtrip_gradient():
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    parts = [tc.take(x, [i], axis=0) for i in (2, 0, 1)]
    y = tc.concat(parts, axis=0)
    tc.tsum(tc.mul(y, y)).backward()
    assert np.allclose(x.grad, 2 * x.data)


# -- ParamSet / Adam -----------------------------------------------------------


def _param_set():
    params = ParamSet()
    params.add("w", Tensor(np.array([1.0, -2.0])), "backbone_E")
    params.add("g", Tensor(np.array([[0.5]])), "grouping_G")
    return params


def test_param_set_rejects_duplicates_and_bad_groups():
    params = _param_set()
    with pytest.raises(ValueError, match="duplicate"):
        params.add("w", Tensor([0.0]), "backbone_E")
    with pytest.raises(ValueError, match="group"):
        params.add("x", Tensor([0.0]), "nonsense")


def test_adam_zero_gradient_leaves_parameters_unchanged():
    params = _param_set()
    for _, t, _ in params.items():
        t.grad = np.zeros_like(t.data)
    before = params.snapshot()
    adam_step(params, AdamState(lr=0.1), tc.PARAM_GROUPS)
    for name in before:
        assert np.array_equal(params[name].data, before[name])


def test_adam_first_step_matches_hand_update():
    params = ParamSet()
    p = params.add("theta", Tensor(np.array([0.0])), "predictor_V")
    p.grad = np.array([1.0])
    adam_step(params, AdamState(lr=0.1), ["predictor_V"])
    # -lr * g / (sqrt(g^2) + eps) with bias correction
    assert abs(p.data[0] + 0.1) < 1e-8


def test_adam_group_filter_is_bit_exact():
    params = _param_set()
    for _, t, _ in params.items():
        t.grad = np.ones_like(t.data)
    before_w = params["w"].data.copy()
    adam_step(params, AdamState(lr=0.05), ["grouping_G"])
    assert params["w"].data.tobytes() == before_w.tobytes()
    assert not np.array_equal(params["g"].data, np.array([[0.5]]))


def test_adam_missing_gradient_rejected():
    params = _param_set()
    params["g"].grad = np.zeros((1, 1))
    with pytest.raises(ValueError, match="no gradient"):
        adam_step(params, AdamState(lr=0.1), ["backbone_E", "grouping_G"])


def test_adam_step_counter_increments_per_applied_step():
    params = _param_set()
    state = AdamState(lr=0.01)
    for step in range(1, 4):
        for _, t, _ in params.items():
            t.grad = np.ones_like(t.data)
        adam_step(params, state, tc.PARAM_GROUPS)
        assert state.t["w"] == step


# -- grad_check -------------------------------------------------------------------


def test_grad_check_quadratic_is_nearly_exact():
    params = ParamSet()
    theta = params.add("theta", Tensor(np.array([0.7, -1.3, 2.0])), "predictor_V")
    report = grad_check(lambda: tc.sq_norm(theta), params, h=1e-5, tol=1e-8)
    assert report.passed()
    assert report.max_rel_err <= 1e-8


def test_grad_check_flags_injected_fault():
    params = ParamSet()
    theta = params.add("theta", Tensor(np.array([0.3, 0.4])), "predictor_V")

    def poison(name, grad):
        grad[0] += 0.5
        return grad

    report = grad_check(lambda: tc.sq_norm(theta), params, grad_transform=poison)
    assert not report.passed()
    assert report.failures()[0].name == "theta"


def test_grad_check_zero_fills_untouched_parameters():
    params = ParamSet()
    used = params.add("used", Tensor(np.array([1.0])), "predictor_V")
    params.add("unused", Tensor(np.array([5.0])), "backbone_E")
    report = grad_check(lambda: tc.sq_norm(used), params)
    assert report.passed()
