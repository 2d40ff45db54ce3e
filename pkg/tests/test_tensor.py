import numpy as np
import pytest

from advcoreset import models, tensor

from conftest import finite_diff, rel_err, small_mlp


def straight_line_mlp(state, x):
    """Independent forward pass written without the tape machinery."""
    params = models._unflatten(state.spec, state.theta)
    cur = np.atleast_2d(x)
    for i, (_, w, b) in enumerate(params):
        cur = cur @ w + b
        if i < len(params) - 1:
            cur = np.where(cur > 0, cur, 0.0)
    return cur


def test_identity_linear_layer_forward():
    spec = models.ModelSpec(arch="mlp", input_dim=3, classes=3, hidden=())
    theta = np.concatenate([np.eye(3).ravel(), np.zeros(3)])
    st = models.ModelState(spec=spec, theta=theta)
    v = np.array([0.2, -1.5, 3.0])
    z, _ = models.forward(st, v)
    assert np.array_equal(z, v)


def test_zero_weight_network_zero_logits():
    st = small_mlp()
    st.theta[:] = 0.0
    z, _ = models.forward(st, np.array([0.4, 0.5, 0.6]))
    assert np.array_equal(z, np.zeros(3))


def test_forward_matches_straight_line_reimplementation(rng):
    st = small_mlp(seed=7)
    x = rng.uniform(0, 1, size=(6, 3))
    z, _ = models.forward(st, x)
    assert np.allclose(z, straight_line_mlp(st, x), atol=0, rtol=0)


def test_forward_deterministic():
    st = small_mlp(seed=3)
    x = np.array([0.1, 0.9, 0.5])
    z1, _ = models.forward(st, x)
    z2, _ = models.forward(st, x)
    assert np.array_equal(z1, z2)


def test_batched_forward_equals_stacked_singles(rng):
    st = small_mlp(seed=5)
    xs = rng.uniform(0, 1, size=(4, 3))
    zb, _ = models.forward(st, xs)
    for i in range(4):
        zi, _ = models.forward(st, xs[i])
        assert np.array_equal(zb[i], zi)


def test_forward_shape_mismatch_reports_dims():
    st = small_mlp()
    with pytest.raises(tensor.ShapeMismatchError, match="3"):
        models.forward(st, np.zeros(5))


def test_grad_params_linear_ce_at_zero_weights():
    # y = w.x with w = 0: CE upstream is softmax(0) - onehot, grad = up (x) x
    spec = models.ModelSpec(arch="mlp", input_dim=2, classes=3, hidden=())
    st = models.ModelState(spec=spec, theta=np.zeros(spec.param_count()))
    x = np.array([0.3, 0.8])
    z, tape = models.forward(st, x)
    up = models.softmax(z) - models.onehot([1], 3)[0]
    g = tensor.grad_params(tape, up)
    expect_w = np.outer(x, up).ravel()
    assert np.allclose(g[:6], expect_w, atol=1e-12)
    assert np.allclose(g[6:], up, atol=1e-12)


def test_grad_params_matches_finite_differences(rng):
    st = small_mlp(seed=11)
    x = rng.uniform(0, 1, size=3)
    y = 2

    def loss_of_theta(theta):
        st2 = models.ModelState(spec=st.spec, theta=theta)
        return models.ce_loss(models.logits(st2, x), y)

    z, tape = models.forward(st, x)
    up = models.softmax(z) - models.onehot([y], 3)[0]
    g = tensor.grad_params(tape, up)
    assert rel_err(g, finite_diff(loss_of_theta, st.theta)) <= 1e-6


def test_zero_upstream_zero_gradient():
    st = small_mlp()
    _, tape = models.forward(st, np.array([0.5, 0.5, 0.5]))
    g = tensor.grad_params(tape, np.zeros(3))
    assert np.array_equal(g, np.zeros_like(g))


def test_tape_consumed_twice_errors():
    st = small_mlp()
    _, tape = models.forward(st, np.array([0.5, 0.5, 0.5]))
    tape.run_backward(np.zeros(3))
    with pytest.raises(tensor.TapeConsumedError):
        tape.run_backward(np.zeros(3))


def test_grad_input_linear_model_proportional_to_w():
    spec = models.ModelSpec(arch="mlp", input_dim=4, classes=2, hidden=())
    st = models.init(spec, 1)
    x = np.full(4, 0.5)
    z, tape = models.forward(st, x)
    up = np.array([1.0, 0.0])
    gx = tensor.grad_input(tape, up)
    w = st.theta[:8].reshape(4, 2)
    assert np.allclose(gx, w[:, 0], atol=1e-12)


def test_grad_input_matches_finite_differences(rng):
    st = small_mlp(seed=21)
    x = rng.uniform(0.1, 0.9, size=3)
    y = 0

    def loss_of_x(xv):
        return models.ce_loss(models.logits(st, xv), y)

    z, tape = models.forward(st, x)
    up = models.softmax(z) - models.onehot([y], 3)[0]
    gx = tensor.grad_input(tape, up)
    assert rel_err(gx, finite_diff(loss_of_x, x)) <= 1e-6


def test_grad_input_constant_model_is_zero():
    st = small_mlp()
    st.theta[:] = 0.0
    _, tape = models.forward(st, np.array([0.2, 0.4, 0.6]))
    gx = tensor.grad_input(tape, np.ones(3))
    assert np.array_equal(gx, np.zeros(3))


@pytest.mark.parametrize("trial", range(5))
def test_randomized_small_instances_fd_check(trial):
    rng = np.random.default_rng(100 + trial)
    hidden = tuple(rng.integers(2, 6, size=rng.integers(1, 3)))
    st = small_mlp(input_dim=3, classes=4, hidden=hidden, seed=200 + trial)
    x = rng.uniform(0, 1, size=3)
    y = int(rng.integers(0, 4))

    def loss_theta(theta):
        st2 = models.ModelState(spec=st.spec, theta=theta)
        return models.ce_loss(models.logits(st2, x), y)

    z, tape = models.forward(st, x)
    up = models.softmax(z) - models.onehot([y], 4)[0]
    g = tensor.grad_params(tape, up)
    assert rel_err(g, finite_diff(loss_theta, st.theta)) <= 1e-6


def test_conv_pool_forward_backward_fd():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, size=(2, 1, 6, 6))
    k = rng.standard_normal((2, 1, 3, 3)) * 0.5
    b = rng.standard_normal(2) * 0.1

    def scalar_out(kflat):
        out = tensor.conv2d(x, kflat.reshape(k.shape), b, None)
        out = tensor.relu(out, None)
        out = tensor.maxpool2(out, None)
        return float(out.sum())

    tape = tensor.Tape()
    out = tensor.maxpool2(tensor.relu(tensor.conv2d(x, k, b, tape), tape), tape)
    pg, _ = tape.run_backward(np.ones_like(out))
    gk = pg[:k.size]
    assert rel_err(gk, finite_diff(scalar_out, k.ravel())) <= 1e-6
