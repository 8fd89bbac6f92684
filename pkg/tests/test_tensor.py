import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from penguin import tensor as T
from penguin.nn import AdamState, Mlp, adam_step, clip_grad_norm, load_checkpoint, mlp_forward, save_checkpoint
from penguin.tensor import NonFiniteError, Tape, Tensor, backward, finite_diff_gradient, parameter
from penguin.verify import relative_gradient_error


def grads_match(loss_fn, params, tol=1e-4):
    with Tape() as tape:
        loss = loss_fn()
    g = backward(loss, params, tape)
    n = finite_diff_gradient(lambda: loss_fn().item(), params, 1e-5)
    return max(float(relative_gradient_error(g[p], n[p]).max()) for p in params) < tol


def scalar_mlp_oracle(net: Mlp, x):
    """Straight-line re-evaluation with python floats."""
    a = [float(v) for v in x]
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        W, B = w.data, b.data
        out = []
        for j in range(W.shape[1]):
            s = B[j]
            for i in range(W.shape[0]):
                s += a[i] * W[i, j]
            out.append(math.tanh(s) if k < last and net.activation == "tanh" else s)
        a = out
    return np.array(a)


# Tensor invariants ---------------------------------------------------------
def test_tensor_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


def test_tensor_is_float64_row_major():
    t = Tensor(np.arange(6).reshape(2, 3))
    assert t.data.dtype == np.float64
    assert t.size == int(np.prod(t.shape)) == 6
    assert t.data.flags["C_CONTIGUOUS"]


def test_op_producing_inf_is_an_error():
    x = parameter([1000.0])
    with Tape():
        with pytest.raises(NonFiniteError):
            T.exp(x)


# mlp_forward -------------------------------------------------------------------
def test_mlp_zero_weights_give_zero():
    net = Mlp(4, 3, np.random.default_rng(0))
    for p in net.parameters():
        p.data[...] = 0.0
    assert np.array_equal(mlp_forward(net, np.ones(4)).data, np.zeros(3))


def test_mlp_identity_stub():
    net = Mlp(4, 4, np.random.default_rng(0), hidden=4, activation="identity")
    for w, b in zip(net.weights, net.biases):
        w.data = np.eye(4)
        b.data[...] = 0.0
    x = np.array([0.3, -1.0, 2.0, 5.0])
    assert np.array_equal(mlp_forward(net, x).data, x)


def test_mlp_matches_scalar_oracle():
    rng = np.random.default_rng(7)
    net = Mlp(4, 2, rng)
    x = rng.normal(size=4)
    np.testing.assert_allclose(mlp_forward(net, x).data, scalar_mlp_oracle(net, x), rtol=0, atol=1e-13)


def test_mlp_shape_is_two_hidden_layers_of_32():
    net = Mlp(4, 2, np.random.default_rng(0))
    assert [w.shape for w in net.weights] == [(4, 32), (32, 32), (32, 2)]


def test_mlp_errors():
    net = Mlp(4, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        mlp_forward(net, np.ones(3))
    bad = Tensor.__new__(Tensor)
    bad.data = np.array([1.0, np.nan, 0.0, 0.0])
    bad.requires_grad, bad.name, bad._parents, bad._vjp, bad._fwd, bad._id = False, None, (), None, None, -1
    with pytest.raises(NonFiniteError):
        mlp_forward(net, bad)


def test_mlp_batched_equals_rowwise():
    rng = np.random.default_rng(1)
    net = Mlp(3, 2, rng)
    x = rng.normal(size=(4, 5, 3))
    out = mlp_forward(net, x).data
    for i in range(4):
        for j in range(5):
            np.testing.assert_allclose(out[i, j], mlp_forward(net, x[i, j]).data, atol=1e-14)


# backward ------------------------------------------------------------------------
def test_sum_gives_ones():
    x = parameter(np.random.default_rng(0).normal(size=(3, 4)))
    with Tape() as tape:
        loss = x.sum()
    assert np.array_equal(backward(loss, [x], tape)[x], np.ones((3, 4)))


def test_stationary_point_zero_gradient():
    W = parameter(np.zeros((3, 4)))
    x = np.random.default_rng(0).normal(size=4)
    with Tape() as tape:
        y = W @ Tensor(x[:, None])
        loss = (y * y).sum()
    assert np.array_equal(backward(loss, [W], tape)[W], np.zeros((3, 4)))


def test_unreachable_parameter_gets_exact_zero():
    a, b = parameter([1.0, 2.0]), parameter([[3.0]])
    with Tape() as tape:
        loss = (a * a).sum()
    g = backward(loss, [a, b], tape)
    assert np.array_equal(g[b], np.zeros((1, 1)))
    assert np.array_equal(g[a], np.array([2.0, 4.0]))


def test_backward_errors():
    x = parameter([1.0, 2.0])
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        backward(y, [x], tape)
    with pytest.raises(RuntimeError):
        backward(y.sum(), [x])


@pytest.mark.parametrize("seed", range(5))
def test_random_mlp_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    net = Mlp(4, 2, rng)
    x = rng.normal(size=(3, 4))
    target = rng.normal(size=(3, 2))

    def loss():
        d = mlp_forward(net, x) - Tensor(target)
        return (d * d).mean()

    assert grads_match(loss, net.parameters())


@pytest.mark.parametrize("seed", range(5))
def test_composed_ops_gradient(seed):
    rng = np.random.default_rng(seed)
    a = parameter(rng.normal(size=(2, 3)), "a")
    b = parameter(rng.normal(size=(3,)), "b")
    w = parameter(rng.normal(size=(3, 2)), "w")
    idx = np.array([1, 0, 1])

    def loss():
        z = T.tanh(a * b) + T.sigmoid(a - b) / (1.5 + T.square(a))
        z = T.concat([z, T.sqrt(T.exp(a * 0.1) + 1.0)], axis=-1)
        z = T.take(z, idx, axis=0)
        z = T.where(z.data > 0.5, z, T.log(1.0 + z * z))
        m = T.minimum(z[:, :3] @ w, T.clip(z[:, 3:5] * 2.0, -0.5, 0.7))
        return m.sum() + T.take_rows(z.reshape(1, 3, 6), np.array([2])).mean()

    assert grads_match(loss, [a, b, w])


@settings(max_examples=25, deadline=None)
@given(
    rows=st.integers(1, 4),
    cols=st.integers(1, 4),
    seed=st.integers(0, 2**16),
)
def test_broadcast_gradients(rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = parameter(rng.normal(size=(rows, cols)))
    r = parameter(rng.normal(size=(1, cols)))
    c = parameter(rng.normal(size=(rows, 1)))

    def loss():
        return ((x * r - c) * (x + r)).sum() + (x / (2.0 + c * c)).mean()

    assert grads_match(loss, [x, r, c])


def test_gradients_accumulate_for_shared_inputs():
    x = parameter([2.0])
    with Tape() as tape:
        loss = (x * x * x).sum()
    assert backward(loss, [x], tape)[x][0] == pytest.approx(12.0, abs=1e-14)


# finite differences -----------------------------------------------------------
def test_fd_quadratic():
    t = parameter([3.0])
    g = finite_diff_gradient(lambda: float(t.data[0] ** 2), [t], 1e-5)
    assert abs(g[t][0] - 6.0) < 1e-8


def test_fd_constant():
    t = parameter(np.ones((2, 2)))
    g = finite_diff_gradient(lambda: 4.0, [t], 1e-5)
    assert np.max(np.abs(g[t])) < 1e-9


def test_fd_restores_parameters_and_validates_step():
    t = parameter([1.0, 2.0])
    finite_diff_gradient(lambda: float(np.sum(t.data**3)), [t])
    assert np.array_equal(t.data, [1.0, 2.0])
    with pytest.raises(ValueError):
        finite_diff_gradient(lambda: 0.0, [t], 0.0)
    with pytest.raises(NonFiniteError):
        finite_diff_gradient(lambda: float("nan"), [t])


def test_fd_subset_leaves_nan():
    t = parameter(np.zeros(4))
    g = finite_diff_gradient(lambda: float(np.sum(t.data)), [t], 1e-5, {t: [1, 3]})
    assert np.isnan(g[t][0]) and np.isnan(g[t][2])
    np.testing.assert_allclose(g[t][[1, 3]], 1.0, atol=1e-9)


def test_fd_on_layer_output_norm_agrees_with_backward():
    from penguin.graph import random_graph
    from penguin.layers import PenguinLayer, penguin_update

    rng = np.random.default_rng(4)
    layer = PenguinLayer(3, 8, 2, rng, 8)
    g = random_graph(4, 3, 2, rng)
    alpha = np.full((1, 4, 1), 0.4)

    def loss():
        h, u = penguin_update(layer, g.h[None], g.u[None], None, alpha)
        return (h * h).sum() + (u * u).sum()

    assert grads_match(loss, layer.parameters())


# tape ---------------------------------------------------------------------------
def test_tape_replay_bit_identical():
    rng = np.random.default_rng(0)
    net = Mlp(3, 2, rng)
    with Tape() as tape:
        y = mlp_forward(net, rng.normal(size=(5, 3)))
        (T.tanh(y) * y).sum()
    assert len(tape) > 0
    assert tape.replay()


def test_tape_only_records_differentiable_ops():
    with Tape() as tape:
        Tensor([1.0]) * 3.0
    assert len(tape) == 0


def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(11)
        net = Mlp(3, 2, rng)
        x = rng.normal(size=(4, 3))
        with Tape() as tape:
            loss = mlp_forward(net, x).sum()
        g = backward(loss, net.parameters(), tape)
        return loss.data, [g[p] for p in net.parameters()]

    (l1, g1), (l2, g2) = run(), run()
    assert np.array_equal(l1, l2)
    assert all(np.array_equal(a, b) for a, b in zip(g1, g2))


# adam ------------------------------------------------------------------------------
def test_adam_zero_gradient_no_change():
    p = parameter([1.0, -2.0])
    adam_step([p], {p: np.zeros(2)}, 1e-3, AdamState())
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_closed_form():
    p = parameter([0.5])
    g, lr, eps = 0.2, 1e-2, 1e-8
    adam_step([p], {p: np.array([g])}, lr, AdamState())
    m_hat = (0.1 * g) / (1 - 0.9)
    v_hat = (0.001 * g * g) / (1 - 0.999)
    assert p.data[0] == pytest.approx(0.5 - lr * m_hat / (math.sqrt(v_hat) + eps), abs=1e-15)


def test_adam_constant_gradient_descends():
    p = parameter([0.0])
    state = AdamState()
    seen = [p.data[0]]
    for _ in range(2):
        adam_step([p], {p: np.array([1.0])}, 1e-3, state)
        seen.append(p.data[0])
    assert seen[0] > seen[1] > seen[2]


def test_adam_aborts_on_non_finite():
    p, q = parameter([1.0]), parameter([2.0])
    state = AdamState()
    with pytest.raises(NonFiniteError):
        adam_step([p, q], {p: np.array([1.0]), q: np.array([np.inf])}, 1e-3, state)
    assert p.data[0] == 1.0 and state.t == 0


def test_clip_grad_norm():
    a, b = parameter([0.0]), parameter([0.0, 0.0])
    grads = {a: np.array([3.0]), b: np.array([0.0, 4.0])}
    assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    assert total == pytest.approx(1.0, abs=1e-9)


# checkpoints ------------------------------------------------------------------------
def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=2), "s": np.array(1.5)}
    save_checkpoint(tmp_path / "x.ckpt", tensors, {"k": 1})
    back, meta = load_checkpoint(tmp_path / "x.ckpt")
    assert meta == {"k": 1}
    for k, v in tensors.items():
        assert back[k].shape == v.shape and np.array_equal(back[k], v)


def test_checkpoint_layout(tmp_path):
    save_checkpoint(tmp_path / "x.ckpt", {"a": np.array([[1.0, 2.0]])}, {})
    raw = (tmp_path / "x.ckpt").read_bytes()
    header, payload = raw.split(b"end\n", 1)
    assert header.decode().splitlines() == ["PENGUIN-CHECKPOINT 1", "meta {}", "tensor a 1,2"]
    assert np.array_equal(np.frombuffer(payload, "<f8"), [1.0, 2.0])


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"hello\nend\n")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")
