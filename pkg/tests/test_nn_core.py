import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcsemcom import nn_core as nc
from pcsemcom.nn_core import Linear, Module, Parameter, Tensor

import gradcases


@pytest.mark.parametrize("name,build,tol", list(gradcases.all_cases()), ids=[c[0] for c in gradcases.all_cases()])
def test_gradcheck(name, build, tol):
    worst, _ = gradcases.worst_error(build, seed=99)
    assert worst < tol, f"{name}: relative error {worst:.3e}"


def test_near_kink_detector_flags_exact_zero():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    assert gradcases.near_kink(nc.tsum(nc.relu(x)))
    assert not gradcases.near_kink(nc.tsum(nc.relu(x + 0.5)))


# forward semantics --------------------------------------------------------

def test_linear_identity():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    y = nc.linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(y.data, x.data)


def test_linear_weight_grad_is_column_sums_of_input():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((5, 3)))
    w = Parameter(rng.standard_normal((3, 4)))
    nc.tsum(nc.linear(x, w, Parameter(np.zeros(4)))).backward()
    expected = np.repeat(x.data.sum(axis=0)[:, None], 4, axis=1)
    np.testing.assert_allclose(w.grad, expected, rtol=1e-12)


def test_linear_shape_mismatch():
    with pytest.raises(ValueError):
        nc.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_shared_mlp_single_point_is_plain_mlp():
    rng = np.random.default_rng(1)
    w1, b1 = Tensor(rng.standard_normal((3, 5))), Tensor(rng.standard_normal(5))
    w2, b2 = Tensor(rng.standard_normal((5, 2))), Tensor(rng.standard_normal(2))
    x = rng.standard_normal((1, 1, 3))
    out = nc.shared_mlp(Tensor(x), [(w1, b1), (w2, b2)]).data
    ref = np.maximum(np.maximum(x @ w1.data + b1.data, 0) @ w2.data + b2.data, 0)
    np.testing.assert_allclose(out, ref, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_shared_mlp_is_permutation_equivariant(k, seed):
    rng = np.random.default_rng(seed)
    layers = [(Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal(4)))]
    x = rng.standard_normal((2, k, 3))
    perm = rng.permutation(k)
    a = nc.shared_mlp(Tensor(x), layers).data
    b = nc.shared_mlp(Tensor(x[:, perm]), layers).data
    np.testing.assert_array_equal(a[:, perm], b)


def test_max_pool_points_identity_and_invariance():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 1, 4))
    np.testing.assert_array_equal(nc.max_pool_points(Tensor(x)).data, x[:, 0])
    y = rng.standard_normal((2, 6, 4))
    np.testing.assert_array_equal(nc.max_pool_points(Tensor(y)).data,
                                  nc.max_pool_points(Tensor(y[:, ::-1])).data)


def test_max_grad_is_one_hot_first_index_on_ties():
    x = Tensor(np.array([[1.0, 3.0], [3.0, 3.0], [2.0, 0.0]]), requires_grad=True)
    nc.tsum(nc.amax(x, axis=0)).backward()
    np.testing.assert_array_equal(x.grad, [[0, 1], [1, 0], [0, 0]])


def test_view_pool_routes_to_contributing_view():
    x = Tensor(np.array([[[1.0, 5.0], [2.0, 4.0]]]), requires_grad=True)
    out = nc.view_pool(x)
    np.testing.assert_array_equal(out.data, [[2.0, 5.0]])
    nc.tsum(out).backward()
    np.testing.assert_array_equal(x.grad, [[[0, 1], [1, 0]]])
    single = np.array([[[3.0, -1.0]]])
    np.testing.assert_array_equal(nc.view_pool(Tensor(single)).data, single[:, 0])


def _conv_loops(x, w, b, stride, pad):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = (H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(3)
    x, w, b = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    out = nc.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(out, _conv_loops(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)
    assert out.shape[2:] == ((5 + 2 * pad - 3) // stride + 1,) * 2


def test_conv2d_special_kernels():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 3, 4, 4))
    w = rng.standard_normal((2, 3, 1, 1))
    out = nc.conv2d(Tensor(x), Tensor(w)).data
    np.testing.assert_allclose(out, np.einsum("oc,bchw->bohw", w[:, :, 0, 0], x), rtol=1e-12)
    const = np.full((1, 1, 6, 6), 2.5)
    avg = nc.conv2d(Tensor(const), Tensor(np.full((1, 1, 3, 3), 1 / 9)), padding=1).data
    np.testing.assert_allclose(avg[0, 0, 1:-1, 1:-1], 2.5, rtol=1e-12)


def test_max_pool2d_trivial_cases():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 2, 4, 4))
    np.testing.assert_array_equal(nc.max_pool2d(Tensor(x), 1, 1).data, x)
    np.testing.assert_array_equal(nc.max_pool2d(Tensor(np.full((1, 1, 4, 4), 7.0)), 2).data, 7.0)


def test_ignored_input_gets_exactly_zero_grad():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    loss = nc.tsum(a * 2.0) + nc.tsum(b * 0.0)
    loss.backward()
    assert np.all(b.grad == 0.0)


def test_backward_visits_each_node_once():
    x = Tensor(np.array(2.0), requires_grad=True)
    y = x * x
    z = y + y          # diamond: y feeds z twice
    z.backward()
    assert float(x.grad) == pytest.approx(8.0)


def test_no_grad_builds_no_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    with nc.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._parents == ()


def test_debug_mode_trips_on_nonfinite():
    x = Tensor(np.array([1.0, 0.0]), requires_grad=True)
    with nc.debug_mode():
        with pytest.raises(nc.NonFiniteError):
            nc.power(x, -1.0)
    nc.power(x, -1.0)   # silent outside debug mode


# optimizer ------------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    w = Parameter(np.array([1.0]))
    nc.tsum(w * w).backward()
    nc.adam_step([w], lr=0.1)
    # bias-corrected m/sqrt(v) = g/|g| on the first step
    assert w.data[0] == pytest.approx(0.9, abs=1e-7)
    assert w.grad is None


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(6)
    target = rng.standard_normal(4)
    w = Parameter(np.zeros(4))
    ref, m, v = np.zeros(4), np.zeros(4), np.zeros(4)
    for t in range(1, 6):
        diff = w - target
        nc.tsum(diff * diff).backward()
        nc.adam_step([w], lr=0.05)
        g = 2 * (ref - target)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(w.data, ref, rtol=1e-12)
    assert w.step_count == 5


def test_frozen_parameter_is_bit_identical():
    w = Parameter(np.array([0.3, -0.7]), frozen=True)
    before = w.data.tobytes()
    nc.tsum(w * w).backward()
    nc.adam_step([w], lr=1.0)
    assert w.data.tobytes() == before and w.grad is None and w.step_count == 0


class _Net(Module):
    def __init__(self, rng):
        self.a = Linear(3, 4, rng)
        self.b = [Linear(4, 2, rng)]

    def __call__(self, x):
        return self.b[0](nc.relu(self.a(x)))


def _train(seed):
    rng = np.random.default_rng(seed)
    net = _Net(rng)
    x = rng.standard_normal((8, 3))
    opt = nc.Adam(net.parameters(), lr=0.01)
    for _ in range(5):
        nc.tsum(net(Tensor(x)) ** 2).backward()
        opt.step()
    return net.state_dict()


def test_training_is_deterministic():
    a, b = _train(7), _train(7)
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_module_state_dict_roundtrip_and_mismatch():
    rng = np.random.default_rng(8)
    net, other = _Net(rng), _Net(rng)
    assert sorted(net.state_dict()) == ["a.bias", "a.weight", "b.0.bias", "b.0.weight"]
    other.load_state_dict(net.state_dict())
    assert all(np.array_equal(v, other.state_dict()[k]) for k, v in net.state_dict().items())
    bad = net.state_dict()
    bad["a.weight"] = np.zeros((2, 2))
    with pytest.raises(ValueError):
        other.load_state_dict(bad)
    with pytest.raises((KeyError, ValueError)):
        other.load_state_dict({"a.weight": net.state_dict()["a.weight"]})


def test_local_encoder_forward_backward_deterministic():
    from pcsemcom.semantic_codec import LocalEncoder

    def run():
        rng = np.random.default_rng(11)
        enc = LocalEncoder(16, 4, rng)
        out = enc(rng.standard_normal((3, 16, 3)))
        nc.tsum(out * out).backward()
        return out.data.tobytes(), [p.grad.tobytes() for p in enc.parameters()]

    assert run() == run()
