import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from detrl.nn import (
    DETERMINISTIC,
    FLOAT,
    ComputeMode,
    DivergenceError,
    QNetwork,
    RMSProp,
    apply_update,
    backward,
    format_hash,
    forward,
    greedy_action,
    init_network,
    load_network,
    network_from_bytes,
    network_to_bytes,
    ordered_matmul,
    save_network,
    weight_hash,
)
from detrl.rng import new_stream
from tests.helpers import gradient_error, random_problem
from tests.oracles.mlp_ref import finite_difference, params64

finite32 = st.floats(-4, 4, width=32, allow_subnormal=False)


def _rand(shape, seed, density=1.0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(FLOAT)
    x[rng.random(shape) >= density] = 0.0
    return x


def _cumsum_oracle(a, b):
    """Ascending-order float32 accumulation via numpy's sequential cumsum."""
    out = np.empty((a.shape[0], b.shape[1]), a.dtype)
    for m in range(a.shape[0]):
        prods = a[m][:, None] * b
        out[m] = np.cumsum(np.vstack([np.zeros((1, b.shape[1]), a.dtype), prods]), axis=0)[-1]
    return out


@pytest.mark.parametrize("shape,density", [((1, 110, 64), 0.02), ((32, 64, 64), 0.5),
                                           ((7, 13, 3), 1.0), ((64, 32, 64), 0.3)])
def test_ascending_kernel_matches_sequential_sum_bitwise(shape, density):
    m, k, n = shape
    a, b = _rand((m, k), 1, density), _rand((k, n), 2)
    got = ordered_matmul(a, b)
    assert np.array_equal(got.view(np.uint32), _cumsum_oracle(a, b).view(np.uint32))


@pytest.mark.parametrize("density", [1.0, 0.4])
def test_perturbed_equals_deterministic_in_float64_shadow(density):
    a, b = _rand((32, 64), 3, density).astype(np.float64), _rand((64, 48), 4).astype(np.float64)
    det = ordered_matmul(a, b)
    pert = ordered_matmul(a, b, ComputeMode.perturbed(new_stream("compute", 5)))
    assert np.max(np.abs(pert - det)) <= 1e-6 * np.max(np.abs(det))


def test_perturbed_changes_float32_bits_and_consumes_one_word():
    a, b = _rand((32, 64), 6), _rand((64, 64), 7)
    s = new_stream("compute", 9)
    pert = ordered_matmul(a, b, ComputeMode.perturbed(s))
    assert s.draw_count == 1
    assert not np.array_equal(pert, ordered_matmul(a, b))
    again = ordered_matmul(a, b, ComputeMode.perturbed(new_stream("compute", 9)))
    assert np.array_equal(pert.view(np.uint32), again.view(np.uint32))


def test_perturbed_mode_requires_stream():
    with pytest.raises(ValueError):
        ComputeMode(ComputeMode.perturbed(new_stream("c", 1)).kind)


def test_matmul_shape_and_dtype_errors():
    with pytest.raises(ValueError):
        ordered_matmul(np.zeros((2, 3), FLOAT), np.zeros((2, 3), FLOAT))
    with pytest.raises(TypeError):
        ordered_matmul(np.zeros((2, 3), FLOAT), np.zeros((3, 2), np.float64))


def test_init_is_reproducible_and_seed_sensitive():
    a = init_network((110, 64, 64, 3), new_stream("init", 1))
    b = init_network((110, 64, 64, 3), new_stream("init", 1))
    c = init_network((110, 64, 64, 3), new_stream("init", 2))
    assert a.bitwise_equal(b) and not a.bitwise_equal(c)
    assert all(not bias.any() for bias in a.biases)


def test_init_scale_monte_carlo():
    net = init_network((100, 1000), new_stream("init", 3))
    assert 0.095 <= float(net.weights[0].std()) <= 0.105


def test_init_draw_order_is_layer_then_row_major():
    s = new_stream("init", 4)
    net = init_network((2, 3, 1), s.clone())
    ref = [s.next_gaussian() for _ in range(9)]
    assert net.weights[0][0, 1] == FLOAT(ref[1] / np.sqrt(2))
    assert net.weights[0][1, 0] == FLOAT(ref[3] / np.sqrt(2))
    assert net.weights[1][2, 0] == FLOAT(ref[8] / np.sqrt(3))


@pytest.mark.parametrize("sizes", [(), (3,), (3, 0), (3, -1, 2)])
def test_init_rejects_bad_sizes(sizes):
    with pytest.raises(ValueError):
        init_network(sizes, new_stream("init", 0))


def test_forward_examples():
    assert not forward(QNetwork.zeros((5, 4, 3)), np.ones(5, FLOAT)).any()
    net = QNetwork((1, 1), [np.array([[1.5]], FLOAT)], [np.array([-0.25], FLOAT)])
    assert forward(net, np.array([2.0], FLOAT))[0] == FLOAT(2.75)
    with pytest.raises(ValueError):
        forward(net, np.ones(2, FLOAT))


def test_forward_is_bitwise_reproducible():
    net = init_network((110, 64, 64, 3), new_stream("init", 5))
    x = _rand((32, 110), 8, 0.1)
    assert np.array_equal(forward(net, x).view(np.uint32), forward(net, x).view(np.uint32))


def test_greedy_ties_go_to_lowest_index():
    assert greedy_action(np.array([1.0, 3.0, 3.0], FLOAT)) == 1
    assert greedy_action(np.zeros(3, FLOAT)) == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), arrays(FLOAT, 6, elements=finite32),
       arrays(FLOAT, 6, elements=finite32))
def test_hidden_layers_are_one_lipschitz_with_unit_weights(seed, x, dx):
    """ReLU layer with orthogonal weights does not expand distances."""
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((6, 6)))
    w = q.astype(FLOAT)
    net = QNetwork((6, 6, 6), [w, np.eye(6, dtype=FLOAT)], [np.zeros(6, FLOAT)] * 2)
    y1 = forward(net, x).astype(np.float64)
    y2 = forward(net, x + dx).astype(np.float64)
    lhs = np.linalg.norm(y1 - y2)
    rhs = np.linalg.norm((x + dx).astype(np.float64) - x.astype(np.float64))
    assert lhs <= rhs * (1 + 1e-5) + 1e-5


def test_zero_gradient_at_targets_equal_to_q():
    net, x, a, _ = random_problem(11)
    y = forward(net, x)[np.arange(len(a)), a]
    g = backward(net, x, a, y)
    assert g.loss == 0.0 and all(not p.any() for p in g.params())


def test_single_item_linear_gradient_by_hand():
    w = np.array([[0.5, -1.0], [2.0, 0.25]], FLOAT)
    net = QNetwork((2, 2), [w], [np.array([0.1, 0.0], FLOAT)])
    x = np.array([[1.0, 3.0]], FLOAT)
    q = float(x[0] @ w[:, 1])
    g = backward(net, x, np.array([1]), np.array([2.0], FLOAT))
    coef = -2.0 * (2.0 - q)
    np.testing.assert_allclose(g.weights[0][:, 1], coef * x[0], rtol=1e-6)
    assert not g.weights[0][:, 0].any()
    np.testing.assert_allclose(g.biases[0], [0.0, coef], rtol=1e-6)


def test_backward_rejects_empty_batch():
    net = QNetwork.zeros((3, 2))
    with pytest.raises(ValueError):
        backward(net, np.zeros((0, 3), FLOAT), np.zeros(0, int), np.zeros(0, FLOAT))


def test_gradient_example_4_5_3():
    s = new_stream("test", 77)
    net = init_network((4, 5, 3), s)
    x = np.array([[s.next_gaussian() for _ in range(4)] for _ in range(8)], FLOAT)
    a = np.array([s.next_int(3) for _ in range(8)])
    y = np.array([s.next_gaussian() for _ in range(8)], FLOAT)
    fd = finite_difference(params64(net), x, a, y, 1e-3)
    assert fd is not None
    for g, f in zip(backward(net, x, a, y).params(), fd):
        np.testing.assert_allclose(g, f, rtol=1e-3, atol=1e-6)


@pytest.mark.parametrize("seed", range(50, 90))
def test_gradient_property_over_architectures(seed):
    err, sizes = gradient_error(seed)
    assert len(sizes) <= 5 and max(sizes) <= 16
    assert err < 1e-3


def test_perturbed_backward_is_close_to_deterministic():
    net, x, a, y = random_problem(12)
    det = backward(net, x, a, y).params()
    pert = backward(net, x, a, y, ComputeMode.perturbed(new_stream("compute", 1))).params()
    for d, p in zip(det, pert):
        np.testing.assert_allclose(p, d, rtol=1e-4, atol=1e-6)


def test_rmsprop_zero_gradient_decays_accumulators_only():
    net = init_network((3, 2), new_stream("init", 1))
    before = net.copy()
    opt = RMSProp.for_network(net)
    opt.accumulators = [np.ones_like(p) for p in net.params()]
    zero = backward(net, np.zeros((1, 3), FLOAT), np.array([0]), np.zeros(1, FLOAT))
    apply_update(net, zero, opt)
    assert net.bitwise_equal(before)
    assert all(np.all(acc == FLOAT(0.95)) for acc in opt.accumulators)


def test_rmsprop_scalar_step_by_hand():
    net = QNetwork((1, 1), [np.array([[1.0]], FLOAT)], [np.array([0.0], FLOAT)])
    opt = RMSProp.for_network(net, learning_rate=0.1, decay=0.0, epsilon_stab=1e-8)
    g = backward(net, np.array([[1.0]], FLOAT), np.array([0]), np.array([3.0], FLOAT))
    # loss (3 - w)^2 at w = 1 -> dw = -4; decay 0 makes the step lr * sign(g)
    apply_update(net, g, opt)
    assert net.weights[0][0, 0] == pytest.approx(1.1, abs=1e-6)


def test_rmsprop_is_bitwise_deterministic_and_flags_divergence():
    net, x, a, y = random_problem(13)
    n1, n2 = net.copy(), net.copy()
    o1, o2 = RMSProp.for_network(n1), RMSProp.for_network(n2)
    for _ in range(3):
        apply_update(n1, backward(n1, x, a, y), o1)
        apply_update(n2, backward(n2, x, a, y), o2)
    assert n1.bitwise_equal(n2)
    bad = backward(n1, x, a, y)
    bad.weights[0][0, 0] = np.nan
    with pytest.raises(DivergenceError):
        apply_update(n1, bad, o1)


def test_fnv1a_reference_vectors():
    from detrl.nn import _fnv1a64
    assert _fnv1a64(np.frombuffer(b"", np.uint8)) == 0xCBF29CE484222325
    assert _fnv1a64(np.frombuffer(b"a", np.uint8)) == 0xAF63DC4C8601EC8C


def test_weight_hash_sees_every_bit():
    net = init_network((4, 5, 3), new_stream("init", 2))
    h = weight_hash(net)
    assert weight_hash(net.copy()) == h
    flipped = net.copy()
    flipped.weights[1].view(np.uint32)[2, 1] ^= 1
    assert weight_hash(flipped) != h
    assert len(format_hash(h)) == 16


def test_serialization_roundtrip(tmp_path):
    net = init_network((110, 64, 64, 3), new_stream("init", 3))
    data = network_to_bytes(net)
    assert data[:4] == b"DQNW"
    assert network_from_bytes(data).bitwise_equal(net)
    save_network(net, tmp_path / "n.qnet")
    assert weight_hash(load_network(tmp_path / "n.qnet")) == weight_hash(net)
    with pytest.raises(ValueError):
        network_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(ValueError):
        network_from_bytes(data[:-1])


def test_deterministic_constant_is_deterministic():
    assert DETERMINISTIC.is_deterministic
