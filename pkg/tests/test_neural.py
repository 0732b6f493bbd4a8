import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from csiloc.errors import (
    ChecksumMismatchError,
    ConfigMismatchError,
    FileFormatError,
    InvalidConfigError,
    ShapeMismatchError,
    VersionMismatchError,
)
from csiloc.neural import (
    TABLE1_REPORTED_TOTALS,
    LayerSpec,
    Network,
    TrainConfig,
    backward,
    build_table1,
    cross_entropy,
    fc_widths,
    forward,
    gradient_check,
    load_network,
    network_from_bytes,
    network_to_bytes,
    one_hot,
    parameter_report,
    save_network,
    sgd_step,
    softmax,
    squared_l2_loss,
    train,
)


def linear_net(n_in, n_out=1, seed=0):
    return Network([LayerSpec("fc", {"in_features": n_in, "units": n_out}), LayerSpec("linear")],
                   (n_in,), seed)


# -- forward ------------------------------------------------------------------

def test_identity_fc_passes_input_through():
    net = linear_net(4, 4)
    net.layers[0].params["W"][...] = np.eye(4)
    x = np.array([[1.0, -2.0, 3.5, 0.0]])
    np.testing.assert_array_equal(forward(net, x), x)


def test_relu_example():
    net = Network([LayerSpec("relu")], (2,))
    np.testing.assert_array_equal(net.forward(np.array([[-1.0, 2.0]])), [[0.0, 2.0]])


def test_regressor_output_length():
    net = build_table1("mlp_regressor")
    assert net.forward(np.ones((1, 180))).shape == (1, 2)


def test_shape_mismatch_raises():
    with pytest.raises(ShapeMismatchError):
        build_table1("mlp_regressor").forward(np.ones((1, 179)))
    with pytest.raises(InvalidConfigError):
        Network([LayerSpec("fc", {"in_features": 3, "units": 2}),
                 LayerSpec("fc", {"in_features": 5, "units": 1})], (3,))


def test_layer_spec_validation():
    with pytest.raises(InvalidConfigError):
        LayerSpec("dropout", {"rate": 1.0})
    with pytest.raises(InvalidConfigError):
        LayerSpec("fc", {"in_features": 0, "units": 3})
    with pytest.raises(InvalidConfigError):
        LayerSpec("attention")


def test_infer_mode_deterministic():
    net = build_table1("mlp_classifier", seed=3)
    x = np.random.default_rng(0).standard_normal((5, 180))
    assert np.array_equal(net.predict(x), net.predict(x))
    assert np.all(np.isfinite(net.predict(x)))


# -- softmax and losses -------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(softmax([0, 0, 0]), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(softmax(np.log([1, 2, 3])), [1 / 6, 2 / 6, 3 / 6], atol=1e-15)
    a = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(softmax(a + 1000), softmax(a), atol=1e-12)


@settings(max_examples=200)
@given(arrays(float, st.integers(1, 20), elements=st.floats(-50, 50)), st.floats(-1e3, 1e3))
def test_softmax_properties(a, c):
    p = softmax(a)
    assert abs(p.sum() - 1) < 1e-12
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(softmax(a + c), p, atol=1e-12)


def test_cross_entropy_examples():
    label = one_hot([2], 15)[0]
    assert cross_entropy(label, label) == 0.0
    assert cross_entropy(np.full(15, 1 / 15), label) == pytest.approx(math.log(15), abs=1e-12)
    assert cross_entropy([0.5, 0.5], [1, 0]) == pytest.approx(math.log(2), abs=1e-12)
    # clamped rather than infinite
    assert cross_entropy([0.0, 1.0], [1, 0]) == pytest.approx(-math.log(1e-12))


def test_squared_l2_examples():
    assert squared_l2_loss([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert squared_l2_loss([3.0, 4.0], [0.0, 0.0]) == 25.0
    assert squared_l2_loss([[3.0, 4.0], [1.0, 1.0]], [[0.0, 0.0], [1.0, 1.0]]) == 12.5


# -- backward and sgd ---------------------------------------------------------

def test_linear_gradient_closed_form():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((8, 3))
    y = rng.standard_normal((8, 1))
    net = linear_net(3)
    w = net.layers[0].params["W"]
    b = net.layers[0].params["b"]
    out = net.forward(x)
    grads = dict(((n), g) for _, n, g in backward(net, x, 2 * (out - y) / len(x)))
    resid = x @ w + b - y
    np.testing.assert_allclose(grads["W"], 2 * x.T @ resid / len(x), atol=1e-14)
    np.testing.assert_allclose(grads["b"], 2 * resid.sum(axis=0) / len(x), atol=1e-14)


def test_zero_loss_gradient_gives_zero_parameter_gradients():
    net = build_table1("cnn_regressor", cnn_input=(6, 8, 8))
    x = np.random.default_rng(0).standard_normal((2, 6, 8, 8))
    for _, _, g in backward(net, x, np.zeros((2, 2))):
        assert not g.any()


def test_sgd_examples():
    net = linear_net(1)
    net.layers[0].params["W"][...] = 1.0
    before = network_to_bytes(net)
    grads = [(0, "W", np.array([[2.0]])), (0, "b", np.array([0.0]))]
    sgd_step(net, grads, 0.0)
    assert network_to_bytes(net) == before
    sgd_step(net, grads, 0.1)
    assert net.layers[0].params["W"][0, 0] == pytest.approx(0.8, abs=1e-15)
    with pytest.raises(ShapeMismatchError):
        sgd_step(net, [(0, "W", np.zeros(3))], 0.1)


def test_sgd_steps_deterministic():
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((16, 180)), rng.standard_normal((16, 2))
    nets = []
    for _ in range(2):
        net = build_table1("mlp_regressor", seed=5)
        for _ in range(2):
            out = net.forward(x, train=False)
            sgd_step(net, backward(net, x, 2 * (out - y) / 16), 0.01)
        nets.append(network_to_bytes(net))
    assert nets[0] == nets[1]


# -- training -----------------------------------------------------------------

def _toy(seed=0):
    rng = np.random.default_rng(seed)
    x = np.vstack([rng.normal(-2, 0.5, (40, 2)), rng.normal(2, 0.5, (40, 2))])
    return x, one_hot([0] * 40 + [1] * 40, 2)


def _toy_net(seed=0):
    return Network([LayerSpec("fc", {"in_features": 2, "units": 8}), LayerSpec("relu"),
                    LayerSpec("fc", {"in_features": 8, "units": 2}), LayerSpec("softmax")],
                   (2,), seed)


def test_zero_learning_rate_keeps_net_and_flat_history():
    x, y = _toy()
    net = _toy_net()
    before = network_to_bytes(net)
    _, hist = train(net, x, y, TrainConfig(0.0, 16, 3, 0, "cross_entropy"))
    assert network_to_bytes(net) == before
    assert hist[0] == hist[1] == hist[2]


def test_separable_toy_set_converges():
    x, y = _toy()
    _, hist = train(_toy_net(), x, y, TrainConfig(0.1, 16, 200, 0, "cross_entropy"))
    assert hist[-1] < 0.1


def test_training_deterministic():
    x, y = _toy()
    runs = [train(_toy_net(1), x, y, TrainConfig(0.05, 8, 5, 9, "cross_entropy")) for _ in range(2)]
    assert runs[0][1] == runs[1][1]
    assert network_to_bytes(runs[0][0]) == network_to_bytes(runs[1][0])


def test_training_with_dropout_deterministic():
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((40, 180)), rng.standard_normal((40, 2))
    cfg = TrainConfig(0.01, 16, 2, 4, "squared_l2")
    a = train(build_table1("mlp_regressor", seed=2), x, y, cfg)
    b = train(build_table1("mlp_regressor", seed=2), x, y, cfg)
    assert a[1] == b[1] and network_to_bytes(a[0]) == network_to_bytes(b[0])


def test_loss_must_match_head():
    x, y = _toy()
    with pytest.raises(ConfigMismatchError):
        train(_toy_net(), x, y, TrainConfig(0.1, 16, 1, 0, "squared_l2"))
    with pytest.raises(InvalidConfigError):
        train(_toy_net(), x[:0], y[:0], TrainConfig(0.1, 16, 1, 0, "cross_entropy"))
    with pytest.raises(InvalidConfigError):
        TrainConfig(-0.1)


# -- gradient check -----------------------------------------------------------

def test_linear_net_gradient_exact():
    rng = np.random.default_rng(4)
    net = linear_net(6, 2)
    rep = gradient_check(net, rng.standard_normal((5, 6)), rng.standard_normal((5, 2)), "squared_l2")
    assert rep.worst < 1e-8 and rep.n_skipped == 0


@pytest.mark.parametrize("kind", ["mlp_classifier", "mlp_regressor", "cnn_regressor"])
def test_table1_gradients(kind):
    rng = np.random.default_rng(0)
    net = build_table1(kind, seed=1)
    x = rng.standard_normal((2, *net.input_shape))
    if kind == "mlp_classifier":
        y, loss = one_hot([3, 7], 15), "cross_entropy"
    else:
        y, loss = rng.standard_normal((2, 2)), "squared_l2"
    rep = gradient_check(net, x, y, loss)
    assert rep.passed, rep.max_rel_error
    kinds = {k.split(":")[1].split(".")[0] for k in rep.n_checked}
    assert kinds == ({"fc", "conv2d"} if kind == "cnn_regressor" else {"fc"})
    for k in kinds:
        assert sum(n for key, n in rep.n_checked.items() if f":{k}." in key) >= 200


def test_relu_kink_excluded():
    # hidden unit 0 sits exactly at its kink for the only sample
    net = Network([LayerSpec("fc", {"in_features": 2, "units": 2}), LayerSpec("relu"),
                   LayerSpec("fc", {"in_features": 2, "units": 1}), LayerSpec("linear")], (2,))
    net.layers[0].params["W"][...] = [[1.0, 1.0], [1.0, 1.0]]
    net.layers[0].params["b"][...] = [0.0, 0.5]
    rep = gradient_check(net, np.array([[1.0, -1.0]]), np.array([[0.3]]), "squared_l2")
    assert rep.n_skipped > 0
    assert rep.worst < 1e-8


# -- dropout and conv ---------------------------------------------------------

def test_inverted_dropout_expectation():
    net = Network([LayerSpec("dropout", {"rate": 0.3})], (50,), seed=0)
    x = np.random.default_rng(1).uniform(0.5, 2.0, (1, 50))
    acc = np.zeros_like(x)
    for _ in range(10_000):
        acc += net.forward(x, train=True)
    rel = np.abs(acc / 10_000 - x) / x
    assert rel.mean() < 0.02
    np.testing.assert_array_equal(net.forward(x, train=False), x)


def test_conv_on_single_pixel_equals_fc():
    rng = np.random.default_rng(2)
    conv = Network([LayerSpec("conv2d", {"in_channels": 4, "filters": 3, "kernel": 3}),
                    LayerSpec("flatten")], (4, 1, 1))
    fc = linear_net(4, 3)
    w = conv.layers[0].params["W"]
    conv.layers[0].params["b"][...] = rng.standard_normal(3)
    # zero padding leaves only the kernel centre touching a 1x1 input
    fc.layers[0].params["W"][...] = w[:, :, 1, 1].T
    fc.layers[0].params["b"][...] = conv.layers[0].params["b"]
    x = rng.standard_normal((5, 4))
    np.testing.assert_allclose(conv.forward(x.reshape(5, 4, 1, 1)), fc.forward(x), atol=1e-12)


def test_maxpool_routes_gradient_to_argmax():
    net = Network([LayerSpec("maxpool2d", {"pool": 2})], (1, 2, 2))
    x = np.array([[[[0.1, 0.9], [0.3, 0.2]]]])
    assert net.forward(x)[0, 0, 0, 0] == 0.9
    g = net.backward(np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(g, [[[[0, 1], [0, 0]]]])


# -- architectures ------------------------------------------------------------

def test_table1_widths():
    assert fc_widths(build_table1("mlp_classifier")) == [180, 256, 256, 256, 64, 15]
    assert fc_widths(build_table1("mlp_regressor")) == [180, 256, 256, 256, 256, 2]
    cnn = build_table1("cnn_regressor")
    convs = [s for s in cnn.specs if s.kind == "conv2d"]
    assert len(convs) == 3
    assert all(s.params["filters"] == 16 and s.params["kernel"] == 3 for s in convs)
    assert [s.kind for s in cnn.specs if s.kind == "dropout"] == ["dropout"]
    assert cnn.forward(np.zeros((1, 6, 30, 30))).shape == (1, 2)


def test_parameter_report_lists_both_totals():
    for kind, printed in TABLE1_REPORTED_TOTALS.items():
        rep = parameter_report(kind)
        assert rep["reported"] == printed
        assert rep["computed"] == build_table1(kind).n_parameters()
    assert parameter_report("cnn_regressor")["computed"] == 236_114


# -- model file ---------------------------------------------------------------

@pytest.mark.parametrize("kind", ["mlp_classifier", "mlp_regressor", "cnn_regressor"])
def test_model_round_trip(tmp_path, kind):
    net = build_table1(kind, seed=7)
    save_network(net, tmp_path / "m.csnn")
    back = load_network(tmp_path / "m.csnn")
    assert back.specs == net.specs and back.input_shape == net.input_shape
    for (_, _, a), (_, _, b) in zip(net.parameters(), back.parameters()):
        assert np.array_equal(a, b)
    x = np.random.default_rng(0).standard_normal((2, *net.input_shape))
    assert np.array_equal(back.predict(x), net.predict(x))


def test_model_file_corruption():
    data = network_to_bytes(build_table1("mlp_regressor"))
    with pytest.raises(ChecksumMismatchError):
        network_from_bytes(data[:-16])
    with pytest.raises(FileFormatError):
        network_from_bytes(b"XXXXXXXX" + data[8:])
    bumped = bytearray(data)
    bumped[8] = 2
    with pytest.raises(VersionMismatchError):
        network_from_bytes(bytes(bumped))
