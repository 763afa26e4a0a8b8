import math

import numpy as np
import pytest

from conftest import gradcheck_layer, numeric_grad, rel_error, single_layer_graph
from venibot.errors import GraphError, StateError
from venibot.nn import (
    AdamState, Add, BatchNorm, Concat, Conv, MaxPool, ModelGraph, PlateauScheduler, ReLU,
    Sigmoid, TransConv, adam_step, bce_loss, dumps, l2_loss, load, loads, param_count, save,
)
from venibot.nn import functional as F


def naive_conv(x, w, stride, pad, groups):
    """Direct sliding-window cross-correlation."""
    n, c, h, wd = x.shape
    o, cg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = 0
    while ho * stride + k <= h + 2 * pad:
        ho += 1
    wo = 0
    while wo * stride + k <= wd + 2 * pad:
        wo += 1
    y = np.zeros((n, o, ho, wo))
    og = o // groups
    for b in range(n):
        for oc in range(o):
            gidx = oc // og
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, gidx * cg:(gidx + 1) * cg, i * stride:i * stride + k,
                               j * stride:j * stride + k]
                    y[b, oc, i, j] = np.sum(patch * w[oc])
    return y


def naive_transconv(x, w, stride, pad, out_pad):
    n, cin, h, wd = x.shape
    cout, k = w.shape[1], w.shape[2]
    hb = (h - 1) * stride + k + out_pad
    wb = (wd - 1) * stride + k + out_pad
    buf = np.zeros((n, cout, hb, wb))
    for b in range(n):
        for ci in range(cin):
            for i in range(h):
                for j in range(wd):
                    buf[b, :, i * stride:i * stride + k, j * stride:j * stride + k] += \
                        x[b, ci, i, j] * w[ci]
    return buf[:, :, pad:hb - pad, pad:wb - pad]


# -- forward semantics ------------------------------------------------------

def test_relu_identity_on_nonnegative(rng):
    g = single_layer_graph(ReLU(), [(2, 3, 3)])
    x = rng.uniform(0, 1, size=(1, 2, 3, 3))
    np.testing.assert_array_equal(g.forward([x])[0], x)


def test_conv0_output_shape():
    g = ModelGraph()
    g.add_input("x", (1, 128, 208))
    g.add("conv0", Conv(1, 64, 7, 2, 3), "x")
    assert g.shapes["conv0"] == (64, 64, 104)
    g.set_outputs(["conv0"])
    g.init_params(0)
    assert g.forward([np.zeros((1, 1, 128, 208))])[0].shape == (1, 64, 64, 104)


def test_concat_shape():
    g = single_layer_graph(Concat(), [(3, 8, 8), (5, 8, 8)])
    out = g.forward([np.zeros((1, 3, 8, 8)), np.ones((1, 5, 8, 8))])[0]
    assert out.shape == (1, 8, 8, 8)


def test_shape_mismatch_names_node():
    g = ModelGraph()
    g.add_input("x", (3, 8, 8))
    with pytest.raises(GraphError, match="bad_conv"):
        g.add("bad_conv", Conv(4, 2, 3), "x")
    g.add("a", Conv(3, 2, 3, 1, 1), "x")
    with pytest.raises(GraphError, match="cat"):
        g.add("cat", Concat(), ("a", g.add("b", MaxPool(2), "x")))


def test_forward_rejects_wrong_input_shape():
    g = single_layer_graph(ReLU(), [(2, 3, 3)])
    with pytest.raises(GraphError):
        g.forward([np.zeros((1, 2, 4, 3))])


@pytest.mark.parametrize("trial", range(20))
def test_conv_matches_sliding_window_oracle(trial):
    rng = np.random.default_rng(trial)
    groups = int(rng.choice([1, 2, 3]))
    cin = groups * int(rng.integers(1, 3))
    cout = groups * int(rng.integers(1, 3))
    k = int(rng.choice([1, 2, 3, 5]))
    stride = int(rng.integers(1, 4))
    pad = int(rng.integers(0, 3))
    h, w = int(rng.integers(k, 9)), int(rng.integers(k, 9))
    x = rng.normal(size=(2, cin, h, w))
    wt = rng.normal(size=(cout, cin // groups, k, k))
    y, _ = F.conv2d(x, wt, stride, pad, groups)
    expected = naive_conv(x, wt, stride, pad, groups)
    assert y.shape == expected.shape
    assert y.shape[2] == (h + 2 * pad - k) // stride + 1
    np.testing.assert_allclose(y, expected, atol=1e-12)


def test_grouped_conv_equals_per_group_ungrouped(rng):
    x = rng.normal(size=(2, 8, 6, 6))
    w = rng.normal(size=(12, 2, 3, 3))
    grouped, _ = F.conv2d(x, w, 1, 1, groups=4)
    parts = [F.conv2d(x[:, 2 * i:2 * i + 2], w[3 * i:3 * i + 3], 1, 1, 1)[0] for i in range(4)]
    assert np.max(np.abs(grouped - np.concatenate(parts, axis=1))) <= 1e-12


def test_groups_one_matches_ungrouped_oracle(rng):
    x = rng.normal(size=(1, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    y, _ = F.conv2d(x, w, 1, 1, groups=1)
    assert np.max(np.abs(y - naive_conv(x, w, 1, 1, 1))) <= 1e-12


@pytest.mark.parametrize("stride,pad,out_pad", [(1, 0, 0), (2, 1, 1), (2, 1, 0), (3, 1, 2)])
def test_transconv_is_conv_input_gradient(rng, stride, pad, out_pad):
    x = rng.normal(size=(2, 3, 4, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    tconv = TransConv(3, 2, 3, stride, pad, out_pad, bias=False)
    g = single_layer_graph(tconv, [(3, 4, 5)])
    g.params["y.weight"][...] = w
    y = g.forward([x])[0]
    np.testing.assert_allclose(y, naive_transconv(x, w, stride, pad, out_pad), atol=1e-12)
    # backward-input of the matched conv (weights shared, roles swapped)
    conv = Conv(2, 3, 3, stride, pad, bias=False)
    gc = single_layer_graph(conv, [y.shape[1:]])
    gc.params["y.weight"][...] = w
    out = gc.forward([np.zeros(y.shape)])[0]
    assert out.shape == x.shape
    gc.backward([x])
    assert np.max(np.abs(gc.input_grads[0] - y)) <= 1e-10


def test_batchnorm_eval_identity(rng):
    g = single_layer_graph(BatchNorm(3, eps=0.0), [(3, 4, 4)]).eval()
    x = rng.normal(size=(2, 3, 4, 4))
    np.testing.assert_allclose(g.forward([x])[0], x, atol=1e-15)


def test_batchnorm_updates_running_stats(rng):
    g = single_layer_graph(BatchNorm(2, momentum=0.5), [(2, 3, 3)])
    x = rng.normal(loc=3.0, size=(4, 2, 3, 3))
    g.forward([x])
    np.testing.assert_allclose(g.buffers["y.running_mean"], 0.5 * x.mean(axis=(0, 2, 3)))


def test_maxpool_values(rng):
    g = single_layer_graph(MaxPool(2), [(1, 4, 4)])
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(g.forward([x])[0][0, 0], [[5, 7], [13, 15]])


# -- backward ---------------------------------------------------------------

def test_sigmoid_grad_at_zero():
    g = single_layer_graph(Sigmoid(), [(1, 1, 1)])
    g.forward([np.zeros((1, 1, 1, 1))])
    g.backward([np.ones((1, 1, 1, 1))])
    assert g.input_grads[0][0, 0, 0, 0] == pytest.approx(0.25, abs=1e-15)


def test_conv_weight_grad_is_input_correlation(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    g = single_layer_graph(Conv(2, 3, 3, 1, 0), [(2, 5, 5)])
    g.forward([x])
    up = rng.normal(size=(1, 3, 3, 3))
    g.backward([up])
    # correlation of input with upstream gradient
    expected = np.zeros((3, 2, 3, 3))
    for o in range(3):
        for c in range(2):
            for a in range(3):
                for b in range(3):
                    expected[o, c, a, b] = np.sum(x[0, c, a:a + 3, b:b + 3] * up[0, o])
    np.testing.assert_allclose(g.grads["y.weight"], expected, atol=1e-12)

    def f():
        return float(np.sum(g.forward([x])[0] * up))
    assert rel_error(g.grads["y.weight"], numeric_grad(f, g.params["y.weight"])) < 1e-6


def test_zero_upstream_gives_zero_param_grads(rng):
    g = single_layer_graph(Conv(2, 2, 3, 1, 1, groups=2), [(2, 4, 4)])
    g.forward([rng.normal(size=(2, 2, 4, 4))])
    g.backward([np.zeros((2, 2, 4, 4))])
    assert all(not np.any(v) for v in g.grads.values())


def test_backward_without_forward_raises():
    g = single_layer_graph(ReLU(), [(1, 2, 2)])
    with pytest.raises(StateError):
        g.backward([np.ones((1, 1, 2, 2))])


def test_forward_without_params_raises():
    g = ModelGraph()
    g.add_input("x", (1, 4, 4))
    g.add("c", Conv(1, 1, 3), "x")
    g.set_outputs(["c"])
    with pytest.raises(StateError):
        g.forward([np.zeros((1, 1, 4, 4))])


def relu_input(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 1e-3, 0.5, x)


LAYER_CASES = {
    "conv": lambda r: (Conv(2, 3, 3, 1, 1), [(2, 4, 4)]),
    "conv_strided": lambda r: (Conv(2, 2, 3, 2, 1), [(2, 4, 4)]),
    "conv_grouped": lambda r: (Conv(4, 4, 3, 1, 1, groups=2), [(4, 4, 4)]),
    "conv_grouped_c4": lambda r: (Conv(4, 8, 3, 2, 1, groups=4), [(4, 4, 4)]),
    "transconv": lambda r: (TransConv(3, 2, 3, 2, 1, 1), [(3, 2, 3)]),
    "transconv_asym": lambda r: (TransConv(2, 2, 3, 2, 1, (1, 0)), [(2, 3, 2)]),
    "batchnorm": lambda r: (BatchNorm(3), [(3, 3, 3)]),
    "relu": lambda r: (ReLU(), [(2, 4, 4)]),
    "sigmoid": lambda r: (Sigmoid(), [(2, 4, 4)]),
    "maxpool": lambda r: (MaxPool(2), [(2, 4, 4)]),
    "concat": lambda r: (Concat(), [(2, 3, 3), (1, 3, 3)]),
    "add": lambda r: (Add(), [(2, 3, 3), (2, 3, 3)]),
}


@pytest.mark.parametrize("case", sorted(LAYER_CASES))
def test_layer_gradients_finite_difference(case):
    rng = np.random.default_rng(7)
    for _ in range(10):
        layer, shapes = LAYER_CASES[case](rng)
        err = gradcheck_layer(layer, shapes, rng,
                              input_fn=relu_input if case == "relu" else None)
        assert err < 1e-4


def test_batchnorm_eval_gradient(rng):
    assert gradcheck_layer(BatchNorm(2), [(2, 3, 3)], rng, training=False) < 1e-4


def test_forward_backward_deterministic(rng):
    x = rng.normal(size=(2, 4, 4, 4))
    results = []
    for _ in range(2):
        g = single_layer_graph(Conv(4, 4, 3, 1, 1, groups=2), [(4, 4, 4)], seed=5)
        out = g.forward([x])[0]
        g.backward([np.ones_like(out)])
        results.append((out.tobytes(), g.grads["y.weight"].tobytes()))
    assert results[0] == results[1]


# -- losses -------------------------------------------------------------------

def test_bce_perfect_prediction_is_near_zero():
    loss, _ = bce_loss(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2)))
    assert loss == pytest.approx(0.0, abs=1e-6)


def test_bce_half_is_ln2(rng):
    target = (rng.uniform(size=(2, 1, 3, 3)) > 0.5).astype(float)
    loss, _ = bce_loss(np.full(target.shape, 0.5), target)
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_bce_gradient_matches_finite_difference(rng):
    pred = rng.uniform(0.05, 0.95, size=(2, 1, 3, 3))
    target = (rng.uniform(size=pred.shape) > 0.5).astype(float)
    _, grad = bce_loss(pred, target)
    num = numeric_grad(lambda: bce_loss(pred, target)[0], pred)
    assert rel_error(grad, num) < 1e-4


def test_l2_examples():
    z = np.zeros((1, 1, 2, 2))
    assert l2_loss(z, z)[0] == 0.0
    assert l2_loss(z + 2.0, z)[0] == pytest.approx(4.0)
    mask = np.array([[[[True, False], [False, False]]]])
    pred = np.array([[[[0.0, 5.0], [5.0, 5.0]]]])
    loss, grad = l2_loss(pred, z, mask)
    assert loss == 0.0 and not np.any(grad)


def test_l2_empty_mask_warns():
    z = np.zeros((1, 1, 2, 2))
    with pytest.warns(RuntimeWarning):
        loss, grad = l2_loss(z + 1.0, z, np.zeros_like(z, dtype=bool))
    assert loss == 0.0 and not np.any(grad)


def test_l2_masked_gradient(rng):
    pred = rng.normal(size=(2, 1, 3, 3))
    target = rng.normal(size=pred.shape)
    mask = rng.uniform(size=pred.shape) > 0.4
    _, grad = l2_loss(pred, target, mask)
    num = numeric_grad(lambda: l2_loss(pred, target, mask)[0], pred)
    assert rel_error(grad, num) < 1e-4


# -- optimiser & scheduler ----------------------------------------------------

def test_adam_first_step_hand_value():
    p = {"w": np.array([0.0])}
    state = AdamState(lr=1e-3, weight_decay=0.0)
    adam_step(state, p, {"w": np.array([1.0])})
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert p["w"][0] == pytest.approx(-1e-3 / (1.0 + 1e-8), abs=1e-15)


def test_adam_zero_grad_no_decay_is_noop():
    p = {"w": np.array([0.3, -2.0])}
    adam_step(AdamState(weight_decay=0.0), p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [0.3, -2.0])


def test_adam_weight_decay_enters_gradient():
    p = {"w": np.array([1.0])}
    adam_step(AdamState(lr=1e-3, weight_decay=1e-5), p, {"w": np.array([0.0])})
    g = 1e-5
    m_hat, v_hat = g, g * g
    assert p["w"][0] == pytest.approx(1.0 - 1e-3 * m_hat / (math.sqrt(v_hat) + 1e-8), abs=1e-15)
    assert p["w"][0] < 1.0


def test_scheduler_halves_after_patience_plus_one():
    s = PlateauScheduler(mode="max", factor=0.5, patience=5)
    lr = s.step(0.5, 1e-3)
    lrs = [lr]
    for _ in range(6):
        lr = s.step(0.5, lr)
        lrs.append(lr)
    assert lrs[:6] == [1e-3] * 6
    assert lrs[6] == pytest.approx(5e-4)


def test_scheduler_constant_on_improvement():
    s = PlateauScheduler(mode="min")
    lr = 1e-3
    for m in np.linspace(1.0, 0.1, 30):
        lr = s.step(m, lr)
    assert lr == 1e-3


def test_scheduler_improvement_at_fifth_resets():
    s = PlateauScheduler(mode="max", patience=5)
    lr = s.step(0.5, 1e-3)
    for _ in range(4):
        lr = s.step(0.4, lr)
    lr = s.step(0.9, lr)        # fifth validation improves
    assert lr == 1e-3 and s.num_bad == 0
    for _ in range(5):
        lr = s.step(0.1, lr)
    assert lr == 1e-3
    assert s.step(0.1, lr) == pytest.approx(5e-4)


# -- counting & checkpoint -----------------------------------------------------

def test_conv0_param_count():
    g = ModelGraph()
    g.add_input("x", (1, 128, 208))
    g.add("conv0", Conv(1, 64, 7, 2, 3), "x")
    assert param_count(g) == 1 * 64 * 49 + 64 == 3200


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    tensors = {
        "a.weight": rng.normal(size=(3, 2, 3, 3)),
        "b": rng.normal(size=(5,)).astype(np.float32),
        "meta": np.frombuffer(b'{"x": 1}', dtype=np.uint8),
        "scalar": np.array(7, dtype=np.int64),
    }
    path = tmp_path / "m.vbnn"
    save(path, tensors)
    raw = path.read_bytes()
    assert raw[:4] == b"VBNN"
    back = load(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype
        assert back[k].tobytes() == tensors[k].tobytes()
    assert dumps(back) == raw


def test_checkpoint_rejects_garbage():
    from venibot.errors import DataError
    with pytest.raises(DataError):
        loads(b"NOPE" + b"\0" * 20)
    with pytest.raises(DataError):
        loads(dumps({"x": np.zeros(10)})[:-8])
