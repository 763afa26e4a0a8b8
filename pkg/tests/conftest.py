import numpy as np
import pytest

from venibot.nn import ModelGraph


def single_layer_graph(layer, in_shapes, seed=0):
    g = ModelGraph()
    names = [g.add_input(f"x{i}", s) for i, s in enumerate(in_shapes)]
    g.add("y", layer, names)
    g.set_outputs(["y"])
    g.init_params(seed)
    return g


def numeric_grad(f, arr, h=1e-6):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def gradcheck_layer(layer, in_shapes, rng, batch=2, training=True, input_fn=None):
    """Largest relative error between analytic and central-difference grads."""
    g = single_layer_graph(layer, in_shapes, seed=int(rng.integers(1 << 31)))
    g.train(training)
    # non-trivial affine BatchNorm params so gamma/beta grads are exercised
    for k in g.params:
        if k.endswith("gamma") or k.endswith("beta") or k.endswith("bias"):
            g.params[k][...] = rng.normal(size=g.params[k].shape)
    xs = [input_fn(rng, (batch,) + tuple(s)) if input_fn else rng.normal(size=(batch,) + tuple(s))
          for s in in_shapes]
    out = g.forward(xs)[0]
    upstream = rng.normal(size=out.shape)
    g.zero_grad()
    g.backward([upstream])
    analytic_inputs = [gi.copy() for gi in g.input_grads]
    analytic_params = {k: v.copy() for k, v in g.grads.items()}

    def f():
        # running stats must not drift during probing
        saved = {k: v.copy() for k, v in g.buffers.items()}
        val = float(np.sum(g.forward(xs)[0] * upstream))
        for k, v in saved.items():
            g.buffers[k][...] = v
        return val

    errs = []
    for x, ga in zip(xs, analytic_inputs):
        errs.append(rel_error(ga, numeric_grad(f, x)))
    for k, p in g.params.items():
        errs.append(rel_error(analytic_params[k], numeric_grad(f, p)))
    return max(errs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ------------------------------------------------------------

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    n, title = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _ACCEPTANCE[n] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[n]
        line = f"[{status}] {n:>2}. {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
