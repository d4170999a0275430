import numpy as np


def central_diff(f, x, step=1e-5):
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        hi = f()
        x[i] = old - step
        lo = f()
        x[i] = old
        grad[i] = (hi - lo) / (2 * step)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def np_mlp(weights, biases, activations, x):
    """Graph-free forward pass used as an oracle."""
    h = x
    for w, b, act in zip(weights, biases, activations):
        h = h @ w.T + b
        if act == "relu":
            h = np.maximum(h, 0.0)
        elif act == "tanh":
            h = np.tanh(h)
    return h


# acceptance criterion number -> (passed, one-line detail); printed by conftest
ACCEPTANCE = {}


def record(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)
