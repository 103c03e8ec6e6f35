"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

from sharedbit import autodiff as ad


def numeric_grad(f, arrays, index, h=1e-4):
    """d f(*arrays) / d arrays[index] by central differences; ``f`` returns a float."""
    base = [a.copy() for a in arrays]
    target = base[index]
    g = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = target[i]
        target[i] = old + h
        fp = f(*base)
        target[i] = old - h
        fm = f(*base)
        target[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def analytic_grads(build, arrays):
    """Gradients of the scalar built by ``build(*tensors)`` w.r.t. every input."""
    ts = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        out = build(*ts)
        tape.backward(out)
    return [t.grad for t in ts]


def value(build, *arrays):
    return float(build(*[ad.Tensor(a) for a in arrays]).data)


def assert_close_rel(analytic, numeric, rtol, atol=1e-8):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(numeric), np.abs(analytic))
    ok = err <= rtol * scale + atol
    assert ok.all(), f"max rel err {np.max(err / np.maximum(scale, 1e-12)):.3e}"
