"""Shared numerical helpers for the test suite."""

import numpy as np

from umtra import autodiff as ad


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f`` at every entry of ``x``."""
    x = x.astype(np.float64).copy()
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(1e-12, np.max(np.abs(a)), np.max(np.abs(b))))


def check_grads(fn, arrays, h=1e-6):
    """Max relative error between reverse-mode and central-difference grads.

    ``fn`` maps Tensors to a Tensor; the scalar checked is ``sum(out * w)``
    for a fixed random projection ``w``.
    """
    out_shape = fn(*[ad.Tensor(a) for a in arrays]).shape
    w = np.random.default_rng(99).uniform(-1, 1, size=out_shape)

    def scalar(*arrs):
        return float(np.sum(fn(*[ad.Tensor(a) for a in arrs]).data * w))

    ts = [ad.Tensor(a, requires_grad=True) for a in arrays]
    loss = ad.sum_to(ad.mul(fn(*ts), ad.Tensor(w)), ())
    grads = ad.grad(loss, ts)
    worst = 0.0
    for i, a in enumerate(arrays):
        def f_i(x, i=i):
            args = list(arrays)
            args[i] = x
            return scalar(*args)

        worst = max(worst, rel_err(grads[i].data, numeric_grad(f_i, a, h)))
    return worst


# acceptance outcomes, printed in the terminal summary by conftest
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"\n{criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
    return ok
