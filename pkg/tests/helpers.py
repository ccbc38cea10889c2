import numpy as np

from stbac.tensor import Tape, Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def analytic_grad(build, x: np.ndarray) -> np.ndarray:
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        loss = build(t)
    tape.backward(loss)
    return t.grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / (||a|| + ||b||), zero when both vanish."""
    a, b = np.ravel(a), np.ravel(b)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def check_grad(build, x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between tape gradient and finite differences."""
    num = numeric_grad(lambda v: build(Tensor(v)).item(), x, h)
    return rel_error(analytic_grad(build, x), num)
