import numpy as np

from pairmae import tensor as T


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def finite_diff(f, arr, eps=1e-5):
    """Central finite differences of scalar f w.r.t. every element of arr."""
    arr = np.asarray(arr, dtype=np.float64)
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        up, down = arr.copy(), arr.copy()
        up[idx] += eps
        down[idx] -= eps
        grad[idx] = (f(up) - f(down)) / (2 * eps)
        it.iternext()
    return grad


def check_grad(build_loss, arr, eps=1e-5, tol=1e-4, floor=1e-3):
    """build_loss maps a leaf Tensor to a scalar Tensor; compares reverse-mode
    gradient with central differences. The floor keeps near-zero entries from
    amplifying the difference quotient's own roundoff."""
    leaf = T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)
    loss = build_loss(leaf)
    loss.backward()
    got = leaf.grad
    want = finite_diff(lambda a: build_loss(T.Tensor(a)).item(), arr, eps)
    assert got is not None
    err = rel_err(got, want, floor=floor)
    assert err < tol, f"gradient mismatch: rel err {err}"
