"""Shared test utilities: finite differences and geometry helpers."""

import numpy as np


def rel_error(a, b, floor=1e-12):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return np.abs(a - b).max(initial=0.0) / denom


def fd_gradient(f, x, step=1e-5):
    """Central finite-difference gradient of scalar f at x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + step
        fp = f(x)
        xf[i] = orig - step
        fm = f(x)
        xf[i] = orig
        flat[i] = (fp - fm) / (2.0 * step)
    return grad


def fd_jacobian(f, x, step=1e-5):
    """Central finite-difference Jacobian of vector-valued f at x."""
    x = np.asarray(x, dtype=np.float64)
    f0 = np.asarray(f(x), dtype=np.float64)
    jac = np.zeros(f0.shape + x.shape)
    xf = x.reshape(-1)
    jf = jac.reshape(f0.size, xf.size)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + step
        fp = np.asarray(f(x), dtype=np.float64)
        xf[i] = orig - step
        fm = np.asarray(f(x), dtype=np.float64)
        xf[i] = orig
        jf[:, i] = ((fp - fm) / (2.0 * step)).reshape(-1)
    return jac


def random_rotation(rng):
    """Uniform random proper rotation matrix via QR of a Gaussian matrix."""
    m = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(m)
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
