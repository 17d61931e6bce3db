"""Total-variation denoising by Chambolle's dual projection iteration."""

import numpy as np


def grad(u):
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:-1, :] = u[1:, :] - u[:-1, :]
    gy[:, :-1] = u[:, 1:] - u[:, :-1]
    return gx, gy


def div(px, py):
    """Negative adjoint of :func:`grad`."""
    d = np.zeros_like(px)
    d[0, :] = px[0, :]
    d[1:-1, :] = px[1:-1, :] - px[:-2, :]
    d[-1, :] = -px[-2, :]
    d[:, 0] += py[:, 0]
    d[:, 1:-1] += py[:, 1:-1] - py[:, :-2]
    d[:, -1] += -py[:, -2]
    return d


def total_variation(u) -> float:
    """Isotropic TV with forward differences."""
    gx, gy = grad(np.asarray(u, dtype=np.float64))
    return float(np.sum(np.sqrt(gx**2 + gy**2)))


def tv_denoise(image, weight: float, n_iter: int = 100, tau: float = 0.125):
    """Approximate ``argmin_x |x - image|^2 + weight * TV(x)``.

    ``tau <= 1/8`` keeps the dual iteration convergent.
    """
    f = np.asarray(image, dtype=np.float64)
    if weight <= 0:
        return f.copy()
    theta = weight / 2.0
    px = np.zeros_like(f)
    py = np.zeros_like(f)
    for _ in range(n_iter):
        gx, gy = grad(div(px, py) - f / theta)
        norm = 1.0 + tau * np.sqrt(gx**2 + gy**2)
        px = (px + tau * gx) / norm
        py = (py + tau * gy) / norm
    return f - theta * div(px, py)
