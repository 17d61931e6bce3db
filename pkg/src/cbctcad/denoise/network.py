"""Small residual encoder-decoder in plain numpy with explicit backprop.

Layout for an input batch ``x`` of shape ``(B, 1, H, W)`` (H, W even)::

    e1 = relu(conv1(x))                 full resolution, C channels
    e2 = relu(conv2(avgpool2(e1)))      half resolution
    d  = relu(conv3(e1 + up2(e2)))      back at full resolution (additive skip)
    y  = x + conv4(d)                   residual noise prediction

All convolutions are 3x3, stride 1, zero padded, computed directly through
sliding windows and ``tensordot``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4")


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-size 3x3 cross-correlation. x: (B,Ci,H,W), w: (Co,Ci,3,3)."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (B,Ci,H,W,3,3)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (B,H,W,Co)
    out = out.transpose(0, 3, 1, 2)
    out += b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x, w, grad_out, need_input_grad=True):
    """Gradients of :func:`conv2d` w.r.t. input, weights and bias."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    gw = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))  # (Co,Ci,3,3)
    gb = grad_out.sum(axis=(0, 2, 3))
    gx = None
    if need_input_grad:
        gp = np.pad(grad_out, ((0, 0), (0, 0), (1, 1), (1, 1)))
        gwin = sliding_window_view(gp, (3, 3), axis=(2, 3))  # (B,Co,H,W,3,3)
        flipped = w[:, :, ::-1, ::-1]
        gx = np.tensordot(gwin, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        gx = np.ascontiguousarray(gx)
    return gx, gw, gb


def avgpool2(x):
    return 0.25 * (x[:, :, 0::2, 0::2] + x[:, :, 1::2, 0::2] + x[:, :, 0::2, 1::2] + x[:, :, 1::2, 1::2])


def avgpool2_backward(g):
    return 0.25 * np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)


def upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2_backward(g):
    return g[:, :, 0::2, 0::2] + g[:, :, 1::2, 0::2] + g[:, :, 0::2, 1::2] + g[:, :, 1::2, 1::2]


def init_params(channels: int, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-initialised weights; the output layer starts at zero so the untrained
    network is exactly the identity map."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDE7015E]))
    c = int(channels)

    def he(co, ci, gain=1.0):
        return (rng.normal(size=(co, ci, 3, 3)) * gain * np.sqrt(2.0 / (ci * 9))).astype(dtype)

    return {
        "w1": he(c, 1),
        "b1": np.zeros(c, dtype),
        "w2": he(c, c),
        "b2": np.zeros(c, dtype),
        "w3": he(c, c),
        "b3": np.zeros(c, dtype),
        "w4": np.zeros((1, c, 3, 3), dtype),
        "b4": np.zeros(1, dtype),
    }


def forward(params, x, keep=False):
    """Run the network on ``x`` (B,1,H,W); optionally return the activation cache."""
    a1 = conv2d(x, params["w1"], params["b1"])
    e1 = np.maximum(a1, 0)
    p1 = avgpool2(e1)
    a2 = conv2d(p1, params["w2"], params["b2"])
    e2 = np.maximum(a2, 0)
    m = e1 + upsample2(e2)
    a3 = conv2d(m, params["w3"], params["b3"])
    d = np.maximum(a3, 0)
    r = conv2d(d, params["w4"], params["b4"])
    y = x + r
    if keep:
        return y, dict(x=x, a1=a1, e1=e1, p1=p1, a2=a2, m=m, a3=a3, d=d)
    return y


def backward(params, cache, grad_y):
    """Parameter gradients given ``dL/dy``."""
    g = {}
    gd, g["w4"], g["b4"] = conv2d_backward(cache["d"], params["w4"], grad_y)
    ga3 = gd * (cache["a3"] > 0)
    gm, g["w3"], g["b3"] = conv2d_backward(cache["m"], params["w3"], ga3)
    ge2 = upsample2_backward(gm)
    ga2 = ge2 * (cache["a2"] > 0)
    gp1, g["w2"], g["b2"] = conv2d_backward(cache["p1"], params["w2"], ga2)
    ge1 = gm + avgpool2_backward(gp1)
    ga1 = ge1 * (cache["a1"] > 0)
    _, g["w1"], g["b1"] = conv2d_backward(cache["x"], params["w1"], ga1, need_input_grad=False)
    return g


def mse_loss_and_grad(params, x, target):
    """Mean squared error over all pixels and its parameter gradients."""
    y, cache = forward(params, x, keep=True)
    diff = y - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad_y = (2.0 / diff.size) * diff
    return loss, backward(params, cache, grad_y.astype(y.dtype))


class Adam:
    """Adaptive-moment optimiser over a dict of arrays (updated in place)."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            mhat = self.m[k] / c1
            vhat = self.v[k] / c2
            params[k] -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(params[k].dtype)
