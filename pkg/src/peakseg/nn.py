"""Small numpy neural-network toolkit: conv/linear layers with backprop,
SGD with momentum, RoI pooling, and resize helpers.

Everything runs in float64 on (N, C, H, W) arrays. Convolutions use an
im2col layout so the heavy lifting is a single matmul per layer.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Conv2d:
    """3x3-style convolution with 'same' padding by default."""

    def __init__(self, c_in: int, c_out: int, ksize: int, stride: int = 1,
                 pad: int | None = None, rng: np.random.Generator | None = None):
        self.c_in, self.c_out, self.ksize = c_in, c_out, ksize
        self.stride = stride
        self.pad = ksize // 2 if pad is None else pad
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * ksize * ksize
        self.w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, fan_in))
        self.b = np.zeros(c_out)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._cache = None

    def trainable(self):
        return ("w", "b")

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        if c != self.c_in:
            raise ValueError(f"expected {self.c_in} input channels, got {c}")
        k, s, p = self.ksize, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n_, _, ho, wo, _, _ = win.shape
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * k * k)
        out = cols @ self.w.T + self.b
        self._cache = (cols, x.shape, ho, wo)
        return out.transpose(0, 2, 1).reshape(n, self.c_out, ho, wo)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        cols, x_shape, ho, wo = self._cache
        n, c, h, w = x_shape
        k, s, p = self.ksize, self.stride, self.pad
        dflat = dout.reshape(n, self.c_out, ho * wo).transpose(0, 2, 1)
        self.dw = np.einsum("npc,npk->ck", dflat, cols)
        self.db = dflat.sum(axis=(0, 1))
        dcols = (dflat @ self.w).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += \
                    dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + w] if p else dxp


class ReLU:
    def __init__(self):
        self._mask = None

    def trainable(self):
        return ()

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0.0)


class Linear:
    def __init__(self, c_in: int, c_out: int,
                 rng: np.random.Generator | None = None, w_scale: float | None = None):
        rng = rng or np.random.default_rng(0)
        scale = np.sqrt(2.0 / c_in) if w_scale is None else w_scale
        self.w = rng.normal(0.0, scale, size=(c_out, c_in))
        self.b = np.zeros(c_out)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._x = None

    def trainable(self):
        return ("w", "b")

    def forward(self, x):
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, dout):
        self.dw = dout.T @ self._x
        self.db = dout.sum(axis=0)
        return dout @ self.w


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def trainable(self):
        return ()

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


def iter_params(module, prefix=""):
    """Yield (name, layer, attr) triples for every trainable array."""
    if isinstance(module, Sequential):
        for i, layer in enumerate(module.layers):
            yield from iter_params(layer, f"{prefix}{i}.")
    else:
        for attr in module.trainable():
            yield f"{prefix}{attr}", module, attr


class SGD:
    """Plain SGD with momentum; updates parameters in place."""

    def __init__(self, modules: dict, lr: float, momentum: float = 0.9):
        self.entries = []
        for mod_name, module in modules.items():
            for name, layer, attr in iter_params(module, f"{mod_name}."):
                self.entries.append((name, layer, attr))
        self.lr = lr
        self.momentum = momentum
        self.vel = {name: np.zeros_like(getattr(layer, attr))
                    for name, layer, attr in self.entries}

    def step(self):
        for name, layer, attr in self.entries:
            g = getattr(layer, "d" + attr)
            v = self.vel[name]
            v *= self.momentum
            v += g
            getattr(layer, attr)[...] -= self.lr * v

    def grad_norm(self) -> float:
        total = 0.0
        for _, layer, attr in self.entries:
            g = getattr(layer, "d" + attr)
            total += float((g * g).sum())
        return float(np.sqrt(total))


def state_dict(modules: dict) -> dict[str, np.ndarray]:
    out = {}
    for mod_name, module in modules.items():
        for name, layer, attr in iter_params(module, f"{mod_name}."):
            out[name] = getattr(layer, attr).copy()
    return out


def load_state_dict(modules: dict, state: dict[str, np.ndarray]) -> None:
    for mod_name, module in modules.items():
        for name, layer, attr in iter_params(module, f"{mod_name}."):
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in state")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != getattr(layer, attr).shape:
                raise ValueError(f"shape mismatch for {name!r}: "
                                 f"{arr.shape} vs {getattr(layer, attr).shape}")
            setattr(layer, attr, arr.copy())
            setattr(layer, "d" + attr, np.zeros_like(arr))


# ---------------------------------------------------------------------------
# RoI pooling (grid-sampled bilinear) and resize helpers
# ---------------------------------------------------------------------------

def _sample_coords(lo: float, hi: float, n: int) -> np.ndarray:
    """Centers of n cells spanning [lo, hi) in source coordinates."""
    return lo + (np.arange(n) + 0.5) * (hi - lo) / n - 0.5


def roi_align(feat: np.ndarray, boxes: np.ndarray, out_size: int,
              feat_stride: float):
    """Pool an (C, Hf, Wf) feature map over boxes into (R, C, S, S).

    Boxes are inclusive pixel coordinates [r0, c0, r1, c1] at image
    resolution. Returns (pooled, cache); pass the cache and upstream
    gradient to :func:`roi_align_backward`.
    """
    c, hf, wf = feat.shape
    boxes = np.atleast_2d(np.asarray(boxes, dtype=np.float64))
    r = boxes.shape[0]
    s = out_size
    pooled = np.empty((r, c, s, s))
    cache = []
    for k in range(r):
        r0, c0, r1, c1 = boxes[k]
        ys = np.clip(_sample_coords(r0 / feat_stride, (r1 + 1) / feat_stride, s),
                     0, hf - 1)
        xs = np.clip(_sample_coords(c0 / feat_stride, (c1 + 1) / feat_stride, s),
                     0, wf - 1)
        y0 = np.floor(ys).astype(np.int64)
        x0 = np.floor(xs).astype(np.int64)
        y1 = np.minimum(y0 + 1, hf - 1)
        x1 = np.minimum(x0 + 1, wf - 1)
        wy = ys - y0
        wx = xs - x0
        fy = feat[:, y0, :] * (1 - wy)[None, :, None] + feat[:, y1, :] * wy[None, :, None]
        pooled[k] = fy[:, :, x0] * (1 - wx) + fy[:, :, x1] * wx
        cache.append((y0, y1, x0, x1, wy, wx))
    return pooled, (cache, feat.shape)


def roi_align_backward(dpooled: np.ndarray, cache) -> np.ndarray:
    entries, feat_shape = cache
    c, hf, wf = feat_shape
    dfeat = np.zeros(feat_shape)
    s = dpooled.shape[-1]
    for k, (y0, y1, x0, x1, wy, wx) in enumerate(entries):
        dfy = np.zeros((c, s, wf))
        np.add.at(dfy, (slice(None), slice(None), x0), dpooled[k] * (1 - wx))
        np.add.at(dfy, (slice(None), slice(None), x1), dpooled[k] * wx)
        np.add.at(dfeat, (slice(None), y0, slice(None)), dfy * (1 - wy)[None, :, None])
        np.add.at(dfeat, (slice(None), y1, slice(None)), dfy * wy[None, :, None])
    return dfeat


def crop_resize_nearest(mask: np.ndarray, box, out_size: int) -> np.ndarray:
    """Crop a mask to an inclusive box and resample to out_size x out_size."""
    r0, c0, r1, c1 = [float(v) for v in box]
    h, w = mask.shape
    ys = np.clip(np.floor(_sample_coords(r0, r1 + 1, out_size) + 0.5), 0, h - 1).astype(np.int64)
    xs = np.clip(np.floor(_sample_coords(c0, c1 + 1, out_size) + 0.5), 0, w - 1).astype(np.int64)
    return mask[np.ix_(ys, xs)]


def resize_bilinear(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly resize a 2D array (cell-center alignment)."""
    h, w = grid.shape
    ys = np.clip(_sample_coords(0, h, out_h), 0, h - 1)
    xs = np.clip(_sample_coords(0, w, out_w), 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bot = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy
