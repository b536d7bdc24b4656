"""Minimal deterministic CPU neural-network engine.

Layers operate on (N, C, H, W) float arrays, carry their own parameters,
and implement exact analytic backward passes.  Convolutions are lowered to
BLAS matmuls through im2col; the big intermediate buffers are recycled
through a thread-local pool because repeated fresh allocations of
100+ MB arrays cost more than the matmuls themselves on one core.
Everything is pure numpy: results depend only on inputs and weights,
never on thread count or call order.
"""

import threading

import numpy as np

from .errors import OptimizerError, ShapeError

_scratch = threading.local()


def _borrow(shape, dtype):
    pool = getattr(_scratch, "pool", None)
    if pool is None:
        pool = _scratch.pool = {}
    key = (tuple(shape), np.dtype(dtype).str)
    stack = pool.get(key)
    if stack:
        return stack.pop()
    return np.empty(shape, dtype)


def _release(*arrays):
    pool = getattr(_scratch, "pool", None)
    if pool is None:
        pool = _scratch.pool = {}
    for arr in arrays:
        if arr is None:
            continue
        pool.setdefault((arr.shape, arr.dtype.str), []).append(arr)


def clear_scratch():
    """Drop this thread's recycled buffers (frees memory between stages)."""
    _scratch.pool = {}


def _as_batched(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[np.newaxis], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")


def _fill_im2col(cols, xpad, k, H, W):
    """cols (N, C, k*k, H*W) <- sliding k x k patches of xpad."""
    N, C = xpad.shape[:2]
    view = cols.reshape(N, C, k * k, H, W)
    for dy in range(k):
        for dx in range(k):
            view[:, :, dy * k + dx] = xpad[:, :, dy : dy + H, dx : dx + W]
    return cols.reshape(N, C * k * k, H * W)


def _col2im(dcols, k, N, C, H, W, pad):
    dxpad = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=dcols.dtype)
    view = dcols.reshape(N, C, k * k, H, W)
    for dy in range(k):
        for dx in range(k):
            dxpad[:, :, dy : dy + H, dx : dx + W] += view[:, :, dy * k + dx]
    if pad:
        return np.ascontiguousarray(dxpad[:, :, pad:-pad, pad:-pad])
    return dxpad


class Conv2D:
    """Same-padding 2D cross-correlation, square odd kernel (3x3 or 1x1)."""

    def __init__(self, in_ch, out_ch, kernel=3, rng=None, dtype=np.float32):
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, kernel
        bound = np.sqrt(6.0 / (in_ch * kernel * kernel))
        rng = rng or np.random.default_rng(0)
        self.W = rng.uniform(-bound, bound, (out_ch, in_ch, kernel, kernel)).astype(dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.dW = self.db = None
        self._cache = None

    def _pad_input(self, x):
        N, C, H, W = x.shape
        pad = self.k // 2
        xpad = _borrow((N, C, H + 2 * pad, W + 2 * pad), x.dtype)
        xpad[:, :, :pad, :] = 0
        xpad[:, :, H + pad :, :] = 0
        xpad[:, :, :, :pad] = 0
        xpad[:, :, :, W + pad :] = 0
        xpad[:, :, pad : H + pad, pad : W + pad] = x
        return xpad

    def forward(self, x):
        x, squeeze = _as_batched(x)
        N, C, H, W = x.shape
        if C != self.in_ch:
            raise ShapeError(
                f"conv2d got {x.shape} but weights expect {self.in_ch} input channels "
                f"(weight shape {self.W.shape})"
            )
        if self._cache is not None and self._cache[0] is not None:
            _release(self._cache[0])  # previous padded input is dead by now
        y = np.empty((N, self.out_ch, H * W), dtype=x.dtype)
        W2 = self.W.reshape(self.out_ch, -1)
        if x.dtype != self.W.dtype:
            W2 = W2.astype(x.dtype)
        if self.k == 1:
            np.matmul(W2, x.reshape(N, C, H * W), out=y)
            self._cache = (None, x, x.shape, squeeze)
        else:
            xpad = self._pad_input(x)
            cols = _borrow((N, C, self.k * self.k, H * W), x.dtype)
            flat = _fill_im2col(cols, xpad, self.k, H, W)
            np.matmul(W2, flat, out=y)
            _release(cols)
            self._cache = (xpad, None, x.shape, squeeze)
        b = self.b if self.b.dtype == x.dtype else self.b.astype(x.dtype)
        y += b[:, np.newaxis]
        y = y.reshape(N, self.out_ch, H, W)
        return y[0] if squeeze else y

    def backward(self, g):
        xpad, x, xshape, squeeze = self._cache
        g, _ = _as_batched(g)
        N, C, H, W = xshape
        g2 = np.ascontiguousarray(g.reshape(N, self.out_ch, H * W))
        W2 = self.W.reshape(self.out_ch, -1)
        if g2.dtype != W2.dtype:
            W2 = W2.astype(g2.dtype)
        if self.k == 1:
            flat = x.reshape(N, C, H * W)
            self.dW = np.matmul(g2, flat.transpose(0, 2, 1)).sum(axis=0).reshape(self.W.shape)
            self.db = g2.sum(axis=(0, 2))
            dx = np.matmul(W2.T, g2).reshape(xshape)
            return dx[0] if squeeze else dx
        cols = _borrow((N, C, self.k * self.k, H * W), g2.dtype)
        flat = _fill_im2col(cols, xpad, self.k, H, W)
        self.dW = np.matmul(g2, flat.transpose(0, 2, 1)).sum(axis=0).reshape(self.W.shape)
        self.db = g2.sum(axis=(0, 2))
        dcols = _borrow((N, C * self.k * self.k, H * W), g2.dtype)
        np.matmul(W2.T, g2, out=dcols)
        dx = _col2im(dcols, self.k, N, C, H, W, self.k // 2)
        _release(cols, dcols)
        return dx[0] if squeeze else dx

    def params(self):
        return {"W": self.W, "b": self.b}

    def grads(self):
        return {"W": self.dW, "b": self.db}


class ConvTranspose2D:
    """Transpose of the stride-2 convolution with a 2x2 kernel: exact 2x upsample."""

    def __init__(self, in_ch, out_ch, rng=None, dtype=np.float32):
        self.in_ch, self.out_ch = in_ch, out_ch
        bound = np.sqrt(6.0 / (in_ch * 4))
        rng = rng or np.random.default_rng(0)
        self.W = rng.uniform(-bound, bound, (out_ch, in_ch, 2, 2)).astype(dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.dW = self.db = None
        self._cache = None

    def forward(self, x):
        x, squeeze = _as_batched(x)
        N, C, H, W = x.shape
        if C != self.in_ch:
            raise ShapeError(
                f"conv2d_transpose got {x.shape} but weights expect {self.in_ch} "
                f"input channels (weight shape {self.W.shape})"
            )
        Wm = self.W if self.W.dtype == x.dtype else self.W.astype(x.dtype)
        # out[n, o, 2i+d, 2j+e] = sum_c x[n,c,i,j] * W[o,c,d,e] + b[o]
        prod = np.matmul(
            Wm.transpose(2, 3, 0, 1).reshape(4 * self.out_ch, C),
            x.reshape(N, C, H * W),
        )  # (N, (d e o), H*W)
        prod = prod.reshape(N, 2, 2, self.out_ch, H, W)
        y = np.ascontiguousarray(prod.transpose(0, 3, 4, 1, 5, 2)).reshape(
            N, self.out_ch, 2 * H, 2 * W
        )
        b = self.b if self.b.dtype == x.dtype else self.b.astype(x.dtype)
        y += b[:, np.newaxis, np.newaxis]
        self._cache = (x, squeeze)
        return y[0] if squeeze else y

    def backward(self, g):
        x, squeeze = self._cache
        g, _ = _as_batched(g)
        N, C, H, W = x.shape
        gw = g.reshape(N, self.out_ch, H, 2, W, 2)
        self.dW = np.einsum("noidje,ncij->ocde", gw, x, optimize=True)
        self.db = g.sum(axis=(0, 2, 3))
        Wm = self.W if self.W.dtype == g.dtype else self.W.astype(g.dtype)
        dx = np.einsum("noidje,ocde->ncij", gw, Wm, optimize=True)
        return dx[0] if squeeze else dx

    def params(self):
        return {"W": self.W, "b": self.b}

    def grads(self):
        return {"W": self.dW, "b": self.db}


class MaxPool2:
    """2x2 max pooling, stride 2; gradient routes to the first max per window."""

    def forward(self, x):
        x, squeeze = _as_batched(x)
        N, C, H, W = x.shape
        if H % 2 or W % 2:
            raise ShapeError(f"maxpool2 needs even spatial dims, got {H}x{W}")
        win = x.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(N, C, H // 2, W // 2, 4)
        y = win.max(axis=-1)
        self._cache = (x, squeeze)
        return y[0] if squeeze else y

    def backward(self, g):
        x, squeeze = self._cache
        g, _ = _as_batched(g)
        N, C, H, W = x.shape
        win = x.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(N, C, H // 2, W // 2, 4)
        idx = np.argmax(win, axis=-1)  # first max wins ties
        dwin = np.zeros((N, C, H // 2, W // 2, 4), dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., np.newaxis], g[..., np.newaxis], axis=-1)
        dx = dwin.reshape(N, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx = dx.reshape(N, C, H, W)
        return dx[0] if squeeze else dx

    def params(self):
        return {}

    def grads(self):
        return {}


class ReLU:
    def forward(self, x):
        y = np.maximum(x, 0)
        self._y = y
        return y

    def backward(self, g):
        return np.where(self._y > 0, g, 0)

    def params(self):
        return {}

    def grads(self):
        return {}


class SoftmaxChannels:
    """Softmax over the channel axis of (N, C, H, W) or (C, ...) arrays."""

    def forward(self, x):
        x = np.asarray(x)
        squeeze = False
        axis = 0
        if x.ndim == 4:
            axis = 1
        elif x.ndim == 3:
            x, squeeze = x[np.newaxis], True
            axis = 1
        y = x - x.max(axis=axis, keepdims=True)
        np.exp(y, out=y)
        y /= y.sum(axis=axis, keepdims=True)
        self._cache = (y, axis, squeeze)
        return y[0] if squeeze else y

    def backward(self, g):
        y, axis, squeeze = self._cache
        if squeeze:
            g = np.asarray(g)[np.newaxis]
        dx = y * (g - (g * y).sum(axis=axis, keepdims=True))
        return dx[0] if squeeze else dx

    def params(self):
        return {}

    def grads(self):
        return {}


class PointwiseConv3D:
    """Kernel-size-1 3D convolution: per-voxel affine map over channels.

    Input (C_in, D, H, W) -> output (C_out, D, H, W); no spatial mixing.
    """

    def __init__(self, in_ch, out_ch, bias=True, rng=None, dtype=np.float32):
        self.in_ch, self.out_ch = in_ch, out_ch
        bound = np.sqrt(6.0 / in_ch)
        rng = rng or np.random.default_rng(0)
        self.W = rng.uniform(-bound, bound, (out_ch, in_ch)).astype(dtype)
        self.b = np.zeros(out_ch, dtype=dtype) if bias else None
        self.dW = self.db = None

    def forward(self, x):
        x = np.asarray(x)
        if x.shape[0] != self.in_ch:
            raise ShapeError(
                f"pointwise conv got {x.shape[0]} channels, weights expect {self.in_ch}"
            )
        self._x = x
        W = self.W if self.W.dtype == x.dtype else self.W.astype(x.dtype)
        flat = x.reshape(self.in_ch, -1)
        y = (W @ flat).reshape((self.out_ch,) + x.shape[1:])
        if self.b is not None:
            y += self.b.astype(x.dtype).reshape((self.out_ch,) + (1,) * (x.ndim - 1))
        return y

    def backward(self, g):
        g = np.asarray(g)
        gflat = g.reshape(self.out_ch, -1)
        xflat = self._x.reshape(self.in_ch, -1)
        self.dW = gflat @ xflat.T
        if self.b is not None:
            self.db = gflat.sum(axis=1)
        W = self.W if self.W.dtype == g.dtype else self.W.astype(g.dtype)
        return (W.T @ gflat).reshape(self._x.shape)

    def params(self):
        p = {"W": self.W}
        if self.b is not None:
            p["b"] = self.b
        return p

    def grads(self):
        g = {"W": self.dW}
        if self.b is not None:
            g["b"] = self.db
        return g


def relu(x):
    return np.maximum(x, 0)


def softmax_channels(x, axis=0):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def dice_loss(probs, truth, class_weights=None, eps=1e-6):
    """Multiclass soft Dice loss and its gradient with respect to `probs`.

    probs, truth: (C, ...) arrays; truth one-hot.  Returns (loss, dprobs).
    loss = 1 - (2 * sum_c w_c sum_v p*g + eps) / (sum_c w_c sum_v (p+g) + eps)
    """
    probs = np.asarray(probs)
    truth = np.asarray(truth)
    if probs.shape != truth.shape:
        raise ShapeError(f"probs {probs.shape} vs truth {truth.shape}")
    C = probs.shape[0]
    if class_weights is None:
        w = np.ones(C, dtype=np.float64)
    else:
        w = np.asarray(class_weights, dtype=np.float64)
        if w.shape != (C,):
            raise ShapeError(f"class_weights shape {w.shape}, expected ({C},)")
    pf = probs.reshape(C, -1)
    gf = truth.reshape(C, -1)
    inter = np.einsum(
        "cv,cv->c",
        pf.astype(np.float64, copy=False),
        gf.astype(np.float64, copy=False),
    )
    totals = pf.sum(axis=1, dtype=np.float64) + gf.sum(axis=1, dtype=np.float64)
    A = float(w @ inter)
    B = float(w @ totals)
    loss = 1.0 - (2.0 * A + eps) / (B + eps)
    denom = (B + eps) ** 2
    coeff_g = 2.0 * (B + eps) / denom
    coeff_const = (2.0 * A + eps) / denom
    dprobs = (w[:, np.newaxis] * (coeff_const - coeff_g * gf)).reshape(probs.shape)
    return loss, dprobs.astype(probs.dtype, copy=False)


class Adam:
    """Bias-corrected Adam with per-parameter moment state."""

    def __init__(self, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        """One update over dicts name -> array; params are updated in place."""
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if g is None or not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient for parameter '{name}'")
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
        return params


def layer_to_dtype(layer, dtype):
    """Cast a layer's parameters (64-bit gradient-check mode helper)."""
    for name, p in layer.params().items():
        setattr(layer, name, p.astype(dtype))
    return layer


def finite_difference_check(layer, x, step=1e-5, seed=0, skip_params=False):
    """Max relative error between analytic and central-difference gradients.

    Projects the layer output against a fixed random tensor to obtain a
    scalar objective, then compares layer.backward (plus parameter grads)
    against central finite differences, coordinate by coordinate.
    Relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    rng = np.random.default_rng(seed)
    x = np.ascontiguousarray(x, dtype=np.float64)
    layer_to_dtype(layer, np.float64)
    y0 = layer.forward(x)
    R = rng.standard_normal(y0.shape)

    def objective():
        return float(np.sum(layer.forward(x) * R))

    layer.forward(x)
    analytic = {"input": np.asarray(layer.backward(R))}
    for name, g in layer.grads().items():
        if not skip_params:
            analytic[name] = np.asarray(g)

    worst = 0.0
    tensors = {"input": x}
    if not skip_params:
        tensors.update(layer.params())
    for name, t in tensors.items():
        a = analytic[name]
        flat = t.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = objective()
            flat[i] = orig - step
            lo = objective()
            flat[i] = orig
            n = (hi - lo) / (2.0 * step)
            ai = a.reshape(-1)[i]
            err = abs(ai - n) / max(abs(ai), abs(n), 1e-8)
            worst = max(worst, err)
    layer.forward(x)  # leave caches consistent with the unperturbed input
    return worst


def finite_difference_loss(fn, x, analytic, step=1e-5):
    """Compare an analytic gradient of scalar fn(x) against central differences."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    analytic = np.asarray(analytic)
    worst = 0.0
    flat = x.reshape(-1)
    aflat = analytic.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        n = (hi - lo) / (2.0 * step)
        err = abs(aflat[i] - n) / max(abs(aflat[i]), abs(n), 1e-8)
        worst = max(worst, err)
    return worst
