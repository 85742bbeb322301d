"""Rank-4 tensor primitives with explicit forward/backward passes.

Feature maps are plain numpy arrays in (N, C, H, W) layout.  Every layer is
a static forward/backward pair: ``forward`` caches whatever the backward
pass needs, ``backward`` consumes the cache without destroying it (so it
can be replayed), accumulates parameter gradients into ``Param.grad`` and
returns the gradient with respect to the layer input.  Nothing mutates its
input tensors.
"""

import numpy as np

from .errors import ShapeError


class Param:
    """A learnable array plus its accumulated gradient.

    ``trainable`` gates optimizer updates; ``norm_param`` tags affine /
    mixture parameters of normalization layers so weight decay can skip
    them when configured.
    """

    def __init__(self, value, trainable=True, norm_param=False):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable
        self.norm_param = norm_param

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param(shape={self.value.shape}, trainable={self.trainable})"


class Layer:
    """Base class: a differentiable op with named parameters and state."""

    def params(self):
        """Own (name, Param) pairs, excluding children."""
        return []

    def children(self):
        """Named sub-layers, in forward order."""
        return []

    def buffers(self):
        """Own (name, ndarray) running state, excluding children."""
        return []

    def named_params(self, prefix=""):
        out = [(prefix + name, p) for name, p in self.params()]
        for name, child in self.children():
            out.extend(child.named_params(prefix + name + "."))
        return out

    def named_buffers(self, prefix=""):
        out = [(prefix + name, b) for name, b in self.buffers()]
        for name, child in self.children():
            out.extend(child.named_buffers(prefix + name + "."))
        return out

    def zero_grads(self):
        for _, p in self.named_params():
            p.zero_grad()

    def forward(self, x, mode="train"):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def __call__(self, x, mode="train"):
        return self.forward(x, mode)


def conv_out_size(extent, kernel, stride, pad):
    return (extent + 2 * pad - kernel) // stride + 1


# Scratch arrays for convolution intermediates, keyed by (tag, shape,
# dtype).  Each buffer's lifetime is confined to a single forward or
# backward call, so reuse across layers is safe in the single-threaded
# regime this library targets; returned tensors are always fresh.
_SCRATCH = {}


def _scratch(tag, shape, dtype):
    key = (tag, shape, np.dtype(dtype))
    buf = _SCRATCH.get(key)
    if buf is None:
        buf = np.empty(shape, dtype)
        _SCRATCH[key] = buf
    return buf


def im2col(x, kernel, stride, pad, out=None):
    """Unfold (N,C,H,W) into patch columns of shape (N, C*k*k, OH*OW)."""
    n, c, h, w = x.shape
    oh = conv_out_size(h, kernel, stride, pad)
    ow = conv_out_size(w, kernel, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"kernel {kernel} with pad {pad} does not fit input {h}x{w}"
        )
    if pad > 0:
        key = ("im2col_pad", (n, c, h + 2 * pad, w + 2 * pad), np.dtype(x.dtype))
        xp = _SCRATCH.get(key)
        if xp is None:
            # the border stays zero across reuses; only the interior is
            # rewritten below
            xp = np.zeros(key[1], key[2])
            _SCRATCH[key] = xp
        xp[:, :, pad : pad + h, pad : pad + w] = x
    else:
        xp = x
    if out is None:
        out = np.empty((n, c * kernel * kernel, oh * ow), x.dtype)
    view = out.reshape(n, c, kernel, kernel, oh, ow)
    for i in range(kernel):
        for j in range(kernel):
            view[:, :, i, j] = xp[:, :, i : i + stride * oh : stride,
                                  j : j + stride * ow : stride]
    return out, oh, ow


def col2im(dcols, x_shape, kernel, stride, pad, oh, ow):
    """Scatter-add patch-column gradients (N, C*k*k, OH*OW) back onto the
    input grid; returns a fresh (N,C,H,W) array."""
    n, c, h, w = x_shape
    view = dcols.reshape(n, c, kernel, kernel, oh, ow)
    dxp = _scratch("col2im_pad", (n, c, h + 2 * pad, w + 2 * pad), dcols.dtype)
    if stride == 1:
        # offset (0,0) covers the full output window: assign it, zero only
        # the right/bottom margins it misses, accumulate the rest
        dxp[:, :, oh:, :] = 0.0
        dxp[:, :, :oh, ow:] = 0.0
        dxp[:, :, :oh, :ow] = view[:, :, 0, 0]
    else:
        dxp[...] = 0.0
        dxp[:, :, : stride * oh : stride, : stride * ow : stride] = view[:, :, 0, 0]
    for i in range(kernel):
        for j in range(kernel):
            if i == 0 and j == 0:
                continue
            dxp[:, :, i : i + stride * oh : stride,
                j : j + stride * ow : stride] += view[:, :, i, j]
    if pad > 0:
        return np.ascontiguousarray(dxp[:, :, pad : pad + h, pad : pad + w])
    return dxp.copy()


class Conv2d(Layer):
    """2D convolution without bias (a normalization always follows it).

    Weight layout is (C_out, C_in, k, k); output spatial extent follows
    floor((H + 2*pad - k) / stride) + 1.  Patch columns live in a
    per-layer buffer reused across steps; 1x1 kernels skip the unfold and
    run as pure channel matmuls.
    """

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, pad=0,
                 rng=None, dtype=np.float32):
        if pad < 0 or stride < 1:
            raise ShapeError(f"bad conv geometry: stride={stride}, pad={pad}")
        if rng is None:
            rng = np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                       size=(out_channels, in_channels, kernel_size, kernel_size))
        self.weight = Param(w.astype(dtype))
        self.stride = stride
        self.pad = pad
        self._cols = {}
        self._cache = None

    def params(self):
        return [("weight", self.weight)]

    def _w2(self):
        cout = self.weight.shape[0]
        return self.weight.value.reshape(cout, -1)

    def forward(self, x, mode="train"):
        cout, cin, k, _ = self.weight.shape
        if x.ndim != 4 or x.shape[1] != cin:
            raise ShapeError(f"conv expects (N,{cin},H,W), got {x.shape}")
        n, _, h, w = x.shape
        if k == 1 and self.pad == 0:
            x3 = x[:, :, :: self.stride, :: self.stride]
            oh, ow = x3.shape[2], x3.shape[3]
            x3 = np.ascontiguousarray(x3).reshape(n, cin, oh * ow)
            out = np.empty((n, cout, oh * ow), x.dtype)
            np.matmul(self._w2(), x3, out=out)
            self._cache = (x.shape, x3, oh, ow)
            return out.reshape(n, cout, oh, ow)
        key = (x.shape, np.dtype(x.dtype))
        oh = conv_out_size(h, k, self.stride, self.pad)
        ow = conv_out_size(w, k, self.stride, self.pad)
        cols = self._cols.get(key)
        if cols is None:
            cols = np.empty((n, cin * k * k, oh * ow), x.dtype)
            self._cols[key] = cols
        im2col(x, k, self.stride, self.pad, out=cols)
        out_t = _scratch("conv_out_t", (n, oh * ow, cout), x.dtype)
        np.matmul(cols.transpose(0, 2, 1), self._w2().T, out=out_t)
        out = np.empty((n, cout, oh * ow), x.dtype)
        np.copyto(out, out_t.transpose(0, 2, 1))
        self._cache = (x.shape, cols, oh, ow)
        return out.reshape(n, cout, oh, ow)

    def backward(self, dout):
        x_shape, cols, oh, ow = self._cache
        cout, cin, k, _ = self.weight.shape
        n = x_shape[0]
        d3 = dout.reshape(n, cout, oh * ow)
        if k == 1 and self.pad == 0:
            dw_n = _scratch("conv_dw", (n, cout, cin), dout.dtype)
            np.matmul(d3, cols.transpose(0, 2, 1), out=dw_n)
            self.weight.grad += dw_n.sum(axis=0).reshape(self.weight.shape)
            dx3 = np.matmul(self._w2().T, d3)
            if self.stride == 1:
                return dx3.reshape(n, cin, x_shape[2], x_shape[3])
            dx = np.zeros(x_shape, dtype=dout.dtype)
            dx[:, :, :: self.stride, :: self.stride] = dx3.reshape(
                n, cin, oh, ow)
            return dx
        ckk = cin * k * k
        dw_n = _scratch("conv_dw", (n, cout, ckk), dout.dtype)
        np.matmul(d3, cols.transpose(0, 2, 1), out=dw_n)
        self.weight.grad += dw_n.sum(axis=0).reshape(self.weight.shape)
        dcols = _scratch("conv_dcols", (n, ckk, oh * ow), dout.dtype)
        np.matmul(self._w2().T, d3, out=dcols)
        return col2im(dcols, x_shape, k, self.stride, self.pad, oh, ow)


class Linear(Layer):
    """Fully-connected map of (N, D_in) rows; weight layout (D_out, D_in)."""

    def __init__(self, in_features, out_features, bias=True, rng=None,
                 dtype=np.float32, weight_scale=None):
        if rng is None:
            rng = np.random.default_rng(0)
        if weight_scale is None:
            weight_scale = 1.0 / np.sqrt(in_features)
        w = rng.uniform(-weight_scale, weight_scale, size=(out_features, in_features))
        self.weight = Param(w.astype(dtype))
        self.bias = Param(np.zeros(out_features, dtype=dtype)) if bias else None
        self._x = None

    def params(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def forward(self, x, mode="train"):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ShapeError(
                f"linear expects (N,{self.weight.shape[1]}), got {x.shape}"
            )
        self._x = x
        out = x @ self.weight.value.T
        if self.bias is not None:
            out = out + self.bias.value
        return out

    def backward(self, dout):
        self.weight.grad += dout.T @ self._x
        if self.bias is not None:
            self.bias.grad += dout.sum(axis=0)
        return dout @ self.weight.value


class ReLU(Layer):
    """max(x, 0); the derivative at exactly 0 is defined as 0."""

    def __init__(self):
        self._mask = None

    def forward(self, x, mode="train"):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class GlobalAvgPool(Layer):
    """Mean over the spatial extent, keeping a 1x1 spatial footprint."""

    def __init__(self):
        self._shape = None

    def forward(self, x, mode="train"):
        self._shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, dout):
        n, c, h, w = self._shape
        return np.broadcast_to(dout / (h * w), self._shape).copy()


class MaxPool2d(Layer):
    """Max pooling; ties resolve to the first maximal position."""

    def __init__(self, kernel_size=3, stride=2, pad=1):
        self.kernel = kernel_size
        self.stride = stride
        self.pad = pad
        self._cache = None

    def forward(self, x, mode="train"):
        n, c, h, w = x.shape
        k, stride, pad = self.kernel, self.stride, self.pad
        oh = conv_out_size(h, k, stride, pad)
        ow = conv_out_size(w, k, stride, pad)
        if pad > 0:
            xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                        constant_values=-np.inf)
        else:
            xp = x
        xp = np.ascontiguousarray(xp)
        s = xp.strides
        windows = np.lib.stride_tricks.as_strided(
            xp,
            shape=(n, c, k, k, oh, ow),
            strides=(s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride),
        )
        flat = windows.reshape(n, c, k * k, oh, ow)
        arg = flat.argmax(axis=2)
        out = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]
        self._cache = (x.shape, arg, oh, ow)
        return out

    def backward(self, dout):
        x_shape, arg, oh, ow = self._cache
        n, c, h, w = x_shape
        k, stride, pad = self.kernel, self.stride, self.pad
        dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dout.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                dout * (arg == idx)
            )
        if pad > 0:
            return np.ascontiguousarray(dxp[:, :, pad : pad + h, pad : pad + w])
        return dxp


class Flatten(Layer):
    """(N, C, 1, 1) -> (N, C), or more generally flattens trailing axes."""

    def __init__(self):
        self._shape = None

    def forward(self, x, mode="train"):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)
