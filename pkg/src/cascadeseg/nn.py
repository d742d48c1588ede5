"""3D network primitives on [N, C, D, H, W] tensors.

Conv is the single 3x3x3 / stride 1 / zero-pad 1 variant used everywhere;
it runs as im2col plus one matmul, and its backward rebuilds the column
matrix from the saved input instead of retaining it. Pooling, upsampling
and batchnorm follow the same rule: backward recomputes from the tensors
the graph already holds, so no op keeps hidden full-size buffers alive.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _make

_KERNEL = 3
_PAD = 1


class Parameter:
    """Named trainable tensor; the grad accumulator lives on .value."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = Tensor(np.asarray(value), requires_grad=True)

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self):
        return self.value.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _im2col(arr: np.ndarray) -> np.ndarray:
    # [n,c,d,h,w] -> [n*d*h*w, c*27] with columns ordered (c, kz, ky, kx)
    n, c, d, h, w = arr.shape
    padded = np.pad(arr, ((0, 0), (0, 0), (_PAD, _PAD), (_PAD, _PAD), (_PAD, _PAD)))
    win = sliding_window_view(padded, (_KERNEL, _KERNEL, _KERNEL), axis=(2, 3, 4))
    # win: [n, c, d, h, w, 3, 3, 3]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * d * h * w, c * 27)
    return np.ascontiguousarray(cols)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3x3 convolution, stride 1, zero padding 1, shape-preserving."""
    xd, wd, bd = x.data, weight.data, bias.data
    if xd.ndim != 5:
        raise ShapeError(f"conv3d: input must be 5-d [N,C,D,H,W], got {xd.shape}")
    if wd.ndim != 5 or wd.shape[2:] != (_KERNEL, _KERNEL, _KERNEL):
        raise ShapeError(f"conv3d: weight must be [Cout,Cin,3,3,3], got {wd.shape}")
    n, cin, d, h, w = xd.shape
    cout = wd.shape[0]
    if wd.shape[1] != cin:
        raise ShapeError(f"conv3d: input has {cin} channels, weight expects {wd.shape[1]}")
    if bd.shape != (cout,):
        raise ShapeError(f"conv3d: bias shape {bd.shape} does not match {cout} output channels")

    cols = _im2col(xd)
    out = cols @ wd.reshape(cout, cin * 27).T
    out += bd[None, :]
    out_data = np.ascontiguousarray(out.reshape(n, d, h, w, cout).transpose(0, 4, 1, 2, 3))
    del cols  # transient; rebuilt on demand in backward

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, cout)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (g2.T @ _im2col(xd)).reshape(wd.shape)
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            # transposed convolution: correlate g with the channel-swapped,
            # spatially flipped kernel
            wt = wd.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1]
            gcols = _im2col(g)
            gx = gcols @ np.ascontiguousarray(wt).reshape(cin, cout * 27).T
            gx = np.ascontiguousarray(gx.reshape(n, d, h, w, cin).transpose(0, 4, 1, 2, 3))
        return gx, gw, gb

    return _make("conv3d", out_data, (x, weight, bias), bwd)


# ---------------------------------------------------------------------------
# pooling / upsampling
# ---------------------------------------------------------------------------


def maxpool3d(x: Tensor) -> Tensor:
    """2x2x2 max pooling, stride 2. Ties route the gradient to the first
    maximum in scan order; backward recomputes the argmax from the input."""
    xd = x.data
    n, c, d, h, w = xd.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"maxpool3d: spatial dims must be even, got {(d, h, w)}")
    d2, h2, w2 = d // 2, h // 2, w // 2

    def _blocks(arr):
        b = arr.reshape(n, c, d2, 2, h2, 2, w2, 2)
        return b.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, d2, h2, w2, 8)

    out_data = _blocks(xd).max(axis=-1)

    def bwd(g):
        blocks = _blocks(xd)
        idx = np.argmax(blocks, axis=-1)  # first max in scan order
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, d2, h2, w2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (np.ascontiguousarray(gx.reshape(n, c, d, h, w)),)

    return _make("maxpool3d", out_data, (x,), bwd)


def upsample_nearest3d(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by factor 2 along each spatial axis."""
    xd = x.data
    n, c, d, h, w = xd.shape
    out_data = xd.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)

    def bwd(g):
        gx = g.reshape(n, c, d, 2, h, 2, w, 2).sum(axis=(3, 5, 7))
        return (gx,)

    return _make("upsample_nearest3d", out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


class BatchNormState:
    """Per-channel affine parameters plus running statistics.

    scale starts at 1, shift at 0. Running stats update only in training
    mode; eval mode before any update is an error.
    """

    def __init__(self, name: str, channels: int, momentum: float = 0.1,
                 eps: float = 1e-5, dtype=np.float64):
        self.name = name
        self.channels = channels
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.scale = Parameter(f"{name}.scale", np.ones(channels, dtype=dtype))
        self.shift = Parameter(f"{name}.shift", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.initialized = False


def _chan(v: np.ndarray) -> np.ndarray:
    return v.reshape(1, -1, 1, 1, 1)


def batchnorm3d(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Channelwise batchnorm over (N, D, H, W).

    Training mode normalizes with biased batch statistics and updates the
    running estimates (unbiased variance). Backward reconstructs the
    normalized input from the op's own output, so only per-channel vectors
    are carried between forward and backward.
    """
    xd = x.data
    if xd.ndim != 5:
        raise ShapeError(f"batchnorm3d: input must be 5-d, got {xd.shape}")
    if xd.shape[1] != state.channels:
        raise ShapeError(
            f"batchnorm3d[{state.name}]: {xd.shape[1]} channels, state holds {state.channels}")
    gamma, beta = state.scale.value, state.shift.value
    axes = (0, 2, 3, 4)
    n_red = xd.shape[0] * xd.shape[2] * xd.shape[3] * xd.shape[4]

    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)  # biased
        ivar = 1.0 / np.sqrt(var + state.eps)
        xhat = (xd - _chan(mean)) * _chan(ivar)
        out_data = xhat * _chan(gamma.data) + _chan(beta.data)

        m = state.momentum
        unbiased = var * (n_red / (n_red - 1)) if n_red > 1 else var
        state.running_mean = (1 - m) * state.running_mean + m * mean
        state.running_var = (1 - m) * state.running_var + m * unbiased
        state.initialized = True
        del xhat

        def bwd(g):
            # rebuild xhat from this op's output
            gsafe = np.where(np.abs(gamma.data) < 1e-12, 1e-12, gamma.data)
            xh = (out_data - _chan(beta.data)) / _chan(gsafe)
            gb = gg = gx = None
            if beta.requires_grad:
                gb = g.sum(axis=axes)
            if gamma.requires_grad:
                gg = (g * xh).sum(axis=axes)
            if x.requires_grad:
                gsum = g.sum(axis=axes)
                gxhsum = (g * xh).sum(axis=axes)
                gx = (_chan(gamma.data * ivar) / n_red) * (
                    n_red * g - _chan(gsum) - xh * _chan(gxhsum))
            return gx, gg, gb

        return _make("batchnorm3d", out_data, (x, gamma, beta), bwd)

    if not state.initialized:
        raise RuntimeError(f"batchnorm3d[{state.name}]: eval mode before any training update")
    irstd = 1.0 / np.sqrt(state.running_var + state.eps)
    rm = state.running_mean
    out_data = (xd - _chan(rm)) * _chan(irstd * gamma.data) + _chan(beta.data)

    def bwd_eval(g):
        gb = gg = gx = None
        if beta.requires_grad:
            gb = g.sum(axis=axes)
        if gamma.requires_grad:
            gg = (g * (xd - _chan(rm)) * _chan(irstd)).sum(axis=axes)
        if x.requires_grad:
            gx = g * _chan(gamma.data * irstd)
        return gx, gg, gb

    return _make("batchnorm3d", out_data, (x, gamma, beta), bwd_eval)


# ---------------------------------------------------------------------------
# activations / probabilities
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def bwd(g):
        return (g * (out_data > 0),)

    return _make("relu", out_data, (x,), bwd)


def softmax_channels(x: Tensor) -> Tensor:
    """Numerically stable softmax over the channel axis (axis 1)."""
    xd = x.data
    shifted = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        return (out_data * (g - dot),)

    return _make("softmax", out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# label utilities (plain numpy; labels are not differentiable)
# ---------------------------------------------------------------------------


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    """Integer label volume [D,H,W] or [N,D,H,W] to channel-first one-hot."""
    lab = np.asarray(labels)
    if lab.min() < 0 or lab.max() >= num_classes:
        raise ValueError(
            f"one_hot: labels must lie in [0, {num_classes}), got range "
            f"[{lab.min()}, {lab.max()}]")
    eye = np.eye(num_classes, dtype=dtype)
    oh = eye[lab]  # [..., K]
    return np.ascontiguousarray(np.moveaxis(oh, -1, lab.ndim - 3))


def downsample_labels_nearest(labels: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour label downsampling: output voxel i takes input f*i."""
    f = int(factor)
    lab = np.asarray(labels)
    sl = (Ellipsis, slice(None, None, f), slice(None, None, f), slice(None, None, f))
    return np.ascontiguousarray(lab[sl])
