"""Differentiable primitives.

Convolutions take ``[C, D, H, W]`` single volumes or ``[N, C, D, H, W]``
batches; kernels are ``[C_out, C_in, k, k, k]``. ``transposed_conv3d`` uses
the same kernel layout and is the exact adjoint of ``conv3d``.

No implicit broadcasting: the only allowed shape mismatch is adding a bias
along the channel (or feature) axis, and scaling by a 0-d tensor.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, accumulate, as_tensor, make_node

_AXES = ("D", "H", "W")


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim == 0 or a.data.ndim == 0:
        return _scalar_op(a, b, "add")
    _check_same_shape(a, b, "add")

    def _bw(g):
        accumulate(a, g)
        accumulate(b, g)

    return make_node(a.data + b.data, (a, b), _bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim == 0 or a.data.ndim == 0:
        return _scalar_op(a, b, "sub")
    _check_same_shape(a, b, "sub")

    def _bw(g):
        accumulate(a, g)
        accumulate(b, -g)

    return make_node(a.data - b.data, (a, b), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim == 0 or a.data.ndim == 0:
        return _scalar_op(a, b, "mul")
    _check_same_shape(a, b, "mul")

    def _bw(g):
        accumulate(a, g * b.data)
        accumulate(b, g * a.data)

    return make_node(a.data * b.data, (a, b), _bw)


def _scalar_op(a: Tensor, b: Tensor, op: str) -> Tensor:
    # one side is 0-d; gradients of the 0-d side are summed
    def red(g, t):
        return g.sum() if t.data.ndim == 0 and g.ndim else g

    if op == "add":
        out = a.data + b.data

        def _bw(g):
            accumulate(a, red(g, a))
            accumulate(b, red(g, b))
    elif op == "sub":
        out = a.data - b.data

        def _bw(g):
            accumulate(a, red(g, a))
            accumulate(b, red(-g, b))
    else:
        out = a.data * b.data

        def _bw(g):
            accumulate(a, red(g * b.data, a))
            accumulate(b, red(g * a.data, b))

    return make_node(np.asarray(out), (a, b), _bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_node(x.data * c, (x,), lambda g: accumulate(x, g * c))


def square(x: Tensor) -> Tensor:
    return make_node(x.data * x.data, (x,), lambda g: accumulate(x, 2.0 * g * x.data))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)

    def _bw(g):
        accumulate(x, np.where(pos, g, slope * g))

    return make_node(out, (x,), _bw)


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def _bw(g):
        accumulate(x, g * (1.0 - out * out))

    return make_node(out, (x,), _bw)


# ---------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    return make_node(np.asarray(x.data.sum()), (x,),
                     lambda g: accumulate(x, np.broadcast_to(g, x.shape)))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return make_node(np.asarray(x.data.mean()), (x,),
                     lambda g: accumulate(x, np.broadcast_to(g / n, x.shape)))


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis. Gradient at the origin is taken as 0."""
    nrm = np.sqrt(np.sum(x.data * x.data, axis=-1))

    def _bw(g):
        safe = np.where(nrm > 0, nrm, 1.0)
        unit = np.where((nrm > 0)[..., None], x.data / safe[..., None], 0.0)
        accumulate(x, g[..., None] * unit)

    return make_node(nrm, (x,), _bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return make_node(out, (x,), lambda g: accumulate(x, g.reshape(x.shape)))


# ---------------------------------------------------------------- losses

def l1_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean absolute error over all elements."""
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    _check_same_shape(x, x_hat, "l1_loss")
    diff = x.data - x_hat.data
    n = diff.size

    def _bw(g):
        s = np.sign(diff) * (g / n)
        accumulate(x, s)
        accumulate(x_hat, -s)

    return make_node(np.asarray(np.abs(diff).mean()), (x, x_hat), _bw)


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mse_loss")
    diff = a.data - b.data
    n = diff.size

    def _bw(g):
        s = diff * (2.0 * g / n)
        accumulate(a, s)
        accumulate(b, -s)

    return make_node(np.asarray((diff * diff).mean()), (a, b), _bw)


# ---------------------------------------------------------------- dense

def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``x @ weights.T + bias`` for ``x`` of shape ``[n]`` or ``[B, n]``."""
    x = as_tensor(x)
    if weights.data.ndim != 2:
        raise ShapeError(f"dense: weights must be 2-d, got {weights.shape}")
    m, n = weights.shape
    if x.shape[-1] != n or x.data.ndim not in (1, 2):
        raise ShapeError(f"dense: input {x.shape} does not match weights {weights.shape}")
    if bias.shape != (m,):
        raise ShapeError(f"dense: bias {bias.shape} does not match {m} outputs")
    out = x.data @ weights.data.T + bias.data

    def _bw(g):
        accumulate(x, g @ weights.data)
        if g.ndim == 1:
            accumulate(weights, np.outer(g, x.data))
            accumulate(bias, g)
        else:
            accumulate(weights, g.T @ x.data)
            accumulate(bias, g.sum(axis=0))

    return make_node(out, (x, weights, bias), _bw)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add ``bias`` ``[C]`` or ``[N, C]`` along the channel axis of a feature map."""
    batched = x.data.ndim == 5
    c_axis = 1 if batched else 0
    C = x.shape[c_axis]
    if bias.data.ndim == 1:
        if bias.shape != (C,):
            raise ShapeError(f"channel bias {bias.shape} does not match {C} channels")
        view = bias.data.reshape((1, C, 1, 1, 1) if batched else (C, 1, 1, 1))
        red = (0, 2, 3, 4) if batched else (1, 2, 3)
    else:
        if not batched or bias.shape != x.shape[:2]:
            raise ShapeError(f"channel bias {bias.shape} does not match {x.shape[:2]}")
        view = bias.data[:, :, None, None, None]
        red = (2, 3, 4)

    def _bw(g):
        accumulate(x, g)
        accumulate(bias, g.sum(axis=red))

    return make_node(x.data + view, (x, bias), _bw)


# ---------------------------------------------------------------- convolution

def _as5d(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 5:
        return x.data, True
    if x.data.ndim == 4:
        return x.data[None], False
    raise ShapeError(f"expected [C,D,H,W] or [N,C,D,H,W], got {x.shape}")


def _check_kernel(kernel: Tensor) -> int:
    if kernel.data.ndim != 5:
        raise ShapeError(f"kernel must be [C_out,C_in,k,k,k], got {kernel.shape}")
    k = kernel.shape[2]
    if kernel.shape[3] != k or kernel.shape[4] != k:
        raise ShapeError(f"kernel must be cubic, got {kernel.shape[2:]}")
    return k


def conv_output_dims(dims, k: int, stride: int, pad: int) -> tuple[int, ...]:
    out = []
    for axis, n in zip(_AXES, dims):
        if k > n + 2 * pad:
            raise ShapeError(f"axis {axis}: kernel extent {k} exceeds padded extent {n + 2 * pad}")
        out.append((n + 2 * pad - k) // stride + 1)
    return tuple(out)


def _im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, tuple[int, int, int]]:
    """``[N,C,Dp,Hp,Wp]`` -> ``[N*D'*H'*W', C*k^3]`` (copy)."""
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    N, C, Do, Ho, Wo = win.shape[:5]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(N * Do * Ho * Wo, C * k ** 3)
    return cols, (Do, Ho, Wo)


def _col2im(cols: np.ndarray, N: int, C: int, padded: tuple[int, int, int],
            out_dims: tuple[int, int, int], k: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back into a padded volume."""
    Do, Ho, Wo = out_dims
    blocks = np.ascontiguousarray(
        cols.reshape(N, Do, Ho, Wo, C, k, k, k).transpose(5, 6, 7, 0, 4, 1, 2, 3))
    xp = np.zeros((N, C) + tuple(padded), dtype=cols.dtype)
    s = stride
    for a in range(k):
        for b in range(k):
            for c in range(k):
                xp[:, :, a:a + s * (Do - 1) + 1:s, b:b + s * (Ho - 1) + 1:s,
                   c:c + s * (Wo - 1) + 1:s] += blocks[a, b, c]
    return xp


def _unpad(xp: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return xp
    return xp[:, :, pad:-pad, pad:-pad, pad:-pad]


def _conv_input_grad_stride1(g5: np.ndarray, kernel: np.ndarray, k: int, pad: int) -> np.ndarray:
    # stride-1 adjoint is a full correlation with the flipped, channel-swapped kernel
    q = k - 1 - pad
    gp = np.pad(g5, ((0, 0), (0, 0)) + ((q, q),) * 3) if q else g5
    kf = np.ascontiguousarray(kernel[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    cols, dims = _im2col(gp, k, 1)
    N = g5.shape[0]
    out = (cols @ kf.reshape(kf.shape[0], -1).T).reshape((N,) + dims + (kf.shape[0],))
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))


def conv3d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Strided, zero-padded 3D cross-correlation."""
    x = as_tensor(x)
    if stride < 1 or pad < 0:
        raise ValueError("stride must be positive and pad non-negative")
    xd, batched = _as5d(x)
    k = _check_kernel(kernel)
    C_out, C_in = kernel.shape[:2]
    N, C = xd.shape[:2]
    if C != C_in:
        raise ShapeError(f"axis C: input has {C} channels, kernel expects {C_in}")
    out_dims = conv_output_dims(xd.shape[2:], k, stride, pad)
    xp = np.pad(xd, ((0, 0), (0, 0)) + ((pad, pad),) * 3) if pad else xd
    cols, _ = _im2col(xp, k, stride)
    wmat = kernel.data.reshape(C_out, -1)
    out = (cols @ wmat.T).reshape((N,) + out_dims + (C_out,)).transpose(0, 4, 1, 2, 3)
    out = np.ascontiguousarray(out)
    if not batched:
        out = out[0]

    def _bw(g):
        g5 = g if batched else g[None]
        gmat = g5.transpose(0, 2, 3, 4, 1).reshape(-1, C_out)
        if kernel.requires_grad:
            accumulate(kernel, (gmat.T @ cols).reshape(kernel.shape))
        if x.requires_grad:
            if stride == 1 and 2 * pad <= 2 * (k - 1):
                dx = _conv_input_grad_stride1(g5, kernel.data, k, pad)
            else:
                dxp = _col2im(gmat @ wmat, N, C, xp.shape[2:], out_dims, k, stride)
                dx = _unpad(dxp, pad)
            accumulate(x, dx if batched else dx[0])

    return make_node(out, (x, kernel), _bw)


def transposed_conv_output_dims(dims, k: int, stride: int, pad: int) -> tuple[int, ...]:
    out = []
    for axis, n in zip(_AXES, dims):
        m = (n - 1) * stride + k - 2 * pad
        if m < 1:
            raise ShapeError(f"axis {axis}: transposed output extent {m} is not positive")
        out.append(m)
    return tuple(out)


def transposed_conv3d(y: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0,
                      out_dims=None) -> Tensor:
    """Adjoint of :func:`conv3d` for the same kernel.

    ``y`` has ``C_out`` channels (the kernel's first axis) and the result has
    ``C_in``; spatial extent is ``(n - 1) * stride + k - 2 * pad`` unless
    ``out_dims`` names one of the larger extents that ``conv3d`` maps onto
    ``y``'s extent (stride > 1 makes that map many-to-one).
    """
    y = as_tensor(y)
    if stride < 1 or pad < 0:
        raise ValueError("stride must be positive and pad non-negative")
    yd, batched = _as5d(y)
    k = _check_kernel(kernel)
    C_out, C_in = kernel.shape[:2]
    N, C = yd.shape[:2]
    if C != C_out:
        raise ShapeError(f"axis C: input has {C} channels, kernel expects {C_out}")
    in_dims = tuple(yd.shape[2:])
    if out_dims is None:
        out_dims = transposed_conv_output_dims(in_dims, k, stride, pad)
    else:
        out_dims = tuple(int(d) for d in out_dims)
        if conv_output_dims(out_dims, k, stride, pad) != in_dims:
            raise ShapeError(f"out_dims {out_dims} do not convolve back to {in_dims}")
    padded = tuple(d + 2 * pad for d in out_dims)
    wmat = kernel.data.reshape(C_out, -1)
    ymat = yd.transpose(0, 2, 3, 4, 1).reshape(-1, C_out)
    out = _unpad(_col2im(ymat @ wmat, N, C_in, padded, in_dims, k, stride), pad)
    out = np.ascontiguousarray(out)
    if not batched:
        out = out[0]

    def _bw(g):
        g5 = g if batched else g[None]
        gp = np.pad(g5, ((0, 0), (0, 0)) + ((pad, pad),) * 3) if pad else g5
        cols, _ = _im2col(gp, k, stride)
        if kernel.requires_grad:
            accumulate(kernel, (ymat.T @ cols).reshape(kernel.shape))
        if y.requires_grad:
            dy = (cols @ wmat.T).reshape((N,) + in_dims + (C_out,)).transpose(0, 4, 1, 2, 3)
            accumulate(y, dy if batched else dy[0])

    return make_node(out, (y, kernel), _bw)
