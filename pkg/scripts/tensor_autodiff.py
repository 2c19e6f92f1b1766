"""
Dense float32 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its inputs and a backward closure on
the output tensor. ``backward`` collects the reachable operations into a
``ComputationTape`` ordered by execution and replays it in reverse.
"""

import itertools
import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, logsumexp, softmax

from scripts.exceptions import DimensionError, LabelError

DTYPE = np.float32

_sequence = itertools.count()
_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disables graph recording on the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """
    An n-dimensional float32 array with an optional gradient buffer.

    Attributes:
        data (np.ndarray): Values, always float32.
        grad (np.ndarray | None): Accumulated gradient, same shape as data.
        requires_grad (bool): Whether backward() should populate grad.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._seq = next(_sequence)

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        out = cls(data)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return mul_scalar(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return mul_scalar(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def square(self):
        return square(self)

    def abs(self):
        return abs(self)

    def clamp(self, lo, hi):
        return clamp(self, lo, hi)


class ComputationTape:
    """
    Ordered record of the operations that produced a tensor.

    Entries are sorted by creation sequence, so replaying them reversed
    visits every operation after all of its consumers, each exactly once.
    """

    def __init__(self, output):
        nodes = {}
        stack = [output]
        while stack:
            node = stack.pop()
            if id(node) in nodes or not node.requires_grad:
                continue
            nodes[id(node)] = node
            stack.extend(node._parents)
        self.entries = sorted(nodes.values(), key=lambda node: node._seq)

    def __len__(self):
        return len(self.entries)

    def replay_backward(self, seed):
        """
        Propagates ``seed`` from the last entry back through the tape.

        Returns:
            dict: id(tensor) -> gradient array for every visited tensor.
        """
        output = self.entries[-1]
        grads = {id(output): seed}
        for node in reversed(self.entries):
            grad = grads.get(id(node))
            if grad is None or node._backward is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad
        return grads


def backward(loss):
    """
    Populates ``grad`` on every requires_grad tensor reachable from ``loss``.

    Leaf gradients accumulate across calls until zeroed; intermediate
    tensors receive the gradient of the latest pass.
    """
    if loss.size != 1:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = ComputationTape(loss)
    grads = tape.replay_backward(np.ones_like(loss.data))
    for node in tape.entries:
        grad = grads.get(id(node))
        if grad is None:
            continue
        grad = np.asarray(grad, dtype=DTYPE).reshape(node.shape)
        if node.is_leaf and node.grad is not None:
            node.grad = node.grad + grad
        else:
            node.grad = grad.copy() if node.is_leaf else grad


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _broadcast_shape(op, a_shape, b_shape):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        for offset in range(1, min(len(a_shape), len(b_shape)) + 1):
            left, right = a_shape[-offset], b_shape[-offset]
            if left != right and 1 not in (left, right):
                axis = max(len(a_shape), len(b_shape)) - offset
                raise DimensionError(
                    f"{op}: axis {axis} mismatch ({left} vs {right}) for shapes {a_shape} and {b_shape}"
                ) from None
        raise


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _expand(grad, shape, axis, keepdims):
    if axis is not None and not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), _backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), _backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), _backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)

    def _backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor._from_op(a.data / b.data, (a, b), _backward, "div")


def mul_scalar(x, c):
    x = as_tensor(x)
    c = DTYPE(c)
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,), "mul_scalar")


def square(x):
    x = as_tensor(x)
    return Tensor._from_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def abs(x):
    x = as_tensor(x)
    return Tensor._from_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    x = as_tensor(x)
    y = expit(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def clamp(x, lo, hi):
    """Clips to [lo, hi]; the gradient passes inside the interval and is zero outside."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._from_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def sum(x, axis=None, keepdims=False):
    x = as_tensor(x)

    def _backward(g):
        return (_expand(g, x.shape, axis, keepdims),)

    return Tensor._from_op(x.data.sum(axis=axis, keepdims=keepdims), (x,), _backward, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))

    def _backward(g):
        return (_expand(g, x.shape, axis, keepdims) / DTYPE(count),)

    return Tensor._from_op(x.data.mean(axis=axis, keepdims=keepdims), (x,), _backward, "mean")


def amax(x, axis):
    """Maximum along one axis; the gradient flows to the first maximal entry."""
    x = as_tensor(x)
    index = np.argmax(x.data, axis=axis)
    index = np.expand_dims(index, axis)
    out = np.take_along_axis(x.data, index, axis=axis).squeeze(axis)

    def _backward(g):
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, index, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return Tensor._from_op(out, (x,), _backward, "amax")


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: axis 1 of {a.shape} does not match axis 0 of {b.shape}")

    def _backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(a.data @ b.data, (a, b), _backward, "matmul")


def _check_conv(op, x_shape, in_channels, channel_axis_name, kernel_shape, stride, padding):
    if len(x_shape) != 4:
        raise DimensionError(f"{op}: input must be 4-D [N,C,H,W], got {x_shape}")
    if len(kernel_shape) != 4:
        raise DimensionError(f"{op}: kernel must be 4-D, got {kernel_shape}")
    if x_shape[1] != in_channels:
        raise DimensionError(
            f"{op}: channel axis (1) mismatch, input has {x_shape[1]} channels "
            f"but kernel {channel_axis_name} is {in_channels}"
        )
    if stride < 1 or padding < 0:
        raise DimensionError(f"{op}: stride must be >= 1 and padding >= 0, got {stride}, {padding}")


def conv2d(x, kernel, stride=1, padding=0):
    """
    2-D cross-correlation.

    Args:
        x (Tensor): Input [N, C, H, W].
        kernel (Tensor): Weights [K, C, kh, kw].
        stride (int): Step between windows.
        padding (int): Zero padding on each spatial border.

    Returns:
        Tensor: [N, K, (H + 2p - kh) // s + 1, (W + 2p - kw) // s + 1].
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_conv("conv2d", x.shape, kernel.shape[1], "axis 1", kernel.shape, stride, padding)
    n, _, h, w = x.shape
    kh, kw = kernel.shape[2:]
    for axis, size, k in ((2, h, kh), (3, w, kw)):
        if size + 2 * padding < k:
            name = "height" if axis == 2 else "width"
            raise DimensionError(
                f"conv2d: {name} axis ({axis}) of size {size} with padding {padding} is smaller than kernel {k}"
            )
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def _backward(g):
        grad_kernel = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, kernel.data, axes=([1], [0]))
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += (
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        grad_x = grad_padded[:, :, padding:padding + h, padding:padding + w]
        return grad_x, grad_kernel

    return Tensor._from_op(out, (x, kernel), _backward, "conv2d")


def deconv2d(x, kernel, stride=1, padding=0, output_padding=0):
    """
    2-D transposed convolution (scatter-add of kernel-weighted input pixels).

    Args:
        x (Tensor): Input [N, C_in, H, W].
        kernel (Tensor): Weights [C_in, C_out, kh, kw].
        stride (int): Upsampling stride.
        padding (int): Rows/columns cropped from each border of the full output.
        output_padding (int): Extra rows/columns added on the bottom/right.

    Returns:
        Tensor: [N, C_out, (H - 1) * s - 2p + kh + op, (W - 1) * s - 2p + kw + op].
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_conv("deconv2d", x.shape, kernel.shape[0], "axis 0", kernel.shape, stride, padding)
    if output_padding < 0 or (output_padding and output_padding >= stride):
        raise DimensionError(f"deconv2d: output_padding {output_padding} must be smaller than stride {stride}")
    n, _, h, w = x.shape
    _, c_out, kh, kw = kernel.shape
    out_h = (h - 1) * stride - 2 * padding + kh + output_padding
    out_w = (w - 1) * stride - 2 * padding + kw + output_padding
    for axis, size in ((2, out_h), (3, out_w)):
        if size < 1:
            name = "height" if axis == 2 else "width"
            raise DimensionError(f"deconv2d: {name} axis ({axis}) collapses to size {size}")
    full_h = (h - 1) * stride + kh + output_padding
    full_w = (w - 1) * stride + kw + output_padding

    cols = np.tensordot(x.data, kernel.data, axes=([1], [0]))
    full = np.zeros((n, c_out, full_h, full_w), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    out = full[:, :, padding:padding + out_h, padding:padding + out_w]

    def _backward(g):
        grad_full = np.zeros((n, c_out, full_h, full_w), dtype=DTYPE)
        grad_full[:, :, padding:padding + out_h, padding:padding + out_w] = g
        grad_cols = np.stack(
            [
                np.stack([grad_full[:, :, i:i + stride * h:stride, j:j + stride * w:stride] for j in range(kw)], axis=-1)
                for i in range(kh)
            ],
            axis=-2,
        )
        grad_x = np.tensordot(grad_cols, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        grad_kernel = np.tensordot(x.data, grad_cols, axes=([0, 2, 3], [0, 2, 3]))
        return grad_x, grad_kernel

    return Tensor._from_op(out, (x, kernel), _backward, "deconv2d")


def batchnorm2d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """
    Per-channel batch normalisation over (N, H, W).

    Training mode normalises with batch statistics and updates the running
    buffers in place; eval mode normalises with the running buffers.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batchnorm2d: channel axis (1) of {x.shape} does not match {gamma.shape[0]} features")
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        batch_mean = x.data.mean(axis=axes)
        batch_var = x.data.var(axis=axes)
        unbiased = batch_var * (count / (count - 1)) if count > 1 else batch_var
        running_mean *= 1.0 - momentum
        running_mean += momentum * batch_mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        mean_, var_ = batch_mean, batch_var
    else:
        mean_, var_ = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var_ + eps)).astype(DTYPE)[None, :, None, None]
    x_hat = (x.data - mean_.astype(DTYPE)[None, :, None, None]) * inv_std
    out = x_hat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def _backward(g):
        grad_gamma = (g * x_hat).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        grad_hat = g * gamma.data[None, :, None, None]
        if training:
            grad_x = inv_std / count * (
                count * grad_hat
                - grad_hat.sum(axis=axes, keepdims=True)
                - x_hat * (grad_hat * x_hat).sum(axis=axes, keepdims=True)
            )
        else:
            grad_x = grad_hat * inv_std
        return grad_x, grad_gamma, grad_beta

    return Tensor._from_op(out, (x, gamma, beta), _backward, "batchnorm2d")


def max_pool2d(x, size=2):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d: input must be 4-D [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out_h, out_w = h // size, w // size
    if out_h == 0 or out_w == 0:
        raise DimensionError(f"max_pool2d: spatial axes {h}x{w} smaller than window {size}")
    blocks = (
        x.data[:, :, :out_h * size, :out_w * size]
        .reshape(n, c, out_h, size, out_w, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, out_h, out_w, size * size)
    )
    index = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, index, axis=-1)[..., 0]

    def _backward(g):
        grad_blocks = np.zeros_like(blocks)
        np.put_along_axis(grad_blocks, index, g[..., None], axis=-1)
        grad_x = np.zeros_like(x.data)
        grad_x[:, :, :out_h * size, :out_w * size] = (
            grad_blocks.reshape(n, c, out_h, out_w, size, size)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, out_h * size, out_w * size)
        )
        return (grad_x,)

    return Tensor._from_op(out, (x,), _backward, "max_pool2d")


def dropout(x, rate, rng, training):
    """Inverted dropout; identity when not training or when rate is 0."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    keep = ((rng.random(x.shape) >= rate) / (1.0 - rate)).astype(DTYPE)
    return Tensor._from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def mse_loss(a, b):
    """Mean over all elements of (a - b)^2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse_loss: shapes {a.shape} and {b.shape} differ")
    return mean(square(sub(a, b)))


def cross_entropy(logits, labels):
    """
    Mean negative log-softmax probability of the true class.

    Args:
        logits (Tensor): [N, C] scores.
        labels (array-like): N integer labels in [0, C).

    Returns:
        Tensor: Scalar loss.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-D [N, C], got {logits.shape}")
    n, num_classes = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"cross_entropy: batch axis (0) has {n} rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"cross_entropy: labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    rows = np.arange(n)
    lse = logsumexp(logits.data, axis=1)
    loss = np.mean(lse - logits.data[rows, labels])

    def _backward(g):
        probs = softmax(logits.data, axis=1)
        probs[rows, labels] -= 1.0
        return (g * probs / n,)

    return Tensor._from_op(np.asarray(loss), (logits,), _backward, "cross_entropy")
