"""
Numerics Module

A minimal dense tensor library with reverse-mode differentiation, covering
exactly the operations the motion pipeline needs. Every real-valued quantity in
motiontools (images, tokens, keypoints, affine matrices, flows, losses and all
learnable weights) lives in a ``Tensor``.

Main Functions:
    matmul: Matrix product (batched over leading dimensions)
    softmax: Numerically stabilized softmax along an axis
    layer_norm: Per-token normalization over the last axis with gain and bias
    conv2d: 2-D cross-correlation with stride and zero padding
    grid_sample: Bilinear sampling of a C x H x W image at normalized coordinates
    Tensor.backward: Reverse-mode pass populating gradients of all ancestors

Supporting Functions:
    add, sub, mul, div, power, exp, log, sqrt, absolute, tanh, sigmoid, relu,
    gelu, tensor_sum, mean, reshape, transpose, concat, stack, avg_pool2d,
    linear, no_grad, set_debug_mode, set_default_dtype, check_gradients,
    save_named_tensors, load_named_tensors

Dependencies:
    - numpy: storage and all arithmetic

Notes:
    Graphs are built dynamically on every forward pass and discarded with the
    output. Tensors are immutable after construction except for the ``grad``
    slot; the optimizer swaps parameter data through ``Tensor.assign``.
    64-bit floats are the default so finite-difference checks are meaningful;
    ``set_default_dtype("float32")`` exists for speed runs only.

    Elementwise operations broadcast the NumPy way and reduce broadcast
    dimensions back in the backward pass.
"""

import json
import struct
import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from motiontools.general import (
    CheckpointError,
    ConfigError,
    ContractError,
    NonFiniteError,
    ShapeError,
    get_logger,
)

logger = get_logger(__name__)

CHECKPOINT_MAGIC = b"MFORGE1\n"
_SNAP_TOLERANCE = 1e-9

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64
_debug_nonfinite = False
_grad_state = threading.local()


def set_default_dtype(name):
    """Select ``"float64"`` (default) or ``"float32"`` for new leaf tensors."""
    global _default_dtype
    if name not in _DTYPES:
        raise ConfigError(f"unknown dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def get_default_dtype():
    return _default_dtype


def set_debug_mode(enabled):
    """When enabled, every op checks its output and raises NonFiniteError at the producer."""
    global _debug_nonfinite
    _debug_nonfinite = bool(enabled)


def is_grad_enabled():
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """
    Dense N-d array of floats with an attached reverse-mode gradient contract.

    Args:
        data (array-like): Values. Copied and converted to the default dtype.
        requires_grad (bool, optional): Whether gradients should flow to this
            tensor (default False).

    Attributes:
        data (numpy.ndarray): The values.
        requires_grad (bool): Gradient flag.
        grad (numpy.ndarray or None): Same-shape gradient after ``backward``.

    Raises:
        NonFiniteError: If the data contains NaN or Inf.
    """

    __array_priority__ = 1000
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=_default_dtype)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"tensor data of shape {arr.shape} contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        """Return a copy of the data."""
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """Return a constant tensor sharing no graph history."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def assign(self, values):
        """Replace the data of a leaf (used by optimizers between steps)."""
        if self._parents:
            raise ContractError("assign() is only allowed on leaf tensors")
        values = np.asarray(values, dtype=self.data.dtype)
        if values.shape != self.data.shape:
            raise ShapeError(f"assign: shape {values.shape} does not match {self.data.shape}")
        self.data = values.copy()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- operators --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def abs(self):
        return absolute(self)

    # -- reverse mode -----------------------------------------------------

    def backward(self):
        """
        Populate ``grad`` on every ancestor that requires a gradient.

        Leaf gradients accumulate across calls (clear them with ``zero_grad``);
        intermediate tensors receive the gradient of the current pass.

        Raises:
            ContractError: If this tensor is not a scalar.
            NonFiniteError: If this tensor is NaN or Inf.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("backward() called on a non-finite loss")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                node.grad = g
            else:
                g = np.array(g, dtype=node.data.dtype)
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(np.asarray(pg), parent.data.shape)
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data, parents, backward, op):
    data = np.asarray(data)
    if _debug_nonfinite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced NaN or Inf (output shape {data.shape})")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    requires = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = requires
    out._parents = tuple(parents) if requires else ()
    out._backward = backward if requires else None
    return out


def _normalize_axes(axis, ndim):
    if axis is None:
        return None
    axes = axis if isinstance(axis, (tuple, list)) else (axis,)
    return tuple(sorted(a % ndim for a in axes))


# ---------------------------------------------------------------------------
# Elementwise algebra
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        return g / b.data, -g * a.data / (b.data * b.data)

    return _result(a.data / b.data, (a, b), backward, "div")


def neg(a):
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    """Raise to a constant scalar exponent."""
    a = _as_tensor(a)
    if isinstance(exponent, Tensor) or np.ndim(exponent) != 0:
        raise ContractError("power() supports constant scalar exponents only")
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _result(a.data ** exponent, (a,), backward, "power")


def exp(a):
    a = _as_tensor(a)
    e = np.exp(a.data)
    return _result(e, (a,), lambda g: (g * e,), "exp")


def log(a):
    a = _as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = _as_tensor(a)
    s = np.sqrt(a.data)
    return _result(s, (a,), lambda g: (g * 0.5 / s,), "sqrt")


def absolute(a):
    a = _as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def tanh(a):
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def sigmoid(a):
    a = _as_tensor(a)
    z = np.exp(-np.abs(a.data))
    s = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(a):
    a = _as_tensor(a)
    positive = a.data > 0
    return _result(a.data * positive, (a,), lambda g: (g * positive,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """GELU in its tanh form."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _result(out, (a,), backward, "gelu")


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------

def tensor_sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape),)

    return _result(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    if axes is None:
        count = a.data.size
    else:
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tensor_sum(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape):
    a = _as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),), "reshape")


def transpose(a, axes=None):
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(a, axis1, axis2):
    a = _as_tensor(a)
    axes = list(range(a.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(a, tuple(axes))


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def getitem(a, index):
    a = _as_tensor(a)
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            # repeated integer-array entries must accumulate
            np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(moved[i] for i in range(len(tensors)))

    return _result(out, tensors, backward, "stack")


# ---------------------------------------------------------------------------
# Linear algebra and network primitives
# ---------------------------------------------------------------------------

def matmul(a, b):
    """
    Matrix product ``a @ b`` for arrays with at least two dimensions.

    Leading (batch) dimensions broadcast as in ``numpy.matmul``.

    Raises:
        ShapeError: If either operand is 1-D or the inner dimensions differ.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """Affine map ``x @ weight + bias`` over the last axis."""
    out = matmul(x, weight)
    return out if bias is None else out + bias


def softmax(x, axis=-1):
    """Softmax along ``axis``, stabilized by subtracting the maximum."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward, "softmax")


def layer_norm(x, gain=None, bias=None, eps=1e-5):
    """
    Normalize each row over the last axis to zero mean and unit variance.

    Args:
        x (Tensor): Input, features on the last axis.
        gain (Tensor, optional): Per-feature scale.
        bias (Tensor, optional): Per-feature shift.
        eps (float, optional): Added to the variance (default 1e-5).
    """
    x = _as_tensor(x)
    n = x.shape[-1]
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    parents = [x]
    out = xhat
    if gain is not None:
        gain = _as_tensor(gain)
        parents.append(gain)
        out = out * gain.data
    if bias is not None:
        bias = _as_tensor(bias)
        parents.append(bias)
        out = out + bias.data

    def backward(g):
        dxhat = g * gain.data if gain is not None else g
        dx = (inv_std / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        grads = [dx]
        if gain is not None:
            grads.append(g * xhat)
        if bias is not None:
            grads.append(g)
        return tuple(grads)

    return _result(out, parents, backward, "layer_norm")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """
    2-D cross-correlation of a single C x H x W input.

    Args:
        x (Tensor): Input of shape (C, H, W).
        weight (Tensor): Kernels of shape (O, C, kh, kw).
        bias (Tensor, optional): Per-output-channel bias of shape (O,).
        stride (int, optional): Step between windows (default 1).
        padding (int, optional): Zero padding on each border (default 0).

    Returns:
        Tensor: Output of shape (O, Ho, Wo).

    Raises:
        ShapeError: On channel mismatch or a kernel larger than the padded input.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) input and (O,C,kh,kw) kernels, got {x.shape} and {weight.shape}")
    channels, height, width = x.shape
    out_channels, kernel_channels, kh, kw = weight.shape
    if channels != kernel_channels:
        raise ShapeError(f"conv2d: input has {channels} channels but kernels expect {kernel_channels} ({x.shape} vs {weight.shape})")
    p, s = int(padding), int(stride)
    if kh > height + 2 * p or kw > width + 2 * p:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {height + 2 * p}x{width + 2 * p}")

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s]
    out_h, out_w = windows.shape[1], windows.shape[2]
    out = np.einsum("chwij,ocij->ohw", windows, weight.data, optimize=True)

    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        parents.append(bias)
        out = out + bias.data[:, None, None]

    def backward(g):
        grad_x = None
        if x.requires_grad:
            grad_xp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    grad_xp[:, i:i + s * (out_h - 1) + 1:s, j:j + s * (out_w - 1) + 1:s] += np.einsum(
                        "ohw,oc->chw", g, weight.data[:, :, i, j], optimize=True
                    )
            grad_x = grad_xp[:, p:p + height, p:p + width]
        grad_w = np.einsum("ohw,chwij->ocij", g, windows, optimize=True) if weight.requires_grad else None
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    return _result(out, parents, backward, "conv2d")


def avg_pool2d(x, kernel):
    """Non-overlapping box average over k x k blocks of a (C, H, W) tensor."""
    x = _as_tensor(x)
    channels, height, width = x.shape
    if height % kernel or width % kernel:
        raise ShapeError(f"avg_pool2d: spatial size {height}x{width} not divisible by {kernel}")
    blocks = reshape(x, (channels, height // kernel, kernel, width // kernel, kernel))
    return mean(blocks, axis=(2, 4))


def _snap(coords):
    nearest = np.rint(coords)
    return np.where(np.abs(coords - nearest) < _SNAP_TOLERANCE, nearest, coords)


def grid_sample(image, grid):
    """
    Bilinear sampling with zero padding, align-corners convention.

    Args:
        image (Tensor): Source of shape (C, H, W).
        grid (Tensor): Sampling positions of shape (h, w, 2) holding (x, y) in
            normalized coordinates, x rightward and y downward, -1 and +1 at
            the first and last pixel centres.

    Returns:
        Tensor: Samples of shape (C, h, w). Differentiable with respect to both
        the image values and the grid coordinates.
    """
    image, grid = _as_tensor(image), _as_tensor(grid)
    if image.ndim != 3 or grid.ndim != 3 or grid.shape[-1] != 2:
        raise ShapeError(f"grid_sample expects (C,H,W) image and (h,w,2) grid, got {image.shape} and {grid.shape}")
    channels, height, width = image.shape
    img = image.data
    ix = _snap((grid.data[..., 0] + 1.0) * 0.5 * (width - 1))
    iy = _snap((grid.data[..., 1] + 1.0) * 0.5 * (height - 1))
    x0 = np.floor(ix).astype(np.int64)
    y0 = np.floor(iy).astype(np.int64)
    x1, y1 = x0 + 1, y0 + 1
    wx1 = ix - x0
    wy1 = iy - y0
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1

    def corner(yi, xi):
        valid = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        flat = np.clip(yi, 0, height - 1) * width + np.clip(xi, 0, width - 1)
        values = img.reshape(channels, -1)[:, flat] * valid
        return values, valid, flat

    v00, m00, f00 = corner(y0, x0)
    v01, m01, f01 = corner(y0, x1)
    v10, m10, f10 = corner(y1, x0)
    v11, m11, f11 = corner(y1, x1)
    out = wy0 * wx0 * v00 + wy0 * wx1 * v01 + wy1 * wx0 * v10 + wy1 * wx1 * v11

    def backward(g):
        grad_image = None
        if image.requires_grad:
            index = np.concatenate([f00.ravel(), f01.ravel(), f10.ravel(), f11.ravel()])
            weights = np.concatenate([
                (wy0 * wx0 * m00).ravel(),
                (wy0 * wx1 * m01).ravel(),
                (wy1 * wx0 * m10).ravel(),
                (wy1 * wx1 * m11).ravel(),
            ])
            g_flat = g.reshape(channels, -1)
            grad_image = np.stack([
                np.bincount(index, weights=weights * np.tile(g_flat[c], 4), minlength=height * width)
                for c in range(channels)
            ]).reshape(channels, height, width)
        grad_grid = None
        if grid.requires_grad:
            d_ix = (g * ((v01 - v00) * wy0 + (v11 - v10) * wy1)).sum(axis=0)
            d_iy = (g * ((v10 - v00) * wx0 + (v11 - v01) * wx1)).sum(axis=0)
            grad_grid = np.stack([d_ix * 0.5 * (width - 1), d_iy * 0.5 * (height - 1)], axis=-1)
        return grad_image, grad_grid

    return _result(out, (image, grid), backward, "grid_sample")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def parameter(values):
    """Create a learnable leaf tensor."""
    return Tensor(values, requires_grad=True)


def uniform_parameter(rng, shape, fan_in):
    """Learnable tensor drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape))


def zeros_parameter(shape):
    return parameter(np.zeros(shape))


def conv_params(rng, in_channels, out_channels, kernel=3):
    """Weight (O, C, k, k) and bias (O,) of a convolution, fan-in scaled uniform."""
    fan_in = in_channels * kernel * kernel
    return {
        "weight": uniform_parameter(rng, (out_channels, in_channels, kernel, kernel), fan_in),
        "bias": uniform_parameter(rng, (out_channels,), fan_in),
    }


def linear_params(rng, in_features, out_features):
    """Weight (in, out) and bias (out,) of a linear map, fan-in scaled uniform."""
    return {
        "weight": uniform_parameter(rng, (in_features, out_features), in_features),
        "bias": uniform_parameter(rng, (out_features,), in_features),
    }


def apply_conv(params, x, stride=1, padding=None):
    """Run ``conv2d`` with a parameter dict; padding defaults to "same" for odd kernels."""
    kernel = params["weight"].shape[-1]
    padding = kernel // 2 if padding is None else padding
    return conv2d(x, params["weight"], params["bias"], stride=stride, padding=padding)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def check_gradients(fn, inputs, eps=1e-5, max_entries=None, rng=None):
    """
    Compare analytic gradients against central finite differences.

    Args:
        fn (callable): Maps the ``inputs`` tensors to a scalar Tensor.
        inputs (list[Tensor]): Leaf tensors with ``requires_grad=True``.
        eps (float, optional): Finite-difference step (default 1e-5).
        max_entries (int, optional): Check at most this many randomly chosen
            entries per input (default: all entries).
        rng (numpy.random.Generator, optional): Chooses the checked entries.

    Returns:
        float: Worst error over inputs, each measured as
        max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)
        over the checked entries of that input.

    Notes:
        Perturbs ``inputs[i].data`` in place and restores it afterwards.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for tensor in inputs:
        tensor.grad = None
    loss = fn(*inputs)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for tensor, grad in zip(inputs, analytic):
            flat = tensor.data.reshape(-1)
            indices = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                indices = rng.choice(flat.size, size=max_entries, replace=False)
            numeric = np.empty(len(indices))
            for n, idx in enumerate(indices):
                original = flat[idx]
                flat[idx] = original + eps
                plus = fn(*inputs).item()
                flat[idx] = original - eps
                minus = fn(*inputs).item()
                flat[idx] = original
                numeric[n] = (plus - minus) / (2.0 * eps)
            picked = grad.reshape(-1)[indices]
            scale = max(np.max(np.abs(picked)), np.max(np.abs(numeric)), 1e-8)
            error = np.max(np.abs(picked - numeric)) / scale
            worst = max(worst, float(error))
    return worst


# ---------------------------------------------------------------------------
# Named-tensor container
# ---------------------------------------------------------------------------

def save_named_tensors(path, tensors, metadata=None):
    """
    Write named arrays to a single "MFORGE1" container file.

    Layout: the 8-byte tag ``b"MFORGE1\\n"``, a little-endian uint64 header
    length, a JSON header ``{"metadata": ..., "tensors": [{name, dtype,
    shape, offset, nbytes}, ...]}`` and then the raw little-endian data.
    Offsets count from the start of the data section.

    Args:
        path (str or Path): Destination file.
        tensors (dict): Name to Tensor or numpy array, written in order.
        metadata (dict, optional): JSON-serializable metadata.

    Raises:
        CheckpointError: If the file cannot be written (message names the path).
    """
    entries, blobs, offset = [], [], 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"metadata": metadata or {}, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    try:
        with open(path, "wb") as handle:
            handle.write(CHECKPOINT_MAGIC)
            handle.write(struct.pack("<Q", len(header)))
            handle.write(header)
            for blob in blobs:
                handle.write(blob)
    except OSError as exc:
        raise CheckpointError(f"cannot write {path}: {exc}") from exc
    logger.debug("wrote %d tensors to %s", len(entries), path)


def load_named_tensors(path):
    """
    Read a container written by ``save_named_tensors``.

    Returns:
        tuple: (tensors, metadata) where ``tensors`` maps names to numpy
        arrays in file order.

    Raises:
        CheckpointError: On unreadable files or a wrong version tag.
    """
    try:
        with open(path, "rb") as handle:
            magic = handle.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise CheckpointError(f"{path} is not an MFORGE1 container")
            (header_len,) = struct.unpack("<Q", handle.read(8))
            header = json.loads(handle.read(header_len).decode("utf-8"))
            payload = handle.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc

    tensors = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.dtype(entry["dtype"]))
    return tensors, header["metadata"]
