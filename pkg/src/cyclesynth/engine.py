"""Dense float32 tensors with reverse-mode automatic differentiation.

Arrays are plain numpy buffers; every differentiable op records the
tensors it consumed plus a closure that maps the output gradient to
input gradients. ``backward`` walks the recorded graph once per node in
reverse topological order, accumulating into ``.grad`` so that tensors
used in several places (e.g. a generator appearing in both cycles)
receive the sum of all contributions.

Broadcasting is deliberately restricted to scalars; channel-wise biases
and affine parameters are handled inside conv2d / instance_norm, which
keeps every gradient path explicit and easy to audit.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class EmptyTensorError(ValueError):
    """Reduction or loss over a tensor with no elements."""


_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors.

    float64 exists only to tighten finite-difference gradient checks;
    training always runs in float32.
    """
    global _DTYPE
    old = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference, pool bookkeeping)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def square(self):
        return square(self)

    def abs(self):
        return absolute(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def leaky_relu(self, slope=0.2):
        return leaky_relu(self, slope)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def backward(self):
        backward(self)


def _wrap(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _check_binary_shapes(a, b, opname):
    # equal shapes, or one side is a scalar (broadcast over the other)
    if a.data.shape == b.data.shape or a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(f"{opname}: shape {a.data.shape} incompatible with {b.data.shape}")


def _reduce_to(g, shape):
    # gradient of a scalar operand broadcast against an array
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


# -- elementwise ops ----------------------------------------------------------


def add(a, b):
    _check_binary_shapes(a, b, "add")
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.data.shape))

    return Tensor._result(data, (a, b), bwd)


def sub(a, b):
    _check_binary_shapes(a, b, "sub")
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(-g, b.data.shape))

    return Tensor._result(data, (a, b), bwd)


def mul(a, b):
    _check_binary_shapes(a, b, "mul")
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.data.shape))

    return Tensor._result(data, (a, b), bwd)


def square(a):
    data = a.data * a.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (2.0 * a.data))

    return Tensor._result(data, (a,), bwd)


def absolute(a):
    data = np.abs(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * np.sign(a.data))

    return Tensor._result(data, (a,), bwd)


def tanh(a):
    data = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - data * data))

    return Tensor._result(data, (a,), bwd)


def relu(a):
    data = np.maximum(a.data, 0.0)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0))

    return Tensor._result(data, (a,), bwd)


def leaky_relu(a, slope=0.2):
    pos = a.data > 0.0
    data = np.where(pos, a.data, a.data * slope).astype(a.data.dtype)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * np.where(pos, 1.0, slope).astype(g.dtype))

    return Tensor._result(data, (a,), bwd)


# -- reductions ---------------------------------------------------------------


def tsum(a):
    if a.data.size == 0:
        raise EmptyTensorError("sum of empty tensor")
    data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.full(a.data.shape, g, dtype=a.data.dtype))

    return Tensor._result(data, (a,), bwd)


def tmean(a):
    if a.data.size == 0:
        raise EmptyTensorError("mean of empty tensor")
    inv = 1.0 / a.data.size
    data = np.asarray(a.data.sum() * inv, dtype=a.data.dtype)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.full(a.data.shape, g * inv, dtype=a.data.dtype))

    return Tensor._result(data, (a,), bwd)


# -- spatial padding ----------------------------------------------------------


def _pad2d(x, pad, mode):
    if pad == 0:
        return x
    spec = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    if mode == "zeros":
        return np.pad(x, spec)
    if mode == "reflect":
        return np.pad(x, spec, mode="reflect")
    raise ValueError(f"unknown pad_mode {mode!r}")


def _unpad2d_adjoint(g, pad, mode, out_h, out_w):
    """Adjoint of _pad2d: fold padded-border gradients back onto the source."""
    if pad == 0:
        return g
    if mode == "zeros":
        return g[:, :, pad:pad + out_h, pad:pad + out_w].copy()
    # reflect: padded row p-k mirrors source row k, padded row p+H-1+k mirrors H-1-k
    core = g[:, :, pad:pad + out_h, :].copy()
    for k in range(1, pad + 1):
        core[:, :, k, :] += g[:, :, pad - k, :]
        core[:, :, out_h - 1 - k, :] += g[:, :, pad + out_h - 1 + k, :]
    out = core[:, :, :, pad:pad + out_w].copy()
    for k in range(1, pad + 1):
        out[:, :, :, k] += core[:, :, :, pad - k]
        out[:, :, :, out_w - 1 - k] += core[:, :, :, pad + out_w - 1 + k]
    return out


# -- convolution --------------------------------------------------------------


def _gather_cols(xp, k, stride, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride,
                                  j:j + stride * (wo - 1) + 1:stride]
    return cols


def conv2d(x, w, b, stride=1, pad=0, pad_mode="zeros"):
    """2D cross-correlation over [N,Cin,H,W] with weight [Cout,Cin,k,k].

    Output spatial size is floor((H + 2*pad - k) / stride) + 1.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.data.shape} / {w.data.shape}")
    n, cin, h, wd = x.data.shape
    cout, cin_w, k, k2 = w.data.shape
    if k != k2 or cin_w != cin:
        raise ShapeError(f"conv2d weight {w.data.shape} does not match input {x.data.shape}")
    if b.data.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {b.data.shape}, expected ({cout},)")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if k > h + 2 * pad or k > wd + 2 * pad or ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d geometry invalid: input {h}x{wd}, k={k}, stride={stride}, "
            f"pad={pad} gives output {ho}x{wo}")

    xp = _pad2d(x.data, pad, pad_mode)
    cols = _gather_cols(xp, k, stride, ho, wo)
    out = np.tensordot(w.data, cols, axes=([1, 2, 3], [1, 2, 3]))  # [Cout,N,Ho,Wo]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    out += b.data.reshape(1, cout, 1, 1)

    def bwd(g):
        if w.requires_grad:
            w._accumulate(np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5])))
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = np.tensordot(w.data, g, axes=([0], [1]))  # [Cin,k,k,N,Ho,Wo]
            gxp = np.zeros((cin, n) + xp.shape[2:], dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride] += gcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            x._accumulate(_unpad2d_adjoint(gxp, pad, pad_mode, h, wd))

    return Tensor._result(out, (x, w, b), bwd)


def conv_transpose2d(x, w, b, stride=1, pad=0, output_pad=0):
    """Transposed convolution (adjoint of conv2d) with weight [Cin,Cout,k,k].

    Output spatial size is (H-1)*stride - 2*pad + k + output_pad. With the
    same weight array and zero bias this is the exact adjoint of conv2d at
    matching stride/pad, which the gradient of both ops relies on.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d input/weight, got {x.data.shape} / {w.data.shape}")
    n, cin, h, wd = x.data.shape
    cin_w, cout, k, k2 = w.data.shape
    if k != k2 or cin_w != cin:
        raise ShapeError(f"conv_transpose2d weight {w.data.shape} does not match input {x.data.shape}")
    if b.data.shape != (cout,):
        raise ShapeError(f"conv_transpose2d bias shape {b.data.shape}, expected ({cout},)")
    if output_pad >= stride and output_pad != 0:
        raise ShapeError(f"output_pad {output_pad} must be < stride {stride}")
    ho = (h - 1) * stride - 2 * pad + k + output_pad
    wo = (wd - 1) * stride - 2 * pad + k + output_pad
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv_transpose2d geometry invalid: input {h}x{wd}, k={k}, stride={stride}, "
            f"pad={pad}, output_pad={output_pad} gives output {ho}x{wo}")
    ext_h = max((h - 1) * stride + k, pad + ho)
    ext_w = max((wd - 1) * stride + k, pad + wo)

    cols = np.tensordot(w.data, x.data, axes=([0], [1]))  # [Cout,k,k,N,H,W]
    buf = np.zeros((cout, n, ext_h, ext_w), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            buf[:, :, i:i + stride * (h - 1) + 1:stride,
                j:j + stride * (wd - 1) + 1:stride] += cols[:, i, j]
    out = np.ascontiguousarray(buf[:, :, pad:pad + ho, pad:pad + wo].transpose(1, 0, 2, 3))
    out += b.data.reshape(1, cout, 1, 1)

    def bwd(g):
        gfull = np.zeros((n, cout, ext_h, ext_w), dtype=g.dtype)
        gfull[:, :, pad:pad + ho, pad:pad + wo] = g
        garr = np.empty((k, k, n, cout, h, wd), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                garr[i, j] = gfull[:, :, i:i + stride * (h - 1) + 1:stride,
                                   j:j + stride * (wd - 1) + 1:stride]
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gw = np.tensordot(x.data, garr, axes=([0, 2, 3], [2, 4, 5]))  # [Cin,k,k,Cout]
            w._accumulate(np.ascontiguousarray(gw.transpose(0, 3, 1, 2)))
        if x.requires_grad:
            gx = np.tensordot(w.data, garr, axes=([1, 2, 3], [3, 0, 1]))  # [Cin,N,H,W]
            x._accumulate(np.ascontiguousarray(gx.transpose(1, 0, 2, 3)))

    return Tensor._result(out, (x, w, b), bwd)


# -- instance normalization ---------------------------------------------------


def instance_norm(x, gamma, beta, eps=1e-5):
    """Standardize each (sample, channel) plane, then apply a per-channel affine.

    Uses the biased 1/(H*W) variance estimator.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"instance_norm expects [N,C,H,W], got {x.data.shape}")
    n, c, h, wd = x.data.shape
    if h * wd < 2:
        raise ShapeError(f"instance_norm needs at least 2 pixels per plane, got {h}x{wd}")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"instance_norm affine shapes {gamma.data.shape}/{beta.data.shape}, expected ({c},)")
    m = h * wd
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def bwd(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gh = g * gamma.data.reshape(1, c, 1, 1)
            sum_gh = gh.sum(axis=(2, 3), keepdims=True)
            sum_gh_xhat = (gh * xhat).sum(axis=(2, 3), keepdims=True)
            x._accumulate((inv_std / m) * (m * gh - sum_gh - xhat * sum_gh_xhat))

    return Tensor._result(out, (x, gamma, beta), bwd)


# -- backward pass ------------------------------------------------------------


class Tape:
    """Reverse-topological record of the graph reachable from one root.

    Node order is the deterministic depth-first discovery order, so two
    identical forward passes replay gradients identically.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @staticmethod
    def trace(root):
        nodes = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and parent._backward is not None:
                    stack.append((parent, False))
        return Tape(nodes)


def backward(loss):
    """Populate d(loss)/d(leaf) for every requires_grad tensor feeding loss."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.trace(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
