"""Minimal reverse-mode autodiff over a closed set of layer primitives.

Everything is backed by numpy arrays. Variables record their parents and a
backward closure; calling :func:`backward` on a scalar output walks the graph
in reverse topological order and accumulates gradients into every reachable
Variable with ``requires_grad`` set. Gradients accumulate additively across
calls; callers zero them explicitly before each optimization step.

Training runs in float32. The same graph code runs in float64 when fed
float64 arrays, which is what the finite-difference verification tests use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes do not conform, naming the offending axis."""


class UsageError(RuntimeError):
    """Raised on API misuse, e.g. backward on a non-scalar."""


class Variable:
    """A node in the computation graph: a numpy array plus gradient plumbing."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, _parents=(), _backward=None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def needs_grad(self):
        return self.requires_grad or bool(self._parents)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Variable(shape={self.value.shape}, dtype={self.value.dtype})"


class Parameter(Variable):
    """A named trainable Variable."""

    __slots__ = ("name",)

    def __init__(self, value, name):
        super().__init__(np.asarray(value), requires_grad=True)
        self.name = name
        self.zero_grad()

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


def constant(value, dtype=np.float32):
    return Variable(np.asarray(value, dtype=dtype))


def _node(value, parents, backward_fn):
    live = tuple(p for p in parents if p.needs_grad())
    if not live:
        return Variable(value)
    return Variable(value, _parents=parents, _backward=backward_fn)


def backward(out, seed=None):
    """Accumulate d(out)/d(v) into v.grad for every reachable grad Variable.

    ``out`` must hold a single element unless an explicit ``seed`` gradient of
    the same shape is supplied (used for Jacobian extraction).
    """
    if seed is None:
        if out.value.size != 1:
            raise UsageError(
                f"backward requires a scalar output, got shape {out.value.shape}"
            )
        seed = np.ones_like(out.value)
    else:
        seed = np.asarray(seed, dtype=out.value.dtype)
        if seed.shape != out.value.shape:
            raise UsageError("seed gradient shape must match output shape")

    topo = []
    visited = set()
    stack = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and (p._parents or p.needs_grad()):
                stack.append((p, False))

    grads = {id(out): seed}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.accumulate(g)
        if node._backward is None:
            continue
        for parent, pg in node._backward(g):
            if not (parent._parents or parent.needs_grad()):
                continue
            if id(parent) in grads:
                grads[id(parent)] += pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shapes {a.value.shape} vs {b.value.shape}")
    return _node(a.value + b.value, (a, b), lambda g: ((a, g), (b, g)))


def subtract(a, b):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"subtract: shapes {a.value.shape} vs {b.value.shape}")
    return _node(a.value - b.value, (a, b), lambda g: ((a, g), (b, -g)))


def multiply(a, b):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"multiply: shapes {a.value.shape} vs {b.value.shape}")
    return _node(
        a.value * b.value,
        (a, b),
        lambda g: ((a, g * b.value), (b, g * a.value)),
    )


def scale(a, c):
    c = float(c)
    return _node(a.value * np.asarray(c, dtype=a.value.dtype), (a,), lambda g: ((a, g * c),))


def add_scalar(a, c):
    return _node(a.value + np.asarray(c, dtype=a.value.dtype), (a,), lambda g: ((a, g),))


def square(a):
    return _node(a.value * a.value, (a,), lambda g: ((a, g * 2.0 * a.value),))


def log(a):
    return _node(np.log(a.value), (a,), lambda g: ((a, g / a.value),))


def clamp(a, lo, hi):
    """Clip values to [lo, hi]; gradient passes only where unclipped."""
    out = np.clip(a.value, lo, hi)
    mask = (a.value > lo) & (a.value < hi)
    return _node(out, (a,), lambda g: ((a, g * mask),))


def leaky_relu(a, slope=0.2):
    mask = a.value > 0
    out = np.where(mask, a.value, a.value * np.asarray(slope, dtype=a.value.dtype))
    return _node(out, (a,), lambda g: ((a, g * np.where(mask, 1.0, slope).astype(a.value.dtype)),))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.value))
    out = out.astype(a.value.dtype)
    return _node(out, (a,), lambda g: ((a, g * out * (1.0 - out)),))


def tanh(a):
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: ((a, g * (1.0 - out * out)),))


# ---------------------------------------------------------------------------
# shape ops and reductions


def reshape(a, shape):
    shape = tuple(shape)
    old = a.value.shape
    return _node(a.value.reshape(shape), (a,), lambda g: ((a, g.reshape(old)),))


def flatten(a):
    return reshape(a, (a.value.shape[0], -1))


def mean(a):
    n = a.value.size
    out = np.asarray(a.value.mean(), dtype=a.value.dtype)
    return _node(out, (a,), lambda g: ((a, np.full_like(a.value, g / n)),))


def sum_all(a):
    out = np.asarray(a.value.sum(), dtype=a.value.dtype)
    return _node(out, (a,), lambda g: ((a, np.full_like(a.value, g)),))


# ---------------------------------------------------------------------------
# affine


def affine(x, w, b):
    """y[b,o] = sum_i x[b,i] w[i,o] + b[o]."""
    if x.value.ndim != 2:
        raise ShapeError(f"affine: input must be 2-D, got shape {x.value.shape}")
    if w.value.ndim != 2 or b.value.ndim != 1:
        raise ShapeError("affine: weights must be 2-D and bias 1-D")
    if x.value.shape[1] != w.value.shape[0]:
        raise ShapeError(
            f"affine: input axis 1 ({x.value.shape[1]}) != weight axis 0 ({w.value.shape[0]})"
        )
    if w.value.shape[1] != b.value.shape[0]:
        raise ShapeError(
            f"affine: weight axis 1 ({w.value.shape[1]}) != bias axis 0 ({b.value.shape[0]})"
        )
    out = x.value @ w.value + b.value

    def _bw(g):
        return (
            (x, g @ w.value.T),
            (w, x.value.T @ g),
            (b, g.sum(axis=0)),
        )

    return _node(out, (x, w, b), _bw)


# ---------------------------------------------------------------------------
# convolution (NCHW, square kernels, cross-correlation)


def _conv_out_size(size, k, stride, padding):
    num = size + 2 * padding - k
    if num % stride != 0 or num < 0:
        raise ShapeError(
            f"conv: spatial size {size} with kernel {k}, stride {stride}, "
            f"padding {padding} gives non-integral output"
        )
    return num // stride + 1


def _im2col_view(xp, k, stride, ho, wo):
    b, c = xp.shape[0], xp.shape[1]
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, k, k, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
    )


def _col2im(cols, b, c, h_target, w_target, k, stride, padding, ho, wo):
    """Scatter-add (B, C, k, k, ho, wo) columns back onto a padded image."""
    acc = np.zeros((b, c, h_target + 2 * padding, w_target + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            acc[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                :, :, i, j
            ]
    if padding:
        acc = acc[:, :, padding:-padding, padding:-padding]
    return acc


def conv2d(x, kernel, bias, stride=1, padding=0):
    """Strided cross-correlation; x [B,C,H,W], kernel [F,C,k,k], bias [F]."""
    if x.value.ndim != 4 or kernel.value.ndim != 4:
        raise ShapeError("conv2d: input and kernel must be 4-D")
    bsz, c, h, w = x.value.shape
    f, kc, k, k2 = kernel.value.shape
    if k != k2:
        raise ShapeError("conv2d: only square kernels supported")
    if kc != c:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {kc}")
    ho = _conv_out_size(h, k, stride, padding)
    wo = _conv_out_size(w, k, stride, padding)

    xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col_view(xp, k, stride, ho, wo).reshape(bsz, c * k * k, ho * wo)
    kf = kernel.value.reshape(f, c * k * k)
    out = (kf @ cols).reshape(bsz, f, ho, wo) + bias.value.reshape(1, f, 1, 1)

    def _bw(g):
        gf = g.reshape(bsz, f, ho * wo)
        dk = np.einsum("bfp,bqp->fq", gf, cols).reshape(kernel.value.shape)
        db = g.sum(axis=(0, 2, 3))
        dcols = np.einsum("fq,bfp->bqp", kf, gf).reshape(bsz, c, k, k, ho, wo)
        dx = _col2im(dcols, bsz, c, h, w, k, stride, padding, ho, wo)
        return ((x, dx), (kernel, dk), (bias, db))

    return _node(out, (x, kernel, bias), _bw)


def tconv2d(x, kernel, bias, stride=1, padding=0, output_padding=0):
    """Transposed convolution; x [B,Cin,H,W], kernel [Cin,Cout,k,k], bias [Cout].

    Output spatial size is (H-1)*stride - 2*padding + k + output_padding;
    the spatial mapping is the adjoint of conv2d's.
    """
    if x.value.ndim != 4 or kernel.value.ndim != 4:
        raise ShapeError("tconv2d: input and kernel must be 4-D")
    bsz, cin, h, w = x.value.shape
    kcin, cout, k, k2 = kernel.value.shape
    if k != k2:
        raise ShapeError("tconv2d: only square kernels supported")
    if kcin != cin:
        raise ShapeError(f"tconv2d: input channels {cin} != kernel channels {kcin}")
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (w - 1) * stride - 2 * padding + k + output_padding
    if ho <= 0 or wo <= 0:
        raise ShapeError("tconv2d: non-positive output size")

    kf = kernel.value.reshape(cin, cout * k * k)
    xf = x.value.reshape(bsz, cin, h * w)
    cols = np.einsum("cq,bcp->bqp", kf, xf).reshape(bsz, cout, k, k, h, w)
    acc = np.zeros(
        (bsz, cout, ho + 2 * padding + output_padding, wo + 2 * padding + output_padding),
        dtype=x.value.dtype,
    )
    for i in range(k):
        for j in range(k):
            acc[:, :, i : i + stride * h : stride, j : j + stride * w : stride] += cols[:, :, i, j]
    out = acc[:, :, padding : padding + ho, padding : padding + wo]
    out = out + bias.value.reshape(1, cout, 1, 1)

    def _bw(g):
        gp = np.pad(
            g,
            (
                (0, 0),
                (0, 0),
                (padding, padding + output_padding),
                (padding, padding + output_padding),
            ),
        )
        dcols = _im2col_view(gp, k, stride, h, w).reshape(bsz, cout * k * k, h * w)
        dx = np.einsum("cq,bqp->bcp", kf, dcols).reshape(x.value.shape)
        dk = np.einsum("bcp,bqp->cq", xf, dcols).reshape(kernel.value.shape)
        db = g.sum(axis=(0, 2, 3))
        return ((x, dx), (kernel, dk), (bias, db))

    return _node(out, (x, kernel, bias), _bw)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Per-parameter Adam accumulator."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_parameter(cls, param, beta1=0.5, beta2=0.999, epsilon=1e-8):
        return cls(
            first_moment=np.zeros_like(param.value),
            second_moment=np.zeros_like(param.value),
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(param, state, lr):
    """One bias-corrected Adam update in place; zeroes the gradient after."""
    g = param.grad
    state.step_count += 1
    t = state.step_count
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * (g * g)
    m_hat = state.first_moment / (1.0 - state.beta1**t)
    v_hat = state.second_moment / (1.0 - state.beta2**t)
    param.value = param.value - (lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(
        param.value.dtype
    )
    param.zero_grad()


class Adam:
    """Adam over a fixed parameter list, one state per parameter."""

    def __init__(self, params, lr, beta1=0.5, beta2=0.999, epsilon=1e-8):
        self.params = list(params)
        self.lr = lr
        self.states = [
            AdamState.for_parameter(p, beta1=beta1, beta2=beta2, epsilon=epsilon)
            for p in self.params
        ]

    def step(self):
        for p, s in zip(self.params, self.states):
            adam_step(p, s, self.lr)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
