"""Dense float64 tensors with reverse-mode automatic differentiation.

Each :class:`Tensor` produced by an operation is also its own graph node:
it remembers the tensors it was computed from and a closure mapping the
gradient of its output to gradients of those inputs.  Graphs are rebuilt on
every forward pass; leaf gradients accumulate until :func:`zero_grad`.

Only the operations the transformer needs are provided.  Broadcasting is
numpy's, and the backward pass sums gradients back to each input's shape.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels

__all__ = [
    "Tensor",
    "GradientCheckError",
    "GradientReport",
    "NonFiniteError",
    "tensor",
    "matmul",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "conv3x3",
    "log_sigmoid",
    "concat",
    "linear",
    "check_gradients",
    "zero_grad",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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
        return self.data

    def item(self):
        return float(self.data)

    # ------------------------------------------------------------------
    # graph traversal

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a seed needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ValueError(f"seed gradient shape {grad.shape} != output shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ------------------------------------------------------------------
    # operators

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return _node(-self.data, (self,), lambda g: (-g,), "neg")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _node(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return _node(np.transpose(self.data, axes), (self,), lambda g: (np.transpose(g, inv),), "transpose")

    def swap_last(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(axes)

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis):
        """Maximum along one axis; ties send the gradient to the first maximum."""
        x = self.data
        idx = np.expand_dims(x.argmax(axis=axis), axis)
        out = np.take_along_axis(x, idx, axis=axis).squeeze(axis)

        def backward(g):
            gx = np.zeros_like(x)
            np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
            return (gx,)

        return _node(out, (self,), backward, "max")

    def broadcast_to(self, shape):
        src = self.shape
        return _node(np.broadcast_to(self.data, shape).copy(), (self,), lambda g: (_unbroadcast(g, src),), "broadcast")


# ----------------------------------------------------------------------
# construction helpers


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"operation {op!r} produced non-finite values")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def zero_grad(params):
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)),
        "mul",
    )


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    sa, sb = a.shape, b.shape

    if b.ndim == 2:
        # (..., m, k) @ (k, n): one GEMM over the flattened leading axes
        a2 = a.data.reshape(-1, sa[-1])
        out = (a2 @ b.data).reshape(*sa[:-1], sb[-1])

        def backward(g):
            g2 = g.reshape(-1, sb[-1])
            return (g2 @ b.data.T).reshape(sa), a2.T @ g2

        return _node(out, (a, b), backward, "matmul")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def getitem(a, idx):
    shape = a.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in parts)

    def backward(g):
        gx = np.zeros(shape)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _node(a.data[idx].copy(), (a,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


def linear(x, weight, bias=None):
    y = matmul(x, weight)
    return y if bias is None else y + bias


# ----------------------------------------------------------------------
# kernel-backed ops


def _rows(a):
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]))


def softmax_rows(x):
    """Softmax along the last axis, stabilized by row-max subtraction."""
    x = _as_tensor(x)
    k = kernels.active()
    y = k.softmax_forward(_rows(x.data)).reshape(x.shape)
    return _node(y, (x,), lambda g: (k.softmax_backward(_rows(y), _rows(g)).reshape(y.shape),), "softmax")


def layer_norm(x, gamma, beta, eps=1e-6):
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} do not match feature size {d}")
    k = kernels.active()
    y, xhat, rstd = k.layernorm_forward(_rows(x.data), gamma.data, beta.data, float(eps))

    def backward(g):
        dx, dgamma, dbeta = k.layernorm_backward(_rows(g), xhat, rstd, gamma.data)
        return dx.reshape(x.shape), dgamma, dbeta

    return _node(y.reshape(x.shape), (x, gamma, beta), backward, "layer_norm")


def gelu(x):
    """Tanh-approximation GELU."""
    x = _as_tensor(x)
    k = kernels.active()
    flat = np.ascontiguousarray(x.data.ravel())
    y, t = k.gelu_forward(flat)
    return _node(
        y.reshape(x.shape),
        (x,),
        lambda g: (k.gelu_backward(flat, t, np.ascontiguousarray(g.ravel())).reshape(x.shape),),
        "gelu",
    )


def conv3x3(x, kernel, bias):
    """3x3 convolution, stride 1, zero padding 1, channel-last.

    ``x`` is (N, N, D) or (B, N, N, D); ``kernel`` is (C, 3, 3, D); ``bias``
    is (C,).  Output keeps the spatial size and has C channels.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if kernel.ndim != 4 or kernel.shape[1:3] != (3, 3):
        raise ValueError(f"conv3x3 needs kernels shaped (C, 3, 3, D), got {kernel.shape}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or xd.shape[-1] != kernel.shape[-1] or bias.shape != (kernel.shape[0],):
        raise ValueError(f"conv3x3 shape mismatch: input {x.shape}, kernels {kernel.shape}, bias {bias.shape}")
    xd = np.ascontiguousarray(xd)
    k = kernels.active()
    y = k.conv3x3_forward(xd, np.ascontiguousarray(kernel.data), np.ascontiguousarray(bias.data))

    def backward(g):
        g = np.ascontiguousarray(g[None] if single else g)
        dx, dk, db = k.conv3x3_backward(xd, np.ascontiguousarray(kernel.data), g)
        return (dx[0] if single else dx), dk, db

    return _node(y[0] if single else y, (x, kernel, bias), backward, "conv3x3")


def log_sigmoid(x):
    """log(1 / (1 + exp(-x))) computed without overflow."""
    x = _as_tensor(x)
    v = x.data
    out = np.minimum(v, 0.0) - np.log1p(np.exp(-np.abs(v)))
    # d/dx log sigmoid(x) = sigmoid(-x)
    sig_neg = np.exp(np.minimum(-v, 0.0)) / (1.0 + np.exp(-np.abs(v)))
    return _node(out, (x,), lambda g: (g * sig_neg,), "log_sigmoid")


# ----------------------------------------------------------------------
# gradient checking


class GradientCheckError(AssertionError):
    def __init__(self, report):
        self.report = report
        super().__init__(
            f"gradient check failed: {report.worst_param!r} has relative error "
            f"{report.max_rel_error:.3e} > tol {report.tol:.1e}"
        )


@dataclass
class GradientReport:
    max_rel_error: float
    worst_param: str | None
    tol: float
    errors: dict = field(default_factory=dict)

    @property
    def ok(self):
        return self.max_rel_error <= self.tol


def check_gradients(build, params, tol=1e-4, h=1e-5, floor=1e-6, raise_on_failure=True):
    """Compare analytic gradients of ``build()`` against central differences.

    ``build`` is a zero-argument callable returning a scalar Tensor; it is
    re-run for every perturbation, so it must rebuild its graph from the
    current ``params`` values.  ``params`` maps names to leaf Tensors (a list
    is named by position).  The error per parameter is
    ``||analytic - numeric|| / max(||analytic|| + ||numeric||, floor)``.
    The floor keeps parameters whose true gradient is exactly zero (for
    example attention key biases, which softmax ignores) from failing on
    finite-difference round-off alone.
    """
    if hasattr(params, "items"):
        params = dict(params.items())
    else:
        params = {str(i): p for i, p in enumerate(params)}
    for p in params.values():
        p.requires_grad = True
    zero_grad(params.values())
    out = build()
    if out.size != 1:
        raise ValueError(f"check_gradients needs a scalar output, got shape {out.shape}")
    out.backward()

    errors = {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = build().item()
            flat[i] = orig - h
            fm = build().item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
        diff = np.linalg.norm(analytic - numeric)
        scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor)
        errors[name] = float(diff / scale) if diff > 0 else 0.0
    zero_grad(params.values())

    worst = max(errors, key=errors.get) if errors else None
    report = GradientReport(errors[worst] if worst else 0.0, worst, tol, errors)
    if raise_on_failure and not report.ok:
        raise GradientCheckError(report)
    return report
