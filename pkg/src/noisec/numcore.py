"""Small reverse-mode autodiff engine over float32 numpy arrays.

Only the op set needed by the classifier, the autoencoder and the gradient
attacks is provided: 3x3-style conv2d / transposed conv2d (NCHW), linear,
relu, reshape, fused softmax cross-entropy, MSE, elementwise add/sub/mul,
clip and sum/mean reductions.

Every op returns a new :class:`Tensor`.  When at least one input requires a
gradient the result keeps references to its parents plus a closure that maps
the output gradient to parent gradients; :func:`backward` walks that tape in
reverse topological order exactly once and then clears it.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32


class NumericError(FloatingPointError):
    """Raised when an op produces NaN/Inf or is used outside its contract."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ValueError(f"tensor shape must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")
    return arr


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    data = _finite(np.asarray(data, dtype=DTYPE), op)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, DTYPE(0)), (x,), backward, "relu")


def clip(x: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * inside,)

    return _make(np.clip(x.data, lo, hi), (x,), backward, "clip")


# ---------------------------------------------------------------------------
# shape
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ValueError(f"cannot reshape {x.shape} to {shape}") from err

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward, "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse everything but the batch axis."""
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(DTYPE),)

    return _make(x.data.sum(dtype=DTYPE), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size

    def backward(g):
        return (np.full(x.shape, g / n, dtype=DTYPE),)

    return _make(x.data.mean(dtype=DTYPE), (x,), backward, "mean")


# ---------------------------------------------------------------------------
# dense layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T + b with w of shape (out, in)."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _make(out, parents, backward, "linear")


def softmax(logits) -> np.ndarray:
    """Row softmax as a plain array (inference only)."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Fused softmax + negative log-likelihood over integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError("cross_entropy: labels must be a length-N vector of class indices")
    logp = log_softmax(logits)
    nll = -logp[np.arange(n), labels]
    scale = DTYPE(1.0 / n) if reduction == "mean" else DTYPE(1.0)
    value = nll.sum(dtype=DTYPE) * scale

    def backward(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (d * (g * scale),)

    return _make(value, (logits,), backward, "cross_entropy")


def mse(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        d = diff * (2.0 * g / n)
        return d, -d

    return _make((diff * diff).mean(dtype=DTYPE), (pred, target), backward, "mse")


# ---------------------------------------------------------------------------
# convolutions (NCHW, square kernels)
# ---------------------------------------------------------------------------

def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(n, c, hp, wp) -> (n, c*k*k, ho*wo) patch matrix, no axis transposes."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add (n, c*k*k, ho*wo) patches into an (n, c, hp, wp) buffer."""
    n, c, hp, wp = shape
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros(shape, dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 1) -> Tensor:
    """Cross-correlation with zero padding; w has shape (c_out, c_in, k, k)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    ho, wo = _out_size(h, k, stride, padding), _out_size(wd, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d: input smaller than kernel")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = w.data.reshape(co, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gm = g.reshape(n, co, ho * wo)
        gx = None
        if x.requires_grad:
            gxp = _col2im(wmat.T @ gm, xp.shape, k, stride, ho, wo)
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        gw = (gm @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=(0, 2))

    return _make(out.reshape(n, co, ho, wo), parents, backward, "conv2d")


def conv_transpose2d(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 1, output_padding: int = 0
) -> Tensor:
    """Gradient-of-conv2d style upsampling; w has shape (c_in, c_out, k, k).

    Output side is (n - 1) * stride - 2 * padding + k + output_padding.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[0] or w.shape[2] != w.shape[3]:
        raise ValueError(f"conv_transpose2d: input {x.shape} incompatible with weight {w.shape}")
    if output_padding < 0 or (output_padding and output_padding >= stride):
        raise ValueError("conv_transpose2d: output_padding must be smaller than stride")
    n, ci, h, wd = x.shape
    _, co, k, _ = w.shape
    hf, wf = (h - 1) * stride + k + output_padding, (wd - 1) * stride + k + output_padding
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho <= 0 or wo <= 0:
        raise ValueError("conv_transpose2d: empty output")
    xm = x.data.reshape(n, ci, h * wd)
    wmat = w.data.reshape(ci, -1)
    full = _col2im(wmat.T @ xm, (n, co, hf, wf), k, stride, h, wd)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if b is not None:
        out = out + b.data.reshape(1, co, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gfull = np.zeros((n, co, hf, wf), dtype=DTYPE)
        gfull[:, :, padding : padding + ho, padding : padding + wo] = g
        gcols = _im2col(gfull, k, stride, h, wd)
        gx = (wmat @ gcols).reshape(x.shape) if x.requires_grad else None
        gw = (xm @ gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(np.ascontiguousarray(out), parents, backward, "conv_transpose2d")


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are
    discarded and the tape is consumed.
    """
    if loss.data.ndim != 0 and loss.size != 1:
        raise NumericError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None:
        raise NumericError("loss is not on a tape (no input requires a gradient)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=DTYPE)
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        node._parents = ()
        node._backward = None


def sign(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = 0."""
    return np.sign(x).astype(DTYPE)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function, evaluated in float64."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
