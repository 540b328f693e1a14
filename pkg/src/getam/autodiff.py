"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

The engine is deliberately small: enough two-dimensional linear algebra and
pointwise machinery to build a patch-token transformer and differentiate any
scalar output of it.  Two features matter beyond the basics:

* interior nodes can be *retained* (``retain``), so their gradients are
  materialized during ``backward`` even though they are not leaves -- this is
  how per-block attention gradients are read out;
* ``finite_difference_check`` provides the numerical oracle every operation
  is validated against.

Gradients accumulate across repeated ``backward`` calls until
``clear_gradients`` is invoked.  Tape construction and backward are
single-threaded per graph; tensors detached from any tape are plain immutable
values.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class TapeError(RuntimeError):
    """Raised on misuse of the tape (stale tensors, non-scalar roots)."""


class Tensor:
    """A float64 array with an optional gradient slot.

    A tensor is either a *leaf* (created directly from data: inputs,
    parameters, constants) or the output of a recorded operation.  Leaves may
    be re-used across tapes; operation outputs are bound to the tape that
    produced them.
    """

    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "tape", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.tape: Tape | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        kind = "leaf" if self.is_leaf else "node"
        return f"Tensor(shape={self.shape}, {kind}, requires_grad={self.requires_grad})"


class _Node:
    """One recorded operation: output id, input ids, and a backward closure."""

    __slots__ = ("op", "out_id", "input_ids", "backward_fn")

    def __init__(self, op: str, out_id: int, input_ids: tuple[int, ...], backward_fn):
        self.op = op
        self.out_id = out_id
        self.input_ids = input_ids
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; nodes appear after all of their inputs."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.retained_ids: set[int] = set()
        self._tensors: dict[int, Tensor] = {}  # leaves and retained nodes
        self._next_id = 0

    def _fresh_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def adopt(self, t: Tensor) -> int:
        """Register a leaf tensor on this tape, re-adopting from older tapes."""
        if t.tape is self:
            return t.node_id  # type: ignore[return-value]
        if not t.is_leaf:
            raise TapeError("tensor produced on another tape used here (stale tape)")
        t.tape = self
        t.node_id = self._fresh_id()
        self._tensors[t.node_id] = t
        return t.node_id

    def record(self, op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
               backward_fn) -> Tensor:
        input_ids = tuple(self.adopt(t) for t in inputs)
        out = Tensor.__new__(Tensor)
        out.data = out_data
        out.grad = None
        out.requires_grad = any(t.requires_grad for t in inputs)
        out.is_leaf = False
        out.tape = self
        out.node_id = self._fresh_id()
        self.nodes.append(_Node(op, out.node_id, input_ids, backward_fn))
        return out

    def retain(self, t: Tensor) -> None:
        """Mark a node so its gradient is materialized by ``backward``."""
        if t.tape is not self or t.node_id is None:
            raise TapeError("cannot retain a tensor that is not on this tape")
        self.retained_ids.add(t.node_id)
        self._tensors[t.node_id] = t

    def clear_gradients(self) -> None:
        """Reset the gradient slot of every leaf and retained tensor."""
        for t in self._tensors.values():
            t.grad = None


def _common_tape(tensors: Sequence[Tensor]) -> Tape:
    """Resolve the tape shared by the operands, creating one if all are leaves."""
    tape = None
    for t in tensors:
        if not t.is_leaf:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise TapeError("operands belong to different tapes")
    if tape is None:
        for t in tensors:
            if t.tape is not None:
                tape = t.tape
                break
    return tape if tape is not None else Tape()


def retain(t: Tensor) -> Tensor:
    if t.tape is None:
        raise TapeError("cannot retain a tensor with no tape")
    t.tape.retain(t)
    return t


def backward(root: Tensor, tape: Tape | None = None) -> None:
    """Populate gradients of leaves (with ``requires_grad``) and retained nodes.

    ``root`` must be a scalar on an intact tape.  Repeated calls accumulate
    into existing gradients; use ``Tape.clear_gradients`` to reset.
    """
    if root.data.size != 1:
        raise TapeError(f"backward root must be scalar, got shape {root.shape}")
    if tape is None:
        tape = root.tape
    if tape is None or root.tape is not tape or root.node_id is None:
        raise TapeError("root tensor is not on the given tape (stale tape)")

    flowing: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = flowing.pop(node.out_id, None)
        if node.out_id in tape.retained_ids:
            target = tape._tensors[node.out_id]
            got = g if g is not None else np.zeros_like(target.data)
            target.grad = got.copy() if target.grad is None else target.grad + got
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for in_id, ig in zip(node.input_ids, input_grads):
            if ig is None:
                continue
            if in_id in flowing:
                flowing[in_id] = flowing[in_id] + ig
            else:
                flowing[in_id] = ig

    # Whatever is left flows into leaves.
    for in_id, g in flowing.items():
        t = tape._tensors.get(in_id)
        if t is None:
            continue
        if t.requires_grad or in_id in tape.retained_ids:
            t.grad = g.copy() if t.grad is None else t.grad + g
    # Retained leaves that received no gradient still get a populated slot.
    for rid in tape.retained_ids:
        t = tape._tensors[rid]
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


def clear_gradients(tape: Tape) -> None:
    tape.clear_gradients()


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def _require_2d(t: Tensor, op: str) -> None:
    if t.data.ndim != 2:
        raise DimensionError(f"{op} expects a 2-d tensor, got shape {t.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product C = A B; backward dA = dC B^T, dB = A^T dC."""
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    tape = _common_tape((a, b))
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return tape.record("matmul", (a, b), ad @ bd, back)


def add(a: Tensor, b: Tensor | float) -> Tensor:
    """Pointwise sum; exact shape match or scalar second operand only."""
    if not isinstance(b, Tensor):
        s = float(b)
        tape = _common_tape((a,))
        return tape.record("add_scalar", (a,), a.data + s, lambda g: (g,))
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    tape = _common_tape((a, b))
    return tape.record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor | float) -> Tensor:
    """Pointwise product; exact shape match or scalar second operand only."""
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    tape = _common_tape((a, b))
    ad, bd = a.data, b.data
    return tape.record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    tape = _common_tape((a,))
    return tape.record("scale", (a,), a.data * s, lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is taken to be 0."""
    tape = _common_tape((a,))
    mask = a.data > 0.0
    return tape.record("relu", (a,), np.where(mask, a.data, 0.0),
                       lambda g: (g * mask,))


def power(a: Tensor, p: float) -> Tensor:
    """x**p with scalar exponent; backward p * x**(p-1) * g."""
    p = float(p)
    tape = _common_tape((a,))
    ad = a.data
    return tape.record("power", (a,), ad ** p, lambda g: (g * p * ad ** (p - 1.0),))


_ELEMENTWISE = {"add": add, "mul": mul, "relu": None, "scale": None, "power": None}


def elementwise(kind: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Dispatch over the pointwise operation family.

    ``add`` and ``mul`` take a tensor (exact shape) or scalar second operand;
    ``scale`` and ``power`` take a scalar; ``relu`` is unary.
    """
    if kind == "add":
        return add(a, b)  # type: ignore[arg-type]
    if kind == "mul":
        return mul(a, b)  # type: ignore[arg-type]
    if kind == "relu":
        return relu(a)
    if kind == "scale":
        return scale(a, b)  # type: ignore[arg-type]
    if kind == "power":
        return power(a, b)  # type: ignore[arg-type]
    raise ValueError(f"unknown elementwise kind {kind!r}")


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by subtracting each row's maximum.

    Backward applies the softmax Jacobian-vector product
    dX = P * (g - sum(g * P, rows)).
    """
    _require_2d(a, "softmax_rows")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    tape = _common_tape((a,))
    return tape.record("softmax_rows", (a,), p, back)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU: x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def back(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (phi + x * pdf),)

    tape = _common_tape((a,))
    return tape.record("gelu", (a,), out, back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then affine per column."""
    _require_2d(x, "layer_norm")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match width {d}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data
    gd = gamma.data

    def back(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gd
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    tape = _common_tape((x, gamma, beta))
    return tape.record("layer_norm", (x, gamma, beta), out, back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w plus a per-row bias; the fully-connected workhorse."""
    _require_2d(x, "linear")
    _require_2d(w, "linear")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear inner dims disagree: {x.shape} x {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is None:
        tape = _common_tape((x, w))
        return tape.record("linear", (x, w), out,
                           lambda g: (g @ wd.T, xd.T @ g))
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear bias shape {b.shape} does not match width {w.shape[1]}")
    tape = _common_tape((x, w, b))
    return tape.record("linear", (x, w, b), out + b.data,
                       lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-k vector (or 1-by-k row) to every row of a m-by-k tensor."""
    _require_2d(x, "add_rowvec")
    vd = v.data.reshape(-1)
    if vd.shape[0] != x.shape[1]:
        raise DimensionError(f"add_rowvec shapes disagree: {x.shape} vs {v.shape}")
    vshape = v.shape
    tape = _common_tape((x, v))
    return tape.record("add_rowvec", (x, v), x.data + vd,
                       lambda g: (g, g.sum(axis=0).reshape(vshape)))


def mean_pool(x: Tensor) -> Tensor:
    """Average over the token (row) axis; returns a 1-by-d tensor."""
    _require_2d(x, "mean_pool")
    m = x.shape[0]
    tape = _common_tape((x,))
    return tape.record("mean_pool", (x,), x.data.mean(axis=0, keepdims=True),
                       lambda g: (np.repeat(g, m, axis=0) / m,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    tape = _common_tape((x,))
    return tape.record("sum_all", (x,), np.asarray(x.data.sum()),
                       lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    tape = _common_tape((x,))
    return tape.record("mean_all", (x,), np.asarray(x.data.mean()),
                       lambda g: (np.full(shape, float(g) / n),))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    _require_2d(x, "slice_rows")
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    tape = _common_tape((x,))
    return tape.record("slice_rows", (x,), x.data[start:stop].copy(), back)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _require_2d(x, "slice_cols")
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    tape = _common_tape((x,))
    return tape.record("slice_cols", (x,), x.data[:, start:stop].copy(), back)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    _require_2d(a, "concat_rows")
    _require_2d(b, "concat_rows")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"concat_rows widths disagree: {a.shape} vs {b.shape}")
    ma = a.shape[0]
    tape = _common_tape((a, b))
    return tape.record("concat_rows", (a, b),
                       np.concatenate([a.data, b.data], axis=0),
                       lambda g: (g[:ma].copy(), g[ma:].copy()))


def transpose2d(x: Tensor) -> Tensor:
    _require_2d(x, "transpose2d")
    tape = _common_tape((x,))
    return tape.record("transpose2d", (x,), x.data.T.copy(),
                       lambda g: (g.T.copy(),))


def reshape(x: Tensor, new_shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    tape = _common_tape((x,))
    return tape.record("reshape", (x,), x.data.reshape(new_shape).copy(),
                       lambda g: (g.reshape(old),))


def pick(x: Tensor, index: tuple[int, ...] | int) -> Tensor:
    """Extract one entry as a scalar tensor."""
    idx = (index,) if isinstance(index, int) else tuple(index)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[idx] = float(g)
        return (out,)

    tape = _common_tape((x,))
    return tape.record("pick", (x,), np.asarray(x.data[idx]), back)


def extract_patches(image: Tensor, patch: int) -> Tensor:
    """Rearrange a [3, H, W] image into [n, 3*patch*patch] flattened patches.

    Pure index permutation; backward scatters gradients back to pixels.
    """
    if image.data.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"extract_patches expects [3, H, W], got {image.shape}")
    _, h, w = image.shape
    if h % patch or w % patch:
        raise DimensionError(f"image size {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch

    def fwd(arr):
        return (arr.reshape(3, gh, patch, gw, patch)
                   .transpose(1, 3, 0, 2, 4)
                   .reshape(gh * gw, 3 * patch * patch))

    def back(g):
        return (g.reshape(gh, gw, 3, patch, patch)
                 .transpose(2, 0, 3, 1, 4)
                 .reshape(3, h, w),)

    tape = _common_tape((image,))
    return tape.record("extract_patches", (image,), fwd(image.data), back)


def bce_with_logits_mean(z: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy between sigmoid(z) and 0/1 targets.

    Computed in the numerically stable form
    max(z, 0) - z*t + log(1 + exp(-|z|)); backward is (sigmoid(z) - t) / N.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != z.shape:
        raise DimensionError(f"bce targets shape {t.shape} != logits shape {z.shape}")
    zd = z.data
    loss = np.maximum(zd, 0.0) - zd * t + np.log1p(np.exp(-np.abs(zd)))
    n = zd.size

    def back(g):
        sig = np.where(zd >= 0, 1.0 / (1.0 + np.exp(-zd)),
                       np.exp(zd) / (1.0 + np.exp(zd)))
        return (float(g) * (sig - t) / n,)

    tape = _common_tape((z,))
    return tape.record("bce_with_logits_mean", (z,), np.asarray(loss.mean()), back)


def softmax_xent_ignore(logits: Tensor, labels: np.ndarray,
                        ignore_index: int = 255) -> Tensor:
    """Mean softmax cross-entropy over rows whose label is not the ignore index.

    ``logits`` is [N, K] with one row per pixel; ``labels`` holds class ids in
    0..K-1 or ``ignore_index``.  Ignored rows are never read, so perturbing
    them cannot change the value.  With no valid rows the loss is exactly 0.
    """
    _require_2d(logits, "softmax_xent_ignore")
    lab = np.asarray(labels).reshape(-1)
    if lab.shape[0] != logits.shape[0]:
        raise DimensionError(
            f"labels length {lab.shape[0]} != logit rows {logits.shape[0]}")
    valid = np.flatnonzero(lab != ignore_index)
    shape = logits.shape
    if valid.size == 0:
        tape = _common_tape((logits,))
        return tape.record("softmax_xent_ignore", (logits,), np.asarray(0.0),
                           lambda g: (np.zeros(shape),))
    sub = logits.data[valid]
    cls = lab[valid].astype(np.int64)
    zmax = sub.max(axis=1, keepdims=True)
    e = np.exp(sub - zmax)
    denom = e.sum(axis=1)
    logp = sub - zmax - np.log(denom)[:, None]
    loss = -logp[np.arange(valid.size), cls].mean()
    probs = e / denom[:, None]

    def back(g):
        gsub = probs.copy()
        gsub[np.arange(valid.size), cls] -= 1.0
        out = np.zeros(shape)
        out[valid] = float(g) * gsub / valid.size
        return (out,)

    tape = _common_tape((logits,))
    return tape.record("softmax_xent_ignore", (logits,), np.asarray(loss), back)


# ---------------------------------------------------------------------------
# numerical oracle
# ---------------------------------------------------------------------------

def finite_difference_check(f: Callable[[Tensor], Tensor], x: np.ndarray,
                            eps: float = 1e-5,
                            coords: Sequence[tuple[int, ...]] | None = None) -> float:
    """Worst-case deviation between analytic and central-difference gradients.

    ``f`` maps a leaf tensor to a scalar tensor.  Each checked coordinate is
    perturbed by +-eps and the two-sided slope is compared against the
    gradient from ``backward``.  Deviations are scaled by the largest gradient
    magnitude, with an absolute floor of 1e-8 in the denominator (a
    per-coordinate denominator would drown exact zero entries in cancellation
    noise from the two function evaluations).

    ``coords`` restricts the check to a subset of coordinates; default all.
    """
    x = np.asarray(x, dtype=np.float64)
    xt = Tensor(x, requires_grad=True)
    y = f(xt)
    if y.data.size != 1:
        raise TapeError("finite_difference_check requires a scalar-valued function")
    backward(y)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)

    if coords is None:
        coords = list(np.ndindex(*x.shape)) if x.shape else [()]
    numeric = np.zeros(len(coords))
    exact = np.zeros(len(coords))
    for k, idx in enumerate(coords):
        xp = x.copy()
        xp[idx] += eps
        fp = f(Tensor(xp)).item()
        xm = x.copy()
        xm[idx] -= eps
        fm = f(Tensor(xm)).item()
        numeric[k] = (fp - fm) / (2.0 * eps)
        exact[k] = analytic[idx]
    denom = max(1e-8, float(np.max(np.abs(exact))), float(np.max(np.abs(numeric))))
    return float(np.max(np.abs(exact - numeric)) / denom)
