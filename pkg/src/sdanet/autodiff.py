"""Reverse-mode autodiff over dense float64 arrays.

The graph is built eagerly: every op returns a :class:`Node` holding the
numpy value, references to its parent nodes, and a closure that pushes the
output gradient back to the parents. ``backward(loss)`` runs one reverse
topological sweep; a node consumed k times accumulates the sum of its k
contributions.

Only the operations the model needs exist here; broadcasting is supported
exactly as far as those ops require (bias vectors over batch/time axes).
Everything is float64, which is what makes the tight finite-difference
tolerances in :func:`grad_check` attainable.

All ops are pure functions of their inputs (plus an explicit RngState for
dropout); they are safe to call concurrently on disjoint data. A single
graph must not be built or swept from two threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BatchNormStatsError, ShapeError, WindowTooShortError

# Backward rules listed here are deliberately corrupted; used by the
# gradcheck CLI's --fault-inject negative test and by nothing else.
FAULT_INJECT: set[str] = set()


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite values in tensor input")
    return a


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        self.value = value if isinstance(value, np.ndarray) and value.dtype == np.float64 else _as_array(value)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def parameter(x) -> Node:
    """Wrap an array as a trainable leaf."""
    return Node(x, requires_grad=True)


def _accumulate(node: Node, g: np.ndarray, owned: bool = False):
    """Add a gradient contribution.

    ``owned=True`` promises ``g`` is freshly allocated by the caller and never
    reused, letting the first contribution be stored without a copy. Arrays
    that may alias the output gradient (pass-throughs, views, slices) must
    leave it False.
    """
    if node.grad is None:
        node.grad = g if owned else g.copy()
    else:
        node.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(value, parents, backward_fn) -> Node:
    req = any(p.requires_grad for p in parents)
    if not req:
        return Node(value)
    return Node(value, requires_grad=True, parents=tuple(parents), backward=backward_fn)


def backward(loss: Node):
    """Fill ``.grad`` on every node reachable from ``loss``.

    ``loss`` must hold a single element; its own gradient is seeded with ones.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.value.shape}")
    topo: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise primitives


def _unbroadcast2(g: np.ndarray, shape):
    """Like _unbroadcast but also reports whether a fresh array was made."""
    owned = False
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
        owned = True
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
        owned = True
    return g.reshape(shape), owned


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value + b.value

    def back(g):
        if a.requires_grad:
            _accumulate(a, *_unbroadcast2(g, a.value.shape))
        if b.requires_grad:
            _accumulate(b, *_unbroadcast2(g, b.value.shape))

    return _make(out, (a, b), back)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value - b.value

    def back(g):
        if a.requires_grad:
            _accumulate(a, *_unbroadcast2(g, a.value.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.value.shape), owned=True)

    return _make(out, (a, b), back)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value * b.value

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.value, a.value.shape), owned=True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.value, b.value.shape), owned=True)

    return _make(out, (a, b), back)


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value / b.value

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.value, a.value.shape), owned=True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
                        owned=True)

    return _make(out, (a, b), back)


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)

    def back(g):
        _accumulate(a, g * out, owned=True)

    return _make(out, (a,), back)


def log(a) -> Node:
    """Natural log; the caller guarantees strictly positive input."""
    a = as_node(a)
    out = np.log(a.value)

    def back(g):
        _accumulate(a, g / a.value, owned=True)

    return _make(out, (a,), back)


def sqrt(a) -> Node:
    """Square root; the caller guarantees strictly positive input."""
    a = as_node(a)
    out = np.sqrt(a.value)

    def back(g):
        _accumulate(a, g * 0.5 / out, owned=True)

    return _make(out, (a,), back)


def maximum(a, floor: float) -> Node:
    """Elementwise max with a scalar; subgradient 0 on the clamped side and at ties."""
    a = as_node(a)
    mask = a.value > floor
    out = np.where(mask, a.value, floor)

    def back(g):
        _accumulate(a, g * mask, owned=True)

    return _make(out, (a,), back)


def minimum(a, ceil: float) -> Node:
    a = as_node(a)
    mask = a.value < ceil
    out = np.where(mask, a.value, ceil)

    def back(g):
        _accumulate(a, g * mask, owned=True)

    return _make(out, (a,), back)


def relu(a) -> Node:
    return maximum(a, 0.0)


def sigmoid(a) -> Node:
    a = as_node(a)
    x = a.value
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def back(g):
        _accumulate(a, g * out * (1.0 - out), owned=True)

    return _make(out, (a,), back)


def pointwise(a, kind: str) -> Node:
    """Elementwise nonlinearity dispatch: ``relu`` or ``sigmoid``."""
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown pointwise kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        gg = g
        if not keepdims and axis is not None:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % a.value.ndim for ax in axes)
            for ax in sorted(axes):
                gg = np.expand_dims(gg, ax)
        _accumulate(a, np.broadcast_to(gg, a.value.shape).copy(), owned=True)

    return _make(np.asarray(out, dtype=np.float64), (a,), back)


def mean(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    if axis is None:
        count = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.value.shape[ax]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Node:
    a = as_node(a)
    out = a.value.reshape(shape)

    def back(g):
        _accumulate(a, g.reshape(a.value.shape))

    return _make(out, (a,), back)


def swap_last2(a) -> Node:
    """Transpose the trailing two axes (matrix transpose with batch dims)."""
    a = as_node(a)
    out = np.swapaxes(a.value, -1, -2)

    def back(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    return _make(out, (a,), back)


def slice_axis0(a, lo: int, hi: int) -> Node:
    """Rows [lo, hi) along the leading axis; gradient scatters back as zeros
    elsewhere."""
    a = as_node(a)
    if not 0 <= lo <= hi <= a.value.shape[0]:
        raise ShapeError(f"slice [{lo}:{hi}] out of range for leading extent {a.value.shape[0]}")
    out = a.value[lo:hi]

    def back(g):
        gx = np.zeros_like(a.value)
        gx[lo:hi] = g
        _accumulate(a, gx, owned=True)

    return _make(out, (a,), back)


def concat(parts, axis: int) -> Node:
    """Concatenate along ``axis``; gradients split back to the parts."""
    parts = [as_node(p) for p in parts]
    if not parts:
        raise ShapeError("concat needs at least one part")
    ref = parts[0].value.shape
    ax = axis % len(ref)
    for i, p in enumerate(parts[1:], start=1):
        s = p.value.shape
        if len(s) != len(ref) or any(s[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise ShapeError(
                f"concat part {i} has shape {s}, incompatible with {ref} off axis {ax}"
            )
    out = np.concatenate([p.value for p in parts], axis=ax)
    sizes = [p.value.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accumulate(p, g[tuple(sl)])

    return _make(out, tuple(parts), back)


def matmul(a, b) -> Node:
    """Matrix product; operands must be >= 2-D, batch dims broadcast."""
    a, b = as_node(a), as_node(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.value.shape} @ {b.value.shape}")
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.value.shape} @ {b.value.shape}")
    out = a.value @ b.value

    def back(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.value, -1, -2)
            _accumulate(a, _unbroadcast(ga, a.value.shape), owned=True)
        if b.requires_grad:
            gb = np.swapaxes(a.value, -1, -2) @ g
            if "dense_backward" in FAULT_INJECT:
                gb = gb * 1.01
            _accumulate(b, _unbroadcast(gb, b.value.shape), owned=True)

    return _make(out, (a, b), back)


# ---------------------------------------------------------------------------
# model-level ops


def conv1d_dilated(x, weight, bias, dilation: int) -> Node:
    """Valid (no padding) 1-D convolution along time with dilated taps.

    ``x`` is ``[T, Cin]`` or ``[B, T, Cin]``, ``weight`` is ``[k, Cin, Cout]``,
    ``bias`` is ``[Cout]``. Output time extent is ``T - (k-1)*dilation``.
    """
    x, weight, bias = as_node(x), as_node(weight), as_node(bias)
    xv, wv, bv = x.value, weight.value, bias.value
    if wv.ndim != 3:
        raise ShapeError(f"conv weight must be [k, Cin, Cout], got {wv.shape}")
    k, cin, cout = wv.shape
    if k < 1:
        raise ShapeError("kernel size must be >= 1")
    if int(dilation) < 1:
        raise ShapeError(f"dilation must be a positive int, got {dilation}")
    dilation = int(dilation)
    if xv.ndim not in (2, 3):
        raise ShapeError(f"conv input must be [T, Cin] or [B, T, Cin], got {xv.shape}")
    if xv.shape[-1] != cin:
        raise ShapeError(f"conv channel axis mismatch: input has {xv.shape[-1]} channels, weight expects {cin}")
    if bv.shape != (cout,):
        raise ShapeError(f"conv bias axis mismatch: expected ({cout},), got {bv.shape}")
    t = xv.shape[-2]
    t_out = t - (k - 1) * dilation
    if t_out <= 0:
        raise WindowTooShortError(f"window too short: T={t} leaves no output for k={k}, dilation={dilation}")

    out = np.broadcast_to(bv, xv.shape[:-2] + (t_out, cout)).copy()
    for j in range(k):
        out += xv[..., j * dilation : j * dilation + t_out, :] @ wv[j]

    def back(g):
        if x.requires_grad:
            gx = np.zeros_like(xv)
            for j in range(k):
                gx[..., j * dilation : j * dilation + t_out, :] += g @ wv[j].T
            if "conv_backward" in FAULT_INJECT:
                gx = gx * 1.01
            _accumulate(x, gx, owned=True)
        if weight.requires_grad:
            gw = np.empty_like(wv)
            gm = g.reshape(-1, cout)
            for j in range(k):
                xs = xv[..., j * dilation : j * dilation + t_out, :]
                gw[j] = xs.reshape(-1, cin).T @ gm
            _accumulate(weight, gw, owned=True)
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, cout).sum(axis=0), owned=True)

    return _make(out, (x, weight, bias), back)


def dense(x, w, b) -> Node:
    """Affine map on the trailing axis: ``x @ w + b``."""
    x, w, b = as_node(x), as_node(w), as_node(b)
    if w.value.ndim != 2:
        raise ShapeError(f"dense weight must be 2-D, got {w.value.shape}")
    if x.value.shape[-1] != w.value.shape[0]:
        raise ShapeError(
            f"dense trailing axis mismatch: input has {x.value.shape[-1]}, weight expects {w.value.shape[0]}"
        )
    if x.value.ndim == 1:
        flat = reshape(x, (1, x.value.shape[0]))
        return reshape(add(matmul(flat, w), b), (w.value.shape[1],))
    return add(matmul(x, w), b)


def softmax_lastaxis(a) -> Node:
    """Row softmax over the trailing axis, computed stably."""
    a = as_node(a)
    out = a.value - a.value.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)

    def back(g):
        tmp = g * out
        dot = tmp.sum(axis=-1, keepdims=True)
        np.subtract(g, dot, out=tmp)
        tmp *= out
        _accumulate(a, tmp, owned=True)

    return _make(out, (a,), back)


def scaled_dot_attention(q, k, v) -> Node:
    """softmax(q kT / sqrt(d)) v with rows of the attention map summing to 1."""
    q, k, v = as_node(q), as_node(k), as_node(v)
    d = q.value.shape[-1]
    if d == 0:
        raise ShapeError("attention feature width is zero")
    if k.value.shape[-1] != d:
        raise ShapeError(f"query/key feature dims differ: {d} vs {k.value.shape[-1]}")
    if k.value.shape[-2] != v.value.shape[-2]:
        raise ShapeError(f"key/value time extents differ: {k.value.shape[-2]} vs {v.value.shape[-2]}")
    if k.value.shape[-2] < 1:
        raise ShapeError("attention needs at least one key")
    # scale q rather than the much larger Tq x Tk score map
    scores = matmul(mul(q, 1.0 / np.sqrt(d)), swap_last2(k))
    return matmul(softmax_lastaxis(scores), v)


def l2_normalize(x, axis: int, eps: float = 1e-12) -> Node:
    """Divide by max(L2 norm along ``axis``, eps); zero slices stay zero."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_node(x)
    sq = sum_(mul(x, x), axis=axis, keepdims=True)
    # max(norm, eps) == sqrt(max(norm^2, eps^2)); the clamped branch carries
    # zero gradient, so all-zero slices backprop cleanly instead of NaN-ing.
    norm = sqrt(maximum(sq, eps * eps))
    return div(x, norm)


def dot_along_time(a, b) -> Node:
    """Per-channel inner product over the time axis (axis -2)."""
    a, b = as_node(a), as_node(b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"dot_along_time shape mismatch: {a.value.shape} vs {b.value.shape}")
    return sum_(mul(a, b), axis=-2)


def dropout(x, rate: float, rng, training: bool) -> Node:
    """Inverted dropout: zero with prob ``rate``, scale survivors by 1/(1-rate).

    Identity (and no RNG draw) when not training or when rate == 0, so a
    rate-0 forward consumes the same RNG sequence as a no-dropout one.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_node(x)
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.value.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out = x.value * keep * scale

    def back(g):
        _accumulate(x, g * keep * scale, owned=True)

    return _make(out, (x,), back)


def bce_loss(p, y, eps: float = 1e-7) -> Node:
    """Mean binary cross-entropy of probabilities ``p`` against labels ``y``.

    ``p`` is clamped to [eps, 1-eps] before the logs; gradients are exact at
    interior points and zero on the clamped side.
    """
    p = as_node(p)
    yv = np.asarray(y, dtype=np.float64)
    if yv.shape != p.value.shape:
        raise ShapeError(f"bce labels shape {yv.shape} != probabilities shape {p.value.shape}")
    pc = minimum(maximum(p, eps), 1.0 - eps)
    term = add(mul(log(pc), yv), mul(log(sub(1.0, pc)), 1.0 - yv))
    return mul(mean(term), -1.0)


# ---------------------------------------------------------------------------
# batch norm


@dataclass
class BnStats:
    """Running per-channel statistics for one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray


def batchnorm1d(x, gamma, beta, stats: BnStats | None, mode: str, momentum: float = 0.1,
                eps: float = 1e-5) -> tuple[Node, BnStats]:
    """Per-channel normalization of ``[B, T, C]`` over the batch*time axes.

    Train mode normalizes with the current batch moments (biased variance) and
    returns running stats updated as ``(1-momentum)*old + momentum*new``; the
    first train call seeds them from the batch directly. Eval mode requires
    initialized stats and raises otherwise, it never silently uses zeros.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    if x.value.ndim != 3:
        raise ShapeError(f"batchnorm1d expects [B, T, C], got {x.value.shape}")
    c = x.value.shape[-1]
    if gamma.value.shape != (c,) or beta.value.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},), got {gamma.value.shape} / {beta.value.shape}")

    if mode == "train":
        b, t, _ = x.value.shape
        if b * t < 2:
            raise ShapeError("train-mode batch norm needs batch*time >= 2")
        mu = mean(x, axis=(0, 1))
        centered = sub(x, mu)
        var = mean(mul(centered, centered), axis=(0, 1))
        inv = div(1.0, sqrt(add(var, eps)))
        out = add(mul(mul(centered, inv), gamma), beta)
        batch_mean = mu.value.copy()
        batch_var = var.value.copy()
        if stats is None:
            new = BnStats(batch_mean, batch_var)
        else:
            new = BnStats(
                (1.0 - momentum) * stats.mean + momentum * batch_mean,
                (1.0 - momentum) * stats.var + momentum * batch_var,
            )
        return out, new
    if mode == "eval":
        if stats is None:
            raise BatchNormStatsError("eval-mode batch norm called before any training batch set running stats")
        inv = 1.0 / np.sqrt(stats.var + eps)
        out = add(mul(mul(sub(x, stats.mean), inv), gamma), beta)
        return out, stats
    raise ValueError(f"unknown batchnorm mode {mode!r}")


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckEntry:
    input_index: int
    flat_index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    n_checked: int
    worst: list[GradCheckEntry] = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max rel err {self.max_rel_err:.3e} vs tol {self.tol:.1e} over {self.n_checked} elements"


def grad_check(f, inputs, step: float = 1e-5, tol: float = 1e-5, floor: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued ``f`` against central differences.

    ``f`` maps a list of Nodes to a scalar Node. Relative error per element is
    ``|a - n| / max(|a|, |n|, floor)``; the absolute floor keeps elements whose
    true gradient is zero (dead ReLU paths) from amplifying difference noise.
    """
    arrays = [_as_array(x).copy() for x in inputs]
    nodes = [Node(a.copy(), requires_grad=True) for a in arrays]
    out = f(nodes)
    if out.value.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    backward(out)
    analytic = [
        (n.grad.copy() if n.grad is not None else np.zeros_like(n.value)) for n in nodes
    ]

    def eval_at(arrs) -> float:
        res = f([Node(a) for a in arrs])
        return float(res.value.reshape(()))

    entries: list[GradCheckEntry] = []
    max_err = 0.0
    n_checked = 0
    for idx, base in enumerate(arrays):
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus = eval_at(arrays)
            flat[j] = orig - step
            f_minus = eval_at(arrays)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[idx].reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            entries.append(GradCheckEntry(idx, j, a, numeric, err))
            max_err = max(max_err, err)
            n_checked += 1
    entries.sort(key=lambda e: -e.rel_err)
    return GradCheckReport(max_rel_err=max_err, tol=tol, passed=max_err <= tol,
                           n_checked=n_checked, worst=entries[:5])
