"""Minimal dense-tensor arithmetic with reverse-mode differentiation.

Values are numpy arrays; a Tape records primitive operations in creation
order (which is already a topological order) and the backward pass walks
that record in exact reverse. Two numeric modes exist: float64 for
verification (gradient checks are meaningless in float32) and float32
for training. A tape never mixes modes.

Gradients accumulate out-of-place; saved activations are never mutated,
and backward may run at most once per forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, RangeError, StateError, StructuralError

__all__ = [
    "Tape",
    "Var",
    "Graph",
    "GradReport",
    "grad_check",
    "l2_normalize",
    "logsumexp",
]


class Tape:
    """Execution record for one forward pass."""

    def __init__(self, dtype=np.float64):
        dtype = np.dtype(dtype)
        if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise StructuralError(f"unsupported tape dtype {dtype}")
        self.dtype = dtype
        self.nodes: list[Var] = []
        self.backward_done = False

    def input(self, name: str, value, trainable: bool = True) -> "Var":
        # always copy: saved activations must never alias caller buffers
        arr = np.array(value, dtype=self.dtype, order="C")
        return Var(self, arr, name=name, requires_grad=trainable, is_leaf=True)

    def constant(self, value) -> "Var":
        arr = np.array(value, dtype=self.dtype, order="C")
        return Var(self, arr, name=None, requires_grad=False, is_leaf=True)

    def backward(self, root: "Var", output_grad=None) -> None:
        """Accumulate gradients of `root` into every requiring node."""
        if self.backward_done:
            raise StateError("backward already ran for this tape")
        if root.tape is not self:
            raise StructuralError("root belongs to a different tape")
        if output_grad is None:
            if root.value.size != 1:
                raise StructuralError(
                    f"node {root.name}: implicit output grad needs a scalar"
                )
            output_grad = np.ones_like(root.value)
        else:
            output_grad = np.asarray(output_grad, dtype=self.dtype)
            if output_grad.shape != root.value.shape:
                raise StructuralError(
                    f"output grad shape {output_grad.shape} != {root.value.shape}"
                )
        self.backward_done = True
        root.grad = output_grad
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)


class Var:
    """One tape node: an array value plus the closure that propagates grads."""

    __slots__ = ("tape", "value", "grad", "name", "requires_grad", "parents",
                 "_backward")

    def __init__(self, tape, value, name=None, requires_grad=False, is_leaf=True):
        if name is None:
            name = f"node{len(tape.nodes)}"
        self.tape = tape
        self.value = value
        self.grad = None
        self.name = name
        self.requires_grad = requires_grad
        self.parents = ()
        self._backward = None
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def _accum(self, grad):
        if self.grad is None:
            self.grad = grad
        else:
            self.grad = self.grad + grad

    # arithmetic sugar; scalars and arrays become constants on the same tape
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


def _as_var(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise StructuralError("operands belong to different tapes")
        return x
    return tape.constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(tape, value, op, parents, backward):
    name = f"{op}{len(tape.nodes)}"
    out = Var(tape, value, name=name,
              requires_grad=any(p.requires_grad for p in parents),
              is_leaf=False)
    out.parents = tuple(parents)
    if out.requires_grad:
        out._backward = backward
    return out


def _check_finite(arr: np.ndarray, op: str, tape: Tape) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by node {op}{len(tape.nodes)}")


# ---------------------------------------------------------------------------
# elementwise primitives (broadcasting allowed, backward unbroadcasts)

def add(a, b):
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _as_var(tape, a), _as_var(tape, b)
    value = a.value + b.value

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(tape, value, "add", (a, b), backward)


def sub(a, b):
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _as_var(tape, a), _as_var(tape, b)
    value = a.value - b.value

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(tape, value, "sub", (a, b), backward)


def mul(a, b):
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _as_var(tape, a), _as_var(tape, b)
    value = a.value * b.value

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.value, b.shape))

    return _make(tape, value, "mul", (a, b), backward)


def div(a, b):
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _as_var(tape, a), _as_var(tape, b)
    value = a.value / b.value
    _check_finite(value, "div", tape)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.value, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * value / b.value, b.shape))

    return _make(tape, value, "div", (a, b), backward)


def exp(a: Var) -> Var:
    value = np.exp(a.value)
    _check_finite(value, "exp", a.tape)

    def backward(g):
        a._accum(g * value)

    return _make(a.tape, value, "exp", (a,), backward)


def log(a: Var) -> Var:
    if np.any(a.value <= 0):
        raise NumericError(
            f"log of non-positive value at node log{len(a.tape.nodes)}"
        )
    value = np.log(a.value)

    def backward(g):
        a._accum(g / a.value)

    return _make(a.tape, value, "log", (a,), backward)


def sqrt(a: Var) -> Var:
    if np.any(a.value < 0):
        raise NumericError(
            f"sqrt of negative value at node sqrt{len(a.tape.nodes)}"
        )
    value = np.sqrt(a.value)
    _check_finite(value, "sqrt", a.tape)

    def backward(g):
        a._accum(g * (0.5 / value))

    return _make(a.tape, value, "sqrt", (a,), backward)


def relu(a: Var) -> Var:
    value = np.maximum(a.value, 0)

    def backward(g):
        a._accum(g * (a.value > 0))

    return _make(a.tape, value, "relu", (a,), backward)


def reduce_sum(a: Var, axis=None, keepdims: bool = False) -> Var:
    value = a.value.sum(axis=axis, keepdims=keepdims)
    value = np.asarray(value, dtype=a.tape.dtype)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            g = np.expand_dims(g, tuple(ax % a.value.ndim for ax in axes))
        a._accum(np.broadcast_to(g, a.shape).copy())

    return _make(a.tape, value, "sum", (a,), backward)


def reshape(a: Var, shape) -> Var:
    value = a.value.reshape(shape)

    def backward(g):
        a._accum(g.reshape(a.shape))

    return _make(a.tape, value, "reshape", (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Var:
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _as_var(tape, a), _as_var(tape, b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise StructuralError(
            f"matmul{len(a.tape.nodes)}: expected 2-d operands, "
            f"got {a.value.shape} @ {b.value.shape}"
        )
    if a.value.shape[1] != b.value.shape[0]:
        raise StructuralError(
            f"matmul{len(a.tape.nodes)}: inner extents differ, "
            f"{a.value.shape} @ {b.value.shape}"
        )
    value = a.value @ b.value

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.value.T)
        if b.requires_grad:
            b._accum(a.value.T @ g)

    return _make(a.tape, value, "matmul", (a, b), backward)


def transpose(a: Var) -> Var:
    if a.value.ndim != 2:
        raise StructuralError("transpose expects a 2-d operand")
    value = np.ascontiguousarray(a.value.T)

    def backward(g):
        a._accum(np.ascontiguousarray(g.T))

    return _make(a.tape, value, "transpose", (a,), backward)


# ---------------------------------------------------------------------------
# spatial primitives (NCHW, stride 1, explicit zero padding)

def _conv_windows(xp: np.ndarray, kh: int, kw: int, dilation: int) -> np.ndarray:
    span_h = (kh - 1) * dilation + 1
    span_w = (kw - 1) * dilation + 1
    win = sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    return win[..., ::dilation, ::dilation]


def conv2d(x: Var, w: Var, b: Var | None = None, padding: int = 0,
           dilation: int = 1) -> Var:
    """2-d correlation; x (B,C,H,W), w (O,C,kh,kw), bias per out channel."""
    tape = x.tape
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise StructuralError(
            f"conv{len(tape.nodes)}: x and w must be 4-d, got "
            f"{x.value.shape}, {w.value.shape}"
        )
    if x.value.shape[1] != w.value.shape[1]:
        raise StructuralError(
            f"conv{len(tape.nodes)}: channel mismatch {x.value.shape} vs {w.value.shape}"
        )
    kh, kw = w.value.shape[2], w.value.shape[3]
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.value, pad) if padding else x.value
    span_h = (kh - 1) * dilation + 1
    if xp.shape[2] < span_h or xp.shape[3] < (kw - 1) * dilation + 1:
        raise StructuralError(
            f"conv{len(tape.nodes)}: kernel span exceeds padded input "
            f"{xp.shape[2:]}"
        )
    win = _conv_windows(xp, kh, kw, dilation)
    value = np.einsum("bcijuv,ocuv->boij", win, w.value, optimize=True)
    if b is not None:
        value = value + b.value[None, :, None, None]
    value = np.ascontiguousarray(value)
    ho, wo = value.shape[2], value.shape[3]

    def backward(g):
        if w.requires_grad:
            w._accum(np.einsum("bcijuv,boij->ocuv", win, g, optimize=True))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u * dilation:u * dilation + ho,
                        v * dilation:v * dilation + wo] += np.einsum(
                            "boij,oc->bcij", g, w.value[:, :, u, v],
                            optimize=True)
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            x._accum(gxp)

    parents = (x, w) if b is None else (x, w, b)
    return _make(tape, value, "conv", parents, backward)


def maxpool2d(x: Var, size: int = 2) -> Var:
    B, C, H, W = x.value.shape
    if H % size or W % size:
        raise StructuralError(
            f"pool{len(x.tape.nodes)}: extent {H}x{W} not divisible by {size}"
        )
    ho, wo = H // size, W // size
    tiles = x.value.reshape(B, C, ho, size, wo, size)
    flat = tiles.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, ho, wo, size * size)
    idx = flat.argmax(axis=-1)  # first max wins ties: deterministic routing
    value = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    value = np.ascontiguousarray(value)

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(B, C, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        x._accum(np.ascontiguousarray(gx.reshape(B, C, H, W)))

    return _make(x.tape, value, "pool", (x,), backward)


def global_avg_pool(x: Var) -> Var:
    B, C, H, W = x.value.shape
    value = x.value.mean(axis=(2, 3))

    def backward(g):
        scale = np.asarray(1.0 / (H * W), dtype=x.tape.dtype)
        x._accum(np.broadcast_to((g * scale)[:, :, None, None],
                                 x.value.shape).copy())

    return _make(x.tape, value, "gap", (x,), backward)


def upsample2x(x: Var) -> Var:
    """Nearest-neighbour 2x spatial upsampling."""
    B, C, H, W = x.value.shape
    value = x.value.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        x._accum(g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)))

    return _make(x.tape, value, "up", (x,), backward)


# ---------------------------------------------------------------------------
# composites

def normalize_rows(m: Var, radius: float) -> Var:
    """Scale each row of a 2-d Var onto the sphere of the given radius."""
    if m.value.ndim != 2:
        raise StructuralError("normalize_rows expects a 2-d operand")
    norms = np.sqrt((m.value ** 2).sum(axis=1))
    if np.any(norms <= 1e-12):
        bad = int(np.argmin(norms))
        raise NumericError(f"row {bad} has near-zero norm, cannot normalize")
    sq = reduce_sum(mul(m, m), axis=1, keepdims=True)
    return mul(m, div(m.tape.constant(float(radius)), sqrt(sq)))


def logsumexp_rows(logits: Var, mask: np.ndarray) -> Var:
    """Row-wise log-sum-exp restricted to mask==1 entries.

    The per-row shift is taken from the forward values and treated as a
    constant; log-sum-exp is shift invariant so gradients stay exact.
    """
    masked = np.where(mask > 0, logits.value, -np.inf)
    shift = masked.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(shift)):
        raise StructuralError("logsumexp_rows: a row has no unmasked entries")
    shift_c = logits.tape.constant(shift)
    e = mul(exp(sub(logits, shift_c)), logits.tape.constant(mask))
    return add(log(reduce_sum(e, axis=1, keepdims=True)), shift_c)


# ---------------------------------------------------------------------------
# plain-array utilities

def l2_normalize(v: np.ndarray, radius: float = 1.0) -> np.ndarray:
    """Return v scaled to the given Euclidean norm; direction preserved."""
    if radius <= 0:
        raise RangeError("radius must be positive")
    v = np.asarray(v, dtype=np.float64)
    n = float(np.sqrt((v ** 2).sum()))
    if n <= 1e-12:
        raise NumericError("cannot normalize a near-zero vector")
    return v * (radius / n)


def logsumexp(v) -> float:
    """log(sum(exp(v))) with max-shift; safe for |v| up to 1e6."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise StructuralError("logsumexp of empty input")
    m = float(v.max())
    return m + float(np.log(np.exp(v - m).sum()))


# ---------------------------------------------------------------------------
# spec-level graph wrapper and gradient checking

class Graph:
    """A reusable forward/backward program over named inputs.

    `build` receives (tape, inputs_dict) and returns a Var or a dict of
    Vars. Each forward creates a fresh tape; backward may run once per
    forward and returns one gradient per trainable input.
    """

    def __init__(self, build, input_names, trainable=None, dtype=np.float64):
        self.build = build
        self.input_names = tuple(input_names)
        self.trainable = set(trainable) if trainable is not None else set(input_names)
        self.dtype = np.dtype(dtype)
        self._tape: Tape | None = None
        self._inputs: dict[str, Var] = {}
        self._outputs: dict[str, Var] = {}

    def forward(self, **arrays):
        missing = set(self.input_names) - set(arrays)
        if missing:
            raise StructuralError(f"unbound graph inputs: {sorted(missing)}")
        tape = Tape(self.dtype)
        bound = {
            name: tape.input(name, arrays[name], trainable=name in self.trainable)
            for name in self.input_names
        }
        out = self.build(tape, bound)
        if isinstance(out, Var):
            out = {"out": out}
        for name, var in out.items():
            if not np.all(np.isfinite(var.value)):
                raise NumericError(f"graph output {name} is non-finite")
        self._tape, self._inputs, self._outputs = tape, bound, out
        return {name: var.value for name, var in out.items()}

    def backward(self, output_grad=None, output: str = "out"):
        if self._tape is None:
            raise StateError("backward called before forward")
        root = self._outputs.get(output)
        if root is None:
            raise StructuralError(f"unknown graph output {output!r}")
        self._tape.backward(root, output_grad)
        grads = {}
        for name, var in self._inputs.items():
            if name in self.trainable:
                g = var.grad
                grads[name] = np.zeros_like(var.value) if g is None else g
        return grads


@dataclass
class GradReport:
    """Analytic-vs-finite-difference comparison for every trainable input."""

    epsilon: float
    tolerance: float
    max_rel_err: dict[str, float] = field(default_factory=dict)
    passed: bool = True

    def worst(self) -> float:
        return max(self.max_rel_err.values()) if self.max_rel_err else 0.0


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-12)


def grad_check(graph: Graph, inputs: dict, epsilon: float = 1e-5,
               tolerance: float = 1e-6, output: str = "out") -> GradReport:
    """Central finite differences against the analytic backward pass.

    The graph output must be scalar. Runs in the graph's own dtype;
    float64 is required for the tolerances used here to be meaningful.
    """
    if graph.dtype != np.dtype(np.float64):
        raise StructuralError("grad_check requires a float64 graph")
    arrays = {k: np.array(v, dtype=np.float64, order="C") for k, v in inputs.items()}
    graph.forward(**arrays)
    analytic = graph.backward(output=output)
    report = GradReport(epsilon=epsilon, tolerance=tolerance)
    for name in sorted(analytic):
        base = arrays[name]
        grad = analytic[name]
        worst = 0.0
        flat = base.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = graph.forward(**arrays)[output].item()
            flat[i] = orig - epsilon
            dn = graph.forward(**arrays)[output].item()
            flat[i] = orig
            numeric = (up - dn) / (2 * epsilon)
            worst = max(worst, _rel_err(float(grad.ravel()[i]), numeric))
        report.max_rel_err[name] = worst
        if worst >= tolerance:
            report.passed = False
    return report
