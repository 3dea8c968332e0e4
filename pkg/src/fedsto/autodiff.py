"""Small static-graph reverse-mode autodiff over numpy arrays.

A :class:`Graph` is built once by calling op methods on :class:`Var` handles;
every op appends a node, so node order is a topological order by
construction. :func:`forward_backward` binds named inputs, evaluates the nodes
in order and walks them in exact reverse order for the backward pass.

Values are stored as float32 by default. Reductions, matrix products and
convolutions accumulate in float64 and are narrowed afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ContractError",
    "Graph",
    "ShapeError",
    "SpectralNorm",
    "Trace",
    "Var",
    "check_finite",
    "forward_backward",
    "run",
    "spectral_norm",
]

F64 = np.float64


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""

    def __init__(self, node: int, op: str, message: str):
        self.node = node
        self.op = op
        super().__init__(f"node {node} ({op}): {message}")


class ContractError(RuntimeError):
    pass


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    name: str | None = None


class Var:
    """Handle on a graph node. Arithmetic operators append new nodes."""

    __slots__ = ("graph", "idx")

    def __init__(self, graph: "Graph", idx: int):
        self.graph = graph
        self.idx = idx

    @property
    def shape(self) -> tuple[int, ...]:
        return self.graph.nodes[self.idx].shape

    def __repr__(self):
        node = self.graph.nodes[self.idx]
        return f"Var({self.idx}, {node.op}, shape={node.shape})"

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.graph.const(np.full(self.shape, other))

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.shift(self, float(other))
        return self.graph.add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.shift(self, -float(other))
        return self.graph.sub(self, self._lift(other))

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.shift(self.graph.scale(self, -1.0), float(other))
        return self.graph.sub(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.scale(self, float(other))
        return self.graph.mul(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.scale(self, 1.0 / float(other))
        return self.graph.div(self, self._lift(other))

    def __rtruediv__(self, other):
        return self.graph.div(self._lift(other), self)

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    @property
    def T(self):
        return self.graph.transpose(self)

    def sum(self, axis: int | None = None):
        return self.graph.sum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.graph.reshape(self, shape)


# --------------------------------------------------------------------------
# op kernels: forward(vals, attrs, cache) -> array
#             backward(g, vals, out, attrs, cache) -> tuple of grads (or None)
# --------------------------------------------------------------------------

def _sum_to_bias(g, shape):
    return g.reshape(-1, shape[0]).sum(axis=0) if len(shape) == 1 and g.ndim > 1 else g


def _fw_add(v, a, c):
    return v[0].astype(F64) + v[1]


def _bw_add(g, v, out, a, c):
    return g, _sum_to_bias(g, v[1].shape)


def _bw_sub(g, v, out, a, c):
    return g, -_sum_to_bias(g, v[1].shape)


def _fw_div(v, a, c):
    return v[0].astype(F64) / v[1]


def _bw_div(g, v, out, a, c):
    b = v[1].astype(F64)
    return g / b, -g * v[0] / (b * b)


def _fw_matmul(v, a, c):
    return v[0].astype(F64) @ v[1].astype(F64)


def _bw_matmul(g, v, out, a, c):
    return g @ v[1].astype(F64).T, v[0].astype(F64).T @ g


def _im2col(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo = win.shape[:3]
    return np.ascontiguousarray(win, dtype=F64).reshape(n * ho * wo, -1), (n, ho, wo)


def _fw_conv(v, a, c):
    x, w = v
    o, _, kh, kw = w.shape
    cols, (n, ho, wo) = _im2col(x, kh, kw, a["stride"], a["pad"])
    c["cols"] = cols
    out = cols @ w.reshape(o, -1).astype(F64).T
    return out.reshape(n, ho, wo, o)


def _bw_conv(g, v, out, a, c):
    x, w = v
    o, ci, kh, kw = w.shape
    s, p = a["stride"], a["pad"]
    n, ho, wo, _ = g.shape
    g2 = g.reshape(-1, o)
    gw = (g2.T @ c["cols"]).reshape(w.shape)
    gcols = (g2 @ w.reshape(o, -1).astype(F64)).reshape(n, ho, wo, ci, kh, kw)
    h, wd = x.shape[1] + 2 * p, x.shape[2] + 2 * p
    gx = np.zeros((n, h, wd, ci))
    for i in range(kh):
        for j in range(kw):
            gx[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += gcols[..., i, j]
    if p:
        gx = gx[:, p:-p, p:-p, :]
    return gx, gw


def _fw_lrelu(v, a, c):
    x = v[0]
    return np.where(x > 0, x, a["slope"] * x.astype(F64))


def _bw_lrelu(g, v, out, a, c):
    return (g * np.where(v[0] > 0, 1.0, a["slope"]),)


def _fw_sigmoid(v, a, c):
    x = v[0].astype(F64)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _bw_sigmoid(g, v, out, a, c):
    y = out.astype(F64)
    return (g * y * (1.0 - y),)


def _fw_log(v, a, c):
    return np.log(np.maximum(v[0].astype(F64), a["eps"]))


def _bw_log(g, v, out, a, c):
    x = v[0].astype(F64)
    return (np.where(x > a["eps"], g / np.maximum(x, a["eps"]), 0.0),)


def _fw_atan(v, a, c):
    return np.arctan(v[0].astype(F64))


def _bw_atan(g, v, out, a, c):
    x = v[0].astype(F64)
    return (g / (1.0 + x * x),)


def _fw_square(v, a, c):
    x = v[0].astype(F64)
    return x * x


def _fw_power(v, a, c):
    return np.power(np.maximum(v[0].astype(F64), 0.0), a["p"])


def _bw_power(g, v, out, a, c):
    p = a["p"]
    if p == 0:
        return (np.zeros_like(g),)
    x = np.maximum(v[0].astype(F64), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = p * np.power(x, p - 1) if p >= 1 else np.where(x > 0, p * np.power(x, p - 1), 0.0)
    return (g * d,)


def _fw_max(v, a, c):
    return np.maximum(v[0].astype(F64), v[1])


def _bw_max(g, v, out, a, c):
    m = v[0] >= v[1]
    return np.where(m, g, 0.0), np.where(m, 0.0, g)


def _fw_min(v, a, c):
    return np.minimum(v[0].astype(F64), v[1])


def _bw_min(g, v, out, a, c):
    m = v[0] <= v[1]
    return np.where(m, g, 0.0), np.where(m, 0.0, g)


def _log_softmax(z):
    z = z.astype(F64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def _fw_softmax(v, a, c):
    return np.exp(_log_softmax(v[0]))


def _bw_softmax(g, v, out, a, c):
    y = out.astype(F64)
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _fw_softmax_ce(v, a, c):
    logp = _log_softmax(v[0])
    c["p"] = np.exp(logp)
    return -(v[1] * logp).sum(axis=-1)


def _bw_softmax_ce(g, v, out, a, c):
    t = v[1].astype(F64)
    gz = (c["p"] * t.sum(axis=-1, keepdims=True) - t) * g[..., None]
    return gz, None


def _fw_sum(v, a, c):
    return np.sum(v[0], axis=a["axis"], dtype=F64)


def _bw_sum(g, v, out, a, c):
    shape = v[0].shape
    if a["axis"] is None:
        return (np.broadcast_to(g, shape),)
    return (np.broadcast_to(np.expand_dims(g, a["axis"]), shape),)


def _fw_slice(v, a, c):
    return v[0][..., a["start"]:a["stop"]]


def _bw_slice(g, v, out, a, c):
    gx = np.zeros(v[0].shape)
    gx[..., a["start"]:a["stop"]] = g
    return (gx,)


def _fw_spectral(v, a, c):
    res = spectral_norm(v[0], a["iterations"], a["seed"])
    c["res"] = res
    return np.asarray(res.sigma)


def _bw_spectral(g, v, out, a, c):
    res = c["res"]
    return (g * np.outer(res.u, res.v),)


_KERNELS: dict[str, tuple[Callable, Callable | None]] = {
    "add": (_fw_add, _bw_add),
    "sub": (lambda v, a, c: v[0].astype(F64) - v[1], _bw_sub),
    "mul": (lambda v, a, c: v[0].astype(F64) * v[1],
            lambda g, v, out, a, c: (g * v[1], g * v[0])),
    "div": (_fw_div, _bw_div),
    "scale": (lambda v, a, c: v[0].astype(F64) * a["k"], lambda g, v, out, a, c: (g * a["k"],)),
    "shift": (lambda v, a, c: v[0].astype(F64) + a["k"], lambda g, v, out, a, c: (g,)),
    "matmul": (_fw_matmul, _bw_matmul),
    "transpose": (lambda v, a, c: v[0].T, lambda g, v, out, a, c: (g.T,)),
    "reshape": (lambda v, a, c: v[0].reshape(a["shape"]),
                lambda g, v, out, a, c: (g.reshape(v[0].shape),)),
    "conv2d": (_fw_conv, _bw_conv),
    "leaky_relu": (_fw_lrelu, _bw_lrelu),
    "sigmoid": (_fw_sigmoid, _bw_sigmoid),
    "log": (_fw_log, _bw_log),
    "atan": (_fw_atan, _bw_atan),
    "square": (_fw_square, lambda g, v, out, a, c: (2.0 * g * v[0],)),
    "power": (_fw_power, _bw_power),
    "maximum": (_fw_max, _bw_max),
    "minimum": (_fw_min, _bw_min),
    "softmax": (_fw_softmax, _bw_softmax),
    "softmax_ce": (_fw_softmax_ce, _bw_softmax_ce),
    "sum": (_fw_sum, _bw_sum),
    "slice": (_fw_slice, _bw_slice),
    "spectral_norm": (_fw_spectral, _bw_spectral),
}


class Graph:
    """Append-only list of primitive nodes."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    def _push(self, op, inputs: Sequence[Var], shape, attrs=None, name=None) -> Var:
        for x in inputs:
            if x.graph is not self:
                raise ContractError(f"{op}: operand belongs to a different graph")
        self.nodes.append(Node(op, tuple(x.idx for x in inputs), tuple(shape), attrs or {}, name))
        return Var(self, len(self.nodes) - 1)

    def _fail(self, op, msg):
        raise ShapeError(len(self.nodes), op, msg)

    # -- leaves -----------------------------------------------------------
    def input(self, name: str, shape: Sequence[int], grad: bool = True) -> Var:
        if name in self.inputs:
            raise ValueError(f"duplicate input name {name!r}")
        var = self._push("input", (), tuple(shape), {"grad": grad}, name)
        self.inputs[name] = var.idx
        return var

    def const(self, value) -> Var:
        arr = np.asarray(value)
        return self._push("const", (), arr.shape, {"value": arr})

    # -- elementwise --------------------------------------------------------
    def _binary(self, op, a: Var, b: Var, bias_ok=False) -> Var:
        if a.shape != b.shape:
            if not (bias_ok and len(b.shape) == 1 and a.shape and a.shape[-1] == b.shape[0]):
                self._fail(op, f"shapes {a.shape} and {b.shape} differ")
        return self._push(op, (a, b), a.shape)

    def add(self, a, b):
        return self._binary("add", a, b, bias_ok=True)

    def sub(self, a, b):
        return self._binary("sub", a, b, bias_ok=True)

    def mul(self, a, b):
        return self._binary("mul", a, b)

    def div(self, a, b):
        return self._binary("div", a, b)

    def maximum(self, a, b):
        return self._binary("maximum", a, b)

    def minimum(self, a, b):
        return self._binary("minimum", a, b)

    def scale(self, a, k: float):
        return self._push("scale", (a,), a.shape, {"k": float(k)})

    def shift(self, a, k: float):
        return self._push("shift", (a,), a.shape, {"k": float(k)})

    def leaky_relu(self, a, slope=0.1):
        return self._push("leaky_relu", (a,), a.shape, {"slope": float(slope)})

    def sigmoid(self, a):
        return self._push("sigmoid", (a,), a.shape)

    def log(self, a, eps=1e-7):
        return self._push("log", (a,), a.shape, {"eps": float(eps)})

    def atan(self, a):
        return self._push("atan", (a,), a.shape)

    def square(self, a):
        return self._push("square", (a,), a.shape)

    def power(self, a, p: float):
        if p < 0:
            self._fail("power", "negative exponent")
        return self._push("power", (a,), a.shape, {"p": float(p)})

    # -- linear algebra -----------------------------------------------------
    def matmul(self, a, b):
        if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
            self._fail("matmul", f"cannot multiply {a.shape} by {b.shape}")
        return self._push("matmul", (a, b), (a.shape[0], b.shape[1]))

    def transpose(self, a):
        if len(a.shape) != 2:
            self._fail("transpose", f"rank-2 operand required, got {a.shape}")
        return self._push("transpose", (a,), a.shape[::-1])

    def reshape(self, a, shape):
        shape = tuple(int(s) for s in shape)
        if math.prod(shape) != math.prod(a.shape):
            self._fail("reshape", f"cannot reshape {a.shape} to {shape}")
        return self._push("reshape", (a,), shape, {"shape": shape})

    def conv2d(self, x, w, stride=1, pad=0):
        """Cross-correlation of NHWC ``x`` with an (out, in, kh, kw) kernel."""
        if len(x.shape) != 4 or len(w.shape) != 4:
            self._fail("conv2d", f"expected NHWC input and OIHW kernel, got {x.shape}, {w.shape}")
        n, h, wd, c = x.shape
        o, ci, kh, kw = w.shape
        if ci != c:
            self._fail("conv2d", f"kernel expects {ci} input channels, input has {c}")
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (wd + 2 * pad - kw) // stride + 1
        if ho < 1 or wo < 1:
            self._fail("conv2d", "kernel larger than padded input")
        return self._push("conv2d", (x, w), (n, ho, wo, o), {"stride": stride, "pad": pad})

    def softmax(self, z):
        return self._push("softmax", (z,), z.shape)

    def softmax_ce(self, logits, target):
        """Cross-entropy of softmax(logits) against a target distribution, over the last axis."""
        if logits.shape != target.shape:
            self._fail("softmax_ce", f"logits {logits.shape} vs target {target.shape}")
        return self._push("softmax_ce", (logits, target), logits.shape[:-1])

    def sum(self, a, axis: int | None = None):
        if axis is None:
            return self._push("sum", (a,), (), {"axis": None})
        axis = axis % len(a.shape)
        shape = a.shape[:axis] + a.shape[axis + 1:]
        return self._push("sum", (a,), shape, {"axis": axis})

    def channels(self, a, start: int, stop: int):
        """Slice ``a[..., start:stop]``."""
        if not 0 <= start < stop <= a.shape[-1]:
            self._fail("slice", f"bad channel range {start}:{stop} for {a.shape}")
        return self._push("slice", (a,), a.shape[:-1] + (stop - start,), {"start": start, "stop": stop})

    def channel(self, a, i: int):
        return self.reshape(self.channels(a, i, i + 1), a.shape[:-1])

    def spectral_norm(self, m, iterations=30, seed=0):
        if len(m.shape) != 2:
            self._fail("spectral_norm", f"rank-2 operand required, got {m.shape}")
        return self._push("spectral_norm", (m,), (), {"iterations": int(iterations), "seed": int(seed)})


@dataclass
class Trace:
    value: np.ndarray
    gradients: dict[str, np.ndarray]
    values: list[np.ndarray]

    def __getitem__(self, var: Var) -> np.ndarray:
        return self.values[var.idx]


def run(graph: Graph, inputs: Mapping[str, np.ndarray], root: Var | None = None,
        wrt: Iterable[str] | None = None, backward: bool = True, dtype=np.float32) -> Trace:
    """Evaluate ``graph`` and optionally backpropagate from ``root``.

    ``wrt`` restricts which named inputs receive gradients (default: every
    input declared with ``grad=True``).
    """
    nodes = graph.nodes
    if not nodes:
        raise ContractError("empty graph")
    root_idx = len(nodes) - 1 if root is None else root.idx
    missing = [n for n in graph.inputs if n not in inputs]
    if missing:
        raise ContractError(f"unbound graph inputs: {missing}")
    values: list = [None] * len(nodes)
    caches: list = [None] * len(nodes)
    for i, node in enumerate(nodes):
        if node.op == "input":
            arr = np.asarray(inputs[node.name], dtype=dtype)
            if arr.shape != node.shape:
                raise ShapeError(i, "input", f"{node.name!r} bound with shape {arr.shape}, declared {node.shape}")
            values[i] = arr
            continue
        if node.op == "const":
            values[i] = np.asarray(node.attrs["value"], dtype=dtype)
            continue
        cache: dict = {}
        fw = _KERNELS[node.op][0]
        out = fw([values[j] for j in node.inputs], node.attrs, cache)
        values[i] = np.asarray(out, dtype=dtype)
        caches[i] = cache
    value = values[root_idx]
    grads: dict[str, np.ndarray] = {}
    if not backward:
        return Trace(value, grads, values)
    if value.shape != ():
        raise ContractError(f"backward root must be scalar, node {root_idx} has shape {value.shape}")

    wanted = set(graph.inputs) if wrt is None else set(wrt)
    # nodes that can reach a wanted input
    needs = [False] * len(nodes)
    for i, node in enumerate(nodes):
        if node.op == "input":
            needs[i] = node.name in wanted and node.attrs["grad"]
        elif node.op != "const":
            needs[i] = any(needs[j] for j in node.inputs)

    adj: list = [None] * len(nodes)
    adj[root_idx] = np.ones((), dtype=F64)
    for i in range(root_idx, -1, -1):
        g = adj[i]
        node = nodes[i]
        if g is None or not needs[i] or node.op in ("input", "const"):
            continue
        bw = _KERNELS[node.op][1]
        parts = bw(g, [values[j] for j in node.inputs], values[i], node.attrs, caches[i])
        for j, gj in zip(node.inputs, parts):
            if gj is None or not needs[j]:
                continue
            adj[j] = gj if adj[j] is None else adj[j] + gj
    for name, idx in graph.inputs.items():
        if name in wanted and nodes[idx].attrs["grad"]:
            g = adj[idx]
            grads[name] = np.zeros(nodes[idx].shape, dtype) if g is None else np.asarray(g, dtype=dtype)
    return Trace(value, grads, values)


def forward_backward(graph: Graph, inputs: Mapping[str, np.ndarray], root: Var | None = None,
                     wrt: Iterable[str] | None = None, dtype=np.float32):
    """Return ``(value, gradients)`` of a scalar-rooted graph."""
    tr = run(graph, inputs, root=root, wrt=wrt, dtype=dtype)
    return tr.value, tr.gradients


def check_finite(arr) -> bool:
    return bool(np.all(np.isfinite(arr)))


@dataclass(frozen=True)
class SpectralNorm:
    sigma: float
    u: np.ndarray
    v: np.ndarray


def spectral_norm(matrix, iterations: int = 30, seed: int = 0) -> SpectralNorm:
    """Largest singular value by power iteration on ``MᵀM``.

    The start vector is drawn from a fixed-seed normal. ``u`` and ``v`` are the
    converged left/right singular vector estimates, so ``u @ M @ v == sigma``.
    """
    m = np.asarray(matrix, dtype=F64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"spectral_norm needs a non-empty matrix, got shape {m.shape}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rows, cols = m.shape
    v = np.random.default_rng(seed).standard_normal(cols)
    v /= np.linalg.norm(v)
    mtm = m.T @ m
    for _ in range(iterations):
        w = mtm @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return SpectralNorm(0.0, np.zeros(rows), np.zeros(cols))
        v = w / nrm
    mv = m @ v
    sigma = float(np.linalg.norm(mv))
    if sigma == 0.0:
        return SpectralNorm(0.0, np.zeros(rows), np.zeros(cols))
    return SpectralNorm(sigma, mv / sigma, v)
