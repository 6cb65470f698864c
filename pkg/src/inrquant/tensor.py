"""Dense float64 tensors and a small static computation graph with reverse-mode AD.

The graph is built once (nodes are appended in topological order) and can then be
evaluated repeatedly with different bindings for its inputs and parameters.  Every
op accepts an optional leading batch axis; there is no broadcasting beyond that.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "GraphNode",
    "Graph",
    "GraphError",
    "ShapeError",
    "NonFiniteError",
    "forward_eval",
    "backward",
    "grad_check",
    "gelu",
    "gelu_grad",
    "pixel_shuffle_array",
    "pixel_unshuffle_array",
]

OPS = (
    "input",
    "parameter",
    "dense",
    "conv3x3",
    "pixel_shuffle",
    "activation",
    "positional_encoding",
    "add",
    "reshape",
    "mse_loss",
)

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class GraphError(RuntimeError):
    """Raised for misuse of a graph (unbound inputs, backward before forward...)."""


class ShapeError(ValueError):
    """Raised when operand shapes do not agree for an op."""


class NonFiniteError(FloatingPointError):
    """Raised when a value that must be finite is NaN or infinite."""


class Tensor:
    """Immutable dense array of 64-bit reals.

    ``shape`` is always a non-empty tuple of positive extents; a scalar is stored
    with shape ``(1,)``.
    """

    __slots__ = ("_array",)

    def __init__(self, data, shape: Optional[Sequence[int]] = None, check_finite: bool = True):
        arr = np.array(data, dtype=np.float64, copy=True)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if arr.size != int(np.prod(shape)):
                raise ShapeError(f"data length {arr.size} does not match shape {shape}")
            arr = arr.reshape(shape)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"every extent must be >= 1, got {arr.shape}")
        if check_finite and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or Inf")
        arr.setflags(write=False)
        self._array = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal fast path: read-only view, no copy and no finiteness check
        t = cls.__new__(cls)
        arr = arr.reshape(1) if arr.ndim == 0 else arr.view()
        arr.setflags(write=False)
        t._array = arr
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._array.shape

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values (read-only)."""
        return self._array.reshape(-1)

    @property
    def array(self) -> np.ndarray:
        """Read-only ndarray view with the tensor's shape."""
        return self._array

    def item(self) -> float:
        if self._array.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self._array.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self._array.copy()

    def __array__(self, dtype=None, copy=None):
        return self._array if dtype is None else self._array.astype(dtype)

    def __len__(self) -> int:
        return self._array.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def pixel_shuffle_array(x: np.ndarray, r: int) -> np.ndarray:
    """[..., C*r*r, H, W] -> [..., C, H*r, W*r]."""
    *lead, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle: channels {c} not divisible by r^2={r * r}")
    co = c // (r * r)
    y = x.reshape(*lead, co, r, r, h, w)
    n = len(lead)
    perm = list(range(n)) + [n, n + 3, n + 1, n + 4, n + 2]
    return y.transpose(perm).reshape(*lead, co, h * r, w * r)


def pixel_unshuffle_array(x: np.ndarray, r: int) -> np.ndarray:
    """Inverse of :func:`pixel_shuffle_array`."""
    *lead, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise ShapeError(f"pixel_unshuffle: spatial dims {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    y = x.reshape(*lead, c, h, r, w, r)
    n = len(lead)
    perm = list(range(n)) + [n, n + 2, n + 4, n + 1, n + 3]
    return y.transpose(perm).reshape(*lead, c * r * r, h, w)


def _conv_cols(x: np.ndarray) -> np.ndarray:
    # x [N, C, H, W] -> cols [N, H, W, C*9] with (c, dy, dx) ordering matching weight layout
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, h, w))
    for dy in range(3):
        for dx in range(3):
            cols[:, :, dy, dx] = xp[:, :, dy : dy + h, dx : dx + w]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n, h, w, c * 9)


def _conv_cols_adjoint(dcols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    n = dcols.size // (h * w * c * 9)
    d = dcols.reshape(n, h, w, c, 3, 3).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((n, c, h + 2, w + 2))
    for dy in range(3):
        for dx in range(3):
            dxp[:, :, dy : dy + h, dx : dx + w] += d[:, :, dy, dx]
    return dxp[:, :, 1:-1, 1:-1]


class GraphNode:
    """One vertex of the computation graph."""

    __slots__ = ("id", "op", "parents", "attrs", "value", "grad", "default")

    def __init__(self, id: str, op: str, parents: Sequence[str], attrs: Optional[dict] = None):
        if op not in OPS:
            raise GraphError(f"unknown op {op!r}")
        self.id = id
        self.op = op
        self.parents = tuple(parents)
        self.attrs = dict(attrs or {})
        self.value: Optional[Tensor] = None
        self.grad: Optional[Tensor] = None
        self.default: Optional[Tensor] = None

    def __repr__(self) -> str:
        return f"GraphNode({self.id!r}, op={self.op!r}, parents={list(self.parents)})"


class Graph:
    """Static DAG; nodes are stored in insertion (= topological) order.

    >>> g = Graph()
    >>> x = g.input("x")
    >>> w = g.parameter("w", np.eye(3))
    >>> y = g.dense(w, x)
    >>> forward_eval(g, {"x": Tensor([1.0, 2.0, 3.0])}).data.tolist()
    [1.0, 2.0, 3.0]
    """

    def __init__(self) -> None:
        self.nodes: Dict[str, GraphNode] = {}
        self.order: List[str] = []
        self.root: Optional[str] = None
        self._counter = 0
        self._evaluated = False
        self._ancestor_cache: Dict[str, List[str]] = {}

    # construction -------------------------------------------------------------
    def _add(self, op: str, parents: Sequence, attrs=None, name: Optional[str] = None) -> str:
        pids = [p if isinstance(p, str) else p.id for p in parents]
        for p in pids:
            if p not in self.nodes:
                raise GraphError(f"parent {p!r} is not in the graph")
        if name is None:
            name = f"{op}_{self._counter}"
            self._counter += 1
        if name in self.nodes:
            raise GraphError(f"duplicate node id {name!r}")
        self.nodes[name] = GraphNode(name, op, pids, attrs)
        self.order.append(name)
        self.root = name
        self._evaluated = False
        self._ancestor_cache.clear()
        return name

    def input(self, name: str) -> str:
        return self._add("input", [], name=name)

    def parameter(self, name: str, value) -> str:
        nid = self._add("parameter", [], name=name)
        self.nodes[nid].default = value if isinstance(value, Tensor) else Tensor(value)
        return nid

    def dense(self, weight, x, name: Optional[str] = None) -> str:
        return self._add("dense", [weight, x], name=name)

    def conv3x3(self, weight, x, name: Optional[str] = None) -> str:
        return self._add("conv3x3", [weight, x], name=name)

    def pixel_shuffle(self, x, r: int, name: Optional[str] = None) -> str:
        if r < 1:
            raise GraphError("pixel_shuffle factor must be >= 1")
        return self._add("pixel_shuffle", [x], {"r": int(r)}, name=name)

    def activation(self, x, kind: str = "gelu", name: Optional[str] = None) -> str:
        if kind not in ("gelu", "sigmoid"):
            raise GraphError(f"unsupported activation {kind!r}")
        return self._add("activation", [x], {"kind": kind}, name=name)

    def positional_encoding(self, x, n_freqs: int, base: float, name: Optional[str] = None) -> str:
        return self._add("positional_encoding", [x], {"L": int(n_freqs), "base": float(base)}, name=name)

    def add(self, a, b, name: Optional[str] = None) -> str:
        return self._add("add", [a, b], name=name)

    def reshape(self, x, shape: Sequence[int], name: Optional[str] = None) -> str:
        return self._add("reshape", [x], {"shape": tuple(int(s) for s in shape)}, name=name)

    def mse_loss(self, pred, target, name: Optional[str] = None) -> str:
        return self._add("mse_loss", [pred, target], name=name)

    # introspection -------------------------------------------------------------
    def parameters(self) -> List[str]:
        return [n for n in self.order if self.nodes[n].op == "parameter"]

    def inputs(self) -> List[str]:
        return [n for n in self.order if self.nodes[n].op == "input"]

    def value(self, node_id: str) -> Tensor:
        v = self.nodes[node_id].value
        if v is None:
            raise GraphError(f"node {node_id!r} has not been evaluated")
        return v

    # evaluation ----------------------------------------------------------------
    def ancestors(self, root: str) -> List[str]:
        """Nodes needed to evaluate ``root``, in topological order."""
        cached = self._ancestor_cache.get(root)
        if cached is not None:
            return cached
        if root not in self.nodes:
            raise GraphError(f"unknown node {root!r}")
        needed = {root}
        for nid in reversed(self.order):
            if nid in needed:
                needed.update(self.nodes[nid].parents)
        out = [n for n in self.order if n in needed]
        self._ancestor_cache[root] = out
        return out

    def forward(self, bindings: Mapping[str, object], root: Optional[str] = None) -> Tensor:
        root = self.root if root is None else root
        if root is None:
            raise GraphError("empty graph")
        for node in self.nodes.values():
            node.value = None
            node.grad = None
        for nid in self.ancestors(root):
            node = self.nodes[nid]
            if node.op in ("input", "parameter"):
                if nid in bindings:
                    b = bindings[nid]
                    node.value = b if isinstance(b, Tensor) else Tensor(b)
                elif node.op == "parameter" and node.default is not None:
                    node.value = node.default
                else:
                    raise GraphError(f"input {nid!r} is unbound")
            else:
                args = [self.nodes[p].value.array for p in node.parents]
                try:
                    out = _FORWARD[node.op](node, *args)
                except ShapeError as exc:
                    raise ShapeError(f"node {nid!r} ({node.op}): {exc}") from None
                node.value = Tensor._wrap(out)
        self._evaluated = True
        self._last_root = root
        return self.nodes[root].value

    def backward(self, root: Optional[str] = None) -> Dict[str, Tensor]:
        """Gradients of the scalar ``root`` for every parameter it depends on."""
        if not self._evaluated:
            raise GraphError("backward called before forward")
        root = self._last_root if root is None else root
        rnode = self.nodes[root]
        if rnode.value is None:
            raise GraphError(f"root {root!r} has not been evaluated")
        if rnode.value.size != 1:
            raise GraphError(f"backward needs a scalar root, {root!r} has shape {rnode.value.shape}")
        live = self.ancestors(root)
        grads: Dict[str, np.ndarray] = {root: np.ones(rnode.value.shape)}
        for nid in reversed(live):
            node = self.nodes[nid]
            if node.op in ("input", "parameter"):
                continue
            g = grads.pop(nid, None)
            if g is None:
                continue
            args = [self.nodes[p].value.array for p in node.parents]
            pgrads = _BACKWARD[node.op](node, g, *args)
            for pid, pg in zip(node.parents, pgrads):
                if pg is None or self.nodes[pid].op == "input":
                    continue
                grads[pid] = grads[pid] + pg if pid in grads else pg
        out: Dict[str, Tensor] = {}
        for pid in live:
            node = self.nodes[pid]
            if node.op != "parameter":
                continue
            g = grads.get(pid)
            if g is None:
                g = np.zeros(node.value.shape)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {pid!r}")
            node.grad = Tensor._wrap(np.asarray(g, dtype=np.float64).reshape(node.value.shape))
            out[pid] = node.grad
        return out


def forward_eval(graph: Graph, bindings: Mapping[str, object], root: Optional[str] = None) -> Tensor:
    """Evaluate ``graph`` up to ``root`` (default: last node added)."""
    return graph.forward(bindings, root)


def backward(graph: Graph, root: Optional[str] = None) -> Dict[str, Tensor]:
    """Gradients of the scalar root with respect to every parameter node."""
    return graph.backward(root)


# op kernels -------------------------------------------------------------------


def _fw_dense(node, w, x):
    if w.ndim != 2:
        raise ShapeError(f"dense weight must be 2-D, got {w.shape}")
    if x.shape[-1] != w.shape[1] or x.ndim not in (1, 2):
        raise ShapeError(f"dense weight {w.shape} incompatible with input {x.shape}")
    return x @ w.T


def _bw_dense(node, g, w, x):
    if x.ndim == 1:
        return np.outer(g, x), g @ w
    return g.T @ x, g @ w


def _fw_conv(node, w, x):
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv3x3 weight must be [c_out, c_in, 3, 3], got {w.shape}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or x.shape[-3] != w.shape[1]:
        raise ShapeError(f"conv3x3 weight {w.shape} incompatible with input {x.shape}")
    xb = x if batched else x[None]
    n, c, h, wd = xb.shape
    cols = _conv_cols(xb)
    out = (cols.reshape(-1, c * 9) @ w.reshape(w.shape[0], -1).T).reshape(n, h, wd, -1)
    out = out.transpose(0, 3, 1, 2)
    return out if batched else out[0]


def _bw_conv(node, g, w, x):
    batched = x.ndim == 4
    xb = x if batched else x[None]
    gb = g if batched else g[None]
    n, c, h, wd = xb.shape
    cols = _conv_cols(xb).reshape(-1, c * 9)
    g2 = gb.transpose(0, 2, 3, 1).reshape(-1, w.shape[0])
    dw = (g2.T @ cols).reshape(w.shape)
    dcols = g2 @ w.reshape(w.shape[0], -1)
    dx = _conv_cols_adjoint(dcols, c, h, wd)
    return dw, (dx if batched else dx[0])


def _fw_shuffle(node, x):
    if x.ndim not in (3, 4):
        raise ShapeError(f"pixel_shuffle needs [C,H,W] or [N,C,H,W], got {x.shape}")
    return pixel_shuffle_array(x, node.attrs["r"])


def _bw_shuffle(node, g, x):
    return (pixel_unshuffle_array(g, node.attrs["r"]),)


def _fw_act(node, x):
    if node.attrs["kind"] == "gelu":
        return gelu(x)
    return _sigmoid(x)


def _bw_act(node, g, x):
    if node.attrs["kind"] == "gelu":
        return (g * gelu_grad(x),)
    s = _sigmoid(x)
    return (g * s * (1.0 - s),)


def _pe_freqs(node):
    return node.attrs["base"] ** np.arange(node.attrs["L"]) * np.pi


def _fw_pe(node, x):
    if x.shape[-1] != 1 or x.ndim not in (1, 2):
        raise ShapeError(f"positional_encoding expects [1] or [N,1], got {x.shape}")
    arg = x * _pe_freqs(node)  # [..., L]
    out = np.stack([np.sin(arg), np.cos(arg)], axis=-1)  # interleaved sin_i, cos_i
    return out.reshape(*x.shape[:-1], 2 * node.attrs["L"])


def _bw_pe(node, g, x):
    f = _pe_freqs(node)
    arg = x * f
    gs = g.reshape(*x.shape[:-1], node.attrs["L"], 2)
    d = (gs[..., 0] * np.cos(arg) - gs[..., 1] * np.sin(arg)) * f
    return (d.sum(axis=-1, keepdims=True),)


def _fw_add(node, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ: {a.shape} vs {b.shape}")
    return a + b


def _bw_add(node, g, a, b):
    return g, g


def _fw_reshape(node, x):
    shape = node.attrs["shape"]
    per = int(np.prod(shape))
    # a leading axis that factors out is the batch axis, even when it has length 1
    if x.ndim >= 2 and x.size == x.shape[0] * per:
        return x.reshape((x.shape[0],) + shape)
    if x.size == per:
        return x.reshape(shape)
    raise ShapeError(f"cannot reshape {x.shape} to {shape}")


def _bw_reshape(node, g, x):
    return (g.reshape(x.shape),)


def _fw_mse(node, p, t):
    if p.shape != t.shape:
        raise ShapeError(f"mse_loss operands differ: {p.shape} vs {t.shape}")
    d = p - t
    return np.array([np.mean(d * d)])


def _bw_mse(node, g, p, t):
    d = (2.0 / p.size) * (p - t) * g[0]
    return d, -d


_FORWARD: Dict[str, Callable] = {
    "dense": _fw_dense,
    "conv3x3": _fw_conv,
    "pixel_shuffle": _fw_shuffle,
    "activation": _fw_act,
    "positional_encoding": _fw_pe,
    "add": _fw_add,
    "reshape": _fw_reshape,
    "mse_loss": _fw_mse,
}
_BACKWARD: Dict[str, Callable] = {
    "dense": _bw_dense,
    "conv3x3": _bw_conv,
    "pixel_shuffle": _bw_shuffle,
    "activation": _bw_act,
    "positional_encoding": _bw_pe,
    "add": _bw_add,
    "reshape": _bw_reshape,
    "mse_loss": _bw_mse,
}


def grad_check(loss_at: Callable, w, step: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_at(w)`` must return ``(loss, grad)`` for a flat vector ``w``; only the
    loss is used for the finite differences.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    w = np.array(w, dtype=np.float64).reshape(-1)
    loss, grad = loss_at(w)
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    if not np.isfinite(loss):
        raise NonFiniteError("loss is not finite at w")
    worst = 0.0
    for i in range(w.size):
        wp = w.copy()
        wp[i] += step
        wm = w.copy()
        wm[i] -= step
        lp = loss_at(wp)[0]
        lm = loss_at(wm)[0]
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NonFiniteError(f"loss is not finite around coordinate {i}")
        fd = (lp - lm) / (2.0 * step)
        err = abs(grad[i] - fd) / max(abs(grad[i]), 1e-12)
        worst = max(worst, err)
    return worst
