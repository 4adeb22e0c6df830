"""Minimal reverse-mode automatic differentiation over dense tensors.

Tensors are plain numpy arrays (float32 for training, float64 for the
gradient-check shadow pass). A :class:`Graph` is a static, topologically
ordered list of operator nodes built once per model; ``forward`` fills a
per-call value cache and ``backward`` accumulates parameter gradients,
so a graph instance can be evaluated concurrently as long as its
parameters are not mutated.

The operator set is exactly what the attention-CNN needs: 3x3 stride-1
same-padding convolution, affine dense layers, relu, sigmoid, full-extent
max/average pooling, elementwise add, per-channel broadcast multiply,
flatten, and mean-squared-error.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from mrfica.errors import FormatError, ShapeError

CHECKPOINT_MAGIC = b"MRFW"
CHECKPOINT_VERSION = 1

# im2col buffers are chunked over the batch above this element count
_COL_CHUNK_ELEMS = 16_000_000


@dataclass(frozen=True)
class Node:
    idx: int
    op: str
    inputs: tuple = ()
    name: str = None
    meta: dict = None


class Graph:
    """Static operator graph with named parameters and inputs."""

    def __init__(self):
        self.nodes = []
        self.params = {}
        self.param_nodes = {}
        self.input_nodes = {}

    def _add(self, op, inputs=(), name=None, meta=None):
        node = Node(idx=len(self.nodes), op=op,
                    inputs=tuple(n.idx for n in inputs), name=name,
                    meta=meta)
        self.nodes.append(node)
        return node

    def input(self, name):
        node = self._add("input", name=name)
        self.input_nodes[name] = node.idx
        return node

    def param(self, name, array):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.params[name] = np.ascontiguousarray(array, dtype=np.float32)
        node = self._add("param", name=name)
        self.param_nodes[name] = node.idx
        return node

    def conv2d(self, x, w, b):
        return self._add("conv2d", (x, w, b))

    def dense(self, x, w, b):
        return self._add("dense", (x, w, b))

    def relu(self, x):
        return self._add("relu", (x,))

    def sigmoid(self, x):
        return self._add("sigmoid", (x,))

    def max_pool_all(self, x):
        return self._add("max_pool_all", (x,))

    def avg_pool_all(self, x):
        return self._add("avg_pool_all", (x,))

    def add(self, a, b):
        return self._add("add", (a, b))

    def scale_channels(self, x, s):
        return self._add("scale_channels", (x, s))

    def flatten(self, x):
        return self._add("flatten", (x,))

    def mse(self, pred, target):
        return self._add("mse", (pred, target))


def _err(node, message):
    return ShapeError(f"node {node.idx} ({node.op}): {message}")


# --- convolution helpers ---------------------------------------------------

_COL_INDEX_CACHE = {}


def _col_indices(h, w):
    key = (h, w)
    if key not in _COL_INDEX_CACHE:
        pos_i, pos_j = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        tap_i, tap_j = np.meshgrid(np.arange(3), np.arange(3), indexing="ij")
        ii = pos_i.reshape(-1, 1) + tap_i.reshape(1, -1)   # (HW, 9)
        jj = pos_j.reshape(-1, 1) + tap_j.reshape(1, -1)
        _COL_INDEX_CACHE[key] = (ii, jj)
    return _COL_INDEX_CACHE[key]


def _im2col(x):
    """(N, H, W, C) -> (N * H * W, 9 * C) with tap-major columns."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ii, jj = _col_indices(h, w)
    col = xp[:, ii, jj, :]                                 # (N, HW, 9, C)
    return col.reshape(n * h * w, 9 * c)


def _conv_batches(n, h, w, c):
    per_sample = h * w * 9 * c
    chunk = max(1, _COL_CHUNK_ELEMS // max(1, per_sample))
    return [(s, min(s + chunk, n)) for s in range(0, n, chunk)]


def _conv2d_forward(x, w, b):
    n, h, wd, c = x.shape
    f = w.shape[3]
    wmat = w.reshape(9 * c, f)
    out = np.empty((n, h, wd, f), dtype=x.dtype)
    for s, e in _conv_batches(n, h, wd, c):
        col = _im2col(x[s:e])
        out[s:e] = (col @ wmat + b).reshape(e - s, h, wd, f)
    return out


def _conv2d_backward(x, w, grad):
    n, h, wd, c = x.shape
    f = w.shape[3]
    wmat = w.reshape(9 * c, f)
    dw = np.zeros((9 * c, f), dtype=x.dtype)
    gmat_all = grad.reshape(n * h * wd, f)
    for s, e in _conv_batches(n, h, wd, c):
        col = _im2col(x[s:e])
        dw += col.T @ gmat_all[s * h * wd:e * h * wd]
    db = gmat_all.sum(axis=0)
    # dx is the same convolution of grad with the flipped, transposed
    # kernel (stride-1 same-padding is self-adjoint up to the flip)
    wflip = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
    dx = _conv2d_forward(grad, wflip, np.zeros(c, dtype=x.dtype))
    return dx, dw.reshape(3, 3, c, f), db


# --- operator table --------------------------------------------------------

def _fw_conv2d(node, x, w, b):
    if x.ndim != 4:
        raise _err(node, f"expected (N,H,W,C) input, got {x.shape}")
    if w.shape != (3, 3, x.shape[3], w.shape[3]):
        raise _err(node, f"kernel {w.shape} incompatible with input "
                         f"{x.shape}")
    if b.shape != (w.shape[3],):
        raise _err(node, f"bias {b.shape} incompatible with kernel "
                         f"{w.shape}")
    return _conv2d_forward(x, w, b)


def _bw_conv2d(node, grad, out, x, w, b):
    dx, dw, db = _conv2d_backward(x, w, grad)
    return dx, dw, db


def _fw_dense(node, x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise _err(node, f"dense shapes {x.shape} x {w.shape} mismatch")
    if b.shape != (w.shape[1],):
        raise _err(node, f"bias {b.shape} incompatible with {w.shape}")
    return x @ w + b


def _bw_dense(node, grad, out, x, w, b):
    return grad @ w.T, x.T @ grad, grad.sum(axis=0)


def _fw_relu(node, x):
    return np.maximum(x, 0)


def _bw_relu(node, grad, out, x):
    return (grad * (x > 0),)


def _fw_sigmoid(node, x):
    return expit(x)


def _bw_sigmoid(node, grad, out, x):
    return (grad * out * (1.0 - out),)


def _fw_max_pool_all(node, x):
    if x.ndim != 4:
        raise _err(node, f"expected (N,H,W,C) input, got {x.shape}")
    n, h, w, c = x.shape
    return x.reshape(n, h * w, c).max(axis=1)


def _bw_max_pool_all(node, grad, out, x):
    n, h, w, c = x.shape
    flat = x.reshape(n, h * w, c)
    # gradient routed to the first maximal element in scan order
    am = flat.argmax(axis=1)
    dx = np.zeros_like(flat)
    np.put_along_axis(dx, am[:, None, :], grad[:, None, :], axis=1)
    return (dx.reshape(x.shape),)


def _fw_avg_pool_all(node, x):
    if x.ndim != 4:
        raise _err(node, f"expected (N,H,W,C) input, got {x.shape}")
    n, h, w, c = x.shape
    return x.reshape(n, h * w, c).mean(axis=1)


def _bw_avg_pool_all(node, grad, out, x):
    n, h, w, c = x.shape
    dx = np.broadcast_to(grad[:, None, :] / (h * w), (n, h * w, c))
    return (dx.reshape(x.shape).copy(),)


def _fw_add(node, a, b):
    if a.shape != b.shape:
        raise _err(node, f"operand shapes differ: {a.shape} vs {b.shape}")
    return a + b


def _bw_add(node, grad, out, a, b):
    return grad, grad


def _fw_scale_channels(node, x, s):
    if x.ndim != 4 or s.ndim != 2 or s.shape != (x.shape[0], x.shape[3]):
        raise _err(node, f"scale {s.shape} incompatible with input "
                         f"{x.shape}")
    return x * s[:, None, None, :]


def _bw_scale_channels(node, grad, out, x, s):
    dx = grad * s[:, None, None, :]
    ds = np.sum(grad * x, axis=(1, 2))
    return dx, ds


def _fw_flatten(node, x):
    return x.reshape(x.shape[0], -1)


def _bw_flatten(node, grad, out, x):
    return (grad.reshape(x.shape),)


def _fw_mse(node, a, b):
    if a.shape != b.shape:
        raise _err(node, f"operand shapes differ: {a.shape} vs {b.shape}")
    d = a - b
    return np.array(np.mean(d * d), dtype=a.dtype)


def _bw_mse(node, grad, out, a, b):
    d = (a - b) * (2.0 / a.size) * grad
    return d, -d


_FORWARD = {
    "conv2d": _fw_conv2d,
    "dense": _fw_dense,
    "relu": _fw_relu,
    "sigmoid": _fw_sigmoid,
    "max_pool_all": _fw_max_pool_all,
    "avg_pool_all": _fw_avg_pool_all,
    "add": _fw_add,
    "scale_channels": _fw_scale_channels,
    "flatten": _fw_flatten,
    "mse": _fw_mse,
}

_BACKWARD = {
    "conv2d": _bw_conv2d,
    "dense": _bw_dense,
    "relu": _bw_relu,
    "sigmoid": _bw_sigmoid,
    "max_pool_all": _bw_max_pool_all,
    "avg_pool_all": _bw_avg_pool_all,
    "add": _bw_add,
    "scale_channels": _bw_scale_channels,
    "flatten": _bw_flatten,
    "mse": _bw_mse,
}


def forward(graph, feeds, output=None, dtype=np.float32):
    """Evaluate the graph up to ``output`` (default: last node).

    Returns (value of the output node, full value cache). ``feeds``
    maps input names to arrays; they are cast to ``dtype``.
    """
    stop = graph.nodes[-1].idx if output is None else output.idx
    values = [None] * (stop + 1)
    for node in graph.nodes[:stop + 1]:
        if node.op == "input":
            if node.name not in feeds:
                raise KeyError(f"missing feed for input {node.name!r}")
            values[node.idx] = np.asarray(feeds[node.name], dtype=dtype)
        elif node.op == "param":
            values[node.idx] = graph.params[node.name].astype(dtype,
                                                              copy=False)
        else:
            args = [values[i] for i in node.inputs]
            values[node.idx] = _FORWARD[node.op](node, *args)
    return values[stop], values


def backward(graph, values, loss_node):
    """Gradients of the scalar ``loss_node`` wrt every parameter.

    Returns a dict keyed like ``graph.params``; parameters that the
    loss does not reach get zero gradients.
    """
    dtype = values[loss_node.idx].dtype
    grads = [None] * (loss_node.idx + 1)
    grads[loss_node.idx] = np.array(1.0, dtype=dtype)
    for node in reversed(graph.nodes[:loss_node.idx + 1]):
        g = grads[node.idx]
        if g is None or node.op in ("input", "param"):
            continue
        args = [values[i] for i in node.inputs]
        in_grads = _BACKWARD[node.op](node, g, values[node.idx], *args)
        for idx, ig in zip(node.inputs, in_grads):
            if grads[idx] is None:
                grads[idx] = ig.copy() if isinstance(ig, np.ndarray) \
                    else np.asarray(ig)
            else:
                grads[idx] = grads[idx] + ig
    out = {}
    for name, idx in graph.param_nodes.items():
        if idx <= loss_node.idx and grads[idx] is not None:
            out[name] = np.asarray(grads[idx], dtype=np.float32) \
                if dtype == np.float32 else grads[idx]
        else:
            out[name] = np.zeros_like(graph.params[name])
    return out


# --- Adam ------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment estimates plus the shared hyperparameters."""

    lr: float = 15e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, lr=15e-4):
        state = cls(lr=lr)
        for name, arr in params.items():
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        return state


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place; returns ``params``."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        mhat = m / c1
        vhat = v / c2
        p -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
    return params


# --- gradient checking -----------------------------------------------------

@dataclass
class TensorCheck:
    name: str
    max_rel_error: float
    checked: int


@dataclass
class GradCheckReport:
    tensors: list
    tolerance: float

    @property
    def max_rel_error(self):
        return max((t.max_rel_error for t in self.tensors), default=0.0)

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def gradient_check(graph, feeds, loss_node, tolerance=1e-4, epsilon=1e-3,
                   max_coords=10_000, seed=0):
    """Central finite differences vs analytic gradients, in float64.

    At most ``max_coords`` coordinates are perturbed in total; when a
    graph has more parameters than that, a seeded uniform sample per
    tensor is checked instead of every coordinate.
    """
    _, values = forward(graph, feeds, output=loss_node, dtype=np.float64)
    analytic = backward(graph, values, loss_node)

    total = sum(p.size for p in graph.params.values())
    rng = np.random.default_rng(seed)
    saved = {k: v.copy() for k, v in graph.params.items()}
    tensors = []
    try:
        for name, base in saved.items():
            size = base.size
            if total <= max_coords:
                coords = np.arange(size)
            else:
                want = max(1, int(round(max_coords * size / total)))
                coords = rng.choice(size, size=min(want, size),
                                    replace=False)
                coords.sort()
            work = base.astype(np.float64).ravel().copy()
            worst = 0.0
            for c in coords:
                orig = work[c]
                work[c] = orig + epsilon
                graph.params[name] = work.reshape(base.shape)
                lp, _ = forward(graph, feeds, output=loss_node,
                                dtype=np.float64)
                work[c] = orig - epsilon
                graph.params[name] = work.reshape(base.shape)
                lm, _ = forward(graph, feeds, output=loss_node,
                                dtype=np.float64)
                work[c] = orig
                fd = (float(lp) - float(lm)) / (2.0 * epsilon)
                g = float(analytic[name].ravel()[c])
                rel = abs(fd - g) / max(abs(fd), abs(g), 1e-6)
                worst = max(worst, rel)
            graph.params[name] = base
            tensors.append(TensorCheck(name=name, max_rel_error=worst,
                                       checked=len(coords)))
    finally:
        graph.params.update(saved)
    return GradCheckReport(tensors=tensors, tolerance=tolerance)


# --- checkpoints -----------------------------------------------------------

def save_params(path, params):
    """Write named float32 tensors in the MRFW checkpoint format."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                             len(params)))
        for name, arr in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path):
    """Read an MRFW checkpoint into an ordered name -> array dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    head = struct.calcsize("<4sII")
    if len(blob) < head:
        raise FormatError("truncated checkpoint header")
    magic, version, count = struct.unpack("<4sII", blob[:head])
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    params = {}
    off = head
    for _ in range(count):
        if off + 2 > len(blob):
            raise FormatError("truncated tensor name length")
        (nlen,) = struct.unpack("<H", blob[off:off + 2])
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        if off + 1 > len(blob):
            raise FormatError(f"truncated rank for tensor {name!r}")
        rank = blob[off]
        off += 1
        if off + 4 * rank > len(blob):
            raise FormatError(f"truncated dims for tensor {name!r}")
        dims = struct.unpack(f"<{rank}I", blob[off:off + 4 * rank])
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        nbytes = 4 * n
        if off + nbytes > len(blob):
            raise FormatError(f"truncated data for tensor {name!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
        params[name] = arr.reshape(dims).astype(np.float32)
        off += nbytes
    if off != len(blob):
        raise FormatError(f"trailing bytes in checkpoint: {len(blob) - off}")
    return params
