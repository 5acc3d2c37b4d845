"""Dense tensors with reverse-mode differentiation.

Only the operations the detector needs are provided. Each one computes its
forward value with numpy and registers an analytic backward closure. Arrays
are channels-last throughout: clips are ``(N, T, H, W, C)``.
"""
from __future__ import annotations

import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

LAYERNORM_EPS = 1e-6

_grad_enabled = True


@contextmanager
def no_grad():
    """Build no backward closures inside this block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonScalarLossError(ValueError):
    pass


class NonDeterministicGraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name", "live")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"
        self.name = name
        self.live = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self, params: Optional[Iterable["Tensor"]] = None) -> None:
        backward(self, params)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    return Tensor(arr)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap a forward result and register its backward closure.

    ``backward_fn`` receives the upstream gradient and returns one gradient
    (or ``None``) per parent, in order.
    """
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- graph

@dataclass
class OpGraph:
    """Topologically ordered nodes reachable from a root."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "OpGraph":
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
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def index(self) -> dict[int, int]:
        return {id(n): i for i, n in enumerate(self.nodes)}

    def edges(self) -> list[tuple[str, list[int], int]]:
        """(op, input node ids, output node id) per node."""
        idx = self.index()
        return [(n.op, [idx[id(p)] for p in n._parents], i) for i, n in enumerate(self.nodes)]

    def has_live_dropout(self) -> bool:
        return any(n.live for n in self.nodes)


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> OpGraph:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node.

    Parameters in ``params`` that the loss does not reach get a zero gradient.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    graph = OpGraph.trace(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if g.dtype != parent.data.dtype:
                g = g.astype(parent.data.dtype)
            if g.shape != parent.data.shape:
                g = np.broadcast_to(g, parent.data.shape)
            parent.grad = g if parent.grad is None else parent.grad + g
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    return graph


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return make_node(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_broadcast("multiply", a, b)
    ad, bd = a.data, b.data
    return make_node(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "multiply")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.maximum(x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def _expit(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    y = _expit(x.data)
    return make_node(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), bwd, "softmax")


def softmax_flat(x: Tensor, start_axis: int) -> Tensor:
    """Softmax over all axes from ``start_axis`` on, treated as one axis."""
    lead = x.shape[:start_axis]
    flat = reshape(x, lead + (-1,))
    return reshape(softmax(flat, axis=-1), x.shape)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_node(ad @ bd, (a, b), bwd, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: ``x @ w + b`` with ``w`` of shape (in, out)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError("linear", w.shape, b.shape, detail="bias")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data
    lead = xd.shape[:-1]

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        gx = (g2 @ wd.T).reshape(lead + (wd.shape[0],))
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, bwd, "linear")


def conv1x1(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """1x1 convolution on a channels-last map; identical to a per-cell linear map."""
    return linear(x, w, b)


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride=(1, 1, 1), padding=(1, 1, 1)) -> Tensor:
    """Strided 3-D convolution, channels-last.

    x: (N, T, H, W, Cin); w: (kt, kh, kw, Cin, Cout). Zero padding.
    """
    if x.ndim != 5 or w.ndim != 5 or x.shape[-1] != w.shape[3]:
        raise ShapeError("conv3d", x.shape, w.shape)
    kt, kh, kw, cin, cout = w.shape
    st, sh, sw = stride
    pt, ph, pw = padding
    n, t, h, wd_, _ = x.shape
    to = (t + 2 * pt - kt) // st + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd_ + 2 * pw - kw) // sw + 1
    if min(to, ho, wo) < 1:
        raise ShapeError("conv3d", x.shape, w.shape, detail="kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0)))
    cols = np.empty((n, to, ho, wo, kt, kh, kw, cin), dtype=x.dtype)
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                cols[:, :, :, :, i, j, k, :] = xp[:, i:i + st * to:st, j:j + sh * ho:sh, k:k + sw * wo:sw, :]
    cols2 = cols.reshape(n * to * ho * wo, -1)
    w2 = w.data.reshape(-1, cout)
    out = cols2 @ w2
    if b is not None:
        out = out + b.data
    out = out.reshape(n, to, ho, wo, cout)

    def bwd(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0) if b is not None else None
        gcols = (g2 @ w2.T).reshape(n, to, ho, wo, kt, kh, kw, cin)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kt):
            for j in range(kh):
                for k in range(kw):
                    gxp[:, i:i + st * to:st, j:j + sh * ho:sh, k:k + sw * wo:sw, :] += gcols[:, :, :, :, i, j, k, :]
        gx = gxp[:, pt:pt + t, ph:ph + h, pw:pw + wd_, :]
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, bwd, "conv3d")


# ---------------------------------------------------------------- spatial

def bilinear_sample(x: Tensor, weights: np.ndarray) -> Tensor:
    """Resample cells with a fixed interpolation matrix.

    x: (S, P_in, F) where P_in enumerates spatial cells; weights: (R, P_out, P_in)
    holding bilinear coefficients (one matrix per box). Returns (R, S, P_out, F).
    The weights are constants; gradients flow to ``x`` only.
    """
    if x.ndim != 3 or weights.ndim != 3 or weights.shape[2] != x.shape[1]:
        raise ShapeError("bilinear_sample", x.shape, weights.shape)
    wts = weights.astype(x.dtype, copy=False)
    out = np.einsum("rop,spf->rsof", wts, x.data, optimize=True)
    return make_node(out, (x,), lambda g: (np.einsum("rop,rsof->spf", wts, g, optimize=True),),
                     "bilinear_sample")


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """k x k max pool over axes (-3, -2) of a (..., H, W, C) tensor."""
    *lead, h, w, c = x.shape
    if h % k or w % k:
        raise ShapeError("maxpool2d", x.shape, (k, k), detail="spatial dims must be divisible")
    lead = tuple(lead)
    ho, wo = h // k, w // k
    nl = len(lead)
    xr = x.data.reshape(lead + (ho, k, wo, k, c))
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 4, nl + 1, nl + 3)
    xt = xr.transpose(perm).reshape(lead + (ho, wo, c, k * k))
    idx = xt.argmax(axis=-1)[..., None]
    out = np.take_along_axis(xt, idx, axis=-1)[..., 0]
    inv = np.argsort(perm)

    def bwd(g):
        gt = np.zeros(xt.shape, dtype=g.dtype)
        np.put_along_axis(gt, idx, g[..., None], axis=-1)
        gx = gt.reshape(lead + (ho, wo, c, k, k)).transpose(inv).reshape(x.shape)
        return (gx,)

    return make_node(out, (x,), bwd, "maxpool2d")


def spatial_mean(x: Tensor) -> Tensor:
    """Mean over axes (-3, -2) of a (..., H, W, C) tensor."""
    h, w = x.shape[-3], x.shape[-2]
    shape = x.shape

    def bwd(g):
        return (np.broadcast_to(g[..., None, None, :] / (h * w), shape),)

    return make_node(x.data.mean(axis=(-3, -2)), (x,), bwd, "spatial_mean")


# ---------------------------------------------------------------- structure

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != ax):
            raise ShapeError("concat", ref, t.shape, detail=f"axis={axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_node(np.concatenate([t.data for t in tensors], axis=ax), tensors, bwd, "concat")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return make_node(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def take(x: Tensor, index) -> Tensor:
    """Slice or gather (numpy indexing semantics)."""
    out = x.data[index]
    advanced = _is_advanced(index)

    def bwd(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        if advanced:
            np.add.at(gx, index, g)
        else:
            gx[index] = g
        return (gx,)

    return make_node(np.array(out, copy=True), (x,), bwd, "slice")


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_node(np.broadcast_to(x.data, shape).copy(), (x,),
                     lambda g: (_unbroadcast(g, src),), "broadcast")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bwd, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- normalisation / regularisation

def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError("layernorm", x.shape, gain.shape, bias.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = xd.shape[-1]

    def bwd(g):
        gh = g * gain.data
        gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        g2 = g.reshape(-1, n)
        return gx, (g2 * xhat.reshape(-1, n)).sum(axis=0), g2.sum(axis=0)

    return make_node(out, (x, gain, bias), bwd, "layernorm")


def key_to_int(*parts) -> int:
    """Stable 32-bit integer for a tuple of ints/strings."""
    return zlib.crc32("/".join(str(p) for p in parts).encode())


def dropout_mask(shape, rate: float, key: Sequence, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout mask from a counter-based generator keyed by ``key``.

    ``key`` is typically (seed, step, layer id); the same key always yields the
    same mask.
    """
    words = [k if isinstance(k, (int, np.integer)) else key_to_int(k) for k in key]
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(w) & 0xFFFFFFFF for w in words])))
    keep = gen.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def dropout(x: Tensor, rate: float, training: bool, key: Optional[Sequence] = None) -> Tensor:
    """Inverted dropout. Identity in eval mode.

    In training mode a ``key`` gives a reproducible mask; without one the mask
    comes from fresh entropy and the node is flagged as live.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if key is None:
        keep = np.random.default_rng().random(x.shape) >= rate
        mask = keep.astype(x.dtype) / (1.0 - rate)
    else:
        mask = dropout_mask(x.shape, rate, key, dtype=x.dtype)
    out = make_node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")
    out.live = key is None
    return out


def forward_ops_catalog() -> dict[str, Callable]:
    """The differentiable primitives, by name."""
    return {
        "add": add,
        "multiply": mul,
        "matmul": matmul,
        "conv3d": conv3d,
        "conv1x1": conv1x1,
        "bilinear_sample": bilinear_sample,
        "maxpool2d": maxpool2d,
        "spatial_mean": spatial_mean,
        "concat": concat,
        "linear": linear,
        "relu": relu,
        "sigmoid": sigmoid,
        "softmax": softmax,
        "layernorm": layernorm,
        "dropout": dropout,
        "reshape": reshape,
        "slice": take,
        "transpose": transpose,
    }


# ---------------------------------------------------------------- gradient checking

@dataclass
class ParamCheck:
    max_rel_error: float
    n_checked: int
    passed: bool


@dataclass
class GradCheckReport:
    results: dict
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.results.values()), default=0.0)

    def summary(self) -> str:
        lines = [f"{name}: max_rel={r.max_rel_error:.3e} n={r.n_checked} {'ok' if r.passed else 'FAIL'}"
                 for name, r in self.results.items()]
        return "\n".join(lines)


def grad_check(fn: Callable[[], Tensor], params: Mapping[str, Tensor], tolerance: float = 1e-4,
               step: float = 1e-5, max_entries: Optional[int] = None, floor: float = 1e-6,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must rebuild the graph from ``params`` on every call. Relative error
    per entry is ``|a - n| / max(|a|, |n|, floor)``; the reported figure is the
    maximum over the checked entries of each parameter. ``max_entries`` caps
    the number of (randomly chosen) entries per parameter.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters; {name} is {p.dtype}")
    for p in params.values():
        p.zero_grad()
    loss = fn()
    graph = OpGraph.trace(loss)
    if graph.has_live_dropout():
        raise NonDeterministicGraphError("graph contains dropout without a fixed mask key")
    backward(loss, params.values())
    analytic = {name: np.array(p.grad, copy=True) for name, p in params.items()}

    rng = np.random.default_rng(seed)
    results = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        a = analytic[name].reshape(-1)[idx]
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().item()
            flat[i] = orig - step
            fm = fn().item()
            flat[i] = orig
            num[j] = (fp - fm) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        err = float(np.max(np.abs(a - num) / denom)) if len(idx) else 0.0
        results[name] = ParamCheck(err, len(idx), err < tolerance)
    return GradCheckReport(results, tolerance)
