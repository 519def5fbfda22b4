"""Dense float64 arrays with a define-by-run operation graph.

Every learned piece of the backbone is built from the ops in this module.
A :class:`Tensor` records its parents and a backward closure when at least
one input requires a gradient and recording is enabled; :func:`backward`
walks the recorded graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_recording = True


class NumericError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes do not agree."""


@contextlib.contextmanager
def no_grad():
    """Run forward ops without recording graph nodes."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


def is_recording() -> bool:
    return _recording


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    @property
    def attached(self) -> bool:
        return self.requires_grad

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, attaching it to the graph when any parent needs a gradient."""
    if not np.all(np.isfinite(data)):
        raise NumericError("non-finite values produced by forward op")
    out = Tensor(data)
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b),
                     lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def add_n(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise DimensionError(f"add_n shape mismatch {x.shape} vs {shape}")
    out = xs[0].data.copy()
    for x in xs[1:]:
        out += x.data
    return make_node(out, xs, lambda g: [g] * len(xs))


_sigmoid = expit


def _softplus(x: np.ndarray) -> np.ndarray:
    # ln(1 + e^x) without overflow for large |x|
    return np.logaddexp(0.0, x)


def activation(x: Tensor, kind: str) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if kind == "relu":
        mask = xd > 0
        return make_node(np.where(mask, xd, 0.0), (x,), lambda g: (g * mask,))
    if kind == "sigmoid":
        s = _sigmoid(xd)
        return make_node(s, (x,), lambda g: (g * s * (1.0 - s),))
    if kind == "silu":
        s = _sigmoid(xd)
        return make_node(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))
    if kind == "softplus":
        return make_node(_softplus(xd), (x,), lambda g: (g * _sigmoid(xd),))
    if kind == "exp":
        with np.errstate(over="ignore"):
            e = np.exp(xd)
        return make_node(e, (x,), lambda g: (g * e,))
    raise ValueError(f"unknown activation {kind!r}")


def relu(x):
    return activation(x, "relu")


def silu(x):
    return activation(x, "silu")


def softplus(x):
    return activation(x, "softplus")


def sigmoid(x):
    return activation(x, "sigmoid")


def exp(x):
    return activation(x, "exp")


# -------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-wise affine map ``x @ W + b``."""
    x, W = as_tensor(x), as_tensor(W)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"linear: x {x.shape} incompatible with W {W.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd
    if b is None:
        return make_node(out, (x, W), lambda g: (g @ Wd.T, xd.T @ g))
    b = as_tensor(b)
    if b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} vs output width {W.shape[1]}")
    out = out + b.data
    return make_node(out, (x, W, b), lambda g: (g @ Wd.T, xd.T @ g, g.sum(axis=0)))


# ------------------------------------------------------------------ reductions

def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return make_node(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, max(x.data.size, 1)
    return make_node(np.array(x.data.sum() / n), (x,),
                     lambda g: (np.broadcast_to(g / n, shape).copy(),))


# -------------------------------------------------------------- row plumbing

def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows ``x[idx]``; the backward pass scatter-adds."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]

    def bw(g):
        gx = np.zeros((n,) + g.shape[1:], dtype=DTYPE)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_node(x.data[idx], (x,), bw)


def permute_rows(x: Tensor, perm: np.ndarray, inverse: np.ndarray) -> Tensor:
    """Gather rows by a permutation whose inverse is known (cheap backward)."""
    x = as_tensor(x)
    return make_node(x.data[perm], (x,), lambda g: (g[inverse],))


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[0] for x in xs])[:-1]
    return make_node(np.concatenate([x.data for x in xs], axis=0), xs,
                     lambda g: np.split(g, sizes, axis=0))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=DTYPE)
        gx[start:stop] = g
        return (gx,)

    return make_node(x.data[start:stop], (x,), bw)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=DTYPE)
        gx[:, start:stop] = g
        return (gx,)

    return make_node(x.data[:, start:stop], (x,), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flip_rows(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return make_node(x.data[::-1].copy(), (x,), lambda g: (g[::-1].copy(),))


def segment_mean(x: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Mean of the rows of ``x`` grouped by ``segments`` (values in ``[0, n_segments)``)."""
    x = as_tensor(x)
    segments = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(segments, minlength=n_segments).astype(DTYPE)
    if np.any(counts == 0):
        raise ContractError("segment_mean: empty segment")
    out = np.zeros((n_segments,) + x.shape[1:], dtype=DTYPE)
    np.add.at(out, segments, x.data)
    out /= counts.reshape((-1,) + (1,) * (x.data.ndim - 1))
    scale = (1.0 / counts)[segments].reshape((-1,) + (1,) * (x.data.ndim - 1))
    return make_node(out, (x,), lambda g: (g[segments] * scale,))


def segment_max(x: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Column-wise max per segment; segments with no rows yield zeros.

    Gradient goes to the first row (in row order) attaining the max.
    """
    x = as_tensor(x)
    segments = np.asarray(segments, dtype=np.int64)
    n, c = x.shape
    out = np.full((n_segments, c), -np.inf)
    np.maximum.at(out, segments, x.data)
    empty = ~np.isfinite(out[:, 0]) if n_segments else np.zeros(0, bool)
    out[empty] = 0.0
    # first row attaining the max, per (segment, column)
    hit = x.data == out[segments]
    rows = np.where(hit, np.arange(n)[:, None], n)
    arg = np.full((n_segments, c), n, dtype=np.int64)
    np.minimum.at(arg, segments, rows)

    def bw(g):
        gx = np.zeros((n + 1, c), dtype=DTYPE)
        cols = np.broadcast_to(np.arange(c), arg.shape)
        np.add.at(gx, (arg, cols), g)
        return (gx[:n],)

    return make_node(out, (x,), bw)


# -------------------------------------------------------------- normalization

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, stats: dict | None, train: bool) -> Tensor:
    """Per-column batch normalization over the rows of ``x``.

    ``stats`` holds ``running_mean``/``running_var`` arrays; train mode updates
    them in place with momentum 0.1 (unbiased variance, as is customary).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n, c = x.shape
    xd = x.data
    if train:
        if n == 0:
            raise ContractError("batchnorm on empty batch")
        mu = xd.mean(axis=0)
        xc = xd - mu
        var = (xc * xc).mean(axis=0)
        if stats is not None:
            unbiased = var * n / (n - 1) if n > 1 else var
            stats["running_mean"] *= 1.0 - BN_MOMENTUM
            stats["running_mean"] += BN_MOMENTUM * mu
            stats["running_var"] *= 1.0 - BN_MOMENTUM
            stats["running_var"] += BN_MOMENTUM * unbiased
    else:
        mu = stats["running_mean"]
        var = stats["running_var"]
        xc = xd - mu
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * inv
    gd, bd = gamma.data, beta.data

    def bw(g):
        ggamma = (g * xhat).sum(axis=0)
        gbeta = g.sum(axis=0)
        gxhat = g * gd
        if train:
            gx = inv / n * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
        else:
            gx = gxhat * inv
        return gx, ggamma, gbeta

    return make_node(xhat * gd + bd, (x, gamma, beta), bw)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = BN_EPS) -> Tensor:
    """Per-row normalization over the channel axis."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    c = xd.shape[1]
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gxhat = g * gd
        gx = inv / c * (c * gxhat - gxhat.sum(axis=1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return make_node(xhat * gd + beta.data, (x, gamma, beta), bw)


# --------------------------------------------------------------------- losses

def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of raw logits against 0/1 targets."""
    logits = as_tensor(logits)
    z = logits.data
    t = np.asarray(targets, dtype=DTYPE).reshape(z.shape)
    n = max(z.size, 1)
    loss = (_softplus(z) - t * z).sum() / n
    return make_node(np.array(loss), (logits,), lambda g: (g * (_sigmoid(z) - t) / n,))


# ------------------------------------------------------------------- backward

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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, params: Mapping[str, Tensor] | None = None) -> dict:
    """Reverse-mode sweep from a scalar ``root``.

    Returns ``{name: grad}`` for every entry of ``params`` (zeros where the
    parameter was not reached). Without ``params`` returns ``{id(t): grad}``
    for every leaf that requires a gradient.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    if root.requires_grad:
        grads[id(root)] = np.ones_like(root.data)
        for node in reversed(_topo_order(root)):
            g = grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if node.parents:
                del grads[id(node)]
    if params is None:
        return grads
    return {name: grads.get(id(t), np.zeros_like(t.data)).reshape(t.shape)
            for name, t in params.items()}


# --------------------------------------------------------------------- params

class Params(dict):
    """Named parameter tensors plus non-learned buffers (BN running stats).

    ``training`` selects batch statistics (True) or running statistics.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.buffers: dict[str, dict[str, np.ndarray]] = {}
        self.training = True

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self[name] = t
        return t

    def uniform(self, name: str, shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> Tensor:
        bound = 1.0 / math.sqrt(max(fan_in, 1))
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self.add(name, np.ones(shape))

    def add_bn(self, name: str, channels: int) -> None:
        self.ones(f"{name}.gamma", (channels,))
        self.zeros(f"{name}.beta", (channels,))
        self.buffers[name] = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def load(self, values: Mapping[str, np.ndarray]) -> None:
        for k, v in values.items():
            self[k].data[...] = v

    def count(self) -> int:
        return int(sum(t.data.size for t in super().values()))


def init_linear(params: Params, name: str, fan_in: int, fan_out: int,
                rng: np.random.Generator, bias: bool = True) -> None:
    params.uniform(f"{name}.w", (fan_in, fan_out), fan_in, rng)
    if bias:
        params.zeros(f"{name}.b", (fan_out,))


def apply_linear(x: Tensor, params: Params, name: str) -> Tensor:
    return linear(x, params[f"{name}.w"], params.get(f"{name}.b"))


def apply_bn(x: Tensor, params: Params, name: str) -> Tensor:
    return batchnorm(x, params[f"{name}.gamma"], params[f"{name}.beta"],
                     params.buffers.get(name), params.training)


# ------------------------------------------------------------ gradient checks

@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    tol: float = 1e-4
    h: float = 1e-6

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    def to_dict(self) -> dict:
        return {"passed": self.passed, "worst": self.worst, "tol": self.tol, "h": self.h,
                "max_rel_err": dict(self.max_rel_err), "checked": dict(self.checked)}


def grad_check(f: Callable[[], Tensor], params: Params, h: float = 1e-6, tol: float = 1e-4,
               max_entries: int | None = None, rng: np.random.Generator | None = None,
               atol: float = 1e-3, names: Iterable[str] | None = None) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, atol)``; the report
    keeps the max per parameter. The ``atol`` floor keeps entries whose true
    gradient sits near the central-difference roundoff level (about
    ``1e-16 * |f| / h``) from dominating the report. ``max_entries`` samples
    that many entries per parameter instead of sweeping all of them.
    """
    report = GradCheckReport(tol=tol, h=h)
    names = list(params.keys()) if names is None else list(names)
    if not names:
        return report
    rng = rng or np.random.default_rng(0)
    with no_grad():
        v1 = float(f().data)
        v2 = float(f().data)
    if v1 != v2:
        raise ContractError(f"grad_check: forward is not deterministic ({v1!r} != {v2!r})")
    analytic = backward(f(), {k: params[k] for k in names})
    for name in names:
        p = params[name]
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            a = a_flat[i]
            err = abs(a - num) / max(abs(a), abs(num), atol)
            worst = max(worst, err)
        report.max_rel_err[name] = worst
        report.checked[name] = int(len(idx))
    return report


# ------------------------------------------------------------------ optimizer

def adam_step(params: Params, grads: Mapping[str, np.ndarray], state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, t: int | None = None) -> None:
    """One Adam update in place. ``state`` carries the moments and step count."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise ContractError(f"adam_step: missing gradients for {missing[:5]}")
    t = state.get("t", 0) + 1 if t is None else t
    state["t"] = t
    m = state.setdefault("m", {})
    v = state.setdefault("v", {})
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        mk = m.get(name)
        if mk is None:
            mk = m[name] = np.zeros_like(p.data)
            v[name] = np.zeros_like(p.data)
        vk = v[name]
        mk *= beta1
        mk += (1.0 - beta1) * g
        vk *= beta2
        vk += (1.0 - beta2) * g * g
        p.data -= lr * (mk / c1) / (np.sqrt(vk / c2) + eps)


class Adam:
    def __init__(self, params: Params, lr: float = 3e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict = {}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
