"""Minimal reverse-mode differentiation over NumPy arrays.

Only the primitives the reconstruction network needs are provided. Each
primitive computes its output eagerly and, when gradients are being recorded,
attaches a closure mapping the output gradient to input gradients. Calling
:meth:`Tensor.backward` builds a :class:`Graph` (topologically ordered node
list) from the root, walks it once in reverse and then frees it.

Broadcasting is limited to the bias/channel cases used by the layers.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Graph", "NonFiniteError", "no_grad", "is_grad_enabled",
    "fc", "conv2d", "instance_norm", "prelu", "dropout", "softmax",
    "pixel_shuffle", "pixel_unshuffle", "batched_matmul",
    "add", "sub", "mul", "scale", "absolute", "sum_all", "mean_all",
    "reshape", "transpose", "concat",
    "AdamState", "adam_step", "grad_check", "grad_check_params",
]


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""

    def __init__(self, where: str):
        super().__init__(f"non-finite values produced by {where}")
        self.where = where


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-d real array that can take part in the differentiation graph.

    ``data`` is a C-contiguous float64 (training / checking) or float32
    (inference) array. ``grad`` is only populated on leaves with
    ``requires_grad=True`` after a backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = np.asarray(arr, order="C")
        if not np.isfinite(self.data).all():
            raise NonFiniteError(name or "tensor construction")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        Graph(self).backward(np.asarray(grad, dtype=self.data.dtype))

    # Operator sugar for the generic primitives.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def abs(self):
        return absolute(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, order="C")
    out.grad = None
    out.name = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int


class Graph:
    """Topologically ordered record of the primitives reachable from ``root``.

    ``nodes`` lists every recorded application with inputs preceding their
    consumers. ``backward`` visits each node exactly once, in reverse.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self._tensors: dict[int, Tensor] = {}
        self.nodes: list[Node] = []
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in reversed(t._parents):
                if id(p) not in seen:
                    stack.append((p, False))
        for t in order:
            self._tensors[id(t)] = t
            if t._backward is not None:
                self.nodes.append(Node(t.op, tuple(id(p) for p in t._parents), id(t)))

    def backward(self, seed: np.ndarray) -> None:
        if not self.root.requires_grad:
            raise RuntimeError("root does not require grad; nothing was recorded")
        grads: dict[int, np.ndarray] = {id(self.root): seed}
        for node in reversed(self.nodes):
            out = self._tensors[node.output]
            g = grads.pop(node.output, None)
            if g is None:
                continue
            in_grads = out._backward(g)
            for p, pg in zip(out._parents, in_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._backward is None:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                else:
                    k = id(p)
                    grads[k] = pg if k not in grads else grads[k] + pg
        if self.root._backward is None and self.root.requires_grad:
            self.root.grad = seed.copy() if self.root.grad is None else self.root.grad + seed
        self.free()

    def free(self) -> None:
        for node in self.nodes:
            t = self._tensors[node.output]
            t._parents = ()
            t._backward = None
        self.nodes = []
        self._tensors = {}


# ---------------------------------------------------------------------------
# Generic primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def sum_all(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.dtype
    return _make(np.array(a.data.sum(), dtype=dt), (a,),
                 lambda g: (np.broadcast_to(g, shape).astype(dt),), "sum")


def mean_all(a: Tensor) -> Tensor:
    shape, dt, n = a.shape, a.dtype, a.size
    return _make(np.array(a.data.mean(), dtype=dt), (a,),
                 lambda g: (np.full(shape, g / n, dtype=dt),), "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _getitem(a: Tensor, index) -> Tensor:
    shape, dt = a.shape, a.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dt)
        out[index] = g
        return (out,)

    return _make(a.data[index], (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


# ---------------------------------------------------------------------------
# Layer primitives


def fc(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Fully connected layer ``y = x @ W + b`` for ``x`` of shape [B, I]."""
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
        raise ValueError("fc expects x[B,I], W[I,O], b[O]")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ValueError(f"fc: shape mismatch x{x.shape} W{W.shape} b{b.shape}")
    xd, Wd = x.data, W.data

    def backward(g):
        return g @ Wd.T, xd.T @ g, g.sum(axis=0)

    return _make(xd @ Wd + b.data, (x, W, b), backward, "fc")


def conv2d(x: Tensor, k: Tensor, b: Tensor, padding: str = "same") -> Tensor:
    """Stride-1 cross-correlation with 1x1 or 3x3 kernels.

    ``padding="same"`` zero-pads so the spatial size is preserved;
    ``"none"`` returns the valid region only.
    """
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ValueError("conv2d expects x[B,C,H,W] and k[F,C,kh,kw]")
    F, C, kh, kw = k.shape
    if kh not in (1, 3) or kw not in (1, 3):
        raise ValueError(f"conv2d: unsupported kernel extent {kh}x{kw}")
    if x.shape[1] != C:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, kernel expects {C}")
    if b.shape != (F,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({F},)")
    if padding not in ("same", "none"):
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    B, _, H, W = x.shape
    xd, kd = x.data, k.data

    if kh == 1 and kw == 1:
        k2 = kd[:, :, 0, 0]  # [F, C]
        out = np.einsum("fc,bchw->bfhw", k2, xd, optimize=True) + b.data[None, :, None, None]

        def backward1(g):
            dx = np.einsum("fc,bfhw->bchw", k2, g, optimize=True)
            dk = np.einsum("bfhw,bchw->fc", g, xd, optimize=True)[:, :, None, None]
            return dx, dk, g.sum(axis=(0, 2, 3))

        return _make(out, (x, k, b), backward1, "conv2d")

    ph, pw = ((kh - 1) // 2, (kw - 1) // 2) if padding == "same" else (0, 0)
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # [B,C,H',W',kh,kw]
    out = np.tensordot(cols, kd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + b.data[None, :, None, None]
    Hp, Wp = xp.shape[2], xp.shape[3]

    def backward(g):
        dk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gcols = sliding_window_view(gp, (kh, kw), axis=(2, 3))
        dxp = np.tensordot(gcols, kd[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
        dxp = dxp.transpose(0, 3, 1, 2)
        assert dxp.shape[2:] == (Hp, Wp)
        dx = dxp[:, :, ph:ph + H, pw:pw + W]
        return dx, dk, g.sum(axis=(0, 2, 3))

    return _make(out, (x, k, b), backward, "conv2d")


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel spatial standardisation with affine output.

    Uses the biased (divide-by-N) variance.
    """
    if x.data.ndim != 4:
        raise ValueError("instance_norm expects x[B,C,H,W]")
    B, C, H, W = x.shape
    if H * W < 2:
        raise ValueError("instance_norm: spatial extent must be at least 2")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError("instance_norm: affine parameters must have shape [C]")
    xd = x.data
    mu = xd.mean(axis=(2, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def backward(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=(2, 3), keepdims=True)
        m2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _make(out, (x, gamma, beta), backward, "instance_norm")


def prelu(x: Tensor, a: Tensor) -> Tensor:
    """Parametric ReLU; ``a`` holds one slope per channel (axis 1) or a single slope."""
    if a.data.ndim != 1:
        raise ValueError("prelu: slope must be 1-D")
    n = a.shape[0]
    if n != 1 and (x.data.ndim < 2 or x.shape[1] != n):
        raise ValueError(f"prelu: {n} slopes do not match input shape {x.shape}")
    bshape = [1] * x.data.ndim
    if n != 1:
        bshape[1] = n
    ad = a.data.reshape(bshape)
    xd = x.data
    neg = xd < 0
    out = np.where(neg, ad * xd, xd)
    axes = tuple(i for i in range(xd.ndim) if not (n != 1 and i == 1))

    def backward(g):
        dx = np.where(neg, ad * g, g)
        da = np.where(neg, g * xd, 0.0).sum(axis=axes).reshape(n)
        return dx, da

    return _make(out, (x, a), backward, "prelu")


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: at train time zero with probability ``rate`` and rescale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * (1.0 / (1.0 - rate))
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space: [B, C*r*r, H, W] -> [B, C, H*r, W*r]."""
    B, Cr, H, W = x.shape
    if Cr % (r * r):
        raise ValueError(f"pixel_shuffle: {Cr} channels not divisible by r^2={r * r}")
    C = Cr // (r * r)
    out = x.data.reshape(B, C, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, C, H * r, W * r)

    def backward(g):
        return (g.reshape(B, C, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(B, Cr, H, W),)

    return _make(out, (x,), backward, "pixel_shuffle")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Space-to-depth, the inverse permutation of :func:`pixel_shuffle`."""
    B, C, Hr, Wr = x.shape
    if Hr % r or Wr % r:
        raise ValueError(f"pixel_unshuffle: spatial extent {Hr}x{Wr} not divisible by {r}")
    H, W = Hr // r, Wr // r
    out = x.data.reshape(B, C, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(B, C * r * r, H, W)

    def backward(g):
        return (g.reshape(B, C, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, C, Hr, Wr),)

    return _make(out, (x,), backward, "pixel_unshuffle")


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ValueError("batched_matmul expects a[B,M,K] and b[B,K,N]")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"batched_matmul: shape mismatch {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return _make(ad @ bd, (a, b), backward, "batched_matmul")


# ---------------------------------------------------------------------------
# Optimiser


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """Apply one bias-corrected Adam update using each parameter's ``grad``.

    All gradients are validated before anything is modified, so a non-finite
    gradient leaves parameters and state untouched.
    """
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NonFiniteError(f"gradient of {name}")
        if p.grad is not None and p.grad.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Finite-difference checking


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               indices: Iterable[int] | None = None) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``f`` maps ``x`` to a scalar tensor. Relative error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if x.dtype != np.float64:
        raise ValueError("grad_check requires 64-bit tensors")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = x.grad.reshape(-1).copy() if x.grad is not None else np.zeros(x.size)
    idx = range(x.size) if indices is None else indices
    worst = 0.0
    flat = x.data.reshape(-1)
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            worst = max(worst, _rel_err(analytic[i], (fp - fm) / (2.0 * h)))
    return worst


def grad_check_params(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                      samples: int = 50, rng: np.random.Generator | None = None,
                      h: float = 1e-5) -> dict[str, float]:
    """Group-wise gradient check of a zero-argument scalar loss.

    For each parameter tensor, up to ``samples`` coordinates (all of them when
    the group is smaller) are drawn without replacement and checked.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params.values():
        if p.dtype != np.float64:
            raise ValueError("grad_check_params requires 64-bit parameters")
        p.grad = None
    loss = loss_fn()
    loss.backward()
    report: dict[str, float] = {}
    with no_grad():
        for name, p in params.items():
            analytic = p.grad.reshape(-1).copy() if p.grad is not None else np.zeros(p.size)
            n = p.size
            pick = np.arange(n) if n <= samples else rng.choice(n, size=samples, replace=False)
            flat = p.data.reshape(-1)
            worst = 0.0
            for i in pick:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(loss_fn().data)
                flat[i] = orig - h
                fm = float(loss_fn().data)
                flat[i] = orig
                worst = max(worst, _rel_err(analytic[i], (fp - fm) / (2.0 * h)))
            report[name] = worst
    return report
