"""Reverse-mode automatic differentiation on dense float64 numpy arrays.

Ops build a DAG of Tensor nodes; backward() topologically sorts the graph
reachable from a scalar loss and accumulates gradients into every node,
visiting each op exactly once. Nothing is recorded when no input requires
gradients, so inference passes are plain numpy. The op set is exactly what
the models and losses here need; no attempt is made at a general framework.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes for the requested op."""


class NotScalarLoss(ValueError):
    """backward() was called on a non-scalar tensor."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable tensor carrying its optimizer state (Adam moments)."""

    __slots__ = ("adam_m", "adam_v")

    def __init__(self, data) -> None:
        super().__init__(data, requires_grad=True)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = True


class no_grad:
    """Context manager suppressing tape recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad for every tensor the scalar loss depends on.

    Repeated calls on freshly built graphs accumulate into parameter
    gradients until zero_grad() is called.
    """
    if loss.data.size != 1:
        raise NotScalarLoss(f"loss has shape {loss.data.shape}, expected a scalar")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}") from exc

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}") from exc

    def bwd(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        a._accumulate(g * s)

    return _make(a.data * s, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        a._accumulate(_unbroadcast(ga, a.data.shape))
        b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def swap_last2(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        a._accumulate(g.swapaxes(-1, -2))

    return _make(np.ascontiguousarray(a.data.swapaxes(-1, -2)), (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)

    def bwd(g):
        a._accumulate(g.transpose(inv))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return _make(data, tuple(tensors), bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            t._accumulate(np.take(g, i, axis=axis))

    return _make(data, tuple(tensors), bwd)


def take_row(a, index: int) -> Tensor:
    """Select a['index'] along the first axis."""
    a = as_tensor(a)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[index] = g
        a._accumulate(full)

    return _make(a.data[index].copy(), (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bwd(g):
        a._accumulate(g * mask)

    return _make(a.data * mask, (a,), bwd)


def leaky_relu(a, alpha: float = 0.01) -> Tensor:
    a = as_tensor(a)
    slope = np.where(a.data > 0, 1.0, alpha)

    def bwd(g):
        a._accumulate(g * slope)

    return _make(a.data * slope, (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)

    def bwd(g):
        a._accumulate(g * (1.0 - y * y))

    return _make(y, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = np.empty_like(a.data)
    pos = a.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    y[~pos] = ex / (1.0 + ex)

    def bwd(g):
        a._accumulate(g * y * (1.0 - y))

    return _make(y, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        a._accumulate(y * (g - dot))

    return _make(y, (a,), bwd)


def masked_softmax(a, allow: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over the allowed entries; rows with nothing allowed emit zeros."""
    a = as_tensor(a)
    neg = np.where(allow, a.data, -np.inf)
    mx = neg.max(axis=axis, keepdims=True)
    any_allowed = np.isfinite(mx)
    mx = np.where(any_allowed, mx, 0.0)
    e = np.exp(neg - mx) * allow
    z = e.sum(axis=axis, keepdims=True)
    y = np.divide(e, z, out=np.zeros_like(e), where=z > 0)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        a._accumulate(y * (g - dot))

    return _make(y, (a,), bwd)


# ---------------------------------------------------------------------------
# normalization


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine pair."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.shape[-1] != gamma.data.shape[-1]:
        raise ShapeMismatch(f"layernorm: {x.shape} with affine {gamma.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gamma.data * xhat + beta.data

    def bwd(g):
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        x._accumulate((gg - m1 - xhat * m2) * inv)
        axes = tuple(range(g.ndim - 1))
        gamma._accumulate((g * xhat).sum(axis=axes))
        beta._accumulate(g.sum(axis=axes))

    return _make(data, (x, gamma, beta), bwd)


def batchnorm2d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization of a (B, C, H, W) tensor.

    In training mode the batch statistics are used (and folded into the
    running buffers in place); in inference mode the running buffers are
    used and nothing is recorded against them.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 4 or x.data.shape[1] != gamma.data.shape[0]:
        raise ShapeMismatch(f"batchnorm2d: {x.shape} with affine {gamma.shape}")
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        gamma._accumulate((g * xhat).sum(axis=axes))
        beta._accumulate(g.sum(axis=axes))
        gg = g * gamma.data[None, :, None, None]
        if training:
            m1 = gg.mean(axis=axes)
            m2 = (gg * xhat).mean(axis=axes)
            gx = (
                gg
                - m1[None, :, None, None]
                - xhat * m2[None, :, None, None]
            ) * inv[None, :, None, None]
        else:
            gx = gg * inv[None, :, None, None]
        x._accumulate(gx)

    return _make(data, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# convolution and pooling


def _sliding(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win  # (B, C, OH, OW, kh, kw)


def conv2d(x, w, b=None, padding: int = 0) -> Tensor:
    """Stride-1 2D convolution of (B, C, H, W) with (O, C, kh, kw) kernels."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeMismatch(f"conv2d: input {x.shape}, kernel {w.shape}")
    bt = as_tensor(b) if b is not None else None
    B, C, H, W = x.data.shape
    O, _, kh, kw = w.data.shape
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    OH, OW = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if OH < 1 or OW < 1:
        raise ShapeMismatch(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    cols = _sliding(xp, kh, kw).reshape(B, C, OH * OW, kh * kw)
    cols = cols.transpose(0, 2, 1, 3).reshape(B, OH * OW, C * kh * kw)
    wf = w.data.reshape(O, C * kh * kw)
    out = (cols @ wf.T).transpose(0, 2, 1).reshape(B, O, OH, OW)
    if bt is not None:
        out = out + bt.data[None, :, None, None]

    def bwd(g):
        gf = g.reshape(B, O, OH * OW).transpose(0, 2, 1)  # (B, OH*OW, O)
        gw = np.einsum("bpo,bpk->ok", gf, cols)
        w._accumulate(gw.reshape(O, C, kh, kw))
        if bt is not None:
            bt._accumulate(g.sum(axis=(0, 2, 3)))
        gcols = gf @ wf  # (B, OH*OW, C*kh*kw)
        gcols = gcols.reshape(B, OH, OW, C, kh, kw)
        gx = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + OH, j : j + OW] += gcols[:, :, :, :, i, j].transpose(
                    0, 3, 1, 2
                )
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        x._accumulate(gx)

    parents = (x, w) if bt is None else (x, w, bt)
    return _make(out, parents, bwd)


def maxpool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; H and W must divide by size."""
    x = as_tensor(x)
    B, C, H, W = x.data.shape
    if H % size or W % size:
        raise ShapeMismatch(f"maxpool2d: {x.shape} not divisible by {size}")
    OH, OW = H // size, W // size
    blocks = x.data.reshape(B, C, OH, size, OW, size).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(B, C, OH, OW, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(B, C, OH, OW, size, size).transpose(0, 1, 2, 4, 3, 5)
        x._accumulate(gx.reshape(B, C, H, W))

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# losses


_CLIP = 1e-12


def bce_sum(pred, target: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """Sum of elementwise binary cross-entropies (optionally weighted)."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ShapeMismatch(f"bce: {pred.shape} vs target {target.shape}")
    p = np.clip(pred.data, _CLIP, 1.0 - _CLIP)
    ll = -(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))
    if weight is not None:
        ll = ll * weight
    data = np.asarray(ll.sum())

    def bwd(g):
        dp = (p - target) / (p * (1.0 - p))
        if weight is not None:
            dp = dp * weight
        pred._accumulate(g * dp)

    return _make(data, (pred,), bwd)


def sse_sum(pred, target: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """Sum of squared errors (optionally weighted)."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ShapeMismatch(f"sse: {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    sq = diff * diff
    if weight is not None:
        sq = sq * weight
    data = np.asarray(sq.sum())

    def bwd(g):
        dp = 2.0 * diff
        if weight is not None:
            dp = dp * weight
        pred._accumulate(g * dp)

    return _make(data, (pred,), bwd)


def bce(pred, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over all entries."""
    pred = as_tensor(pred)
    return scale(bce_sum(pred, target), 1.0 / pred.data.size)


def mse(pred, target: np.ndarray) -> Tensor:
    """Mean squared error over all entries."""
    pred = as_tensor(pred)
    return scale(sse_sum(pred, target), 1.0 / pred.data.size)


def sum_all(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        a._accumulate(np.full_like(a.data, float(g)))

    return _make(np.asarray(a.data.sum()), (a,), bwd)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    n_checked: int
    excluded: list = field(default_factory=list)  # (name, flat index) at kinks
    failures: list = field(default_factory=list)  # (name, flat index, analytic, numeric, rel)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"gradcheck {status}: max rel error {self.max_rel_error:.3e} over "
            f"{self.n_checked} coordinates ({len(self.excluded)} excluded, "
            f"{len(self.failures)} failures)"
        )


def grad_check(
    fn,
    params: dict[str, Parameter],
    tol: float = 1e-5,
    h: float = 1e-6,
    max_coords_per_param: int | None = None,
    seed: int = 0,
    kink_tol: float = 1e-3,
) -> GradCheckReport:
    """Compare analytic gradients of fn() against central finite differences.

    fn rebuilds its graph on every call and returns a scalar Tensor.
    Coordinates where one-sided differences disagree (nondifferentiable
    points, e.g. relu at 0) are reported as excluded rather than failed.
    When max_coords_per_param is set, a seeded subset of coordinates is
    checked per parameter.
    """
    for p in params.values():
        p.zero_grad()
    loss = fn()
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    f0 = float(loss.data)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(passed=True, max_rel_error=0.0, n_checked=0)
    for name, p in params.items():
        flat = p.data.ravel()
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = np.arange(n)
        for c in coords:
            c = int(c)
            orig = flat[c]
            step = h * max(1.0, abs(orig))
            flat[c] = orig + step
            f_plus = float(fn().data)
            flat[c] = orig - step
            f_minus = float(fn().data)
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            fwd = (f_plus - f0) / step
            bwd_d = (f0 - f_minus) / step
            if abs(fwd - bwd_d) > kink_tol * (1.0 + abs(numeric)):
                report.excluded.append((name, c))
                continue
            a = float(analytic[name].ravel()[c])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            report.n_checked += 1
            report.max_rel_error = max(report.max_rel_error, rel)
            if rel >= tol:
                report.failures.append((name, c, a, numeric, rel))
    report.passed = not report.failures
    return report


# ---------------------------------------------------------------------------
# checkpoint format: magic, u32 count, index entries
# (u16 name length, name utf-8, u8 ndim, u32 dims, u64 payload offset),
# then contiguous little-endian f64 payloads

_MAGIC = b"RFCK1\x00"


def save_checkpoint(params: dict[str, Tensor], path) -> None:
    names = sorted(params)
    index = bytearray()
    offset = 0
    for name in names:
        data = params[name].data
        nb = name.encode("utf-8")
        index += struct.pack("<H", len(nb)) + nb
        index += struct.pack("<B", data.ndim)
        index += struct.pack(f"<{data.ndim}I", *data.shape)
        index += struct.pack("<Q", offset)
        offset += data.size * 8
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(names)))
        fh.write(bytes(index))
        for name in names:
            fh.write(params[name].data.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    pos = len(_MAGIC)
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        entries.append((name, shape, offset))
    out = {}
    for name, shape, offset in entries:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=pos + offset)
        out[name] = arr.reshape(shape).astype(np.float64)
    return out
