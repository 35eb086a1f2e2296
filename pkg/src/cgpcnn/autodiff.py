"""A small reverse-mode autodiff core over float64 numpy arrays.

Only the primitives the speaker networks need are provided. Activation maps
are ``(..., channels, width)`` arrays; a leading batch axis is optional.
Gradients of leaf tensors (parameters and any input created with
``requires_grad=True``) accumulate across ``backward`` calls until zeroed.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

POOL_EPS = 1e-12


class DivergenceError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(self.data) if (requires_grad and not _parents) else None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named trainable leaf with its own gradient accumulator."""

    __slots__ = ()

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise -----------------------------------------------------------

def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def mean2(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mean2")
    return _node(0.5 * (a.data + b.data), (a, b), lambda g: (0.5 * g, 0.5 * g))


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _node(np.sum(x.data), (x,), lambda g: (np.full(shape, float(g)),))


def slice_rows(x, start: int, stop: int) -> Tensor:
    """Channels ``start:stop`` of a map."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        d = np.zeros(shape)
        d[..., start:stop, :] = g
        return (d,)

    return _node(x.data[..., start:stop, :], (x,), backward)


def concat_rows(a, b) -> Tensor:
    """Stack two maps along the channel axis (second to last)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or a.data.ndim != b.data.ndim:
        raise ValueError("concat_rows expects two maps of equal rank >= 2")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise ValueError(f"concat_rows: widths differ, {a.shape} vs {b.shape}")
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise ValueError("concat_rows: empty operand")
    da = a.shape[-2]
    out = np.concatenate([a.data, b.data], axis=-2)
    return _node(out, (a, b), lambda g: (g[..., :da, :], g[..., da:, :]))


# -- convolution -----------------------------------------------------------

def conv_output_width(width: int, kernel_width: int, dilation: int = 1) -> int:
    return width - dilation * (kernel_width - 1)


def _conv_index(t_out: int, kernel_width: int, dilation: int) -> np.ndarray:
    return np.arange(kernel_width)[:, None] * dilation + np.arange(t_out)[None, :]


def _conv1d_backward(g, x, w2, cols, kernel_width, dilation):
    """Gradients of a valid dilated conv; returns (dx, dw2, db)."""
    b, c_in, t_in = x.shape
    t_out = g.shape[-1]
    dw2 = np.tensordot(g, cols, axes=([0, 2], [0, 2]))
    db = g.sum(axis=(0, 2))
    dcols = np.matmul(w2.T, g).reshape(b, c_in, kernel_width, t_out)
    dx = np.zeros_like(x)
    for k in range(kernel_width):
        s = k * dilation
        dx[:, :, s:s + t_out] += dcols[:, :, k, :]
    return dx, dw2, db


def conv1d(x, weight, bias, dilation: int = 1) -> Tensor:
    """Valid (unpadded) dilated cross-correlation with stride 1.

    ``x`` is ``(C_in, T)`` or ``(B, C_in, T)``, ``weight`` is
    ``(C_out, C_in, K)``, ``bias`` is ``(C_out,)``. Output width is
    ``T - dilation * (K - 1)``.
    """
    return conv1d_multi(x, [(weight, bias)], dilation)


def conv1d_multi(x, kernels: Sequence[tuple], dilation: int = 1) -> Tensor:
    """Several convs over the same input, outputs stacked along channels.

    Shares one im2col buffer between all ``(weight, bias)`` pairs, which must
    agree on input channels and kernel width.
    """
    x = as_tensor(x)
    weights = [as_tensor(w) for w, _ in kernels]
    biases = [as_tensor(b) for _, b in kernels]
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    _, c_in, k = weights[0].shape
    for w, b in zip(weights, biases):
        if w.data.ndim != 3 or w.shape[1:] != (c_in, k):
            raise ValueError(f"conv1d: weight {w.shape} incompatible with ({c_in}, {k}) kernels")
        if b.shape != (w.shape[0],):
            raise ValueError(f"conv1d: bias shape {b.shape} != ({w.shape[0]},)")
    if x.data.ndim not in (2, 3) or x.shape[-2] != c_in:
        raise ValueError(f"conv1d: input {x.shape} does not have {c_in} channels")
    t_in = x.shape[-1]
    t_out = conv_output_width(t_in, k, dilation)
    if t_out < 1:
        raise ValueError(
            f"conv1d: width {t_in} too short for kernel {k} at dilation {dilation} "
            f"(needs >= {dilation * (k - 1) + 1})")
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    b = xd.shape[0]
    cols = xd[:, :, _conv_index(t_out, k, dilation)].reshape(b, c_in * k, t_out)
    w2 = np.concatenate([w.data.reshape(w.shape[0], c_in * k) for w in weights])
    bias = np.concatenate([bb.data for bb in biases])
    out = np.matmul(w2, cols) + bias[None, :, None]
    splits = np.cumsum([w.shape[0] for w in weights])[:-1]

    def backward(g):
        g3 = g[None] if squeeze else g
        dx, dw2, db = _conv1d_backward(g3, xd, w2, cols, k, dilation)
        dws = [d.reshape(w.shape) for d, w in zip(np.split(dw2, splits), weights)]
        return ((dx[0] if squeeze else dx), *dws, *np.split(db, splits))

    return _node(out[0] if squeeze else out, (x, *weights, *biases), backward)


# -- pooling / dense / loss ------------------------------------------------

def statistics_pool(h) -> Tensor:
    """Concatenate per-channel temporal mean and (population) std: ``(..., 2D)``."""
    h = as_tensor(h)
    t = h.shape[-1]
    if t < 1:
        raise ValueError("statistics_pool needs at least one frame")
    mu = h.data.mean(axis=-1)
    centered = h.data - mu[..., None]
    sigma = np.sqrt((centered ** 2).mean(axis=-1) + POOL_EPS)
    out = np.concatenate([mu, sigma], axis=-1)
    d = mu.shape[-1]

    def backward(g):
        g_mu, g_sigma = g[..., :d], g[..., d:]
        return (g_mu[..., None] / t + (g_sigma / (t * sigma))[..., None] * centered,)

    return _node(out, (h,), backward)


def linear(x, weight, bias) -> Tensor:
    """``x @ W.T + b`` for ``x`` of shape ``(in,)`` or ``(B, in)``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    n_out, n_in = weight.shape
    if x.shape[-1] != n_in or bias.shape != (n_out,):
        raise ValueError(f"linear: input {x.shape} vs weight {weight.shape}, bias {bias.shape}")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        g2 = np.atleast_2d(g)
        x2 = np.atleast_2d(x.data)
        return g @ weight.data, g2.T @ x2, g2.sum(axis=0)

    return _node(out, (x, weight, bias), backward)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch (scalar)."""
    logits = as_tensor(logits)
    z = logits.data
    single = z.ndim == 1
    z2 = z[None] if single else z
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = z2.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"label out of range for {c} classes")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, labels]))
    probs = np.exp(shifted - log_norm[:, None])

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        d *= float(g) / n
        return (d[0] if single else d,)

    return _node(loss, (logits,), backward)


# -- reverse sweep ---------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("backward expects a scalar tensor")
    if not loss.requires_grad:
        raise ValueError("loss is detached: no trainable tensor feeds into it")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# -- optimisation ----------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a fixed list of parameters."""

    def __init__(self, params: Sequence[Parameter], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                bad = int(np.sum(~np.isfinite(p.grad)))
                raise DivergenceError(
                    f"non-finite gradient in {p.name} ({bad} of {p.grad.size} entries) "
                    f"at optimizer step {self.t + 1}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# -- gradient checking -----------------------------------------------------

def relative_error(analytic, numeric) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def finite_diff_check(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the graph from ``tensors`` and returns a scalar. With
    ``max_coords`` set, at most that many coordinates per tensor are probed
    (chosen with ``seed``); otherwise every coordinate is.
    """
    for t in tensors:
        if t.grad is None:
            raise ValueError("finite_diff_check needs leaf tensors with requires_grad=True")
        t.zero_grad()
    backward(fn())
    analytic = [t.grad.copy() for t in tensors]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn().data)
            flat[i] = orig - eps
            f_minus = float(fn().data)
            flat[i] = orig
            num = (f_plus - f_minus) / (2 * eps)
            worst = max(worst, float(relative_error(a.reshape(-1)[i], num)))
    return worst


# -- checkpoints -----------------------------------------------------------

CHECKPOINT_MAGIC = b"CGPN"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Binary dump: magic, u32 version, u32 count, then per tensor
    u32 name length, UTF-8 name, u32 rank, u32 dims, little-endian f64 data."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    if pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - pos} trailing bytes")
    return out
