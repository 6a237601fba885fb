"""Minimal reverse-mode autodiff on numpy arrays, plus the few layers,
the optimizer, and the checkpoint format the experiment harnesses need.

Tensors are float32 by default (float64 inputs are kept, which the
gradient-check tests rely on); reductions accumulate in float64. The
backward pass zeroes every gradient in the reachable graph before seeding,
so parameter tensors can be reused across steps without manual zeroing.
"""

from __future__ import annotations

import math
import struct

import numpy as np

_FLOATS = (np.float32, np.float64)


def _as_array(data) -> np.ndarray:
    a = np.asarray(data)
    if a.dtype not in _FLOATS:
        a = a.astype(np.float32)
    return a


class Tensor:
    __slots__ = ("data", "grad", "_prev", "_bw")

    def __init__(self, data, prev=(), bw=None):
        self.data = _as_array(data)
        self.grad = None
        self._prev = prev
        self._bw = bw

    @property
    def shape(self):
        return self.data.shape

    def backward(self, grad=None) -> None:
        """Reverse-mode sweep from this node; seeds with `grad` (or 1.0 for
        a scalar), zeroing the whole reachable graph first."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"implicit seed needs a scalar, "
                                 f"shape is {self.data.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ValueError(f"seed shape {grad.shape} != "
                                 f"tensor shape {self.data.shape}")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            t, done = stack.pop()
            if done:
                topo.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for c in t._prev:
                stack.append((c, False))
        for t in topo:
            t.grad = np.zeros_like(t.data)
        self.grad = grad
        for t in reversed(topo):
            if t._bw is not None:
                t._bw()

    # convenience arithmetic (thin wrappers over the op functions)
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# ops

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data, (a, b))

    def bw():
        a.grad += _unbroadcast(out.grad, a.data.shape)
        b.grad += _unbroadcast(out.grad, b.data.shape)
    out._bw = bw
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data, (a, b))

    def bw():
        a.grad += _unbroadcast(out.grad * b.data, a.data.shape)
        b.grad += _unbroadcast(out.grad * a.data, b.data.shape)
    out._bw = bw
    return out


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data, (a, b))

    def bw():
        a.grad += out.grad @ b.data.T
        b.grad += a.data.T @ out.grad
    out._bw = bw
    return out


def relu(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.maximum(a.data, 0), (a,))

    def bw():
        a.grad += out.grad * (a.data > 0)
    out._bw = bw
    return out


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.reshape(shape), (a,))

    def bw():
        a.grad += out.grad.reshape(a.data.shape)
    out._bw = bw
    return out


def flatten(a) -> Tensor:
    a = _wrap(a)
    return reshape(a, (a.data.shape[0], -1))


def concat(parts, axis: int = -1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]

    def bw():
        offs = np.cumsum([0] + sizes)
        for p, lo, hi in zip(parts, offs[:-1], offs[1:]):
            idx = [slice(None)] * out.grad.ndim
            idx[axis] = slice(lo, hi)
            p.grad += out.grad[tuple(idx)]
    out._bw = bw
    return out


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """3x3 valid convolution, NCHW layout, computed as nine shifted slices."""
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d wants 4-d tensors, got {x.data.shape} "
                         f"and {w.data.shape}")
    bsz, cin, h, wd = x.data.shape
    cout, cin2, kh, kw = w.data.shape
    if cin != cin2 or (kh, kw) != (3, 3):
        raise ValueError(f"kernel must be (out, {cin}, 3, 3), got {w.data.shape}")
    ho, wo = (h - 3) // stride + 1, (wd - 3) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{wd} too small for 3x3 at stride {stride}")
    out_d = np.zeros((bsz, cout, ho, wo), dtype=x.data.dtype)
    for di in range(3):
        for dj in range(3):
            xs = x.data[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
            out_d += np.einsum("bchw,oc->bohw", xs, w.data[:, :, di, dj])
    prev = (x, w) if b is None else (x, w, _wrap(b))
    if b is not None:
        b = prev[2]
        out_d = out_d + b.data[None, :, None, None]
    out = Tensor(out_d, prev)

    def bw():
        g = out.grad
        for di in range(3):
            for dj in range(3):
                sl = (slice(None), slice(None),
                      slice(di, di + stride * ho, stride),
                      slice(dj, dj + stride * wo, stride))
                w.grad[:, :, di, dj] += np.einsum("bohw,bchw->oc", g, x.data[sl])
                x.grad[sl] += np.einsum("bohw,oc->bchw", g, w.data[:, :, di, dj])
        if b is not None:
            b.grad += g.sum(axis=(0, 2, 3))
    out._bw = bw
    return out


def mean(a) -> Tensor:
    a = _wrap(a)
    val = a.data.astype(np.float64).mean()
    out = Tensor(np.asarray(val, dtype=a.data.dtype), (a,))

    def bw():
        a.grad += (out.grad / a.data.size) * np.ones_like(a.data)
    out._bw = bw
    return out


def tsum(a) -> Tensor:
    a = _wrap(a)
    val = a.data.astype(np.float64).sum()
    out = Tensor(np.asarray(val, dtype=a.data.dtype), (a,))

    def bw():
        a.grad += out.grad * np.ones_like(a.data)
    out._bw = bw
    return out


def sigmoid(x) -> np.ndarray:
    """Stable logistic function on plain arrays (not a Tensor op)."""
    x = np.asarray(x)
    if x.dtype not in _FLOATS:
        x = x.astype(np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(v) -> np.ndarray:
    """Stable softmax of a vector (plain arrays; weights for the solver)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"softmax wants a vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input must be finite")
    e = np.exp(v - v.max())
    return e / e.sum()


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy from raw scores; grad is (sigma(x)-t)/N."""
    logits = _wrap(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.data.shape:
        raise ValueError(f"targets {t.shape} vs logits {logits.data.shape}")
    x = logits.data.astype(np.float64)
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(np.asarray(per.mean(), dtype=logits.data.dtype), (logits,))

    def bw():
        g = (sigmoid(x) - t) / x.size
        logits.grad += (float(out.grad) * g).astype(logits.data.dtype)
    out._bw = bw
    return out


# ---------------------------------------------------------------------------
# layers

def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int,
                    dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.w = Tensor(kaiming_uniform(rng, (n_in, n_out), n_in, dtype))
        self.b = Tensor(np.zeros(n_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)

    def params(self) -> list:
        return [self.w, self.b]


class Conv2d:
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 stride: int = 1, dtype=np.float32):
        self.stride = stride
        self.w = Tensor(kaiming_uniform(rng, (c_out, c_in, 3, 3), c_in * 9, dtype))
        self.b = Tensor(np.zeros(c_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, self.stride)

    def params(self) -> list:
        return [self.w, self.b]


# ---------------------------------------------------------------------------
# optimization

class WarmupCosine:
    """Linear warmup over the first `warmup_steps`, then cosine decay.

    `floor` is the fraction of `base` the decay bottoms out at; the default
    0.0 anneals all the way to zero.
    """

    def __init__(self, base: float, warmup_steps: int, total_steps: int,
                 floor: float = 0.0):
        self.base = base
        self.warmup = max(0, int(warmup_steps))
        self.total = int(total_steps)
        self.floor = floor

    def __call__(self, t: int) -> float:
        if t < self.warmup:
            return self.base * (t + 1) / self.warmup
        if self.total <= self.warmup:
            return self.base
        prog = min(1.0, (t - self.warmup) / (self.total - self.warmup))
        c = 0.5 * (1.0 + math.cos(math.pi * prog))
        return self.base * (self.floor + (1.0 - self.floor) * c)


class SGD:
    """Nesterov-momentum SGD with global-norm gradient clipping.

    The clip rescales the whole gradient group to L2 norm <= `clip` before
    the momentum update; `schedule` (step -> lr) overrides the fixed rate.
    """

    def __init__(self, params, lr: float, momentum: float = 0.9,
                 clip: float = 0.1, schedule=None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.schedule = schedule
        self.vel = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        if any(g is None for g in grads):
            raise RuntimeError("step() before backward(): missing gradients")
        sq = sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)
        if not math.isfinite(sq):
            raise RuntimeError("non-finite gradient; aborting training")
        norm = math.sqrt(sq)
        scale = 1.0 if self.clip is None or norm <= self.clip else self.clip / norm
        lr = self.schedule(self.t) if self.schedule else self.lr
        self.t += 1
        mu = self.momentum
        for p, v, g in zip(self.params, self.vel, grads):
            g = g * scale
            v *= mu
            v += g
            p.data -= (lr * (g + mu * v)).astype(p.data.dtype)


class Adam:
    """Adam with bias correction and optional global-norm clipping.

    Per-parameter scaling keeps the step size well behaved when gradients
    are sparse and spiky (the solver layer emits exactly that), so no lr
    schedule is needed; `clip` defaults to off because the second-moment
    estimate already bounds the effective step.
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip: float | None = None, schedule=None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.schedule = schedule
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.t = 0

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        if any(g is None for g in grads):
            raise RuntimeError("step() before backward(): missing gradients")
        sq = sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)
        if not math.isfinite(sq):
            raise RuntimeError("non-finite gradient; aborting training")
        norm = math.sqrt(sq)
        scale = 1.0 if self.clip is None or norm <= self.clip else self.clip / norm
        lr = self.schedule(self.t) if self.schedule else self.lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            g = g.astype(np.float64) * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            step = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= step.astype(p.data.dtype)


# ---------------------------------------------------------------------------
# checkpoints: magic, entry count, then (name, shape, f32 payload) records

CHECKPOINT_MAGIC = b"LMT1"


def save_checkpoint(path, params: dict) -> None:
    """Write named arrays as a little-endian f32 blob."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            arr = np.asarray(arr)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {blob[:4]!r}")
    off = 4
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
        off += 4 * n
        out[name] = arr.reshape(shape).astype(np.float32)
    if off != len(blob):
        raise ValueError(f"trailing bytes in checkpoint at offset {off}")
    return out
