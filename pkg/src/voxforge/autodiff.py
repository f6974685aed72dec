"""Dense-tensor reverse-mode differentiation on 64-bit numpy arrays.

Define-by-run: primitives append nodes to a module-level tape in creation
order, which is a valid topological order, so backward() is a single
reverse sweep visiting each node once. A tape and its tensors belong to
one thread; training loops call clear_tape() between steps.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class Tensor:
    """N-dimensional float64 array on the differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "_producer")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._producer = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class TapeNode:
    output: Tensor
    inputs: tuple
    backward_fn: object  # grad_out -> tuple of grads aligned with inputs


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()


_TAPE = Tape()
_GRAD_ENABLED = True


def tape() -> Tape:
    return _TAPE


def clear_tape():
    _TAPE.clear()


class no_grad:
    """Context manager suppressing tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, inputs, backward_fn) -> Tensor:
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        node = TapeNode(out, tuple(inputs), backward_fn)
        out._producer = node
        _TAPE.nodes.append(node)
    return out


def backward(loss: Tensor):
    """Reverse-topological gradient accumulation into leaf .grad fields."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._producer is None:
        if not loss.requires_grad:
            raise ValueError("backward on a detached tensor: nothing to differentiate")
        # loss is itself a leaf parameter
        loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones_like(loss.data)
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_TAPE.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            if t._producer is None:  # leaf: accumulate into .grad
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad = t.grad + gi
            else:
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise and shape primitives ------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def tabs(a) -> Tensor:
    a = _as_tensor(a)
    return _record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data <= b.data
    return _record(
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        ),
    )


def clip(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, alpha: float = 0.1) -> Tensor:
    a = _as_tensor(a)
    slope = np.where(a.data > 0, 1.0, alpha)
    return _record(a.data * slope, (a,), lambda g: (g * slope,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = expit(a.data)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record(out, (a,), bwd)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        count = a.data.shape[axis]

    def bwd(g):
        g = np.asarray(g) / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record(out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def getitem(a, index) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _record(a.data[index], (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2D operands, got {a.data.shape} @ {b.data.shape}")
    return _record(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def linear(x, weight, bias) -> Tensor:
    """Affine map x @ weight.T + bias for x (N, I), weight (O, I), bias (O,)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.shape[1] != weight.data.shape[1]:
        raise ValueError(
            f"linear: inner dims disagree, x {x.data.shape} vs weight {weight.data.shape}"
        )
    if bias.data.shape != (weight.data.shape[0],):
        raise ValueError(f"linear: bias shape {bias.data.shape} != ({weight.data.shape[0]},)")
    return _record(
        x.data @ weight.data.T + bias.data,
        (x, weight, bias),
        lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0)),
    )


# -- 3D convolution -------------------------------------------------------


def _conv_windows(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        pad = ((0, 0), (0, 0)) + ((padding, padding),) * 3
        x = np.pad(x, pad)
    win = sliding_window_view(x, (k, k, k), axis=(2, 3, 4))
    return win[:, :, ::stride, ::stride, ::stride]


def _conv3d_raw(x: np.ndarray, kern: np.ndarray, stride: int, padding: int) -> np.ndarray:
    win = _conv_windows(x, kern.shape[2], stride, padding)
    return np.einsum("ncdhwxyz,fcxyz->nfdhw", win, kern, optimize=True)


def _conv3d_kernel_grad(x: np.ndarray, gy: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    win = _conv_windows(x, k, stride, padding)
    return np.einsum("ncdhwxyz,nfdhw->fcxyz", win, gy, optimize=True)


def _adjoint_phase(t: int, stride: int, padding: int, d: int, out: int):
    """Valid source range and target start for one kernel offset of the
    adjoint map i = stride*o + t - padding (o source index, i target)."""
    o_lo = max(0, -((t - padding) // stride))
    o_hi = min(d - 1, (out - 1 - t + padding) // stride)
    count = o_hi - o_lo + 1
    return o_lo, count, stride * o_lo + t - padding


def _conv3d_adjoint(
    u: np.ndarray, kern: np.ndarray, stride: int, padding: int, out_spatial: tuple
) -> np.ndarray:
    """Apply the transpose of conv3d's linear map: u lives in conv-output
    space (N, F, ...), the result in conv-input space (N, C, out_spatial).

    Scatter form: each kernel offset contributes one channel-mixing matmul
    of the whole source block into a strided slice of the target, so no
    zero-stuffed buffers are materialized.
    """
    n, f, d, h, w = u.shape
    k = kern.shape[2]
    if k - 1 - padding < 0:
        raise ValueError(f"padding {padding} exceeds kernel size {k} - 1")
    for i, sz in enumerate(out_spatial):
        if sz < (u.shape[2 + i] - 1) * stride + 1 - padding:
            raise ValueError(
                f"target spatial size {sz} too small for adjoint of "
                f"conv(k={k}, stride={stride}, padding={padding})"
            )
    c = kern.shape[1]
    out = np.zeros((n, *out_spatial, c))
    src = np.moveaxis(u, 1, -1)  # (N, d, h, w, F), channels last for the matmul
    for tx in range(k):
        ox, nx, ix = _adjoint_phase(tx, stride, padding, d, out_spatial[0])
        if nx <= 0:
            continue
        for ty in range(k):
            oy, ny, iy = _adjoint_phase(ty, stride, padding, h, out_spatial[1])
            if ny <= 0:
                continue
            for tz in range(k):
                oz, nz, iz = _adjoint_phase(tz, stride, padding, w, out_spatial[2])
                if nz <= 0:
                    continue
                block = src[:, ox : ox + nx, oy : oy + ny, oz : oz + nz, :]
                out[
                    :,
                    ix : ix + nx * stride : stride,
                    iy : iy + ny * stride : stride,
                    iz : iz + nz * stride : stride,
                    :,
                ] += block @ kern[:, :, tx, ty, tz]
    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


def conv3d(x, kernel, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (N, C, D, H, W) with kernel (F, C, k, k, k).

    Output spatial size is floor((D + 2*padding - k) / stride) + 1.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    n, c, d, h, w = x.data.shape
    f, c2, k = kernel.data.shape[0], kernel.data.shape[1], kernel.data.shape[2]
    if c != c2:
        raise ValueError(f"conv3d: input has {c} channels, kernel expects {c2}")
    if bias.data.shape != (f,):
        raise ValueError(f"conv3d: bias shape {bias.data.shape} != ({f},)")
    if d + 2 * padding < k:
        raise ValueError(f"conv3d: spatial size {d} + 2*{padding} smaller than kernel {k}")
    out = _conv3d_raw(x.data, kernel.data, stride, padding)
    out += bias.data[None, :, None, None, None]

    def bwd(g):
        gx = _conv3d_adjoint(g, kernel.data, stride, padding, (d, h, w))
        gk = _conv3d_kernel_grad(x.data, g, k, stride, padding)
        gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gk, gb

    return _record(out, (x, kernel, bias), bwd)


def conv3d_transpose(x, kernel, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of conv3d's linear map, as an up-scaling layer.

    x is (N, Cin, d, h, w), kernel (Cin, Cout, k, k, k); output spatial size
    is (d - 1)*stride - 2*padding + k (doubles at stride 2, k=4, padding 1).
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    n, cin, d, h, w = x.data.shape
    cin2, cout, k = kernel.data.shape[0], kernel.data.shape[1], kernel.data.shape[2]
    if cin != cin2:
        raise ValueError(f"conv3d_transpose: input has {cin} channels, kernel expects {cin2}")
    if bias.data.shape != (cout,):
        raise ValueError(f"conv3d_transpose: bias shape {bias.data.shape} != ({cout},)")
    out_spatial = tuple((s - 1) * stride - 2 * padding + k for s in (d, h, w))
    out = _conv3d_adjoint(x.data, kernel.data, stride, padding, out_spatial)
    out += bias.data[None, :, None, None, None]

    def bwd(g):
        gx = _conv3d_raw(g, kernel.data, stride, padding)
        gk = _conv3d_kernel_grad(g, x.data, k, stride, padding)
        gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gk, gb

    return _record(out, (x, kernel, bias), bwd)


# -- losses ---------------------------------------------------------------

BCE_EPS = 1e-7


def bce_loss(pred, target, pos_weight: float = 1.0) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1-eps].

    pos_weight scales the positive-class term; 1.0 gives the plain mean of
    -[t*log(p) + (1-t)*log(1-p)].
    """
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ValueError(f"bce_loss: shapes differ, {pred.data.shape} vs {target.data.shape}")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    t = target.data
    w = pos_weight
    per = -(w * t * np.log(p) + (1.0 - t) * np.log1p(-p))
    out = per.mean()

    def bwd(g):
        inside = (pred.data > BCE_EPS) & (pred.data < 1.0 - BCE_EPS)
        gp = (-w * t / p + (1.0 - t) / (1.0 - p)) / p.size
        return (g * gp * inside, None)

    return _record(out, (pred, target), bwd)


# -- LSTM cell ------------------------------------------------------------


@dataclass
class LstmState:
    h: Tensor
    s: Tensor

    def __post_init__(self):
        if self.h.data.shape != self.s.data.shape:
            raise ValueError(
                f"hidden/cell shapes differ: {self.h.data.shape} vs {self.s.data.shape}"
            )


def lstm_cell(x, prev: LstmState, params: dict) -> LstmState:
    """One LSTM step on a batch: x (B, I), state tensors (B, H).

    Gates i, f, o are sigmoid of affine maps of [x, h_prev]; the cell is
    s = f*s_prev + i*tanh(W_s.[x, h_prev] + b_s) and h = o*tanh(s).
    params holds W_i, W_f, W_o, W_s of shape (H, I+H) and b_i, b_f, b_o,
    b_s of shape (H,).
    """
    x = _as_tensor(x)
    xh = concat([x, prev.h], axis=1)
    gate_i = sigmoid(linear(xh, params["W_i"], params["b_i"]))
    gate_f = sigmoid(linear(xh, params["W_f"], params["b_f"]))
    gate_o = sigmoid(linear(xh, params["W_o"], params["b_o"]))
    candidate = tanh(linear(xh, params["W_s"], params["b_s"]))
    s_t = add(mul(gate_f, prev.s), mul(gate_i, candidate))
    h_t = mul(gate_o, tanh(s_t))
    return LstmState(h_t, s_t)


# -- optimizer ------------------------------------------------------------


class Adam:
    """Standard Adam with bias-corrected moments, updating params in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            m_hat = m / (1.0 - b1**self.t)
            v_hat = v / (1.0 - b2**self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_step(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One-off Adam step (fresh moment state); for persistent state use Adam."""
    opt = Adam(params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    opt.step()
    return params


# -- initializers ---------------------------------------------------------


def he_uniform(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    limit = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def plain_uniform(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    limit = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


# -- checkpoint format ----------------------------------------------------

_TNSR_MAGIC = b"TNSR"


def save_tensors(named, path):
    """TNSR checkpoint: magic, LE u32 count, then per tensor the name
    (LE u32 length + UTF-8), rank (LE u32), dims (LE u32 each) and LE f64 data."""
    items = list(named.items())
    with open(path, "wb") as f:
        f.write(_TNSR_MAGIC)
        f.write(struct.pack("<I", len(items)))
        for name, tensor in items:
            arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor, dtype=np.float64)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_tensors(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _TNSR_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {_TNSR_MAGIC!r}")
        (count,) = struct.unpack("<I", f.read(4))
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if rank else 1
            raw = f.read(8 * n)
            if len(raw) != 8 * n:
                raise ValueError(f"{path}: truncated data for tensor {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
    return out
