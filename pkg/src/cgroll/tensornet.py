"""Dense-tensor reverse-mode autodiff on a replay tape, plus Adam.

Everything learnable in this package sits on this module. Tensors wrap numpy
arrays (float64 by default); primitive ops record a backward rule on a global
tape, and backward() replays the tape once in reverse. Graph structure is
handled with explicit gather/scatter over row indices, so there are no sparse
formats and no broadcasting surprises beyond numpy's.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FileFormatError, ShapeError

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ShapeError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tape:
    """Ordered record of primitive ops; replayed exactly once per backward."""

    def __init__(self):
        self.records = []  # (out_tensor, backward_fn), creation order

    def append(self, out, backward_fn):
        self.records.append((out, backward_fn))

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)


_TAPE = Tape()
_RECORDING = True


def tape_size():
    return len(_TAPE)


class no_grad:
    """Context manager: ops inside are not recorded."""

    def __enter__(self):
        global _RECORDING
        self._prev = _RECORDING
        _RECORDING = False
        return self

    def __exit__(self, *exc):
        global _RECORDING
        _RECORDING = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # light operator sugar; everything routes through the primitives below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _make(data, inputs, backward_fn):
    out = Tensor(data)
    if _RECORDING and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE.append(out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    # reduce a broadcast gradient back down to `shape`
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- primitives


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def concat(parts, axis=1):
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero parts")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(sl)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def gather_rows(x, idx):
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise ShapeError(f"gather_rows index {bad} out of range for table of {n} rows")

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            _accumulate(x, gx)

    return _make(x.data[idx], (x,), backward)


def scatter_add_rows(x, idx, n_rows):
    """out[j] = sum over rows i of x with idx[i] == j; out has n_rows rows."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (x.data.shape[0],):
        raise ShapeError(f"scatter_add_rows index shape {idx.shape} vs rows {x.data.shape[0]}")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        bad = idx[(idx < 0) | (idx >= n_rows)][0]
        raise ShapeError(f"scatter_add_rows index {bad} out of range for {n_rows} rows")
    out = np.zeros((n_rows,) + x.data.shape[1:], dtype=x.data.dtype)
    np.add.at(out, idx, x.data)

    def backward(g):
        _accumulate(x, g[idx])

    return _make(out, (x,), backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), backward)


def exp(x):
    x = as_tensor(x)
    out_data = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * out_data)

    return _make(out_data, (x,), backward)


def log(x):
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, g / x.data)

    return _make(np.log(x.data), (x,), backward)


def square(x):
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, g * 2.0 * x.data)

    return _make(np.square(x.data), (x,), backward)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, shape))

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.data.shape
    count = x.data.size if axis is None else shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, shape) / count)

    return _make(x.data.mean(axis=axis, keepdims=keepdims), (x,), backward)


def clip(x, lo, hi):
    """Hard clamp; gradient passes only strictly inside (lo, hi)."""
    x = as_tensor(x)
    mask = (x.data > lo) & (x.data < hi)

    def backward(g):
        _accumulate(x, g * mask)

    return _make(np.clip(x.data, lo, hi), (x,), backward)


def slice_cols(x, start, stop):
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"slice_cols expects a matrix, got shape {x.data.shape}")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        _accumulate(x, gx)

    return _make(np.ascontiguousarray(x.data[:, start:stop]), (x,), backward)


def linear(x, w, b):
    """Fused affine map x @ w + b; b broadcasts over rows."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.data.shape} @ {w.data.shape}")

    def backward(g):
        _accumulate(x, g @ w.data.T)
        _accumulate(w, x.data.T @ g)
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(x.data @ w.data + b.data, (x, w, b), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Row-wise normalization with affine output; biased variance over axis 1."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm expects a matrix, got shape {x.data.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        _accumulate(gamma, _unbroadcast(g * xhat, gamma.data.shape))
        _accumulate(beta, _unbroadcast(g, beta.data.shape))
        gg = g * gamma.data
        dx = inv * (gg - gg.mean(axis=1, keepdims=True)
                    - xhat * np.mean(gg * xhat, axis=1, keepdims=True))
        _accumulate(x, dx)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def backward(loss: Tensor):
    """Seed d(loss)=1, replay the tape in reverse, then clear the tape."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        _TAPE.clear()
        raise ShapeError("backward on a tensor with no recorded graph")
    loss.grad = np.ones_like(loss.data)
    try:
        for out, fn in reversed(_TAPE.records):
            if out.grad is not None:
                fn(out.grad)
    finally:
        _TAPE.clear()


# ------------------------------------------------------------ initialization


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape)


# ------------------------------------------------------------------ training


def lr_schedule(step: int, total_steps: int, lr0: float, lr1: float) -> float:
    """Exponential decay from lr0 to lr1 over total_steps."""
    if total_steps <= 0:
        return lr1
    frac = min(max(step / total_steps, 0.0), 1.0)
    return lr0 * (lr1 / lr0) ** frac


class ParamStore:
    """Named parameter tensors plus Adam moment state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def create(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.params:
            raise ShapeError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=trainable)
        self.params[name] = t
        if trainable:
            self.m[name] = np.zeros_like(t.data)
            self.v[name] = np.zeros_like(t.data)
        return t

    def trainable(self):
        return {k: t for k, t in self.params.items() if t.requires_grad}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for t in self.trainable().values():
            if t.grad is not None:
                total += float(np.sum(t.grad * t.grad))
        return float(np.sqrt(total))

    def adam_step(self, lr, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
        """One Adam update with bias correction; grads are zeroed after.

        Returns the pre-clip global gradient norm.
        """
        norm = self.grad_norm()
        scale = 1.0
        if clip_norm is not None and norm > clip_norm:
            scale = clip_norm / (norm + 1e-12)
        self.step += 1
        bc1 = 1.0 - beta1**self.step
        bc2 = 1.0 - beta2**self.step
        for name, t in self.trainable().items():
            g = t.grad
            if g is None:
                g = np.zeros_like(t.data)
            else:
                g = g * scale
            m = self.m[name]
            v = self.v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * np.square(g)
            t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        self.zero_grad()
        return norm

    # --------------------------------------------------------- serialization

    def opt_entries(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            if name in self.m:
                out["m:" + name] = self.m[name]
                out["v:" + name] = self.v[name]
        out["step"] = np.float64(self.step)
        return out

    def save(self, path):
        save_checkpoint(path, {k: t.data for k, t in self.params.items()}, self.opt_entries())

    def load(self, path):
        params, opt = load_checkpoint(path)
        for name, arr in params.items():
            if name in self.params:
                t = self.params[name]
                if t.data.shape != arr.shape:
                    raise FileFormatError(
                        f"checkpoint param {name!r} shape {arr.shape} != {t.data.shape}"
                    )
                t.data = arr.astype(t.data.dtype)
            else:
                self.create(name, arr, trainable=("m:" + name) in opt)
        self.load_opt_entries(opt)

    def load_opt_entries(self, opt: dict):
        for name, arr in opt.items():
            if name == "step":
                self.step = int(np.ravel(arr)[0])
                continue
            if name.startswith("m:"):
                target, base = self.m, name[2:]
            elif name.startswith("v:"):
                target, base = self.v, name[2:]
            else:
                raise FileFormatError(f"unknown optimizer entry {name!r}")
            if base not in self.params:
                raise FileFormatError(f"optimizer entry {name!r} has no parameter")
            if arr.shape != self.params[base].data.shape:
                raise FileFormatError(
                    f"optimizer entry {name!r} shape {arr.shape} != "
                    f"{self.params[base].data.shape}")
            target[base] = arr


_CK_MAGIC = b"CGROLLCK"
_CK_VERSION = 1


def _write_entry(fh, name: str, arr: np.ndarray):
    raw = np.ascontiguousarray(arr, dtype="<f8")
    nm = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nm)))
    fh.write(nm)
    fh.write(struct.pack("<B", raw.ndim))
    for d in raw.shape:
        fh.write(struct.pack("<I", d))
    fh.write(raw.tobytes())


def _read_entry(fh):
    (nlen,) = struct.unpack("<H", fh.read(2))
    name = fh.read(nlen).decode("utf-8")
    (rank,) = struct.unpack("<B", fh.read(1))
    dims = [struct.unpack("<I", fh.read(4))[0] for _ in range(rank)]
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    return name, data


def save_checkpoint(path, params: dict, opt_entries: dict):
    """Write named f64 arrays: a parameter section, then optimizer state
    appended in the identical entry layout."""
    with open(path, "wb") as fh:
        fh.write(_CK_MAGIC)
        fh.write(struct.pack("<I", _CK_VERSION))
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            _write_entry(fh, name, arr)
        fh.write(struct.pack("<I", len(opt_entries)))
        for name, arr in opt_entries.items():
            _write_entry(fh, name, arr)


def load_checkpoint(path):
    """Returns (params, opt_entries) dicts; raises FileFormatError on bad files."""
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise FileFormatError(str(e)) from e
    with fh:
        magic = fh.read(8)
        if magic != _CK_MAGIC:
            raise FileFormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CK_VERSION:
            raise FileFormatError(f"unsupported checkpoint version {version}")
        (n_params,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(n_params):
            name, data = _read_entry(fh)
            params[name] = data
        (n_state,) = struct.unpack("<I", fh.read(4))
        opt = {}
        for _ in range(n_state):
            name, data = _read_entry(fh)
            opt[name] = data
        if fh.read(1):
            raise FileFormatError("trailing bytes after checkpoint payload")
    return params, opt
