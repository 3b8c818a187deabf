"""Reverse-mode automatic differentiation on dense float64 arrays.

Forward evaluation is eager: every op computes its value immediately and
records its parents together with a vector-Jacobian closure. Calling
``backward()`` on a scalar node walks the graph in reverse topological
order and accumulates gradients into ``.grad``. Gradients accumulate
across backward calls until ``zero_grad`` is invoked.

Scope is deliberately small: the ops below are exactly what the bidding
model needs. Broadcasting is supported only for the patterns that occur
in practice (bias add, row-wise scale); anything else raises ShapeError.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A node in the compute graph: value, lazily allocated grad, parents."""

    __slots__ = ("value", "grad", "_parents", "_vjp", "op")

    def __init__(self, value, parents: tuple = (), vjp: Callable | None = None,
                 op: str = "leaf"):
        self.value = _as_array(value)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._vjp = vjp
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        """A new leaf sharing this value; gradients do not flow past it."""
        return Tensor(self.value, op="detach")

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: vjp outputs may be views into buffers reused downstream
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.value.shape:
                self.grad = np.broadcast_to(self.grad, self.value.shape).copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse accumulation from this node; requires a scalar root."""
        if self.value.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.accumulate(np.ones_like(self.value))
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                parent.accumulate(g)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(out, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.value * b.value

    def vjp(g):
        return (_unbroadcast(g * b.value, a.shape),
                _unbroadcast(g * a.value, b.shape))

    return Tensor(out, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.value / b.value

    def vjp(g):
        return (_unbroadcast(g / b.value, a.shape),
                _unbroadcast(-g * a.value / (b.value * b.value), b.shape))

    return Tensor(out, (a, b), vjp, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(a.value * c, (a,), lambda g: (g * c,), "scale")


def pow_const(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.value ** p

    def vjp(g):
        return (g * p * a.value ** (p - 1.0),)

    return Tensor(out, (a,), vjp, "pow")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)

    def vjp(g):
        return (g * 0.5 / out,)

    return Tensor(out, (a,), vjp, "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return Tensor(out, (a,), vjp, "tanh")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.value, 0.0)

    def vjp(g):
        return (g * (a.value > 0.0),)

    return Tensor(out, (a,), vjp, "relu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only where unclamped."""
    out = np.clip(a.value, lo, hi)
    inside = (a.value >= lo) & (a.value <= hi)

    def vjp(g):
        return (g * inside,)

    return Tensor(out, (a,), vjp, "clip")


# -- reductions and reshaping --------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return Tensor(out, (a,), vjp, "sum")


def mean(a: Tensor) -> Tensor:
    """Mean over all entries, returned as a scalar node."""
    n = a.value.size
    out = a.value.mean()

    def vjp(g):
        return (np.full(a.shape, float(g) / n),)

    return Tensor(out, (a,), vjp, "mean")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.value.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return Tensor(out, (a,), vjp, "reshape")


def transpose(a: Tensor, axes: tuple) -> Tensor:
    axes = tuple(ax % a.value.ndim for ax in axes)
    out = a.value.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inverse),)

    return Tensor(out, (a,), vjp, "transpose")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    out = np.concatenate([x.value for x in xs], axis=axis)
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, tuple(xs), vjp, "concat")


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {av.shape} @ {bv.shape}")
    if av.ndim > 2 and bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {av.shape} @ {bv.shape}")
    out = av @ bv

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2 and av.ndim > 2:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(out, (a, b), vjp, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map x @ w + b with x [..., d_in], w [d_in, d_out], b [d_out]."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def layernorm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance. No affine."""
    mu = x.value.mean(axis=-1, keepdims=True)
    var = x.value.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.value - mu) * inv
    n = x.shape[-1]

    def vjp(g):
        gy = g * inv
        gx = gy - gy.mean(axis=-1, keepdims=True) \
            - y * (gy * y).mean(axis=-1, keepdims=True)
        return (gx,)

    return Tensor(y, (x,), vjp, "layernorm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return Tensor(y, (x,), vjp, "softmax")


def masked_fill(x: Tensor, keep: np.ndarray, fill: float) -> Tensor:
    """Replace entries where ``keep`` is False with ``fill`` (no gradient there)."""
    keep = np.asarray(keep, dtype=bool)
    out = np.where(keep, x.value, fill)

    def vjp(g):
        return (np.where(keep, g, 0.0),)

    return Tensor(out, (x,), vjp, "masked_fill")


# -- indexed access --------------------------------------------------------

def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup table[indices]; backward scatter-adds into the table."""
    idx = np.asarray(indices, dtype=np.int64)
    out = table.value[idx]

    def vjp(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, idx, g)
        return (gt,)

    return Tensor(out, (table,), vjp, "embedding")


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows of a 2-d tensor; inverse of put_rows."""
    idx = np.asarray(indices, dtype=np.int64)
    out = x.value[idx]

    def vjp(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor(out, (x,), vjp, "take_rows")


def put_rows(values: Tensor, indices, num_rows: int) -> Tensor:
    """Scatter rows into a zero matrix of ``num_rows`` rows."""
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros((num_rows,) + values.shape[1:], dtype=np.float64)
    np.add.at(out, idx, values.value)

    def vjp(g):
        return (g[idx],)

    return Tensor(out, (values,), vjp, "put_rows")


# -- losses and similarity -------------------------------------------------

def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all entries."""
    if a.shape != b.shape:
        raise ShapeError(f"mse shapes differ: {a.shape} vs {b.shape}")
    d = sub(a, b)
    return mean(mul(d, d))


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two flattened vectors; 0 if either has zero norm."""
    if a.value.size != b.value.size:
        raise ShapeError(f"cosine sizes differ: {a.shape} vs {b.shape}")
    if not a.value.any() or not b.value.any():
        return Tensor(0.0, op="cosine_zero")
    af = reshape(a, (a.value.size,))
    bf = reshape(b, (b.value.size,))
    dot = sum_(mul(af, bf))
    na = sqrt(sum_(mul(af, af)))
    nb = sqrt(sum_(mul(bf, bf)))
    return div(dot, mul(na, nb))


def causal_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """Scaled dot-product attention with a boolean allowed-mask.

    q, k, v: [..., T, d]. ``mask`` broadcasts against the [..., T, T] score
    matrix; True marks positions a query may attend to. Disallowed scores
    are set to -inf before the softmax, so masked positions get weight
    exactly 0 and contribute exactly zero gradient.
    """
    d = q.shape[-1]
    scores = scale(matmul(q, transpose(k, tuple(range(k.value.ndim - 2)) + (-1, -2))),
                   1.0 / np.sqrt(d))
    scores = masked_fill(scores, mask, -np.inf)
    return matmul(softmax(scores, axis=-1), v)


def make_causal_mask(t: int) -> np.ndarray:
    """[t, t] boolean mask allowing each position to see itself and the past."""
    return np.tril(np.ones((t, t), dtype=bool))


# -- parameters, optimizer, persistence -------------------------------------

class ParameterStore:
    """Named trainable tensors with deterministic seeded initialization."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}

    def parameter(self, path: str, shape: tuple, init: str = "fan_in") -> Tensor:
        if path in self._params:
            raise ValueError(f"duplicate parameter path: {path}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            value = np.zeros(shape)
        elif init == "fan_in":
            # weights ~ U(+-1/sqrt(fan_in)); fan_in is the first axis
            bound = 1.0 / np.sqrt(max(shape[0], 1))
            value = self.rng.uniform(-bound, bound, size=shape)
        elif init == "table":
            bound = 1.0 / np.sqrt(max(shape[-1], 1))
            value = self.rng.uniform(-bound, bound, size=shape)
        else:
            raise ValueError(f"unknown init: {init}")
        t = Tensor(value, op="param")
        self._params[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def items(self):
        return self._params.items()

    def paths(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def num_entries(self) -> int:
        return sum(t.value.size for t in self._params.values())

    # Checkpoint format: manifest.json lists (path, shape) in order;
    # params.bin holds the concatenated row-major float64 payloads.
    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = [{"path": p, "shape": list(t.shape)} for p, t in self._params.items()]
        payload = np.concatenate(
            [t.value.reshape(-1) for t in self._params.values()]
        ) if self._params else np.zeros(0)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
        payload.astype("<f8").tofile(directory / "params.bin")

    def load(self, directory) -> None:
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        payload_path = directory / "params.bin"
        if not manifest_path.exists() or not payload_path.exists():
            raise FileNotFoundError(f"no checkpoint at {directory}")
        manifest = json.loads(manifest_path.read_text())
        payload = np.fromfile(payload_path, dtype="<f8")
        expected = {m["path"]: tuple(m["shape"]) for m in manifest}
        if set(expected) != set(self._params):
            missing = set(self._params) - set(expected)
            extra = set(expected) - set(self._params)
            raise ValueError(f"checkpoint parameter set mismatch: "
                             f"missing={sorted(missing)} unexpected={sorted(extra)}")
        offset = 0
        for m in manifest:
            t = self._params[m["path"]]
            shape = tuple(m["shape"])
            if shape != t.shape:
                raise ValueError(
                    f"shape mismatch for parameter {m['path']!r}: "
                    f"checkpoint {shape} vs model {t.shape}")
            size = int(np.prod(shape)) if shape else 1
            t.value = payload[offset:offset + size].reshape(shape).copy()
            offset += size
        if offset != payload.size:
            raise ValueError("checkpoint payload size mismatch")


class AdamW:
    """AdamW with decoupled weight decay. Parameters with no gradient are skipped."""

    def __init__(self, store: ParameterStore, lr: float = 1e-5,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-2):
        self.store = store
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p: np.zeros_like(t.value) for p, t in store.items()}
        self.v = {p: np.zeros_like(t.value) for p, t in store.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for path, p in self.store.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[path]
            v = self.v[path]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.value -= self.lr * (update + self.weight_decay * p.value)

    def zero_grad(self) -> None:
        self.store.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for path in self.store.paths():
            out[f"m.{path}"] = self.m[path]
            out[f"v.{path}"] = self.v[path]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for path in self.store.paths():
            self.m[path] = arrays[f"m.{path}"].copy()
            self.v[path] = arrays[f"v.{path}"].copy()
        self.t = t


def check_gradients(build_loss: Callable[[], Tensor],
                    params: Iterable[Tensor],
                    epsilon: float = 1e-6) -> float:
    """Compare analytic gradients against central finite differences.

    ``build_loss`` must rebuild the scalar loss graph from the current
    parameter values on every call. Returns the max relative error over
    every entry of every parameter, with denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy()
                for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(build_loss().value)
            flat[i] = orig - epsilon
            f_minus = float(build_loss().value)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
