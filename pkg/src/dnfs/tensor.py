"""Small reverse-mode autodiff engine over dense float64 numpy arrays.

Operations are recorded on the active :class:`Tape` (entered with ``with
Tape() as tape:``) whenever at least one input is tracked, i.e. it is a
trainable leaf or was itself produced on that tape.  Outside a tape every op
simply evaluates, which is how networks are run at sampling time.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes, or a right operand whose shape is a trailing suffix of the left one
(a bias broadcast over rows).  Everything else is a shape error.
"""

from __future__ import annotations

import contextvars
import json
import math
import os
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

OP_KINDS = (
    "matmul", "add", "mul", "sub", "relu", "exp", "log", "softmax", "sum",
    "mean", "square", "embed", "layernorm", "concat", "slice", "transpose",
    "masked_fill", "reshape", "scale", "sigmoid", "tanh",
)

_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("dnfs_tape", default=None)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "_node", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._node: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; every method routes through apply()
    def __add__(self, other):
        return apply("add", [self, as_tensor(other)])

    def __sub__(self, other):
        return apply("sub", [self, as_tensor(other)])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply("scale", [self], factor=float(other))
        return apply("mul", [self, as_tensor(other)])

    __rmul__ = __mul__

    def __neg__(self):
        return apply("scale", [self], factor=-1.0)

    def __matmul__(self, other):
        return apply("matmul", [self, as_tensor(other)])

    def __getitem__(self, index):
        return apply("slice", [self], index=index)

    def sum(self, axis=None, keepdims: bool = False):
        return apply("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return apply("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", [self], shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return apply("transpose", [self], axes=axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    kind: str
    parents: tuple  # node id per input, or None for untracked inputs
    inputs: tuple  # saved input arrays
    out: np.ndarray | None
    attrs: dict


class Tape:
    """Ordered op log plus the leaf registry for one backward pass."""

    def __init__(self):
        self.records: list[_Record] = []
        self._leaf_nodes: dict[int, int] = {}
        self._leaf_refs: list[Tensor] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None
        return False

    def node_of(self, t: Tensor) -> int | None:
        if t._tape is self and t._node is not None:
            return t._node
        if t.requires_grad:
            key = id(t)
            if key not in self._leaf_nodes:
                self._leaf_nodes[key] = len(self.records)
                self._leaf_refs.append(t)
                self.records.append(_Record("leaf", (), (), None, {}))
            return self._leaf_nodes[key]
        return None

    def leaf_node(self, t: Tensor) -> int | None:
        return self._leaf_nodes.get(id(t))

    def gradient(self, loss: Tensor, targets):
        """Gradients of ``loss`` w.r.t. a ParamStore (dict out) or a list of tensors."""
        table = backward(self, loss)
        if isinstance(targets, ParamStore):
            return table.for_params(targets)
        return [table.for_tensor(t) for t in targets]


class GradTable(dict):
    """node id -> gradient array, with lookups that default to zeros."""

    def __init__(self, tape: Tape):
        super().__init__()
        self.tape = tape

    def for_tensor(self, t: Tensor) -> np.ndarray:
        node = self.tape.leaf_node(t) if t.requires_grad else t._node
        if node is not None and node in self:
            return self[node]
        return np.zeros_like(t.data)

    def for_params(self, params: "ParamStore") -> dict[str, np.ndarray]:
        return {name: self.for_tensor(p) for name, p in params.items()}


def _suffix_ok(a: tuple, b: tuple) -> bool:
    return len(b) <= len(a) and a[len(a) - len(b):] == b


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _forward(kind: str, xs: list[np.ndarray], attrs: dict) -> np.ndarray:
    if kind == "matmul":
        a, b = xs
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
        if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
        return a @ b
    if kind in ("add", "sub", "mul"):
        a, b = xs
        if not _suffix_ok(a.shape, b.shape):
            raise ShapeError(f"{kind}: shape {b.shape} does not broadcast onto {a.shape}")
        return a + b if kind == "add" else (a - b if kind == "sub" else a * b)
    x = xs[0]
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "exp":
        return np.exp(x)
    if kind == "log":
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(x)
    if kind == "square":
        return x * x
    if kind == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * x))
    if kind == "tanh":
        return np.tanh(x)
    if kind == "scale":
        return x * attrs["factor"]
    if kind == "softmax":
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    if kind == "sum":
        return np.asarray(x.sum(axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)))
    if kind == "mean":
        return np.asarray(x.mean(axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)))
    if kind == "embed":
        if x.ndim != 2:
            raise ShapeError(f"embed table must be 2-D, got {x.shape}")
        return x[attrs["indices"]]
    if kind == "layernorm":
        x, gamma, beta = xs
        if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
            raise ShapeError(f"layernorm params {gamma.shape}/{beta.shape} vs input {x.shape}")
        xc = x - x.mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + attrs.get("eps", 1e-5))
        xhat = xc * inv
        attrs["_cache"] = (xhat, inv)  # reused by the backward rule
        return xhat * gamma + beta
    if kind == "concat":
        axis = attrs.get("axis", -1)
        ref = list(xs[0].shape)
        for other in xs[1:]:
            o = list(other.shape)
            if len(o) != len(ref):
                raise ShapeError(f"concat rank mismatch: {[a.shape for a in xs]}")
            ax = axis % len(ref)
            if o[:ax] + o[ax + 1:] != ref[:ax] + ref[ax + 1:]:
                raise ShapeError(f"concat shape mismatch: {[a.shape for a in xs]}")
        return np.concatenate(xs, axis=axis)
    if kind == "slice":
        return np.array(x[attrs["index"]])
    if kind == "transpose":
        return np.transpose(x, attrs["axes"])
    if kind == "reshape":
        return x.reshape(attrs["shape"])
    if kind == "masked_fill":
        mask = np.asarray(attrs["mask"], dtype=bool)
        if not _suffix_ok(x.shape, mask.shape):
            raise ShapeError(f"mask {mask.shape} does not broadcast onto {x.shape}")
        return np.where(mask, attrs["value"], x)
    raise ValueError(f"unknown op kind {kind!r}")


def _backward_rule(rec: _Record, g: np.ndarray) -> list[np.ndarray | None]:
    kind, xs, out, attrs = rec.kind, rec.inputs, rec.out, rec.attrs
    if kind == "matmul":
        a, b = xs
        ga = g @ np.swapaxes(b, -1, -2)
        if b.ndim == 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a, -1, -2) @ g
        return [ga, gb]
    if kind == "add":
        return [g, _reduce_to(g, xs[1].shape)]
    if kind == "sub":
        return [g, -_reduce_to(g, xs[1].shape)]
    if kind == "mul":
        a, b = xs
        return [g * b, _reduce_to(g * a, b.shape)]
    x = xs[0]
    if kind == "relu":
        # subgradient 1/2 at the kink (the central-difference value); with 0 a
        # zero-initialised output layer (G = 0) would never receive gradient
        return [g * np.where(x > 0.0, 1.0, np.where(x < 0.0, 0.0, 0.5))]
    if kind == "exp":
        return [g * out]
    if kind == "log":
        return [g / x]
    if kind == "square":
        return [2.0 * g * x]
    if kind == "sigmoid":
        return [g * out * (1.0 - out)]
    if kind == "tanh":
        return [g * (1.0 - out * out)]
    if kind == "scale":
        return [g * attrs["factor"]]
    if kind == "softmax":
        return [out * (g - (g * out).sum(axis=-1, keepdims=True))]
    if kind in ("sum", "mean"):
        axis = attrs.get("axis")
        gg = g
        if axis is not None and not attrs.get("keepdims", False):
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % x.ndim for a in axes)
            gg = np.expand_dims(g, axes)
        gx = np.broadcast_to(gg, x.shape)
        if kind == "mean":
            gx = gx * (out.size / x.size) if x.size else gx
        return [np.array(gx)]
    if kind == "embed":
        gt = np.zeros_like(x)
        np.add.at(gt, attrs["indices"], g)
        return [gt]
    if kind == "layernorm":
        gamma = xs[1]
        xhat, inv = attrs["_cache"]
        gxhat = g * gamma
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return [gx, _reduce_to(g * xhat, gamma.shape), _reduce_to(g, gamma.shape)]
    if kind == "concat":
        axis = attrs.get("axis", -1)
        sizes = np.cumsum([a.shape[axis] for a in xs])[:-1]
        return list(np.split(g, sizes, axis=axis))
    if kind == "slice":
        gx = np.zeros_like(x)
        gx[attrs["index"]] += g
        return [gx]
    if kind == "transpose":
        return [np.transpose(g, np.argsort(attrs["axes"]))]
    if kind == "reshape":
        return [g.reshape(x.shape)]
    if kind == "masked_fill":
        return [np.where(np.asarray(attrs["mask"], dtype=bool), 0.0, g)]
    raise ValueError(f"no backward rule for {kind!r}")


# inputs whose saved arrays the backward rule never reads
_NEEDS_OUT = {"exp", "sigmoid", "tanh", "softmax", "sum", "mean"}


def apply(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Evaluate one primitive and record it on the active tape if needed."""
    if kind not in OP_KINDS:
        raise ValueError(f"unknown op kind {kind!r}")
    inputs = [as_tensor(t) for t in inputs]
    out = Tensor(_forward(kind, [t.data for t in inputs], attrs))
    tape = _ACTIVE.get()
    if tape is not None:
        parents = tuple(tape.node_of(t) for t in inputs)
        if any(p is not None for p in parents):
            rec = _Record(kind, parents, tuple(t.data for t in inputs),
                          out.data if kind in _NEEDS_OUT else None, attrs)
            out._node = len(tape.records)
            out._tape = tape
            tape.records.append(rec)
    return out


def backward(tape: Tape, loss: Tensor) -> GradTable:
    """Reverse sweep from a scalar ``loss``; returns node-id -> gradient."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    table = GradTable(tape)
    node = loss._node if loss._tape is tape else tape.leaf_node(loss)
    if node is None:
        return table
    table[node] = np.ones_like(loss.data)
    for idx in range(node, -1, -1):
        g = table.get(idx)
        rec = tape.records[idx]
        if g is None or rec.kind == "leaf":
            continue
        grads = _backward_rule(rec, g)
        for parent, gp in zip(rec.parents, grads):
            if parent is None:
                continue
            if parent in table:
                table[parent] = table[parent] + gp
            else:
                table[parent] = gp  # never mutated in place, so no copy needed
        if idx != node:
            del table[idx]  # intermediate grads are not needed once propagated
    return table


# convenience wrappers used by the networks
def relu(x): return apply("relu", [x])
def exp(x): return apply("exp", [x])
def log(x): return apply("log", [x])
def square(x): return apply("square", [x])
def sigmoid(x): return apply("sigmoid", [x])
def tanh(x): return apply("tanh", [x])
def softmax(x): return apply("softmax", [x])
def swish(x): return x * sigmoid(x)
def embed(table, indices): return apply("embed", [table], indices=np.asarray(indices))
def concat(xs, axis=-1): return apply("concat", list(xs), axis=axis)
def masked_fill(x, mask, value): return apply("masked_fill", [x], mask=mask, value=value)
def layernorm(x, gamma, beta, eps=1e-5): return apply("layernorm", [x, gamma, beta], eps=eps)


class ParamStore:
    """Named trainable tensors plus optimizer moments.

    Names are unique and shapes are fixed at creation; ``set`` replaces values
    in place so tensors already referenced by a network stay valid.
    """

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def set(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        t = self._params[name]
        if value.shape != t.shape:
            raise ShapeError(f"{name}: cannot change shape {t.shape} -> {value.shape}")
        t.data = value.copy()

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            self.set(k, v)

    def num_values(self) -> int:
        return sum(p.data.size for p in self._params.values())


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def adamw_step(params: ParamStore, grads: dict[str, np.ndarray], hyper: AdamWConfig) -> bool:
    """One decoupled-weight-decay Adam update in place.

    Returns False (and leaves parameters and moments untouched) when any
    gradient is non-finite.
    """
    if hyper.lr <= 0:
        raise ValueError("learning rate must be positive")
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            return False
    params.step += 1
    k = params.step
    c1 = 1.0 - hyper.beta1 ** k
    c2 = 1.0 - hyper.beta2 ** k
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m, v = params.moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g
        params.moments[name] = (m, v)
        p.data = (p.data * (1.0 - hyper.lr * hyper.weight_decay)
                  - hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps))
    return True


def finite_diff_check(f: Callable[[ParamStore], Tensor], params: ParamStore, eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences over all entries."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    with Tape() as tape:
        loss = f(params)
    if not np.isfinite(loss.data).all():
        raise ValueError("f returned a non-finite value")
    auto = tape.gradient(loss, params)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ga = auto[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = float(f(params).data)
            flat[j] = orig - eps
            down = float(f(params).data)
            flat[j] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise ValueError("f returned a non-finite value")
            fd = (up - down) / (2.0 * eps)
            worst = max(worst, abs(ga[j] - fd) / (abs(fd) + 1e-8))
    return worst


# checkpoint format: manifest.json + little-endian float64 blob
MANIFEST = "manifest.json"
BLOB = "params.bin"


def save_checkpoint(params: ParamStore, directory: str, meta: dict | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for name, p in params.items():
        n = p.data.size
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "length": n})
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").reshape(-1))
        offset += n
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    with open(os.path.join(directory, BLOB), "wb") as fh:
        fh.write(blob.astype("<f8").tobytes())
    manifest = {"format": "dnfs-params-v1", "dtype": "<f8", "params": entries, "meta": meta or {}}
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(directory: str) -> tuple[ParamStore, dict]:
    man_path = os.path.join(directory, MANIFEST)
    if not os.path.exists(man_path):
        raise FileNotFoundError(f"no checkpoint manifest at {man_path}")
    with open(man_path) as fh:
        manifest = json.load(fh)
    blob = np.fromfile(os.path.join(directory, BLOB), dtype="<f8")
    store = ParamStore()
    for e in manifest["params"]:
        seg = blob[e["offset"]:e["offset"] + e["length"]]
        store.add(e["name"], seg.reshape(e["shape"]).astype(np.float64))
    return store, manifest.get("meta", {})


def iter_param_arrays(params: ParamStore) -> Iterable[tuple[str, np.ndarray]]:
    for name, p in params.items():
        yield name, p.data
