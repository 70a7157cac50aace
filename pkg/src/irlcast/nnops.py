"""Manual backpropagation over a small fixed operator set.

The models in this package are tiny, so instead of pulling in an autodiff
framework every operator carries a hand-written vector-Jacobian product and
a Tape replays them in reverse.  Ops are limited to what the encoders need:
linear algebra, bias add, ReLU, max-pooling over neighbor sets, means,
concatenation, gathers with constant routing, and a handful of pointwise
maps.  Everything is float64 numpy.
"""

from __future__ import annotations

import json
import numpy as np
from scipy import sparse as _sparse


class ContractViolation(ValueError):
    """Raised when an operation is called outside its documented contract."""


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named parameter tensors with matching gradient buffers.

    Shapes are frozen at creation; gradient buffers always mirror their
    parameter's shape.  A version counter increments on every update step.
    """

    def __init__(self):
        self.tensors: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.version = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.tensors:
            raise ContractViolation(f"parameter {name!r} already exists")
        arr = np.asarray(value, dtype=float)
        self.tensors[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def get(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def set(self, name: str, value: np.ndarray) -> None:
        arr = np.asarray(value, dtype=float)
        if arr.shape != self.tensors[name].shape:
            raise ContractViolation(
                f"shape of {name!r} is immutable: "
                f"{self.tensors[name].shape} != {arr.shape}"
            )
        self.tensors[name] = arr

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def grad_norm(self) -> float:
        total = 0.0
        for g in self.grads.values():
            total += float(np.sum(g * g))
        return float(np.sqrt(total))

    def names(self) -> list[str]:
        return list(self.tensors)

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self.tensors.items():
            out.add(name, t.copy())
        out.version = self.version
        return out


class SgdOptimizer:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, store: ParamStore) -> None:
        for name, t in store.tensors.items():
            t -= self.lr * store.grads[name]
        store.version += 1


class AdamOptimizer:
    """Adam with decoupled (AdamW-style) weight decay."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, tensor in store.tensors.items():
            g = store.grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** self.t)
            vhat = self.v[name] / (1 - b2 ** self.t)
            tensor -= self.lr * (mhat / (np.sqrt(vhat) + self.eps)
                                 + self.weight_decay * tensor)
        store.version += 1


def make_optimizer(kind: str, lr: float, weight_decay: float = 0.0):
    if kind == "adam":
        return AdamOptimizer(lr, weight_decay=weight_decay)
    if kind == "sgd":
        return SgdOptimizer(lr)
    raise ContractViolation(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------------------
# checkpoint files


def save_checkpoint(path: str, store: ParamStore, widths: dict | None = None,
                    extra: dict | None = None) -> None:
    doc = {
        "version": 1,
        "widths": widths or {},
        "tensors": {k: v.tolist() for k, v in store.tensors.items()},
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str, expected_shapes: dict | None = None):
    """Load a checkpoint, returning (ParamStore, widths dict, extra dict).

    If expected_shapes is given, any missing name or mismatched shape raises
    ContractViolation.
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if "tensors" not in doc:
        raise ContractViolation("checkpoint missing 'tensors'")
    store = ParamStore()
    for name, nested in doc["tensors"].items():
        store.add(name, np.asarray(nested, dtype=float))
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in store:
                raise ContractViolation(f"checkpoint missing tensor {name!r}")
            if store.get(name).shape != tuple(shape):
                raise ContractViolation(
                    f"checkpoint tensor {name!r} has shape "
                    f"{store.get(name).shape}, expected {tuple(shape)}"
                )
        stray = set(store.names()) - set(expected_shapes)
        if stray:
            raise ContractViolation(f"checkpoint has unexpected tensors: {sorted(stray)}")
    return store, doc.get("widths", {}), doc.get("extra", {})


# ---------------------------------------------------------------------------
# tape


class Node:
    __slots__ = ("value", "parents", "vjp", "grad")

    def __init__(self, value, parents=(), vjp=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Tape:
    """Records forward ops; backward() replays hand-written VJPs in reverse."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._params: list[tuple[Node, ParamStore, str]] = []

    def _record(self, value, parents=(), vjp=None) -> Node:
        node = Node(np.asarray(value, dtype=float), parents, vjp)
        self.nodes.append(node)
        return node

    # leaves ----------------------------------------------------------------

    def const(self, value) -> Node:
        return self._record(value)

    def param(self, store: ParamStore, name: str) -> Node:
        node = self._record(store.get(name))
        self._params.append((node, store, name))
        return node

    # arithmetic ------------------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        def vjp(g):
            return ((a, _unbroadcast(g, a.value.shape)),
                    (b, _unbroadcast(g, b.value.shape)))
        return self._record(a.value + b.value, (a, b), vjp)

    def sub(self, a: Node, b: Node) -> Node:
        def vjp(g):
            return ((a, _unbroadcast(g, a.value.shape)),
                    (b, _unbroadcast(-g, b.value.shape)))
        return self._record(a.value - b.value, (a, b), vjp)

    def mul(self, a: Node, b: Node) -> Node:
        def vjp(g):
            return ((a, _unbroadcast(g * b.value, a.value.shape)),
                    (b, _unbroadcast(g * a.value, b.value.shape)))
        return self._record(a.value * b.value, (a, b), vjp)

    def scale(self, a: Node, c: float) -> Node:
        return self._record(a.value * c, (a,), lambda g: ((a, g * c),))

    def neg(self, a: Node) -> Node:
        return self._record(-a.value, (a,), lambda g: ((a, -g),))

    def matmul(self, a: Node, b: Node) -> Node:
        def vjp(g):
            return ((a, g @ b.value.T), (b, a.value.T @ g))
        return self._record(a.value @ b.value, (a, b), vjp)

    def spmm(self, mat, x: Node) -> Node:
        """Multiply by a constant (possibly sparse) matrix: mat @ x."""
        def vjp(g):
            return ((x, mat.T @ g),)
        value = mat @ x.value
        if _sparse.issparse(value):  # pragma: no cover - scipy keeps dense here
            value = value.toarray()
        return self._record(value, (x,), vjp)

    # pointwise -------------------------------------------------------------

    def relu(self, a: Node) -> Node:
        # derivative 1/2 exactly at the kink: zero-padded features make
        # exact zeros structurally common, and the symmetric subgradient is
        # what central finite differences converge to there
        mask = (a.value > 0) + 0.5 * (a.value == 0)
        return self._record(np.where(a.value > 0, a.value, 0.0), (a,),
                            lambda g: ((a, g * mask),))

    def softplus(self, a: Node) -> Node:
        return self._record(np.logaddexp(0.0, a.value), (a,),
                            lambda g: ((a, g * _sigmoid(a.value)),))

    def square(self, a: Node) -> Node:
        return self._record(a.value ** 2, (a,),
                            lambda g: ((a, 2.0 * a.value * g),))

    def sqrt(self, a: Node) -> Node:
        root = np.sqrt(a.value)
        def vjp(g):
            return ((a, g * 0.5 / np.maximum(root, 1e-300)),)
        return self._record(root, (a,), vjp)

    def tanh_squash(self, a: Node, cap: float) -> Node:
        """cap * tanh(x / cap): identity-like near 0, bounded by +-cap."""
        value = cap * np.tanh(a.value / cap)
        def vjp(g):
            return ((a, g * (1.0 - (value / cap) ** 2)),)
        return self._record(value, (a,), vjp)

    def huber(self, a: Node) -> Node:
        """Smooth-l1: 0.5 x^2 inside |x|<1, |x|-0.5 outside."""
        x = a.value
        inside = np.abs(x) < 1.0
        value = np.where(inside, 0.5 * x * x, np.abs(x) - 0.5)
        def vjp(g):
            return ((a, g * np.where(inside, x, np.sign(x))),)
        return self._record(value, (a,), vjp)

    # shape / selection -----------------------------------------------------

    def reshape(self, a: Node, shape) -> Node:
        orig = a.value.shape
        return self._record(a.value.reshape(shape), (a,),
                            lambda g: ((a, g.reshape(orig)),))

    def concat(self, parts: list[Node], axis: int = 0) -> Node:
        sizes = [p.value.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)
        def vjp(g):
            slabs = []
            for i, p in enumerate(parts):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offsets[i], offsets[i + 1])
                slabs.append((p, g[tuple(idx)]))
            return tuple(slabs)
        return self._record(np.concatenate([p.value for p in parts], axis=axis),
                            tuple(parts), vjp)

    def rows(self, a: Node, idx) -> Node:
        idx = np.asarray(idx, dtype=int)
        def vjp(g):
            z = np.zeros_like(a.value)
            np.add.at(z, idx, g)
            return ((a, z),)
        return self._record(a.value[idx], (a,), vjp)

    def col(self, a: Node, j: int) -> Node:
        def vjp(g):
            z = np.zeros_like(a.value)
            z[:, j] = g
            return ((a, z),)
        return self._record(a.value[:, j], (a,), vjp)

    def rows_or_zero(self, a: Node, idx, valid) -> Node:
        """Gather rows where valid, zero rows elsewhere (constant routing)."""
        idx = np.asarray(idx, dtype=int)
        valid = np.asarray(valid, dtype=bool)
        safe = np.where(valid, idx, 0)
        value = a.value[safe] * valid[:, None]
        def vjp(g):
            z = np.zeros_like(a.value)
            np.add.at(z, safe[valid], g[valid])
            return ((a, z),)
        return self._record(value, (a,), vjp)

    def neighbor_max(self, a: Node, nbr_idx, nbr_valid) -> Node:
        """Per-row max over a padded neighbor index table.

        a: (N, F); nbr_idx: (N, M) int; nbr_valid: (N, M) bool.
        Rows with no valid neighbor pool to the zero vector.  Gradient is
        split equally among exact ties (the symmetric subgradient, which is
        what central finite differences converge to).
        """
        nbr_idx = np.asarray(nbr_idx, dtype=int)
        nbr_valid = np.asarray(nbr_valid, dtype=bool)
        safe = np.where(nbr_valid, nbr_idx, 0)
        gathered = a.value[safe]                       # (N, M, F)
        gathered = np.where(nbr_valid[:, :, None], gathered, -np.inf)
        any_valid = nbr_valid.any(axis=1)
        value = gathered.max(axis=1)
        value = np.where(any_valid[:, None], value, 0.0)
        cmp = np.where(any_valid[:, None], value, np.nan)
        ties = gathered == cmp[:, None, :]
        counts = ties.sum(axis=1)                      # (N, F)
        n, m, f = gathered.shape
        def vjp(g):
            share = np.where(counts > 0, g / np.maximum(counts, 1), 0.0)
            contrib = ties * share[:, None, :]         # (N, M, F)
            z = np.zeros_like(a.value)
            np.add.at(z, safe.ravel(),
                      contrib.reshape(n * m, f))
            return ((a, z),)
        return self._record(value, (a,), vjp)

    def avg_pool2x2(self, a: Node) -> Node:
        h, w, f = a.value.shape
        if h % 2 or w % 2:
            raise ContractViolation("avg_pool2x2 requires even spatial dims")
        value = a.value.reshape(h // 2, 2, w // 2, 2, f).mean(axis=(1, 3))
        def vjp(g):
            up = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) / 4.0
            return ((a, up),)
        return self._record(value, (a,), vjp)

    # reductions ------------------------------------------------------------

    def mean0(self, a: Node) -> Node:
        n = a.value.shape[0]
        def vjp(g):
            return ((a, np.broadcast_to(g / n, a.value.shape).copy()),)
        return self._record(a.value.mean(axis=0), (a,), vjp)

    def sum_axis(self, a: Node, axis: int) -> Node:
        def vjp(g):
            return ((a, np.broadcast_to(np.expand_dims(g, axis),
                                        a.value.shape).copy()),)
        return self._record(a.value.sum(axis=axis), (a,), vjp)

    def sum_all(self, a: Node) -> Node:
        def vjp(g):
            return ((a, np.full_like(a.value, float(g))),)
        return self._record(a.value.sum(), (a,), vjp)

    def softmax1d(self, a: Node) -> Node:
        shifted = a.value - a.value.max()
        e = np.exp(shifted)
        s = e / e.sum()
        def vjp(g):
            return ((a, s * (g - float(np.dot(g, s)))),)
        return self._record(s, (a,), vjp)

    # backward ---------------------------------------------------------------

    def backward(self, loss: Node, seed=None) -> None:
        """Accumulate d(loss)/d(param) into every touched ParamStore.

        `seed` overrides the upstream gradient of `loss` (defaults to ones,
        i.e. a scalar loss).
        """
        if seed is None:
            seed = np.ones_like(loss.value)
        loss.grad = np.asarray(seed, dtype=float)
        for node in reversed(self.nodes):
            if node.grad is None or node.vjp is None:
                continue
            for parent, g in node.vjp(node.grad):
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                parent.grad += g
        for node, store, name in self._params:
            if node.grad is not None:
                store.grads[name] += node.grad


# ---------------------------------------------------------------------------
# MLP building blocks


def init_linear(store: ParamStore, prefix: str, fan_in: int, fan_out: int,
                rng: np.random.Generator, zero: bool = False) -> None:
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(1.0 / fan_in)
    store.add(prefix + ".W", w)
    store.add(prefix + ".b", np.zeros(fan_out))


def init_mlp(store: ParamStore, prefix: str, dims: list[int],
             rng: np.random.Generator) -> None:
    """Register an MLP `dims[0] -> dims[1] -> ...` under `prefix`."""
    for i in range(len(dims) - 1):
        init_linear(store, f"{prefix}.{i}", dims[i], dims[i + 1], rng)


def linear(t: Tape, x: Node, store: ParamStore, prefix: str) -> Node:
    return t.add(t.matmul(x, t.param(store, prefix + ".W")),
                 t.param(store, prefix + ".b"))


def mlp(t: Tape, x: Node, store: ParamStore, prefix: str,
        relu_output: bool = False) -> Node:
    """Apply the MLP registered under `prefix` (ReLU between layers)."""
    i = 0
    out = x
    while f"{prefix}.{i}.W" in store:
        if i > 0:
            out = t.relu(out)
        out = linear(t, out, store, f"{prefix}.{i}")
        i += 1
    if i == 0:
        raise ContractViolation(f"no MLP registered under {prefix!r}")
    if relu_output:
        out = t.relu(out)
    return out


# ---------------------------------------------------------------------------
# finite-difference checking


def finite_diff_grads(f, store: ParamStore, names=None, eps: float = 1e-5):
    """Central finite differences of the scalar f() w.r.t. store parameters."""
    out = {}
    for name in (names or store.names()):
        tensor = store.get(name)
        grad = np.zeros_like(tensor)
        flat = tensor.ravel()
        gflat = grad.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            fp = f()
            flat[i] = keep - eps
            fm = f()
            flat[i] = keep
            gflat[i] = (fp - fm) / (2 * eps)
        out[name] = grad
    return out


def max_rel_err(analytic: dict, numeric: dict) -> float:
    """Worst relative error across tensors, guarded against tiny gradients."""
    worst = 0.0
    for name, num in numeric.items():
        ana = analytic[name]
        scale = max(np.abs(ana).max(initial=0.0),
                    np.abs(num).max(initial=0.0), 1e-6)
        worst = max(worst, float(np.abs(ana - num).max(initial=0.0) / scale))
    return worst
