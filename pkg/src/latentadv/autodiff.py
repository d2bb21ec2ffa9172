"""Dense float64 tensors with reverse-mode differentiation.

Eager evaluation over a recorded tape, covering exactly the primitives the
rest of the package needs: dense matmul, pointwise arithmetic and
nonlinearities, reductions, index permutations (flips / rotations / crops)
and bilinear resampling. Everything is 64-bit and single-threaded per
evaluation, so repeated runs on identical inputs are bitwise identical.

Subgradient conventions are pinned so that gradients are reproducible:
relu'(0) = 0, abs'(0) = 0, clamp' is zero outside the open interval
(boundaries included), sign' = 0 everywhere.
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = [
    "Tensor",
    "DiffProgram",
    "ShapeError",
    "NonFiniteError",
    "constant",
    "add",
    "subtract",
    "multiply",
    "matmul",
    "relu",
    "silu",
    "tanh",
    "softmax_cross_entropy",
    "reduce_sum",
    "reduce_mean",
    "absolute",
    "clamp",
    "reshape",
    "index_permute",
    "bilinear_resize",
    "scale",
    "l1_norm",
    "sign",
    "evaluate",
    "vjp",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with a primitive's contract."""


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN or Inf."""


_ids = itertools.count()


class Tensor:
    """Immutable float64 array plus its position on the eager tape.

    Leaves are built directly (``Tensor(data)`` for constants,
    ``Tensor(data, requires_grad=True)`` for differentiable inputs);
    every primitive returns a new node that remembers its parents and a
    VJP closure. ``backward`` propagates a cotangent through the tape and
    accumulates into ``.grad`` of every reachable ``requires_grad`` node.
    """

    __slots__ = ("data", "op", "node_id", "parents", "requires_grad", "grad", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        nid = next(_ids)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"node {nid} (leaf): non-finite values in leaf tensor")
        arr.flags.writeable = False
        self.data = arr
        self.op = "leaf"
        self.node_id = nid
        self.parents = ()
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, id={self.node_id})"

    # Small operator sugar used throughout the model code.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self, cotangent=None) -> None:
        """Reverse-mode sweep from this node.

        ``cotangent`` defaults to an all-ones array of this node's shape.
        Gradients accumulate (sum) into ``.grad`` on every tensor with
        ``requires_grad`` reachable through the tape.
        """
        if cotangent is None:
            ct = np.ones(self.data.shape)
        else:
            ct = np.asarray(cotangent, dtype=np.float64)
            if ct.shape != self.data.shape:
                raise ShapeError(
                    f"node {self.node_id} ({self.op}): cotangent shape {ct.shape} "
                    f"!= output shape {self.data.shape}"
                )
        if not self.requires_grad:
            return

        # Reverse post-order DFS = topological order, consumers first.
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                stack.append((p, False))

        pending: dict[int, np.ndarray] = {id(self): ct}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node.parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def constant(x) -> Tensor:
    """Wrap ``x`` as a non-differentiable leaf without copying when possible.

    Arrays that are already float64, C-contiguous and frozen (writeable
    False) are shared; anything else goes through the copying constructor.
    """
    if isinstance(x, Tensor):
        return x
    if (
        isinstance(x, np.ndarray)
        and x.dtype == np.float64
        and x.flags.c_contiguous
        and not x.flags.writeable
    ):
        t = object.__new__(Tensor)
        t.data = x
        t.op = "leaf"
        t.node_id = next(_ids)
        t.parents = ()
        t.requires_grad = False
        t.grad = None
        t._vjp = None
        return t
    return Tensor(x)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _result(op: str, nid: int, arr, parents: tuple, vjp_fn) -> Tensor:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"node {nid} ({op}): non-finite result")
    arr.flags.writeable = False
    t = object.__new__(Tensor)
    t.data = arr
    t.op = op
    t.node_id = nid
    t.parents = parents
    t.requires_grad = any(p.requires_grad for p in parents)
    t.grad = None
    t._vjp = vjp_fn if t.requires_grad else None
    return t


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Undo the one broadcast pattern we allow: (batch, n) op (n,)."""
    if g.shape == shape:
        return g
    return g.sum(axis=0)


def _check_pointwise(op: str, nid: int, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    # The fixed architectures only ever broadcast a vector across a batch.
    if a.data.ndim == b.data.ndim + 1 and a.shape[1:] == b.shape:
        return
    if b.data.ndim == a.data.ndim + 1 and b.shape[1:] == a.shape:
        return
    raise ShapeError(f"node {nid} ({op}): incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    """Elementwise a + b; also accepts (batch, n) + (n,) bias addition."""
    a, b = _as_tensor(a), _as_tensor(b)
    nid = next(_ids)
    _check_pointwise("add", nid, a, b)
    out = a.data + b.data

    def vjp_fn(g):
        return (_reduce_to(g, a.shape), _reduce_to(g, b.shape))

    return _result("add", nid, out, (a, b), vjp_fn)


def subtract(a, b) -> Tensor:
    """Elementwise a - b with the same broadcast rule as :func:`add`."""
    a, b = _as_tensor(a), _as_tensor(b)
    nid = next(_ids)
    _check_pointwise("subtract", nid, a, b)
    out = a.data - b.data

    def vjp_fn(g):
        return (_reduce_to(g, a.shape), _reduce_to(-g, b.shape))

    return _result("subtract", nid, out, (a, b), vjp_fn)


def multiply(a, b) -> Tensor:
    """Elementwise a * b with the same broadcast rule as :func:`add`."""
    a, b = _as_tensor(a), _as_tensor(b)
    nid = next(_ids)
    _check_pointwise("multiply", nid, a, b)
    out = a.data * b.data

    def vjp_fn(g):
        return (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape))

    return _result("multiply", nid, out, (a, b), vjp_fn)


def matmul(a, b) -> Tensor:
    """Matrix product for the 1-D/2-D operand combinations numpy's ``@`` allows."""
    a, b = _as_tensor(a), _as_tensor(b)
    nid = next(_ids)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError(f"node {nid} (matmul): operands must be 1-D or 2-D")
    ka = a.shape[-1]
    kb = b.shape[0]
    if ka != kb:
        raise ShapeError(f"node {nid} (matmul): inner dims {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp_fn(g):
        A, B = a.data, b.data
        if A.ndim == 2 and B.ndim == 2:
            return (g @ B.T, A.T @ g)
        if A.ndim == 2 and B.ndim == 1:
            return (np.outer(g, B), A.T @ g)
        if A.ndim == 1 and B.ndim == 2:
            return (B @ g, np.outer(A, g))
        return (g * B, g * A)

    return _result("matmul", nid, out, (a, b), vjp_fn)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    nid = next(_ids)
    out = np.maximum(x.data, 0.0)

    def vjp_fn(g):
        return (g * (x.data > 0.0),)

    return _result("relu", nid, out, (x,), vjp_fn)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x) -> Tensor:
    """x * sigmoid(x), the smooth gate used by the noise-prediction net."""
    x = _as_tensor(x)
    nid = next(_ids)
    s = _sigmoid(x.data)
    out = x.data * s

    def vjp_fn(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return _result("silu", nid, out, (x,), vjp_fn)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    nid = next(_ids)
    out = np.tanh(x.data)

    def vjp_fn(g):
        return (g * (1.0 - out * out),)

    return _result("tanh", nid, out, (x,), vjp_fn)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Numerically stable cross-entropy of softmax(logits) against integer labels.

    A 1-D logits vector with an int label gives a scalar; a (batch, classes)
    matrix with an int vector gives per-sample losses of shape (batch,).
    Labels are static attributes, not differentiable inputs.
    """
    x = _as_tensor(logits)
    nid = next(_ids)
    lab = np.asarray(labels, dtype=np.intp)
    if x.data.ndim == 1:
        if lab.shape != ():
            raise ShapeError(f"node {nid} (softmax_cross_entropy): scalar label expected")
        if not 0 <= int(lab) < x.data.shape[0]:
            raise ShapeError(f"node {nid} (softmax_cross_entropy): label out of range")
        m = np.max(x.data)
        lse = m + np.log(np.sum(np.exp(x.data - m)))
        out = lse - x.data[int(lab)]

        def vjp_fn(g):
            p = np.exp(x.data - lse)
            p[int(lab)] -= 1.0
            return (g * p,)

        return _result("softmax_cross_entropy", nid, out, (x,), vjp_fn)

    if x.data.ndim == 2:
        if lab.shape != (x.data.shape[0],):
            raise ShapeError(
                f"node {nid} (softmax_cross_entropy): labels shape {lab.shape} "
                f"!= ({x.data.shape[0]},)"
            )
        if np.any(lab < 0) or np.any(lab >= x.data.shape[1]):
            raise ShapeError(f"node {nid} (softmax_cross_entropy): label out of range")
        m = np.max(x.data, axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.sum(np.exp(x.data - m), axis=1))
        rows = np.arange(x.data.shape[0])
        out = lse - x.data[rows, lab]

        def vjp_fn(g):
            p = np.exp(x.data - lse[:, None])
            p[rows, lab] -= 1.0
            return (g[:, None] * p,)

        return _result("softmax_cross_entropy", nid, out, (x,), vjp_fn)

    raise ShapeError(f"node {nid} (softmax_cross_entropy): logits must be 1-D or 2-D")


def reduce_sum(x) -> Tensor:
    x = _as_tensor(x)
    nid = next(_ids)
    out = np.sum(x.data)

    def vjp_fn(g):
        return (np.full(x.data.shape, float(g)),)

    return _result("sum", nid, out, (x,), vjp_fn)


def reduce_mean(x) -> Tensor:
    x = _as_tensor(x)
    nid = next(_ids)
    n = x.data.size
    out = np.sum(x.data) / n

    def vjp_fn(g):
        return (np.full(x.data.shape, float(g) / n),)

    return _result("mean", nid, out, (x,), vjp_fn)


def absolute(x) -> Tensor:
    x = _as_tensor(x)
    nid = next(_ids)
    out = np.abs(x.data)

    def vjp_fn(g):
        return (g * np.sign(x.data),)

    return _result("abs", nid, out, (x,), vjp_fn)


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; subgradient is zero at and beyond the bounds."""
    x = _as_tensor(x)
    nid = next(_ids)
    if not lo <= hi:
        raise ShapeError(f"node {nid} (clamp): lo {lo} > hi {hi}")
    out = np.clip(x.data, lo, hi)

    def vjp_fn(g):
        return (g * ((x.data > lo) & (x.data < hi)),)

    return _result("clamp", nid, out, (x,), vjp_fn)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    nid = next(_ids)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"node {nid} (reshape): cannot view {x.shape} as {shape}")
    out = x.data.reshape(shape)

    def vjp_fn(g):
        return (g.reshape(x.data.shape),)

    return _result("reshape", nid, out, (x,), vjp_fn)


def index_permute(x, index) -> Tensor:
    """Gather flat elements of ``x`` at ``index``; output has index's shape.

    Covers flips, rotations, crops and row gathers. The VJP scatter-adds
    the cotangent back, so for a bijective index map it applies the
    inverse permutation.
    """
    x = _as_tensor(x)
    nid = next(_ids)
    idx = np.asarray(index, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.size):
        raise ShapeError(f"node {nid} (index_permute): index out of range for {x.shape}")
    out = x.data.reshape(-1)[idx]

    def vjp_fn(g):
        buf = np.zeros(x.data.size)
        np.add.at(buf, idx.reshape(-1), g.reshape(-1))
        return (buf.reshape(x.data.shape),)

    return _result("index_permute", nid, out, (x,), vjp_fn)


_resize_plans: dict[tuple, tuple] = {}


def _resize_plan(h: int, w: int, oh: int, ow: int):
    key = (h, w, oh, ow)
    plan = _resize_plans.get(key)
    if plan is None:
        ys = np.clip((np.arange(oh) + 0.5) * (h / oh) - 0.5, 0.0, h - 1.0)
        xs = np.clip((np.arange(ow) + 0.5) * (w / ow) - 0.5, 0.0, w - 1.0)
        y0 = np.floor(ys).astype(np.intp)
        x0 = np.floor(xs).astype(np.intp)
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        wy = ys - y0
        wx = xs - x0
        plan = (y0, y1, wy, x0, x1, wx)
        _resize_plans[key] = plan
    return plan


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resample of a (C, H, W) image, half-pixel centers, edge clamp."""
    x = _as_tensor(x)
    nid = next(_ids)
    if x.data.ndim != 3:
        raise ShapeError(f"node {nid} (bilinear_resize): expected (C, H, W), got {x.shape}")
    c, h, w = x.data.shape
    y0, y1, wy, x0, x1, wx = _resize_plan(h, w, out_h, out_w)
    w00 = (1.0 - wy)[:, None] * (1.0 - wx)[None, :]
    w01 = (1.0 - wy)[:, None] * wx[None, :]
    w10 = wy[:, None] * (1.0 - wx)[None, :]
    w11 = wy[:, None] * wx[None, :]
    img = x.data
    out = (
        w00 * img[:, y0[:, None], x0[None, :]]
        + w01 * img[:, y0[:, None], x1[None, :]]
        + w10 * img[:, y1[:, None], x0[None, :]]
        + w11 * img[:, y1[:, None], x1[None, :]]
    )

    def vjp_fn(g):
        buf = np.zeros((c, h, w))
        ch = np.arange(c)[:, None, None]
        np.add.at(buf, (ch, y0[:, None], x0[None, :]), g * w00)
        np.add.at(buf, (ch, y0[:, None], x1[None, :]), g * w01)
        np.add.at(buf, (ch, y1[:, None], x0[None, :]), g * w10)
        np.add.at(buf, (ch, y1[:, None], x1[None, :]), g * w11)
        return (buf,)

    return _result("bilinear_resize", nid, out, (x,), vjp_fn)


def scale(x, s: float) -> Tensor:
    """Multiply by a static scalar."""
    x = _as_tensor(x)
    nid = next(_ids)
    s = float(s)
    out = x.data * s

    def vjp_fn(g):
        return (g * s,)

    return _result("scale", nid, out, (x,), vjp_fn)


def l1_norm(x) -> Tensor:
    """Sum of absolute values; subgradient sign(x) with sign(0) = 0."""
    x = _as_tensor(x)
    nid = next(_ids)
    out = np.sum(np.abs(x.data))

    def vjp_fn(g):
        return (float(g) * np.sign(x.data),)

    return _result("l1_norm", nid, out, (x,), vjp_fn)


def sign(x) -> Tensor:
    """Elementwise sign with an identically-zero VJP."""
    x = _as_tensor(x)
    nid = next(_ids)
    out = np.sign(x.data)

    def vjp_fn(g):
        return (np.zeros(x.data.shape),)

    return _result("sign", nid, out, (x,), vjp_fn)


class DiffProgram:
    """A differentiable program: a callable over tape tensors.

    The callable is re-traced eagerly on every evaluation; the recorded
    tape is the node list, the wrapped leaves are the designated inputs
    and the returned tensor(s) the designated outputs.
    """

    def __init__(self, fn, n_inputs: int, name: str = "program"):
        self.fn = fn
        self.n_inputs = int(n_inputs)
        self.name = name

    def _run(self, leaves):
        out = self.fn(*leaves)
        if isinstance(out, Tensor):
            return [out]
        return list(out)

    def eval(self, inputs) -> list[Tensor]:
        """Execute on constant leaves; deterministic for identical inputs."""
        if len(inputs) != self.n_inputs:
            raise ShapeError(
                f"{self.name}: expected {self.n_inputs} inputs, got {len(inputs)}"
            )
        return self._run([_as_tensor(x) for x in inputs])

    def vjp(self, inputs, cotangents) -> list[Tensor]:
        """Gradient of <cotangent, output> with respect to every input."""
        if len(inputs) != self.n_inputs:
            raise ShapeError(
                f"{self.name}: expected {self.n_inputs} inputs, got {len(inputs)}"
            )
        leaves = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
        outs = self._run(leaves)
        if isinstance(cotangents, (list, tuple)):
            cts = list(cotangents)
        else:
            cts = [cotangents]
        if len(cts) != len(outs):
            raise ShapeError(f"{self.name}: {len(cts)} cotangents for {len(outs)} outputs")
        for out, ct in zip(outs, cts):
            out.backward(ct)
        return [
            constant(leaf.grad if leaf.grad is not None else np.zeros(leaf.data.shape))
            for leaf in leaves
        ]

    def grad_check(self, inputs, h: float = 1e-6) -> float:
        """Max relative error of the VJP against central finite differences.

        Per coordinate the error is |a - fd| / max(|a|, |fd|), with the
        both-zero case defined as 0. Only scalar-output programs qualify.
        """
        if not h > 0:
            raise ValueError("h must be positive")
        outs = self.eval(inputs)
        if len(outs) != 1 or outs[0].data.shape != ():
            raise ValueError("grad_check requires a single scalar output")
        analytic = [t.data for t in self.vjp(inputs, np.asarray(1.0))]
        work = [np.array(np.asarray(x), dtype=np.float64) for x in inputs]
        worst = 0.0
        for i, arr in enumerate(work):
            flat = arr.reshape(-1)
            aflat = analytic[i].reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                fp = float(self.eval(work)[0].data)
                flat[j] = orig - h
                fm = float(self.eval(work)[0].data)
                flat[j] = orig
                fd = (fp - fm) / (2.0 * h)
                a = float(aflat[j])
                denom = max(abs(a), abs(fd))
                err = 0.0 if denom == 0.0 else abs(a - fd) / denom
                worst = max(worst, err)
        return worst


def evaluate(program: DiffProgram, inputs) -> list[Tensor]:
    return program.eval(inputs)


def vjp(program: DiffProgram, inputs, cotangents) -> list[Tensor]:
    return program.vjp(inputs, cotangents)


def grad_check(program: DiffProgram, inputs, h: float = 1e-6) -> float:
    return program.grad_check(inputs, h)
