"""Dense float tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array (float32 for training, float64 for
gradient checking) and records the operation that produced it. Calling
``backward()`` on a scalar result walks the recorded graph in reverse
topological order and accumulates ``.grad`` on every tensor that
participates in it.

Conventions shared by every operation in this package:

* all tensors in one graph have the same dtype (mixing raises
  :class:`DtypeError`);
* reductions and gradient accumulations run in a fixed serial order, so
  repeated runs are bit-identical;
* max-style operations (hinge, global max pooling) route gradient to the
  first maximal element on ties, with the constant zero of a hinge
  counting as element zero (so ``d hinge/dx == 0`` at ``x == 0``).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import DtypeError, ShapeError

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / perturbation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_prev", "_op")

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = (), _op: str = ""):
        arr = np.asarray(data)
        if arr.dtype not in SUPPORTED_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward: Callable[[], None] | None = None
        self._prev = _prev
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self._op!r})"

    def astype(self, dtype) -> "Tensor":
        """New leaf tensor with converted precision (drops graph history)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    # ---- elementwise arithmetic ------------------------------------------

    def __add__(self, other) -> "Tensor":
        return ew_add(self, other)

    def __radd__(self, other) -> "Tensor":
        return ew_add(self, other)

    def __mul__(self, other) -> "Tensor":
        return ew_mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return ew_mul(self, other)

    def __neg__(self) -> "Tensor":
        out = _node(-self.data, (self,), "neg")
        if out.requires_grad:
            def _bw():
                _accum(self, -out.grad)
            out._backward = _bw
        return out

    def __sub__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return ew_add(self, -other)
        return ew_add(self, -float(other))

    def sum(self) -> "Tensor":
        """Full reduction to a scalar, in numpy's fixed pairwise order."""
        out = _node(np.asarray(self.data.sum(), dtype=self.data.dtype), (self,), "sum")
        if out.requires_grad:
            def _bw():
                _accum(self, np.broadcast_to(out.grad, self.data.shape))
            out._backward = _bw
        return out

    def reshape(self, shape) -> "Tensor":
        shape = tuple(shape)
        out = _node(self.data.reshape(shape), (self,), "reshape")
        if out.requires_grad:
            def _bw():
                _accum(self, out.grad.reshape(self.data.shape))
            out._backward = _bw
        return out

    # ---- backward pass ---------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar loss; grads accumulate by summation."""
        if self.data.shape not in ((), (1,)):
            raise ShapeError(
                f"backward requires a scalar loss of shape () or (1,), got {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()


# ---- graph construction helpers ------------------------------------------


def _node(data: np.ndarray, parents: Iterable[Tensor], op: str) -> Tensor:
    parents = tuple(parents)
    req = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _prev=parents if req else (), _op=op)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_same_dtype(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise DtypeError(f"{op}: mixed precisions {a.data.dtype} and {b.data.dtype} in one graph")


def _binary_mode(op: str, a: Tensor, b: Tensor) -> str:
    """Classify the allowed shape pairing: equal shapes or (C,1,1) on b."""
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return "equal"
    if len(sa) == 4 and sb == (sa[1], 1, 1):
        return "channel"
    raise ShapeError(
        f"{op}: incompatible shapes {sa} and {sb}; "
        f"expected equal shapes or a (C,1,1) second operand against (N,C,H,W)"
    )


def _reduce_channel(g: np.ndarray) -> np.ndarray:
    # gradient for a (C,1,1) operand broadcast over (N,C,H,W)
    return g.sum(axis=(0, 2, 3))[:, None, None]


def ew_add(a: Tensor, b) -> Tensor:
    """Elementwise sum; second operand may be a scalar constant or (C,1,1)."""
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(b)
        out = _node(a.data + c, (a,), "add")
        if out.requires_grad:
            def _bw():
                _accum(a, out.grad)
            out._backward = _bw
        return out
    _check_same_dtype("ew_add", a, b)
    mode = _binary_mode("ew_add", a, b)
    out = _node(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw():
            _accum(a, out.grad)
            _accum(b, out.grad if mode == "equal" else _reduce_channel(out.grad))
        out._backward = _bw
    return out


def ew_mul(a: Tensor, b) -> Tensor:
    """Elementwise product; same operand rules as :func:`ew_add`."""
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(b)
        out = _node(a.data * c, (a,), "mul")
        if out.requires_grad:
            def _bw():
                _accum(a, out.grad * c)
            out._backward = _bw
        return out
    _check_same_dtype("ew_mul", a, b)
    mode = _binary_mode("ew_mul", a, b)
    out = _node(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bw():
            _accum(a, out.grad * b.data)
            gb = out.grad * a.data
            _accum(b, gb if mode == "equal" else _reduce_channel(gb))
        out._backward = _bw
    return out


def hinge(x: Tensor) -> Tensor:
    """max(x, 0) elementwise; on the x == 0 tie the zero branch wins."""
    out = _node(np.maximum(x.data, 0), (x,), "hinge")
    if out.requires_grad:
        mask = (x.data > 0).astype(x.data.dtype)
        def _bw():
            _accum(x, out.grad * mask)
        out._backward = _bw
    return out


# ---- gradient checking -----------------------------------------------------


class GradcheckResult:
    """Per-parameter max relative error between analytic and numeric grads."""

    def __init__(self, max_rel_err: dict[str, float], nonfinite: list[str]):
        self.max_rel_err = max_rel_err
        self.nonfinite = nonfinite

    @property
    def worst(self) -> tuple[str, float]:
        if not self.max_rel_err:
            return ("", 0.0)
        name = max(self.max_rel_err, key=lambda k: self.max_rel_err[k])
        return (name, self.max_rel_err[name])

    def passed(self, tol: float = 1e-4) -> bool:
        return not self.nonfinite and all(e < tol for e in self.max_rel_err.values())

    def __repr__(self) -> str:
        name, err = self.worst
        return f"GradcheckResult(worst={name!r}: {err:.3g}, nonfinite={self.nonfinite})"


def gradcheck(fn: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-5,
              atol: float = 0.0) -> GradcheckResult:
    """Compare analytic gradients of ``fn()`` against central finite differences.

    ``fn`` must return a scalar Tensor computed from ``params``, all of which
    must be float64 (single precision makes the differences unreliable around
    hinges and max pooling). Relative error per scalar parameter is
    ``|a - n| / max(|a|, |n|, 1e-8)``. Parameters at which a perturbed
    evaluation goes non-finite are reported, never silently skipped.

    Central differences cannot resolve derivatives below the rounding floor
    ulp(f)/(2 eps); a nonzero ``atol`` skips coordinates where analytic and
    numeric magnitudes both sit under it. The default keeps every coordinate.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise DtypeError(f"gradcheck requires float64 parameters, {name!r} is {p.data.dtype}")
        if not p.data.flags.c_contiguous:
            raise ShapeError(f"gradcheck parameter {name!r} must be contiguous")

    for p in params.values():
        p.grad = None
    loss = fn()
    if loss.data.shape not in ((), (1,)):
        raise ShapeError(f"gradcheck function must return a scalar, got shape {loss.data.shape}")
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    errs: dict[str, float] = {}
    bad: list[str] = []
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            numeric = np.zeros_like(flat)
            finite = True
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(fn().data)
                flat[i] = orig - eps
                f_minus = float(fn().data)
                flat[i] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    finite = False
                    break
                numeric[i] = (f_plus - f_minus) / (2.0 * eps)
            if not finite:
                bad.append(name)
                errs[name] = float("inf")
                continue
            a = analytic[name].reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
            rel = np.abs(a - numeric) / denom
            if atol > 0.0:
                rel = rel[np.maximum(np.abs(a), np.abs(numeric)) > atol]
            errs[name] = float(rel.max()) if rel.size else 0.0
    return GradcheckResult(errs, bad)
