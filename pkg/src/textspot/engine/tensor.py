"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays (float32 or float64). Operations
executed while a :class:`Tape` is active record backward closures on the
tape; calling :func:`backward` on a scalar output replays the tape in
reverse and accumulates gradients into the ``grad`` buffer of every leaf
tensor with ``requires_grad`` set.

Every op validates that its output is finite. NaN or Inf anywhere is a
:class:`NonFiniteError`, never a silently propagated value.
"""

from __future__ import annotations

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}
_NP_TO_NAME = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Tape misuse: backward on a consumed tape, non-scalar output, etc."""


def _check_finite(arr, op):
    # single-pass: any NaN/Inf makes the f64-accumulated sum non-finite,
    # and finite f32/f64 values cannot overflow an f64 accumulator
    if arr.size and not np.isfinite(np.sum(arr, dtype=np.float64)):
        raise NonFiniteError(f"non-finite values in output of '{op}'")


class Tensor:
    """A dense n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            np_dtype = _DTYPES[dtype] if isinstance(dtype, str) else np.dtype(dtype)
            arr = np.asarray(data, dtype=np_dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype == np.float64:
                pass
            elif arr.dtype != np.float32:
                arr = arr.astype(np.float32)
        if not np.issubdtype(arr.dtype, np.floating):
            raise ValueError(f"tensor dtype must be floating, got {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    # -- introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return _NP_TO_NAME[self.data.dtype]

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def astype(self, dtype):
        return Tensor(self.data, dtype=dtype)

    def __repr__(self):
        grad_tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad_tag})"

    # -- arithmetic (implemented in ops.py, bound at import) ----------

    def __len__(self):
        return self.shape[0]


class _TapeEntry:
    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op, inputs, out, backward_fn):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations for one backward pass.

    Entries are appended in forward (topological) order: every entry's
    inputs were produced before it. A tape is consumed by exactly one
    backward pass; reuse raises :class:`TapeError`.
    """

    def __init__(self):
        self.entries: list[_TapeEntry] = []
        self.consumed = False
        self._produced: set[int] = set()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def _append(self, op, inputs, out, backward_fn):
        self.entries.append(_TapeEntry(op, inputs, out, backward_fn))
        self._produced.add(id(out))

    def __len__(self):
        return len(self.entries)


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(op, inputs, out, backward_fn, check=True):
    """Register an op result on the active tape, if any input needs grad.

    ``backward_fn(grad_out)`` must return one gradient array (or None)
    per entry of ``inputs``, aligned positionally. ``check=False`` skips
    the finiteness scan for ops that are bounded or merely rearrange
    values and therefore cannot create NaN/Inf from finite inputs.
    """
    if check:
        _check_finite(out.data, op)
    tape = active_tape()
    if tape is None:
        return out
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._append(op, inputs, out, backward_fn)
    return out


def backward(output: Tensor, tape: Tape | None = None):
    """Accumulate d(output)/d(leaf) into ``.grad`` of every leaf tensor.

    ``output`` must be a scalar recorded on the tape. Gradients of a
    tensor used several times are summed. Leaves keep accumulating
    across calls until ``zero_grad``.
    """
    if tape is None:
        tape = active_tape()
    if tape is None:
        raise TapeError("backward called with no active or given tape")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if output.shape != ():
        raise TapeError(f"backward requires a scalar output, got shape {output.shape}")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(output): np.ones((), dtype=output.data.dtype)}
    holders: dict[int, Tensor] = {id(output): output}

    for entry in reversed(tape.entries):
        g_out = grads.pop(id(entry.out), None)
        if g_out is None:
            continue
        in_grads = entry.backward_fn(g_out)
        for t, g in zip(entry.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                holders[key] = t

    for key, g in grads.items():
        t = holders[key]
        if key in tape._produced or not t.requires_grad:
            continue
        _check_finite(g, "backward")
        if t.grad is None:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
        else:
            t.grad = t.grad + g.astype(t.data.dtype, copy=False)


def as_tensor(x, like: Tensor | None = None):
    """Coerce ``x`` to a Tensor, matching ``like``'s dtype for raw values."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def check_same_dtype(*tensors: Tensor):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ValueError(f"mixed tensor dtypes in one op: {sorted(dtypes)}")
