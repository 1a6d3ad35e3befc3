"""Dense tensors, trainable parameters, and the reverse-mode tape.

A Tensor wraps a numpy array (float32 or float64) plus a ``requires_grad``
flag. Primitives in :mod:`detlab.ops` record a backward closure onto the
active Tape only when at least one input requires a gradient. That single
rule is what makes a fully frozen backbone free at training time: none of
its primitives are recorded, no activations are saved for it, and backward
never visits it.

Parameters are leaf tensors with a partition tag (backbone / adapter /
decoder / head) and a ``trainable`` flag. Gradients accumulate into
``Parameter.grad``; a parameter with ``trainable=False`` never has a grad
buffer allocated.

A Tape and the parameters attached to it belong to one logical execution
context during a forward+backward step; tensors themselves are safe to
share read-only.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense n-d array with row-major data and a gradient-tracking flag.

    ``origin`` names the cost-accounting scope that produced the tensor
    ("data" for raw inputs); backward FLOPs for an input gradient are
    charged to the partition the gradient flows into.
    """

    __slots__ = ("data", "requires_grad", "origin")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.origin = "data"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Leaf tensor owned by a model.

    ``partition`` names the component the parameter belongs to and drives
    both trainability regimes and cost attribution. ``trainable=False``
    guarantees the grad buffer is never allocated or written.
    """

    __slots__ = ("partition", "trainable", "name", "grad")

    PARTITIONS = ("backbone", "adapter", "decoder", "head")

    def __init__(self, data, partition, trainable=True, name="", dtype=None):
        if partition not in self.PARTITIONS:
            raise ContractError(f"unknown partition {partition!r}; expected one of {self.PARTITIONS}")
        super().__init__(data, dtype=dtype)
        self.partition = partition
        self.trainable = trainable
        self.name = name
        self.grad = None
        self.origin = partition

    @property
    def requires_grad(self):
        return self.trainable

    @requires_grad.setter
    def requires_grad(self, value):
        # Tensor.__init__ assigns requires_grad; for parameters the flag is
        # an alias of `trainable`, which __init__ sets right afterwards.
        pass

    def accumulate_grad(self, g):
        if not self.trainable:
            raise ContractError(f"gradient written to frozen parameter {self.name!r}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return (
            f"Parameter({self.name!r}, shape={tuple(self.shape)}, "
            f"partition={self.partition}, trainable={self.trainable})"
        )


class Tape:
    """Ordered record of executed primitives with their backward closures.

    ``entries`` is a list of ``(out_id, backward_fn, op_name)`` in execution
    order; backward replays it in exact reverse order. Clearing the tape
    drops every backward closure and therefore every saved activation.
    """

    def __init__(self):
        self.entries = []
        self._keepalive = []

    def record(self, out, backward_fn, op_name):
        self.entries.append((id(out), backward_fn, op_name))
        # Backward closures key gradients by id(); keep outputs alive so ids
        # stay unique for the lifetime of the tape.
        self._keepalive.append(out)

    def op_counts(self):
        counts = {}
        for _, _, name in self.entries:
            counts[name] = counts.get(name, 0) + 1
        return counts

    def __len__(self):
        return len(self.entries)

    def clear(self):
        self.entries.clear()
        self._keepalive.clear()


_ACTIVE_TAPE: Tape | None = None


class record:
    """Context manager that makes ``tape`` the active recording target."""

    def __init__(self, tape):
        self.tape = tape
        self._prev = None

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self.tape
        return self.tape

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False


def active_tape():
    return _ACTIVE_TAPE


def backward(loss, tape):
    """Accumulate d(loss)/d(param) into every trainable parameter under ``loss``.

    ``loss`` must be a 0-d tensor produced while ``tape`` was recording.
    Gradients for intermediate tensors live only for the duration of this
    call; parameter gradients accumulate across calls until ``zero_grad``.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for out_id, backward_fn, _ in reversed(tape.entries):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        backward_fn(g, grads)
    grads.clear()


def propagate(grads, tensor, g):
    """Route gradient ``g`` to ``tensor``: parameters accumulate, intermediates pool."""
    if isinstance(tensor, Parameter):
        tensor.accumulate_grad(g)
        return
    key = id(tensor)
    if key in grads:
        grads[key] += g
    else:
        grads[key] = np.array(g, copy=True) if not g.flags.owndata else g
