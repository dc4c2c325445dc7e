"""Parameter tensors and live-allocation accounting."""

from __future__ import annotations

import contextlib
import contextvars
import weakref

import numpy as np

from ..errors import BudgetError


class Tensor:
    """Float array with an optional gradient buffer of identical shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float32)
        self.grad = None
        if grad is not None:
            self.set_grad(grad)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def set_grad(self, grad):
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ValueError(f"grad shape {grad.shape} != data shape {self.data.shape}")
        self.grad = grad

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class MemoryTracker:
    """Counts bytes of tracked arrays that are still referenced.

    Arrays are registered with :meth:`track`; a weakref finalizer releases
    their bytes when the array is garbage collected, so ``live`` follows
    CPython reference counting exactly. When ``budget`` is set, a
    registration that would push ``live`` over it raises :class:`BudgetError`.
    """

    def __init__(self, budget=None):
        self.budget = budget
        self.live = 0
        self.peak = 0
        self.sites = {}
        self._owners = set()

    def _release(self, key, nbytes):
        self.live -= nbytes
        self._owners.discard(key)

    def track(self, arr, site):
        # views are charged to the array that owns the buffer, once
        while isinstance(arr.base, np.ndarray):
            arr = arr.base
        key = id(arr)
        if key in self._owners:
            return
        nbytes = int(arr.nbytes)
        if self.budget is not None and self.live + nbytes > self.budget:
            raise BudgetError(site, nbytes, self.live, self.budget)
        self.live += nbytes
        self.peak = max(self.peak, self.live)
        self.sites[site] = self.sites.get(site, 0) + nbytes
        self._owners.add(key)
        weakref.finalize(arr, self._release, key, nbytes)


_active = contextvars.ContextVar("segvae_memory_tracker", default=None)


def track(arr, site):
    """Register ``arr`` with the active tracker, if any; returns ``arr``."""
    tracker = _active.get()
    if tracker is not None and isinstance(arr, np.ndarray):
        tracker.track(arr, site)
    return arr


@contextlib.contextmanager
def memory_tracking(budget=None):
    tracker = MemoryTracker(budget)
    token = _active.set(tracker)
    try:
        yield tracker
    finally:
        _active.reset(token)
