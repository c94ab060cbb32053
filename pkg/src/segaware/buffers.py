"""Keyed scratch-array pool.

Training loops run thousands of steps over fixed shapes; reusing the
activation/gradient buffers avoids re-faulting tens of MB of fresh mmap
pages every step. Not thread-safe: one pool per worker.
"""
from __future__ import annotations

import numpy as np


class ArrayPool:
    def __init__(self):
        self._store = {}

    def take(self, key, shape, dtype):
        buf = self._store.get(key)
        shape = tuple(shape)
        if buf is None or buf.shape != shape or buf.dtype != np.dtype(dtype):
            buf = self._store[key] = np.empty(shape, dtype)
        return buf

    def clear(self):
        self._store.clear()
