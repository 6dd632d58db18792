"""Named parameter storage and the scope object model code reads weights through.

Names are dot-separated paths such as ``backbone.stage2.block0.emsa.q.weight``.
Batch-norm running statistics are stored alongside the learned weights under
``*.running_mean`` / ``*.running_var``; they are buffers, not parameters, and
are excluded from parameter counts and from the optimizer.
"""
from __future__ import annotations

from collections.abc import Iterator, MutableMapping
from typing import Callable, Iterable

import numpy as np

from . import autograd as ad
from .tensor import InvalidArgument

BUFFER_SUFFIXES = (".running_mean", ".running_var")


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


class WeightStore(MutableMapping):
    """Insertion-ordered map from hierarchical name to array (float32 by default)."""

    def __init__(self, items: Iterable[tuple[str, np.ndarray]] | None = None, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._data: dict[str, np.ndarray] = {}
        for name, value in items or ():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._data:
            raise InvalidArgument(f"duplicate weight name {name!r}")
        self._data[name] = np.ascontiguousarray(value, dtype=self.dtype)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name in self._data and self._data[name].shape != np.shape(value):
            raise InvalidArgument(f"{name}: shape {np.shape(value)} != stored {self._data[name].shape}")
        self._data[name] = np.ascontiguousarray(value, dtype=self.dtype)

    def __delitem__(self, name: str) -> None:
        del self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def copy(self, dtype=None) -> "WeightStore":
        return WeightStore(((k, v.copy()) for k, v in self._data.items()), dtype or self.dtype)

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {k: v for k, v in self._data.items() if k.startswith(prefix) and not is_buffer(k)}

    def count(self, prefix: str = "") -> int:
        return int(sum(v.size for v in self.parameters(prefix).values()))

    def __repr__(self) -> str:
        return f"WeightStore({len(self)} tensors, {self.count()} parameters)"


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------

def conv_init(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def linear_init(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.normal(0.0, 0.02, size=shape)


def zeros(rng, shape) -> np.ndarray:
    return np.zeros(shape)


def ones(rng, shape) -> np.ndarray:
    return np.ones(shape)


class Scope:
    """A prefix into a :class:`WeightStore` plus the state of one forward pass.

    ``scope.param(name, shape, init)`` returns the stored tensor as a graph
    node; with an ``rng`` attached, missing entries are created with `init`
    (this is how fresh models are built). ``training`` selects batch
    statistics in batch norm; updated running statistics are collected in
    ``updates`` and only written back by :meth:`commit`.
    """

    def __init__(self, store: WeightStore, prefix: str = "", *, rng: np.random.Generator | None = None,
                 training: bool = False, track: bool = False, root: "Scope | None" = None,
                 hooks: dict[str, Callable] | None = None):
        self.store = store
        self.prefix = prefix
        self.rng = rng
        self.training = training
        self.track = track
        self._root = root
        if root is None:
            self.nodes: dict[str, ad.Node] = {}
            self.updates: dict[str, np.ndarray] = {}
            self.hooks = hooks or {}

    @property
    def root(self) -> "Scope":
        return self._root or self

    def child(self, name: str) -> "Scope":
        return Scope(self.store, f"{self.prefix}{name}.", rng=self.rng, training=self.training,
                     track=self.track, root=self.root)

    __truediv__ = child

    def _fetch(self, full: str, shape, init) -> np.ndarray:
        shape = tuple(int(s) for s in shape)
        if full not in self.store:
            if self.rng is None:
                raise InvalidArgument(f"missing weight {full!r} (expected shape {shape})")
            self.store.add(full, init(self.rng, shape))
        value = self.store[full]
        if value.shape != shape:
            raise InvalidArgument(f"weight {full!r} has shape {value.shape}, model expects {shape}")
        return value

    def param(self, name: str, shape, init: Callable = zeros) -> ad.Node:
        full = self.prefix + name
        nodes = self.root.nodes
        if full not in nodes:
            value = self._fetch(full, shape, init)
            nodes[full] = ad.parameter(value, full) if self.track else ad.constant(value)
        return nodes[full]

    def buffer(self, name: str, shape, init: Callable = zeros) -> np.ndarray:
        full = self.prefix + name
        return self._fetch(full, shape, init)

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        self.root.updates[self.prefix + name] = value

    def hook(self, name: str, value) -> None:
        fn = self.root.hooks.get(name)
        if fn is not None:
            fn(self.prefix, value)

    def commit(self) -> None:
        for name, value in self.root.updates.items():
            self.store[name] = value
        self.root.updates.clear()

    def tracked(self) -> dict[str, ad.Node]:
        return {k: v for k, v in self.root.nodes.items() if v.requires_grad}
