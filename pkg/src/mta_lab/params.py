"""Named parameter store with freeze flags and deterministic initialization.

All randomness in the library flows through `rng_for(seed, tag)`: a single
root seed is split into independent, order-insensitive substreams keyed by a
string tag, so adding a consumer never perturbs the others.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import StateError
from .tensor import DEFAULT_DTYPE, Tensor


def rng_for(seed: int, tag: str) -> np.random.Generator:
    """Deterministic substream of the root seed identified by a tag."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(tag.encode())]))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=DEFAULT_DTYPE):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def embedding_normal(rng: np.random.Generator, rows: int, cols: int, dtype=DEFAULT_DTYPE):
    return (rng.normal(0.0, 0.02, size=(rows, cols))).astype(dtype)


def add_linear(store: "ParamStore", prefix: str, d_in: int, d_out: int, seed: int,
               dtype=DEFAULT_DTYPE, zero_weight: bool = False):
    """Register `{prefix}.w` and `{prefix}.b` for a dense map d_in -> d_out."""
    if zero_weight:
        w_data = np.zeros((d_in, d_out), dtype=dtype)
        scheme = "zeros"
    else:
        w_data = glorot_uniform(rng_for(seed, prefix + ".w"), d_in, d_out, dtype)
        scheme = "glorot_uniform"
    w = store.add(prefix + ".w", w_data, init_record={"seed": seed, "scheme": scheme})
    b = store.add(prefix + ".b", np.zeros(d_out, dtype=dtype),
                  init_record={"seed": seed, "scheme": "zeros"})
    return w, b


def add_layer_norm(store: "ParamStore", prefix: str, width: int, dtype=DEFAULT_DTYPE):
    g = store.add(prefix + ".g", np.ones(width, dtype=dtype),
                  init_record={"scheme": "ones"})
    b = store.add(prefix + ".b", np.zeros(width, dtype=dtype),
                  init_record={"scheme": "zeros"})
    return g, b


@dataclass
class ParamEntry:
    tensor: Tensor
    trainable: bool
    init_record: dict


class ParamStore:
    """Map of unique names to (tensor, trainable flag, init record).

    Iteration is always sorted by name, so any consumer that walks the store
    (optimizer, checkpointing, finite differences) is deterministic.
    """

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, data, trainable: bool = True, init_record: dict | None = None) -> Tensor:
        if name in self._entries:
            raise StateError(f"parameter {name!r} already registered")
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.requires_grad = True
        t.name = name
        self._entries[name] = ParamEntry(t, bool(trainable), init_record or {})
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self):
        for name in sorted(self._entries):
            yield name, self._entries[name]

    def tensors(self):
        for name in sorted(self._entries):
            yield name, self._entries[name].tensor

    def set_trainable(self, name: str, flag: bool) -> None:
        self._entries[name].trainable = bool(flag)

    def trainable_names(self) -> list[str]:
        return [n for n, e in self.items() if e.trainable]

    def n_params(self, trainable_only: bool = False) -> int:
        return sum(
            e.tensor.data.size
            for e in self._entries.values()
            if e.trainable or not trainable_only
        )

    def zero_grad(self) -> None:
        for e in self._entries.values():
            e.tensor.grad = None

    def snapshot(self, names=None) -> dict[str, np.ndarray]:
        """Bit-exact copies, keyed by name (defaults to every parameter)."""
        names = self.names() if names is None else names
        return {n: self._entries[n].tensor.data.copy() for n in names}

    def fingerprint(self, names=None) -> int:
        """Order-stable CRC over raw parameter bytes; cheap freeze check."""
        names = self.names() if names is None else sorted(names)
        crc = 0
        for n in names:
            crc = zlib.crc32(self._entries[n].tensor.data.tobytes(), crc)
        return crc
