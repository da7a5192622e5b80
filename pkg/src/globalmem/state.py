"""Cache containers shared by the model and the memory lifecycle."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ALLOWED_BETAS = (4, 8, 16, 32, 64)


class CompatibilityError(RuntimeError):
    """A cache or memory file was produced by different parameters or a different context."""


class FormatError(ValueError):
    """A binary file has a bad magic, version, or is truncated."""


class CapacityError(ValueError):
    """Input longer than the model can attend over in one pass."""


FNV_OFFSET = 0xCBF29CE484222325


def fnv1a64(ids, h: int | None = None) -> int:
    """64-bit FNV-1a over the little-endian int64 bytes of ``ids``.

    Passing a previous hash as ``h`` continues it, so hashing A then B equals
    hashing A++B.
    """
    h = FNV_OFFSET if h is None else h
    data = np.asarray(ids, dtype="<i8").tobytes()
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class KVCache:
    """Per-layer keys/values shaped ``(n_heads, length, head_dim)``.

    The first ``n_memory`` entries of every layer are memory-token KV (compact
    mode); the rest are regular-token KV appended by prefill or decode.
    """

    keys: list[np.ndarray]
    values: list[np.ndarray]
    next_pos: int
    params_fp: str
    n_memory: int = 0

    def __len__(self) -> int:
        return 0 if not self.keys else int(self.keys[0].shape[1])

    @property
    def nbytes(self) -> int:
        return sum(k.nbytes + v.nbytes for k, v in zip(self.keys, self.values))


@dataclass
class MemoryState:
    """Compact global memory: memory-token KV for every layer plus provenance."""

    mem_keys: list[np.ndarray]
    mem_values: list[np.ndarray]
    window_l: int
    mem_k: int
    n_raw_tokens: int
    next_pos: int
    context_fp: int
    params_fp: str
    meta: dict = field(default_factory=dict)

    @property
    def beta(self) -> int:
        return self.window_l // self.mem_k

    @property
    def n_mem_entries(self) -> int:
        return 0 if not self.mem_keys else int(self.mem_keys[0].shape[1])

    @property
    def payload_floats(self) -> int:
        return sum(k.size + v.size for k, v in zip(self.mem_keys, self.mem_values))

    def as_cache(self) -> KVCache:
        """Decode-side view: the memory entries become the prefix of a working cache."""
        return KVCache(
            keys=[k.copy() for k in self.mem_keys],
            values=[v.copy() for v in self.mem_values],
            next_pos=self.next_pos,
            params_fp=self.params_fp,
            n_memory=self.n_mem_entries,
        )


@dataclass
class LightMemory:
    """Uncompressed baseline: the full regular-token KV cache of the context."""

    cache: KVCache
    n_raw_tokens: int
    context_fp: int

    @property
    def params_fp(self) -> str:
        return self.cache.params_fp

    @property
    def payload_floats(self) -> int:
        return sum(k.size + v.size for k, v in zip(self.cache.keys, self.cache.values))
