"""Global memory lifecycle: formation, light baseline, offload/reload, accounting."""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .model import Parameters, compact_prefill, light_prefill
from .state import (
    ALLOWED_BETAS,
    CapacityError,
    CompatibilityError,
    FormatError,
    LightMemory,
    MemoryState,
    fnv1a64,
)

MEM_MAGIC = b"MRAG"
MEM_VERSION = 1
# magic, version, 6 x u32 config, n_raw, next_pos, context_fp, params_fp, n_entries
_HEADER = struct.Struct("<4sI6IQQQ8sQ")
HEADER_BYTES = _HEADER.size
DISK_FLOAT_BYTES = 4

__all__ = [
    "LightMemory",
    "MemoryState",
    "memorize",
    "extend_memory",
    "light_memorize",
    "offload",
    "load",
    "memory_stats",
    "payload_bytes",
    "HEADER_BYTES",
]


def _check_beta(params: Parameters, beta: int) -> int:
    if beta not in params.config.allowed_betas:
        raise ValueError(f"compression ratio {beta} not allowed; choose from {sorted(ALLOWED_BETAS)}")
    return params.config.k_for(beta)


def memorize(context, params: Parameters, beta: int = 4) -> MemoryState:
    """Form compact memory over ``context`` one window at a time.

    After each window ``window_l / beta`` memory tokens are appended and only
    their KV is kept.
    """
    if len(context) == 0:
        raise ValueError("cannot memorize an empty context")
    k = _check_beta(params, beta)
    _, state = compact_prefill(context, params, mem_k=k, want_logits=False)
    return state


def extend_memory(memory: MemoryState, more, params: Parameters) -> MemoryState:
    """Continue formation with further tokens; ``memory`` must end on a window boundary."""
    _, state = compact_prefill(more, params, mem_k=memory.mem_k, resume=memory, want_logits=False)
    return state


def light_memorize(context, params: Parameters) -> LightMemory:
    """Full-KV baseline; limited to the model's native context length."""
    n = len(context)
    if n > params.config.max_seq:
        raise CapacityError(
            f"light memory is bounded by the native context: {n} tokens > max_seq {params.config.max_seq}"
        )
    _, cache = light_prefill(context, params)
    return LightMemory(cache=cache, n_raw_tokens=n, context_fp=fnv1a64(np.asarray(context)))


def payload_bytes(memory: MemoryState | LightMemory) -> int:
    """Bytes of cached K/V at on-disk precision (headers excluded)."""
    return memory.payload_floats * DISK_FLOAT_BYTES


def memory_stats(memory: MemoryState) -> dict:
    return {
        "n_raw_tokens": memory.n_raw_tokens,
        "n_mem_entries": memory.n_mem_entries,
        "bytes": payload_bytes(memory),
        "beta": memory.beta,
    }


def offload(memory: MemoryState, path) -> Path:
    """Write ``memory`` to ``path`` (atomic replace)."""
    path = Path(path)
    k0 = memory.mem_keys[0]
    n_heads, n_entries, head_dim = k0.shape
    header = _HEADER.pack(
        MEM_MAGIC,
        MEM_VERSION,
        len(memory.mem_keys),
        n_heads,
        head_dim,
        memory.window_l,
        memory.mem_k,
        memory.beta,
        memory.n_raw_tokens,
        memory.next_pos,
        memory.context_fp,
        bytes.fromhex(memory.params_fp),
        n_entries,
    )
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=".mrag-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header)
            for k, v in zip(memory.mem_keys, memory.mem_values):
                f.write(k.astype("<f4").tobytes())
                f.write(v.astype("<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_header(path) -> dict:
    data = Path(path).read_bytes()[:HEADER_BYTES]
    if len(data) < 4 or data[:4] != MEM_MAGIC:
        raise FormatError(f"{path}: not a memory file")
    if len(data) < HEADER_BYTES:
        raise FormatError(f"{path}: truncated header")
    (_, version, n_layers, n_heads, head_dim, window_l, mem_k, beta,
     n_raw, next_pos, ctx_fp, params_fp, n_entries) = _HEADER.unpack(data)
    if version != MEM_VERSION:
        raise FormatError(f"{path}: unsupported memory file version {version}")
    if mem_k == 0 or window_l != beta * mem_k:
        raise FormatError(f"{path}: inconsistent compression config")
    return dict(
        n_layers=n_layers, n_heads=n_heads, head_dim=head_dim, window_l=window_l, mem_k=mem_k,
        beta=beta, n_raw_tokens=n_raw, next_pos=next_pos, context_fp=ctx_fp,
        params_fp=params_fp.hex(), n_entries=n_entries,
    )


def load(path, params: Parameters) -> MemoryState:
    """Read a memory file, refusing it unless it was formed with ``params``."""
    h = read_header(path)
    if h["params_fp"] != params.fingerprint:
        raise CompatibilityError(
            f"memory file was formed with params {h['params_fp']}, current params are {params.fingerprint}"
        )
    cfg = params.config
    if (h["n_layers"], h["n_heads"], h["head_dim"]) != (cfg.n_layers, cfg.n_heads, cfg.head_dim):
        raise CompatibilityError("memory file shape does not match the model")
    data = Path(path).read_bytes()
    per = h["n_heads"] * h["n_entries"] * h["head_dim"]
    expected = HEADER_BYTES + 2 * h["n_layers"] * per * DISK_FLOAT_BYTES
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    shape = (h["n_heads"], h["n_entries"], h["head_dim"])
    keys, values = [], []
    off = HEADER_BYTES
    for _ in range(h["n_layers"]):
        for dest in (keys, values):
            dest.append(np.frombuffer(data, dtype="<f4", count=per, offset=off).astype(np.float64).reshape(shape))
            off += per * DISK_FLOAT_BYTES
    return MemoryState(
        mem_keys=keys,
        mem_values=values,
        window_l=h["window_l"],
        mem_k=h["mem_k"],
        n_raw_tokens=h["n_raw_tokens"],
        next_pos=h["next_pos"],
        context_fp=h["context_fp"],
        params_fp=h["params_fp"],
    )
