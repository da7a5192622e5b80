"""Tiny decoder-only transformer with a second (memory) projection family.

Regular tokens are projected with ``wq/wk/wv``; memory tokens, inserted after
every ``window_l`` raw tokens in compact mode, use ``wqm/wkm/wvm``.  Everything
else (layer norms, output projection, feed-forward, tied head) is shared.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .state import (
    ALLOWED_BETAS,
    CapacityError,
    CompatibilityError,
    FormatError,
    KVCache,
    MemoryState,
    fnv1a64,
)
from .text import Vocab

CKPT_MAGIC = b"MRCK"
CKPT_VERSION = 1
PREFILL_BLOCK = 512


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    ffn_mult: int = 2
    window_l: int = 64
    mem_k: int = 16
    max_seq: int = 512
    memory: bool = True
    allowed_betas: tuple[int, ...] = field(default=ALLOWED_BETAS, compare=False)

    def __post_init__(self):
        if self.vocab_size < 1 or self.d_model < 1 or self.n_layers < 1 or self.n_heads < 1:
            raise ValueError("model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.memory:
            if not 1 <= self.mem_k <= self.window_l or self.window_l % self.mem_k:
                raise ValueError(f"window_l {self.window_l} must be a multiple of mem_k {self.mem_k}")
            if self.beta not in self.allowed_betas:
                raise ValueError(f"compression ratio {self.beta} not in {sorted(self.allowed_betas)}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def beta(self) -> int:
        return self.window_l // self.mem_k

    @property
    def betas(self) -> tuple[int, ...]:
        """Compression ratios usable with this window (ratio divides the window)."""
        return tuple(b for b in sorted(self.allowed_betas) if self.window_l % b == 0 and b <= self.window_l)

    @property
    def mem_slots(self) -> int:
        """Number of memory-token embeddings: enough for the smallest usable ratio."""
        if not self.memory:
            return 0
        return max(self.mem_k, self.window_l // self.betas[0]) if self.betas else self.mem_k

    def k_for(self, beta: int) -> int:
        if beta not in self.allowed_betas:
            raise ValueError(f"compression ratio {beta} not in allowed set {sorted(self.allowed_betas)}")
        if self.window_l % beta:
            raise ValueError(f"window_l {self.window_l} is not divisible by beta {beta}")
        return self.window_l // beta

    def with_(self, **kw) -> "ModelConfig":
        d = asdict(self)
        d.update(kw)
        return ModelConfig(**d)


MEMORY_PREFIXES = ("wqm", "wkm", "wvm")


def _layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.d_model * cfg.ffn_mult
    out: list[tuple[str, tuple[int, ...]]] = [("tok_emb", (cfg.vocab_size, d))]
    if cfg.memory:
        out.append(("mem_emb", (cfg.mem_slots, d)))
    for i in range(cfg.n_layers):
        p = f"L{i}."
        out += [
            (p + "ln1_g", (d,)), (p + "ln1_b", (d,)),
            (p + "wq", (d, d)), (p + "wk", (d, d)), (p + "wv", (d, d)), (p + "wo", (d, d)),
            (p + "ln2_g", (d,)), (p + "ln2_b", (d,)),
            (p + "w1", (d, f)), (p + "b1", (f,)), (p + "w2", (f, d)), (p + "b2", (d,)),
        ]
        if cfg.memory:
            out += [(p + "wqm", (d, d)), (p + "wkm", (d, d)), (p + "wvm", (d, d))]
    out += [("lnf_g", (d,)), ("lnf_b", (d,))]
    return out


def is_memory_param(name: str) -> bool:
    return name == "mem_emb" or name.rsplit(".", 1)[-1] in MEMORY_PREFIXES


class Parameters:
    """All weights in declaration order; base weights are marked frozen."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        layout = _layout(config)
        missing = [n for n, _ in layout if n not in arrays]
        if missing:
            raise ValueError(f"missing parameters: {missing[:4]}")
        self.config = config
        self.arrays: dict[str, np.ndarray] = {}
        for name, shape in layout:
            a = np.array(arrays[name], dtype=np.float64)
            if a.shape != shape:
                raise ValueError(f"{name}: shape {a.shape} != {shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} has non-finite entries")
            self.arrays[name] = a
        self.frozen = {n for n in self.arrays if not is_memory_param(n)}
        self._version = 0
        self._fp: tuple[int, str] | None = None

    @property
    def names(self) -> list[str]:
        return list(self.arrays)

    @property
    def memory_names(self) -> list[str]:
        return [n for n in self.arrays if n not in self.frozen]

    @property
    def base_names(self) -> list[str]:
        return [n for n in self.arrays if n in self.frozen]

    def touch(self) -> None:
        """Call after mutating arrays in place."""
        self._version += 1

    @property
    def fingerprint(self) -> str:
        if self._fp is None or self._fp[0] != self._version:
            h = hashlib.blake2b(digest_size=8)
            h.update(repr(sorted(asdict(self.config).items())).encode())
            for name, a in self.arrays.items():
                h.update(name.encode())
                h.update(a.tobytes())
            self._fp = (self._version, h.hexdigest())
        return self._fp[1]

    def copy(self) -> "Parameters":
        return Parameters(self.config, {n: a.copy() for n, a in self.arrays.items()})

    def tensors(self, trainable: Sequence[str] = ()) -> dict[str, Tensor]:
        """Tensor views sharing storage with ``arrays``."""
        train = set(trainable)
        return {n: _view(a, n in train, n) for n, a in self.arrays.items()}

    def n_params(self, names: Sequence[str] | None = None) -> int:
        return sum(self.arrays[n].size for n in (names or self.arrays))


def _view(a: np.ndarray, requires_grad: bool, name: str) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = a
    t.grad = None
    t.requires_grad = requires_grad
    t.name = name
    return t


def init_params(config: ModelConfig, seed: int = 0, init_std: float = 0.02, mem_noise: float = 0.02) -> Parameters:
    """Gaussian init; memory projections start as base projections plus N(0, mem_noise) noise."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in _layout(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            arrays[name] = np.ones(shape)
        elif leaf.endswith("_b") or leaf in ("b1", "b2"):
            arrays[name] = np.zeros(shape)
        elif leaf in MEMORY_PREFIXES:
            base = arrays[name[:-1]]
            arrays[name] = base + rng.normal(0.0, mem_noise, size=shape)
        else:
            arrays[name] = rng.normal(0.0, init_std, size=shape)
    return Parameters(config, arrays)


def sinusoid(positions: np.ndarray, d: int) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    i = np.arange(d)[None, :]
    rates = 1.0 / np.power(10000.0, (2 * (i // 2)) / d)
    ang = pos * rates
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


# --- core computation ----------------------------------------------------

def causal_mask(n_new: int, n_past: int) -> np.ndarray:
    m = np.ones((n_new, n_past + n_new), dtype=bool)
    m[:, n_past:] = np.tril(np.ones((n_new, n_new), dtype=bool))
    return m


def window_mask(n_reg: int, n_mem: int, n_past: int) -> np.ndarray:
    """Visibility inside one compact window.

    Regular token i sees the memory cache and regular tokens 0..i of its own
    window; memory token j sees the memory cache, the whole window and memory
    tokens 0..j.
    """
    T = n_reg + n_mem
    m = np.zeros((T, n_past + T), dtype=bool)
    m[:, :n_past] = True
    m[:n_reg, n_past:n_past + n_reg] = np.tril(np.ones((n_reg, n_reg), dtype=bool))
    m[n_reg:, n_past:n_past + n_reg] = True
    m[n_reg:, n_past + n_reg:] = np.tril(np.ones((n_mem, n_mem), dtype=bool))
    return m


def attention(queries: Tensor, keys: Tensor, values: Tensor, mask: np.ndarray) -> Tensor:
    """Masked scaled dot-product attention over the last two axes.

    ``queries`` is ``(..., n_q, h)``, ``keys``/``values`` ``(..., n_kv, h)`` and
    ``mask`` a boolean ``(n_q, n_kv)`` visibility matrix.
    """
    q, k, v = (x if isinstance(x, Tensor) else Tensor(x) for x in (queries, keys, values))
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise dc.ContractError(f"incompatible attention shapes {q.shape}, {k.shape}, {v.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (q.shape[-2], k.shape[-2]):
        raise dc.ContractError(f"mask shape {mask.shape} != ({q.shape[-2]}, {k.shape[-2]})")
    if not mask.any(axis=-1).all():
        raise dc.ContractError("every query must see at least one key")
    axes = tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2)
    scores = dc.scale(dc.matmul(q, dc.transpose(k, axes)), 1.0 / math.sqrt(q.shape[-1]))
    return dc.matmul(dc.softmax_rows(scores, mask), v)


def _heads(x: Tensor, B: int, T: int, H: int, hd: int) -> Tensor:
    return dc.transpose(dc.reshape(x, (B, T, H, hd)), (0, 2, 1, 3))


def _proj(a: Tensor, w: dict[str, Tensor], layer: str, kind: str, n_reg: int, n_mem: int) -> Tensor:
    parts = []
    if n_reg:
        src = a if not n_mem else dc.slice_axis(a, 0, n_reg, 1)
        parts.append(dc.matmul(src, w[layer + kind]))
    if n_mem:
        src = a if not n_reg else dc.slice_axis(a, n_reg, n_reg + n_mem, 1)
        parts.append(dc.matmul(src, w[layer + kind + "m"]))
    return dc.concat(parts, axis=1)


def run_segment(
    w: dict[str, Tensor],
    cfg: ModelConfig,
    x: Tensor,
    n_reg: int,
    n_mem: int,
    past: list[tuple[Tensor, Tensor]] | None,
    mask: np.ndarray,
) -> tuple[Tensor, list[tuple[Tensor, Tensor]]]:
    """Push ``n_reg`` regular then ``n_mem`` memory embeddings through all layers.

    ``x`` is ``(B, T, d)``; ``past`` holds per-layer ``(B, H, P, hd)`` keys and
    values. Returns the final-layer hidden states (before the output norm) and
    the new per-layer KV for the ``T`` tokens.
    """
    B, T, d = x.shape
    H, hd = cfg.n_heads, cfg.head_dim
    h = x
    new_kv = []
    for i in range(cfg.n_layers):
        p = f"L{i}."
        a = dc.layer_norm(h, w[p + "ln1_g"], w[p + "ln1_b"])
        q = _heads(_proj(a, w, p, "wq", n_reg, n_mem), B, T, H, hd)
        k = _heads(_proj(a, w, p, "wk", n_reg, n_mem), B, T, H, hd)
        v = _heads(_proj(a, w, p, "wv", n_reg, n_mem), B, T, H, hd)
        new_kv.append((k, v))
        if past is not None and past[i][0].shape[2]:
            k_all = dc.concat([past[i][0], k], axis=2)
            v_all = dc.concat([past[i][1], v], axis=2)
        else:
            k_all, v_all = k, v
        ctx = attention(q, k_all, v_all, mask)
        ctx = dc.reshape(dc.transpose(ctx, (0, 2, 1, 3)), (B, T, d))
        h = dc.add(h, dc.matmul(ctx, w[p + "wo"]))
        f = dc.layer_norm(h, w[p + "ln2_g"], w[p + "ln2_b"])
        f = dc.gelu(dc.add(dc.matmul(f, w[p + "w1"]), w[p + "b1"]))
        h = dc.add(h, dc.add(dc.matmul(f, w[p + "w2"]), w[p + "b2"]))
    return h, new_kv


def head(w: dict[str, Tensor], h: Tensor) -> Tensor:
    """Final norm and tied output projection."""
    z = dc.layer_norm(h, w["lnf_g"], w["lnf_b"])
    return dc.matmul(z, dc.transpose(w["tok_emb"], (1, 0)))


def embed(w: dict[str, Tensor], cfg: ModelConfig, ids: np.ndarray, positions: np.ndarray) -> Tensor:
    """Token embeddings plus sinusoidal positions; ``ids`` is ``(B, T)``."""
    e = dc.embedding(w["tok_emb"], ids)
    return dc.add(e, Tensor(sinusoid(positions, cfg.d_model)))


def embed_memory(w: dict[str, Tensor], cfg: ModelConfig, B: int, k: int, positions: np.ndarray) -> Tensor:
    e = dc.slice_axis(w["mem_emb"], 0, k, 0)
    e = dc.add(e, Tensor(sinusoid(positions, cfg.d_model)))
    return dc.add(Tensor(np.zeros((B, k, cfg.d_model))), e)


def compact_windows(
    w: dict[str, Tensor],
    cfg: ModelConfig,
    ids: np.ndarray,
    ks: Sequence[int],
    past: list[tuple[Tensor, Tensor]] | None = None,
    start_pos: int = 0,
    want_logits: bool = False,
    storage_precision: bool = False,
):
    """Window-by-window compact formation over ``ids`` (shape ``(B, n)``).

    ``ks[j]`` is the number of memory tokens appended after window ``j``.
    Regular-token KV is dropped once its window is done. Returns
    ``(memory_kv, next_pos, logits)`` where ``logits`` lists the per-window
    regular-token logits when ``want_logits`` is set.

    ``storage_precision`` rounds each window's memory KV to float32 values
    before later windows read it, so the state equals its on-disk image.
    Inference only: rounding has no gradient.
    """
    B, n = ids.shape
    L = cfg.window_l
    n_windows = -(-n // L)
    if len(ks) < n_windows:
        raise ValueError(f"need {n_windows} memory sizes, got {len(ks)}")
    if max(ks[:n_windows]) > cfg.mem_slots:
        raise ValueError("more memory tokens than memory embeddings")
    mem = past
    pos = start_pos
    logits = []
    for j in range(n_windows):
        chunk = ids[:, j * L:(j + 1) * L]
        r, k = chunk.shape[1], ks[j]
        x_reg = embed(w, cfg, chunk, np.arange(pos, pos + r))
        x_mem = embed_memory(w, cfg, B, k, np.arange(pos + r, pos + r + k))
        x = dc.concat([x_reg, x_mem], axis=1)
        P = 0 if mem is None else mem[0][0].shape[2]
        h, kv = run_segment(w, cfg, x, r, k, mem, window_mask(r, k, P))
        if want_logits:
            logits.append(head(w, dc.slice_axis(h, 0, r, 1)))
        fresh = [(dc.slice_axis(kk, r, r + k, 2), dc.slice_axis(vv, r, r + k, 2)) for kk, vv in kv]
        if storage_precision:
            fresh = [(Tensor(_f32(a.data)), Tensor(_f32(b.data))) for a, b in fresh]
        if mem is None:
            mem = fresh
        else:
            mem = [(dc.concat([a, c], axis=2), dc.concat([b, e], axis=2)) for (a, b), (c, e) in zip(mem, fresh)]
        pos += r + k
    return mem, pos, logits


def _f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def regular_block(
    w: dict[str, Tensor],
    cfg: ModelConfig,
    ids: np.ndarray,
    past: list[tuple[Tensor, Tensor]] | None,
    start_pos: int,
) -> tuple[Tensor, list[tuple[Tensor, Tensor]]]:
    """Causal pass of regular tokens that see every cached entry; returns (logits, new KV)."""
    B, T = ids.shape
    P = 0 if past is None else past[0][0].shape[2]
    x = embed(w, cfg, ids, np.arange(start_pos, start_pos + T))
    h, kv = run_segment(w, cfg, x, T, 0, past, causal_mask(T, P))
    return head(w, h), kv


# --- public inference API -------------------------------------------------

def _check_tokens(tokens, cfg: ModelConfig) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise ValueError("empty token sequence")
    bad = ids[(ids < 0) | (ids >= cfg.vocab_size)]
    if bad.size:
        raise ValueError(f"unknown token id {int(bad[0])} (vocab size {cfg.vocab_size})")
    return ids


def _to_cache(kv, n_memory: int, next_pos: int, fp: str) -> KVCache:
    return KVCache(
        keys=[k.data[0].copy() for k, _ in kv],
        values=[v.data[0].copy() for _, v in kv],
        next_pos=next_pos,
        params_fp=fp,
        n_memory=n_memory,
    )


def _from_cache(cache: KVCache) -> list[tuple[Tensor, Tensor]]:
    return [(Tensor(k[None]), Tensor(v[None])) for k, v in zip(cache.keys, cache.values)]


def light_prefill(tokens, params: Parameters, block: int = PREFILL_BLOCK) -> tuple[np.ndarray, KVCache]:
    cfg = params.config
    ids = _check_tokens(tokens, cfg)
    if ids.size > cfg.max_seq:
        raise CapacityError(f"{ids.size} tokens exceed the native context of {cfg.max_seq}")
    w = params.tensors()
    past = None
    out = []
    with dc.no_record():
        for s in range(0, ids.size, block):
            logits, kv = regular_block(w, cfg, ids[None, s:s + block], past, s)
            out.append(logits.data[0])
            past = kv if past is None else [
                (Tensor(np.concatenate([a.data, c.data], axis=2)), Tensor(np.concatenate([b.data, e.data], axis=2)))
                for (a, b), (c, e) in zip(past, kv)
            ]
    return np.concatenate(out, axis=0), _to_cache(past, 0, int(ids.size), params.fingerprint)


def compact_prefill(
    tokens,
    params: Parameters,
    mem_k: int | None = None,
    resume: MemoryState | None = None,
    want_logits: bool = True,
) -> tuple[np.ndarray | None, MemoryState]:
    cfg = params.config
    if not cfg.memory:
        raise ValueError("compact mode needs memory projections")
    ids = _check_tokens(tokens, cfg)
    k = cfg.mem_k if mem_k is None else mem_k
    fp = params.fingerprint
    past, start, n_before, seed_fp = None, 0, 0, None
    if resume is not None:
        if resume.params_fp != fp:
            raise CompatibilityError(f"memory built with params {resume.params_fp}, got {fp}")
        if resume.n_raw_tokens % cfg.window_l:
            raise ValueError("can only resume from memory that ends on a window boundary")
        if resume.mem_k != k:
            raise ValueError("resumed memory uses a different compression ratio")
        past = _from_cache(resume.as_cache())
        start, n_before, seed_fp = resume.next_pos, resume.n_raw_tokens, resume.context_fp
    w = params.tensors()
    n_windows = -(-ids.size // cfg.window_l)
    with dc.no_record():
        mem, pos, logits = compact_windows(
            w, cfg, ids[None], [k] * n_windows, past, start, want_logits, storage_precision=True
        )
    state = MemoryState(
        mem_keys=[kk.data[0].copy() for kk, _ in mem],
        mem_values=[vv.data[0].copy() for _, vv in mem],
        window_l=cfg.window_l,
        mem_k=k,
        n_raw_tokens=n_before + int(ids.size),
        next_pos=pos,
        context_fp=fnv1a64(ids, seed_fp),
        params_fp=fp,
    )
    out = np.concatenate([lg.data[0] for lg in logits], axis=0) if want_logits else None
    return out, state


def forward_prefill(tokens, params: Parameters, mode: str = "light"):
    """Prefill ``tokens``; ``light`` returns the full KVCache, ``compact`` a MemoryState."""
    if mode == "light":
        return light_prefill(tokens, params)
    if mode == "compact":
        return compact_prefill(tokens, params)
    raise ValueError(f"unknown prefill mode {mode!r}")


def _as_cache(cache: KVCache | MemoryState) -> KVCache:
    return cache.as_cache() if isinstance(cache, MemoryState) else cache


def extend(tokens, cache: KVCache | MemoryState, params: Parameters) -> tuple[np.ndarray, KVCache]:
    """Append regular tokens to a working cache; returns logits for every new token."""
    cfg = params.config
    cache = _as_cache(cache)
    if cache.params_fp != params.fingerprint:
        raise CompatibilityError(f"cache built with params {cache.params_fp}, got {params.fingerprint}")
    ids = _check_tokens(tokens, cfg)
    w = params.tensors()
    with dc.no_record():
        logits, kv = regular_block(w, cfg, ids[None], _from_cache(cache) if len(cache) else None, cache.next_pos)
    keys = [np.concatenate([a, k.data[0]], axis=1) for a, (k, _) in zip(cache.keys, kv)]
    vals = [np.concatenate([b, v.data[0]], axis=1) for b, (_, v) in zip(cache.values, kv)]
    return logits.data[0], KVCache(keys, vals, cache.next_pos + int(ids.size), cache.params_fp, cache.n_memory)


def forward_decode(next_token: int, cache: KVCache | MemoryState, params: Parameters) -> tuple[np.ndarray, KVCache]:
    logits, cache = extend([next_token], cache, params)
    return logits[-1], cache


def generate(
    prompt: Sequence[int],
    cache: KVCache | MemoryState | None,
    params: Parameters,
    max_new: int,
    stop_token: int | None = None,
) -> list[int]:
    """Greedy decoding after ``prompt``; argmax ties go to the lowest token id."""
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    if cache is None:
        logits, cache = light_prefill(prompt, params)
        last = logits[-1]
    else:
        logits, cache = extend(prompt, cache, params)
        last = logits[-1]
    out: list[int] = []
    while True:
        tok = int(np.argmax(last))
        out.append(tok)
        if tok == stop_token or len(out) >= max_new:
            return out
        last, cache = forward_decode(tok, cache, params)


def sequence_logprob(
    w: dict[str, Tensor],
    cfg: ModelConfig,
    mem: list[tuple[Tensor, Tensor]] | None,
    start_pos: int,
    prompt: Sequence[int],
    target: Sequence[int],
) -> Tensor:
    """Sum of log P(target | cache, prompt) under teacher forcing (batch of 1)."""
    ids = np.asarray(list(prompt) + list(target), dtype=np.int64)[None]
    logits, _ = regular_block(w, cfg, ids[:, :-1], mem, start_pos)
    lp = dc.log_softmax(dc.slice_axis(logits, len(prompt) - 1, ids.shape[1] - 1, 1))
    return dc.summed(dc.pick(lp, np.asarray(target, dtype=np.int64)[None]))


# --- checkpoint -------------------------------------------------------------

_CFG_FIELDS = ("vocab_size", "d_model", "n_layers", "n_heads", "ffn_mult", "window_l", "mem_k", "max_seq", "memory")


def save_checkpoint(params: Parameters, path, vocab: Vocab | None = None) -> None:
    """``MRCK`` | u32 version | 9 x u32 config | f32 matrices in declaration order | u32 n + vocab utf-8."""
    cfg = params.config
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<I", CKPT_VERSION)
    buf += struct.pack("<9I", *(int(getattr(cfg, f)) for f in _CFG_FIELDS))
    for name, _ in _layout(cfg):
        buf += params.arrays[name].astype("<f4").tobytes()
    blob = vocab.to_lines().encode("utf-8") if vocab is not None else b""
    buf += struct.pack("<I", len(blob)) + blob
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[Parameters, Vocab | None]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {data[:4]!r})")
    if len(data) < 8 + 36:
        raise FormatError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    vals = struct.unpack_from("<9I", data, 8)
    cfg = ModelConfig(**{f: (bool(v) if f == "memory" else int(v)) for f, v in zip(_CFG_FIELDS, vals)})
    off = 44
    arrays = {}
    for name, shape in _layout(cfg):
        n = int(np.prod(shape))
        if off + 4 * n > len(data):
            raise FormatError(f"{path}: truncated at {name}")
        arrays[name] = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 4 * n
    if off + 4 > len(data):
        raise FormatError(f"{path}: truncated vocabulary block")
    (nb,) = struct.unpack_from("<I", data, off)
    off += 4
    if off + nb != len(data):
        raise FormatError(f"{path}: vocabulary block length mismatch")
    vocab = Vocab.from_lines(data[off:off + nb].decode("utf-8")) if nb else None
    return Parameters(cfg, arrays), vocab


def round_to_f32(params: Parameters) -> Parameters:
    """Parameters as they will read back from a checkpoint."""
    return Parameters(params.config, {n: a.astype(np.float32).astype(np.float64) for n, a in params.arrays.items()})
