"""Memory-model training: pretraining, SFT, RLGF, and the RLGF pair builder.

Memory-side parameters (memory projections and memory-token embeddings) are
the only ones updated in the three memory stages; the ``generator`` stage is
the opposite and fits the base weights used for answer generation.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .model import (
    Parameters,
    compact_windows,
    regular_block,
    save_checkpoint,
    sequence_logprob,
)

log = logging.getLogger(__name__)

STAGES = ("pretrain", "sft", "rlgf", "generator")
MAX_ENUM_CLUES = 10


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    stage: str
    lr: float
    batch_size: int = 8
    epochs: int = 1
    betas: tuple[int, ...] = (4, 8, 16, 32, 64)
    window_l: int | None = None
    seed: int = 0
    momentum: float = 0.9
    steps: int | None = None
    beta: int = 4
    clip: float | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")


def default_config(stage: str, **overrides) -> TrainConfig:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    base = {
        "pretrain": dict(lr=5e-5, batch_size=8, epochs=1),
        "sft": dict(lr=1e-5, batch_size=8, epochs=2),
        "rlgf": dict(lr=1e-5, batch_size=8, epochs=1),
        "generator": dict(lr=1e-3, batch_size=8, epochs=1),
    }[stage]
    base.update(overrides)
    return TrainConfig(stage=stage, **base)


@dataclass
class SftSample:
    context: list[int]
    prompt: list[int]
    output: list[int]

    def __post_init__(self):
        if not self.output:
            raise ValueError("SFT sample needs a non-empty gold output")


@dataclass
class RlgfPair:
    context: list[int]
    prompt: list[int]
    preferred: list[int]
    rejected: list[int]
    reward_preferred: float
    reward_rejected: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.reward_preferred > self.reward_rejected:
            raise ValueError("preferred reward must be strictly higher than rejected reward")


@dataclass
class GenSample:
    prompt: list[int]
    output: list[int]


# --- losses -----------------------------------------------------------------

def sample_ks(cfg, n_tokens: int, betas: Sequence[int], rng: np.random.Generator) -> list[int]:
    """One memory size per window, from a compression ratio drawn uniformly per window."""
    usable = [b for b in betas if b in cfg.betas]
    if not usable:
        raise ValueError(f"no usable compression ratio among {tuple(betas)} for window {cfg.window_l}")
    n_windows = -(-n_tokens // cfg.window_l)
    return [cfg.window_l // int(rng.choice(usable)) for _ in range(n_windows)]


def _memory_tensors(params: Parameters):
    if not params.config.memory:
        raise ValueError("memory training needs a memory-enabled model")
    return params.tensors(params.memory_names)


def loss_pretrain(batch, params: Parameters, ks: Sequence[int] | None = None, w=None) -> dc.Tensor:
    """Mean next-token NLL where each token sees accumulated memory plus its window prefix."""
    ids = np.asarray(batch, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.shape[1] < 2:
        raise ValueError("pretraining sequences need at least 2 tokens")
    cfg = params.config
    w = w or _memory_tensors(params)
    if ks is None:
        ks = [cfg.mem_k] * (-(-ids.shape[1] // cfg.window_l))
    _, _, logits = compact_windows(w, cfg, ids, ks, want_logits=True)
    lg = dc.concat(logits, axis=1)
    return dc.nll(dc.slice_axis(lg, 0, ids.shape[1] - 1, 1), ids[:, 1:])


def _formed(w, cfg, contexts: Sequence[Sequence[int]], k: int):
    """Memory KV per context, batching contexts of equal length."""
    out: dict[int, tuple] = {}
    groups: dict[int, list[int]] = {}
    for i, c in enumerate(contexts):
        groups.setdefault(len(c), []).append(i)
    for n, members in groups.items():
        ids = np.asarray([contexts[i] for i in members], dtype=np.int64)
        mem, pos, _ = compact_windows(w, cfg, ids, [k] * (-(-n // cfg.window_l)))
        for row, i in enumerate(members):
            sl = [(dc.slice_axis(a, row, row + 1, 0), dc.slice_axis(b, row, row + 1, 0)) for a, b in mem]
            out[i] = (sl, pos)
    return [out[i] for i in range(len(contexts))]


def loss_sft(samples: SftSample | Sequence[SftSample], params: Parameters, beta: int = 4, w=None) -> dc.Tensor:
    """Token-mean cross-entropy over gold clue tokens given (memory of the context, prompt)."""
    if isinstance(samples, SftSample):
        samples = [samples]
    cfg = params.config
    w = w or _memory_tensors(params)
    k = cfg.k_for(beta)
    formed = _formed(w, cfg, [s.context for s in samples], k)
    total = None
    n_tok = 0
    for s, (mem, pos) in zip(samples, formed):
        lp = sequence_logprob(w, cfg, mem, pos, s.prompt, s.output)
        total = lp if total is None else dc.add(total, lp)
        n_tok += len(s.output)
    return dc.scale(total, -1.0 / n_tok)


def loss_rlgf(r_pos, r_neg) -> float:
    """Pairwise hinge ``sum max(0, 1 - R+ + R-)`` over reward pairs."""
    rp = np.atleast_1d(np.asarray(r_pos, dtype=np.float64))
    rn = np.atleast_1d(np.asarray(r_neg, dtype=np.float64))
    if rp.shape != rn.shape:
        raise ValueError("reward arrays differ in length")
    if not (np.all(np.isfinite(rp)) and np.all(np.isfinite(rn))):
        raise ValueError("rewards must be finite")
    return float(np.maximum(0.0, 1.0 - rp + rn).sum())


def loss_rlgf_grad(r_pos, r_neg) -> tuple[np.ndarray, np.ndarray]:
    """Sub-gradient of :func:`loss_rlgf` w.r.t. (R+, R-); zero where the margin holds."""
    rp = np.atleast_1d(np.asarray(r_pos, dtype=np.float64))
    rn = np.atleast_1d(np.asarray(r_neg, dtype=np.float64))
    active = (1.0 - rp + rn) > 0
    return -active.astype(float), active.astype(float)


def normalized_logprob(w, cfg, mem, pos, prompt, target) -> dc.Tensor:
    return dc.scale(sequence_logprob(w, cfg, mem, pos, prompt, target), 1.0 / len(target))


def loss_rlgf_margin(pairs: Sequence[RlgfPair], params: Parameters, beta: int = 4, w=None) -> dc.Tensor:
    """Hinge on length-normalized log-likelihoods, weighted by each pair's reward gap.

    ``sum (R+ - R-) * max(0, 1 - lp(y+) + lp(y-))`` where ``lp`` is the mean
    token log-probability the memory model assigns to a clue set.
    """
    cfg = params.config
    w = w or _memory_tensors(params)
    formed = _formed(w, cfg, [p.context for p in pairs], cfg.k_for(beta))
    total = None
    for p, (mem, pos) in zip(pairs, formed):
        pos_lp = normalized_logprob(w, cfg, mem, pos, p.prompt, p.preferred)
        neg_lp = normalized_logprob(w, cfg, mem, pos, p.prompt, p.rejected)
        hinge = dc.relu(dc.add(dc.sub(neg_lp, pos_lp), dc.Tensor(1.0)))
        term = dc.scale(hinge, p.reward_preferred - p.reward_rejected)
        total = term if total is None else dc.add(total, term)
    return total


def preference_accuracy(pairs: Sequence[RlgfPair], params: Parameters, beta: int = 4) -> float:
    """Fraction of pairs where the preferred clue set has the higher normalized log-likelihood."""
    if not pairs:
        return 0.0
    w = params.tensors()
    wins = 0
    with dc.no_record():
        formed = _formed(w, params.config, [p.context for p in pairs], params.config.k_for(beta))
        for p, (mem, pos) in zip(pairs, formed):
            a = normalized_logprob(w, params.config, mem, pos, p.prompt, p.preferred).item()
            b = normalized_logprob(w, params.config, mem, pos, p.prompt, p.rejected).item()
            wins += a > b
    return wins / len(pairs)


def loss_generator(samples: Sequence[GenSample], params: Parameters, w=None) -> dc.Tensor:
    """Answer-token cross-entropy for the plain (no memory) model."""
    cfg = params.config
    w = w or params.tensors(params.base_names)
    total = None
    n_tok = 0
    by_len: dict[tuple[int, int], list[GenSample]] = {}
    for s in samples:
        by_len.setdefault((len(s.prompt), len(s.output)), []).append(s)
    for (lp_, lo), group in by_len.items():
        ids = np.asarray([s.prompt + s.output for s in group], dtype=np.int64)
        logits, _ = regular_block(w, cfg, ids[:, :-1], None, 0)
        lp = dc.log_softmax(dc.slice_axis(logits, lp_ - 1, lp_ + lo - 1, 1))
        part = dc.summed(dc.pick(lp, ids[:, lp_:]))
        total = part if total is None else dc.add(total, part)
        n_tok += len(group) * lo
    return dc.scale(total, -1.0 / n_tok)


# --- optimisation -------------------------------------------------------------

def _batches(n: int, batch_size: int, rng: np.random.Generator, steps: int | None, epochs: int):
    produced = 0
    epoch = 0
    while True:
        if steps is None and epoch >= epochs:
            return
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            if steps is not None and produced >= steps:
                return
            yield order[s:s + batch_size]
            produced += 1
        epoch += 1


def train(
    stage: str,
    data: Sequence,
    params: Parameters,
    config: TrainConfig | None = None,
    checkpoint: str | None = None,
    vocab=None,
    on_step: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Momentum-SGD over ``data``; updates ``params`` in place and returns the loss trace."""
    config = config or default_config(stage)
    if config.stage != stage:
        raise ValueError(f"config is for stage {config.stage!r}, not {stage!r}")
    if not data:
        raise ValueError("no training data")
    _check_data(stage, data)
    cfg = params.config
    names = params.base_names if stage == "generator" else params.memory_names
    if not names:
        raise ValueError("nothing to train")
    w = params.tensors(names)
    trainable = [w[n] for n in names]
    velocity = [np.zeros_like(t.data) for t in trainable]
    rng = np.random.default_rng(config.seed)
    betas = config.betas
    trace: list[float] = []
    for step, idx in enumerate(_batches(len(data), config.batch_size, rng, config.steps, config.epochs)):
        batch = [data[i] for i in idx]
        for t in trainable:
            t.grad = None
        try:
            with dc.recording() as tape:
                if stage == "pretrain":
                    ids = np.asarray(batch, dtype=np.int64)
                    loss = loss_pretrain(ids, params, sample_ks(cfg, ids.shape[1], betas, rng), w=w)
                elif stage == "sft":
                    loss = loss_sft(batch, params, beta=config.beta, w=w)
                elif stage == "rlgf":
                    loss = loss_rlgf_margin(batch, params, beta=config.beta, w=w)
                else:
                    loss = loss_generator(batch, params, w=w)
            value = loss.item()
            if not math.isfinite(value):
                raise dc.NumericError("non-finite loss")
            tape.backward(loss)
        except dc.NumericError as exc:
            snapshot = {
                "step": step,
                "recent_losses": trace[-10:],
                "param_norms": {n: float(np.linalg.norm(params.arrays[n])) for n in names},
            }
            raise TrainingAborted(f"numeric failure at step {step}: {exc}", snapshot) from exc
        trace.append(value)
        if config.lr != 0.0:
            grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in trainable]
            if config.clip is not None:
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
                if norm > config.clip:
                    grads = [g * (config.clip / norm) for g in grads]
            with np.errstate(over="ignore", invalid="ignore"):  # overflow is reported just below
                for t, v, g in zip(trainable, velocity, grads):
                    v *= config.momentum
                    v += g
                    t.data -= config.lr * v
            params.touch()
            bad = [n for n, t in zip(names, trainable) if not np.all(np.isfinite(t.data))]
            if bad:
                snapshot = {
                    "step": step,
                    "recent_losses": trace[-10:],
                    "non_finite": bad,
                }
                raise TrainingAborted(f"numeric failure at step {step}: update overflowed {bad[0]}", snapshot)
        if on_step is not None:
            on_step(step, value)
        log.debug("%s step %d loss %.5f", stage, step, value)
    if checkpoint is not None:
        save_checkpoint(params, checkpoint, vocab)
    return trace


def _check_data(stage: str, data: Sequence) -> None:
    first = data[0]
    expected = {"sft": SftSample, "rlgf": RlgfPair, "generator": GenSample}.get(stage)
    if expected is not None and not isinstance(first, expected):
        raise TypeError(f"stage {stage!r} expects {expected.__name__} records, got {type(first).__name__}")
    if stage == "pretrain":
        lengths = {len(x) for x in data}
        if len(lengths) != 1:
            raise ValueError("pretraining sequences must share one length")


def smoothed(trace: Sequence[float], window: int = 10) -> list[float]:
    out = []
    for i in range(len(trace)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(trace[lo:i + 1])))
    return out


# --- RLGF pair construction -------------------------------------------------

@dataclass
class RlgfSource:
    context: str
    query: str
    clues: list[str]
    gold_answer: str


@dataclass
class PairOutcome:
    pair: tuple[tuple[int, ...], tuple[int, ...]] | None
    rewards: dict[tuple[int, ...], float]
    reason: str | None = None
    clue_ids: list[int] = field(default_factory=list)


def clue_subsets(n: int, min_size: int = 3) -> list[tuple[int, ...]]:
    return [c for r in range(min_size, n + 1) for c in itertools.combinations(range(n), r)]


def build_rlgf_pairs(
    sample: RlgfSource,
    pipeline,
    metric: Callable[[str, str], float],
    rng: np.random.Generator | None = None,
) -> PairOutcome:
    """Score every clue subset of size >= 3 end-to-end; best vs worst becomes the pair.

    ``pipeline`` must expose ``index_for(context)``, ``retrieve(queries, index)``
    and ``answer(query, evidence)``.
    """
    clues = list(sample.clues)
    if len(clues) < 5:
        return PairOutcome(None, {}, reason=f"only {len(clues)} clues (need at least 5)")
    keep = list(range(len(clues)))
    if len(clues) > MAX_ENUM_CLUES:
        rng = rng or np.random.default_rng(0)
        keep = sorted(rng.choice(len(clues), size=MAX_ENUM_CLUES, replace=False).tolist())
        clues = [clues[i] for i in keep]
    index = pipeline.index_for(sample.context)
    rewards: dict[tuple[int, ...], float] = {}
    for subset in clue_subsets(len(clues)):
        chosen = [clues[i] for i in subset]
        evidence = pipeline.retrieve(chosen, index, query=sample.query)
        answer = pipeline.answer(sample.query, evidence)
        rewards[subset] = float(metric(answer, sample.gold_answer))
    best = min(rewards, key=lambda s: (-rewards[s], s))
    worst = min(rewards, key=lambda s: (rewards[s], s))
    if rewards[best] == rewards[worst]:
        return PairOutcome(None, rewards, reason="all clue subsets scored equally", clue_ids=keep)
    return PairOutcome((best, worst), rewards, clue_ids=keep)


def pair_from_outcome(sample: RlgfSource, outcome: PairOutcome, pipeline) -> RlgfPair | None:
    """Turn a scored best/worst subset into a training pair over clue-list token sequences."""
    if outcome.pair is None:
        return None
    v = pipeline.vocab
    clues = [sample.clues[i] for i in outcome.clue_ids] if outcome.clue_ids else list(sample.clues)
    best, worst = outcome.pair

    def seq(subset):
        return v.encode_lines([clues[i] for i in subset]) + [v.eos]

    return RlgfPair(
        context=pipeline.context_ids(sample.context),
        prompt=pipeline.clue_prompt(sample.query),
        preferred=seq(best),
        rejected=seq(worst),
        reward_preferred=outcome.rewards[best],
        reward_rejected=outcome.rewards[worst],
        meta={"preferred": best, "rejected": worst},
    )
