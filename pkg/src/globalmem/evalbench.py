"""Answer metrics, synthetic indirection tasks, and the efficiency bench."""
from __future__ import annotations

import json
import statistics
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .retrieval import build_index, chunk_context, retrieve
from .text import terms

# --- metrics ------------------------------------------------------------------


def _prf(overlap: int, n_pred: int, n_gold: int) -> float:
    if overlap == 0:
        return 0.0
    p, r = overlap / n_pred, overlap / n_gold
    return 2 * p * r / (p + r)


def token_f1(prediction: str, gold: str) -> float:
    pred, ref = terms(prediction), terms(gold)
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    overlap = sum((Counter(pred) & Counter(ref)).values())
    return _prf(overlap, len(pred), len(ref))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(prediction: str, gold: str) -> float:
    """LCS F-measure with precision and recall weighted equally."""
    pred, ref = terms(prediction), terms(gold)
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    return _prf(lcs_length(pred, ref), len(pred), len(ref))


# --- synthetic indirection tasks ----------------------------------------------

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "th", "qu", "br", "dr", "gl", "st")
_NUCLEI = ("a", "e", "i", "o", "u", "ai", "ou", "ei")

QUERY_TEMPLATES = (
    ("which relic was forged by {alias}", "relic", "forged"),
    ("what charm did {alias} bury", "charm", "bury"),
    ("which banner was stolen from {alias}", "banner", "stolen"),
    ("what riddle was told about {alias}", "riddle", "told"),
)
GOLD_TEMPLATES = (
    "{canonical} carved the {answer}.",
    "{canonical} once guarded the {answer}.",
)
GOLD_EXTRA = "{canonical} lived beyond the hills."
NO_ANSWER = "unknown"


@dataclass
class World:
    """Fixed entity catalogue: each canonical name has exactly one alias."""

    canonical: list[str]
    aliases: list[str]
    answers: list[str]
    filler: list[str]

    @property
    def alias_map(self) -> dict[str, str]:
        return dict(zip(self.aliases, self.canonical))

    def words(self) -> list[str]:
        fixed: list[str] = [NO_ANSWER]
        for tpl in QUERY_TEMPLATES:
            fixed += terms(tpl[0].format(alias=""))
        for tpl in GOLD_TEMPLATES + (GOLD_EXTRA,):
            fixed += terms(tpl.format(canonical="", answer=""))
        return sorted(set(self.canonical + self.aliases + self.answers + self.filler + fixed))


def make_world(seed: int = 0, n_entities: int = 24, n_answers: int = 24, n_filler: int = 64) -> World:
    rng = np.random.default_rng(seed)
    reserved = {NO_ANSWER}
    for tpl in QUERY_TEMPLATES:
        reserved |= set(terms(tpl[0].format(alias="")))
    for tpl in GOLD_TEMPLATES + (GOLD_EXTRA,):
        reserved |= set(terms(tpl.format(canonical="", answer="")))
    seen: set[str] = set(reserved)
    pool: list[str] = []
    need = 2 * n_entities + n_answers + n_filler
    while len(pool) < need:
        n_syl = int(rng.integers(2, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _NUCLEI[rng.integers(len(_NUCLEI))] for _ in range(n_syl))
        if w not in seen:
            seen.add(w)
            pool.append(w)
    a, b, c = n_entities, 2 * n_entities, 2 * n_entities + n_answers
    return World(canonical=pool[:a], aliases=pool[a:b], answers=pool[b:c], filler=pool[c:])


@dataclass
class QAPair:
    query: str
    answer: str
    alias: str
    canonical: str
    gold_chunk_ids: list[int]


@dataclass
class SyntheticTask:
    context: str
    alias_map: dict[str, str]
    qa: list[QAPair]
    seed: int
    chunk_max: int
    query_only_miss: list[bool] = field(default_factory=list)

    @property
    def gold_chunk_ids(self) -> list[list[int]]:
        return [q.gold_chunk_ids for q in self.qa]

    def to_record(self) -> dict:
        return {
            "context": self.context,
            "queries": [q.query for q in self.qa],
            "gold_answers": [q.answer for q in self.qa],
            "clues": [[q.canonical] for q in self.qa],
            "gold_chunk_ids": self.gold_chunk_ids,
            "alias_map": self.alias_map,
            "seed": self.seed,
            "chunk_max": self.chunk_max,
        }


def _sentence(words: list[str]) -> list[str]:
    out = list(words)
    out[-1] = out[-1].rstrip(".") + "."
    return out


def _block(required: list[list[str]], size: int, filler: list[str], rng: np.random.Generator) -> list[str]:
    sentences = [_sentence(s) for s in required]
    rem = size - sum(len(s) for s in sentences)
    if rem < 0:
        raise ValueError("chunk too small for the required sentences")
    while rem > 0:
        n = rem if rem <= 8 else int(rng.integers(3, min(8, rem - 3) + 1))
        sentences.append(_sentence([filler[i] for i in rng.integers(len(filler), size=n)]))
        rem -= n
    order = rng.permutation(len(sentences))
    return [w for i in order for w in sentences[i]]


def _one_task(world: World, seed: int, rng: np.random.Generator, n_blocks: int, chunk_max: int) -> SyntheticTask:
    e = int(rng.integers(len(world.canonical)))
    alias, canonical = world.aliases[e], world.canonical[e]
    answer = world.answers[int(rng.integers(len(world.answers)))]
    tpl, *qwords = QUERY_TEMPLATES[int(rng.integers(len(QUERY_TEMPLATES)))]
    query = tpl.format(alias=alias)
    gold_tpl = GOLD_TEMPLATES[int(rng.integers(len(GOLD_TEMPLATES)))]
    others = [f for f in world.filler]
    n_distract = max(3, (n_blocks - 1) // 2)
    kinds = ["gold"] + ["distract"] * n_distract + ["filler"] * (n_blocks - 1 - n_distract)
    kinds = [kinds[i] for i in rng.permutation(len(kinds))]
    blocks: list[list[str]] = []
    gold_block = -1
    for j, kind in enumerate(kinds):
        if kind == "gold":
            req = [gold_tpl.format(canonical=canonical, answer=answer).split(), GOLD_EXTRA.format(canonical=canonical).split()]
            gold_block = j
        elif kind == "distract":
            qw = qwords[len(blocks) % len(qwords)]
            f1, f2 = (others[i] for i in rng.integers(len(others), size=2))
            req = [[alias, qw, f1, f2]]
        else:
            req = []
        blocks.append(_block(req, chunk_max, others, rng))
    context = " ".join(w for b in blocks for w in b)
    return SyntheticTask(
        context=context,
        alias_map={alias: canonical},
        qa=[QAPair(query=query, answer=answer, alias=alias, canonical=canonical, gold_chunk_ids=[gold_block])],
        seed=seed,
        chunk_max=chunk_max,
    )


def check_task(task: SyntheticTask, hits: int = 3) -> tuple[bool, bool]:
    """(query-only retrieval misses gold in top ``hits``, canonical-name clue ranks gold first)."""
    index = build_index(chunk_context(task.context, task.chunk_max))
    qa = task.qa[0]
    gold = set(qa.gold_chunk_ids)
    miss = not (set(retrieve([qa.query], index, hits).chunk_ids) & gold)
    top = retrieve([qa.canonical, qa.query], index, hits).chunk_ids
    return miss, bool(top) and top[0] in gold


def gen_indirection_tasks(
    seed: int,
    n_docs: int,
    doc_len: int,
    chunk_max: int = 16,
    world: World | None = None,
    hits: int = 3,
    max_attempts: int = 50,
) -> list[SyntheticTask]:
    """Deterministic alias-indirection QA tasks.

    Each context has one gold chunk naming the entity by its canonical name
    only, and several distractor chunks repeating the alias and the query's
    wording. A task is regenerated until query-only retrieval misses the gold
    chunk and the canonical name alone retrieves it first.
    """
    if doc_len < 4 * chunk_max:
        raise ValueError("doc_len must be at least 4 * chunk_max")
    world = world or make_world()
    n_blocks = doc_len // chunk_max
    rng = np.random.default_rng(seed)
    tasks = []
    for _ in range(n_docs):
        for _attempt in range(max_attempts):
            task = _one_task(world, seed, rng, n_blocks, chunk_max)
            qa = task.qa[0]
            gold_text = chunk_context(task.context, chunk_max)[qa.gold_chunk_ids[0]].text
            if set(terms(qa.query)) & set(terms(gold_text)) or qa.canonical in terms(qa.query):
                continue
            miss, solvable = check_task(task, hits)
            if miss and solvable:
                task.query_only_miss = [miss]
                break
        else:
            raise RuntimeError("could not generate a task satisfying the retrieval constraints")
        tasks.append(task)
    return tasks


def save_tasks(tasks: Sequence[SyntheticTask], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in tasks:
            f.write(json.dumps(t.to_record()) + "\n")


# --- efficiency -------------------------------------------------------------------


@dataclass
class EfficiencyRow:
    n_tokens: int
    mode: str
    indexing_s: float
    retrieval_s: float
    cache_bytes: int


@dataclass
class EfficiencyReport:
    rows: list[EfficiencyRow]

    def by_mode(self, mode: str) -> list[EfficiencyRow]:
        return [r for r in self.rows if r.mode == mode]

    def records(self) -> list[dict]:
        return [asdict(r) for r in self.rows]

    def table(self) -> str:
        head = f"{'tokens':>8}  {'mode':<13}{'index_ms':>10}{'retrieve_ms':>13}{'cache_bytes':>13}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r.n_tokens:>8}  {r.mode:<13}{r.indexing_s * 1e3:>10.2f}{r.retrieval_s * 1e3:>13.2f}{r.cache_bytes:>13}"
            )
        return "\n".join(lines)


def _median_time(fn, repeats: int):
    times, out = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def bench_efficiency(context_lengths: Sequence[int], pipeline, query: str = "what happened", repeats: int = 3,
                     seed: int = 0) -> EfficiencyReport:
    """Indexing time, retrieval time and cache bytes for each mode at each context length.

    Modes: ``memorag`` (compact memory formation + clue generation + lookup),
    ``standard_rag`` (chunk/index + lookup) and ``full`` (light full-KV prefill,
    only where the context fits the native window).
    """
    from .memory import light_memorize, payload_bytes

    if list(context_lengths) != sorted(context_lengths):
        raise ValueError("context lengths must be ascending")
    vocab = pipeline.vocab
    words = [w for w in vocab.itos if w.isalnum()] or ["token"]
    rng = np.random.default_rng(seed)
    rows: list[EfficiencyRow] = []
    for n in context_lengths:
        text_words = [words[i] for i in rng.integers(len(words), size=n)]
        for i in range(9, n, 10):
            text_words[i] += "."
        context = " ".join(text_words)
        ids = vocab.encode(context)

        t_idx, index = _median_time(lambda: pipeline.index_for(context), repeats)
        t_ret, _ = _median_time(lambda: pipeline.retrieve([], index, query=query), repeats)
        rows.append(EfficiencyRow(n, "standard_rag", t_idx, t_ret, 0))

        t_mem, mem = _median_time(lambda: pipeline.memorize(context, count=False), repeats)

        def clue_and_lookup():
            clues = pipeline.generate_clues(query, mem)
            return pipeline.retrieve(clues.clue_strings, index, query=query)

        t_clue, _ = _median_time(clue_and_lookup, repeats)
        rows.append(EfficiencyRow(n, "memorag", t_mem + t_idx, t_clue, payload_bytes(mem)))

        if len(ids) <= pipeline.params.config.max_seq:
            t_full, light = _median_time(lambda: light_memorize(ids, pipeline.params), repeats)
            rows.append(EfficiencyRow(n, "full", t_full, 0.0, payload_bytes(light)))
    return EfficiencyReport(rows)


# --- desk-scale clue-advantage study ------------------------------------------------


@dataclass
class ModeScore:
    mode: str
    n: int
    hit_at_k: float
    token_f1: float
    rouge_l: float
    clue_recall: float | None = None

    def row(self) -> str:
        cr = "-" if self.clue_recall is None else f"{self.clue_recall:.3f}"
        return f"{self.mode:<13}{self.n:>6}{self.hit_at_k:>9.3f}{self.token_f1:>9.3f}{self.rouge_l:>9.3f}{cr:>8}"


def score_table(scores: Sequence[ModeScore]) -> str:
    head = f"{'mode':<13}{'n':>6}{'hit@k':>9}{'f1':>9}{'rougeL':>9}{'clue':>8}"
    return "\n".join([head, "-" * len(head)] + [s.row() for s in scores])


def evaluate_modes(pipeline, records: Sequence[dict], modes: Sequence[str]) -> list[ModeScore]:
    """Score each mode over corpus records.

    ``gold_chunk_ids`` and ``clues`` are optional per record; hit@k and clue
    recall are computed only over queries that carry them.
    """
    out = []
    for mode in modes:
        hits = f1 = rl = 0.0
        n = n_hit = n_clue = clue_ok = 0
        for rec in records:
            queries = rec["queries"]
            results = pipeline.run(queries, rec["context"], mode)
            golds = rec.get("gold_answers") or [None] * len(queries)
            chunk_ids = rec.get("gold_chunk_ids") or [None] * len(queries)
            clue_sets = rec.get("clues") or [None] * len(queries)
            for r, gold, gids, cl in zip(results, golds, chunk_ids, clue_sets):
                n += 1
                if gold is not None:
                    f1 += token_f1(r.answer, gold)
                    rl += rouge_l(r.answer, gold)
                if gids is not None and r.evidence is not None:
                    n_hit += 1
                    hits += bool(set(r.evidence.chunk_ids) & set(gids))
                if cl and r.clues is not None:
                    n_clue += 1
                    got = {t for c in r.clues.clue_strings for t in terms(c)}
                    clue_ok += any(set(terms(g)) <= got for g in cl)
        out.append(ModeScore(
            mode=mode,
            n=n,
            hit_at_k=hits / n_hit if n_hit else 0.0,
            token_f1=f1 / n if n else 0.0,
            rouge_l=rl / n if n else 0.0,
            clue_recall=clue_ok / n_clue if n_clue else None,
        ))
    return out


@dataclass
class ToyRecipe:
    """Settings for the small end-to-end model trained on indirection tasks."""

    seed: int = 0
    n_train: int = 200
    doc_len: int = 96
    chunk_max: int = 16
    d_model: int = 32
    init_std: float = 0.1
    window_l: int = 16
    beta: int = 4
    max_seq: int = 128
    generator_steps: int = 3500
    sft_steps: int = 2500
    lr: float = 0.1
    clip: float = 1.0
    batch_size: int = 8


def toy_pipeline(world: World, recipe: ToyRecipe):
    """An untrained pipeline whose vocabulary covers ``world``."""
    from .model import ModelConfig, init_params
    from .pipeline import Pipeline, PipelineConfig
    from .text import Vocab

    vocab = Vocab(world.words())
    cfg = ModelConfig(
        vocab_size=len(vocab), d_model=recipe.d_model, n_layers=2, n_heads=2,
        window_l=recipe.window_l, mem_k=recipe.window_l // recipe.beta, max_seq=recipe.max_seq,
    )
    params = init_params(cfg, seed=recipe.seed, init_std=recipe.init_std)
    pcfg = PipelineConfig(chunk_max=recipe.chunk_max, beta=recipe.beta, clue_max_tokens=4, answer_max_tokens=4)
    return Pipeline(params, vocab, pcfg)


def generator_samples(pipeline, tasks: Sequence[SyntheticTask], rng: np.random.Generator) -> list:
    """Base-model data: answer from 3 chunks (with or without gold) and name the entity from full context."""
    from .text import BOS
    from .training import GenSample

    v = pipeline.vocab
    out = []
    for t in tasks:
        ch = chunk_context(t.context, t.chunk_max)
        for qa in t.qa:
            gold = qa.gold_chunk_ids[0]
            others = [c.chunk_id for c in ch if c.chunk_id != gold]
            for with_gold in (True, False):
                pick = list(rng.choice(others, 2 if with_gold else 3, replace=False)) + ([gold] if with_gold else [])
                prompt, _ = pipeline.answer_prompt(qa.query, "\n".join(ch[i].text for i in sorted(pick)))
                out.append(GenSample(prompt, v.encode(qa.answer if with_gold else NO_ANSWER) + [v.eos]))
            full = [v[BOS]] + pipeline.context_ids(t.context) + pipeline.clue_prompt(qa.query)
            out.append(GenSample(full, v.encode(qa.canonical) + [v.eos]))
    return out


def sft_samples(pipeline, tasks: Sequence[SyntheticTask]) -> list:
    """Memory-side data: from the memory of the context, emit the canonical name."""
    from .training import SftSample

    v = pipeline.vocab
    return [
        SftSample(pipeline.context_ids(t.context), pipeline.clue_prompt(qa.query), v.encode(qa.canonical) + [v.eos])
        for t in tasks for qa in t.qa
    ]


def train_toy(recipe: ToyRecipe | None = None, world: World | None = None, log=None):
    """Train base (answer + entity naming) then memory (clue SFT with the base frozen).

    Returns ``(pipeline, world, traces)``.
    """
    from .training import default_config, train

    recipe = recipe or ToyRecipe()
    world = world or make_world(recipe.seed)
    pipe = toy_pipeline(world, recipe)
    tasks = gen_indirection_tasks(recipe.seed + 1, recipe.n_train, recipe.doc_len, recipe.chunk_max, world)
    rng = np.random.default_rng(recipe.seed)
    common = dict(lr=recipe.lr, batch_size=recipe.batch_size, clip=recipe.clip, seed=recipe.seed)
    gen_trace = train("generator", generator_samples(pipe, tasks, rng), pipe.params,
                      default_config("generator", steps=recipe.generator_steps, **common))
    if log:
        log(f"generator: loss {gen_trace[0]:.3f} -> {np.mean(gen_trace[-10:]):.3f}")
    sft_trace = train("sft", sft_samples(pipe, tasks), pipe.params,
                      default_config("sft", steps=recipe.sft_steps, beta=recipe.beta, **common))
    if log:
        log(f"sft: loss {sft_trace[0]:.3f} -> {np.mean(sft_trace[-10:]):.3f}")
    return pipe, world, {"generator": gen_trace, "sft": sft_trace}
