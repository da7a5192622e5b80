"""Memory-guided retrieval pipeline and the standard-RAG / full-context baselines."""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

from . import memory as memlib
from .model import Parameters, generate
from .retrieval import EvidenceSet, Index, build_index, chunk_context, retrieve
from .state import CompatibilityError, MemoryState
from .text import ANS, BOS, CLUE, SEP, Vocab

MODES = ("memorag", "standard_rag", "full_context")


@dataclass
class PipelineConfig:
    hits: int = 3
    chunk_max: int = 512
    beta: int = 4
    clue_max_tokens: int = 16
    answer_max_tokens: int = 16
    memory_suffix: str = ""
    clue_instruction: str = ""
    answer_instruction: str = ""
    include_original_query: bool = True
    workers: int = 1


@dataclass
class Clues:
    query: str
    clue_strings: list[str]
    raw: str
    fallback: bool = False


@dataclass
class TaskResult:
    query: str
    mode: str
    answer: str
    clues: Clues | None = None
    evidence: EvidenceSet | None = None
    timings: dict = field(default_factory=dict)
    low_confidence: bool = False
    truncated: bool = False

    def to_record(self) -> dict:
        rec = {
            "query": self.query,
            "mode": self.mode,
            "answer": self.answer,
            "timings": self.timings,
            "low_confidence": self.low_confidence,
            "truncated": self.truncated,
        }
        if self.clues is not None:
            rec["clues"] = self.clues.clue_strings
        if self.evidence is not None:
            rec["evidence"] = [{"chunk_id": c, "score": s} for c, s in self.evidence.hits]
        return rec


def parse_clues(query: str, raw: str) -> Clues:
    """One clue per non-empty line; the query itself when nothing usable was generated."""
    lines = [s.strip() for s in raw.split("\n")]
    lines = [s for s in lines if s]
    if not lines:
        return Clues(query=query, clue_strings=[query], raw=raw, fallback=True)
    return Clues(query=query, clue_strings=lines, raw=raw)


class Pipeline:
    """Memory model + retriever + generator.

    ``generator`` defaults to ``params`` (the memory model's own base weights).
    ``answerer`` replaces neural answer generation altogether when given.
    """

    def __init__(
        self,
        params: Parameters,
        vocab: Vocab,
        config: PipelineConfig | None = None,
        generator: Parameters | None = None,
        answerer: Callable[[str, EvidenceSet], str] | None = None,
    ):
        self.params = params
        self.vocab = vocab
        self.config = config or PipelineConfig()
        self.generator = generator or params
        self.answerer = answerer
        self.formations = 0

    # -- building blocks ---------------------------------------------------

    def context_ids(self, context: str) -> list[int]:
        text = context + (" " + self.config.memory_suffix if self.config.memory_suffix else "")
        return self.vocab.encode(text)

    def memorize(self, context: str, count: bool = True) -> MemoryState:
        if count:
            self.formations += 1
        return memlib.memorize(self.context_ids(context), self.params, self.config.beta)

    def index_for(self, context: str) -> Index:
        return build_index(chunk_context(context, self.config.chunk_max))

    def clue_prompt(self, query: str) -> list[int]:
        v = self.vocab
        return [v[CLUE]] + v.encode(self.config.clue_instruction) + v.encode(query)

    def answer_prompt(self, query: str, evidence_text: str) -> tuple[list[int], bool]:
        v = self.vocab
        head = [v[BOS]]
        tail = [v[SEP]] + v.encode(self.config.answer_instruction) + v.encode(query) + [v[ANS]]
        ev = v.encode(evidence_text)
        room = self.generator.config.max_seq - len(head) - len(tail) - self.config.answer_max_tokens
        truncated = len(ev) > room
        if truncated:
            ev = ev[:max(room, 0)]
        return head + ev + tail, truncated

    def generate_clues(self, query: str, memory: MemoryState) -> Clues:
        if memory.params_fp != self.params.fingerprint:
            raise CompatibilityError(
                f"memory formed with params {memory.params_fp}, pipeline uses {self.params.fingerprint}"
            )
        out = generate(self.clue_prompt(query), memory, self.params, self.config.clue_max_tokens, self.vocab.eos)
        return parse_clues(query, self.vocab.decode(out))

    def retrieve(self, clues: Sequence[str], index: Index, query: str | None = None) -> EvidenceSet:
        queries = list(clues)
        if query is not None and (self.config.include_original_query or not queries):
            queries.append(query)
        return retrieve(queries, index, self.config.hits)

    def answer(self, query: str, evidence: EvidenceSet | str) -> str:
        text = evidence if isinstance(evidence, str) else evidence.text
        if self.answerer is not None:
            return self.answerer(query, evidence if isinstance(evidence, EvidenceSet) else EvidenceSet([], text))
        prompt, _ = self.answer_prompt(query, text)
        out = generate(prompt, None, self.generator, self.config.answer_max_tokens, self.vocab.eos)
        return self.vocab.decode(out).replace("\n", " ").strip()

    # -- memorize once, then clue -> retrieve -> answer per query ---

    def _one(self, query: str, mode: str, context: str, index: Index | None, memory: MemoryState | None) -> TaskResult:
        t = {}
        if mode == "memorag":
            t0 = time.perf_counter()
            clues = self.generate_clues(query, memory)
            t["clue_s"] = time.perf_counter() - t0
            t0 = time.perf_counter()
            evidence = self.retrieve(clues.clue_strings, index, query=query)
            t["retrieve_s"] = time.perf_counter() - t0
            t0 = time.perf_counter()
            ans = self.answer(query, evidence)
            t["answer_s"] = time.perf_counter() - t0
            return TaskResult(query, mode, ans, clues=clues, evidence=evidence, timings=t,
                              low_confidence=not evidence.text.strip())
        if mode == "standard_rag":
            t0 = time.perf_counter()
            evidence = self.retrieve([], index, query=query)
            t["retrieve_s"] = time.perf_counter() - t0
            t0 = time.perf_counter()
            ans = self.answer(query, evidence)
            t["answer_s"] = time.perf_counter() - t0
            return TaskResult(query, mode, ans, evidence=evidence, timings=t, low_confidence=not evidence.text.strip())
        t0 = time.perf_counter()
        _, truncated = self.answer_prompt(query, context)
        ans = self.answer(query, context)
        t["answer_s"] = time.perf_counter() - t0
        return TaskResult(query, mode, ans, timings=t, truncated=truncated, low_confidence=not context.strip())

    def run(self, queries: Sequence[str], context: str, mode: str = "memorag",
            memory: MemoryState | None = None) -> list[TaskResult]:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        if not queries:
            return []
        timings = {}
        index = None
        if mode in ("memorag", "standard_rag"):
            t0 = time.perf_counter()
            index = self.index_for(context)
            timings["index_s"] = time.perf_counter() - t0
        if mode == "memorag" and memory is None:
            t0 = time.perf_counter()
            memory = self.memorize(context)
            timings["memorize_s"] = time.perf_counter() - t0

        def work(q):
            r = self._one(q, mode, context, index, memory)
            r.timings = {**timings, **r.timings}
            return r

        if self.config.workers > 1:
            with ThreadPoolExecutor(self.config.workers) as pool:
                return list(pool.map(work, queries))
        return [work(q) for q in queries]


def config_dict(cfg: PipelineConfig) -> dict:
    return asdict(cfg)
