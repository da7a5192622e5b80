"""Context chunking and lexical retrieval over the chunks."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

from .text import terms

DEFAULT_CHUNK_MAX = 512
DEFAULT_HITS = 3
_TERMINAL = (".", "!", "?")
_CLOSERS = "\"')]}»”’"


@dataclass(frozen=True)
class Chunk:
    chunk_id: int
    token_span: tuple[int, int]
    text: str

    @property
    def n_tokens(self) -> int:
        return self.token_span[1] - self.token_span[0]


def _ends_sentence(word: str) -> bool:
    return word.rstrip(_CLOSERS).endswith(_TERMINAL)


def chunk_context(text: str, chunk_max: int = DEFAULT_CHUNK_MAX) -> list[Chunk]:
    """Split whitespace tokens into ordered, non-overlapping chunks of at most ``chunk_max``.

    A chunk ends at the last sentence-final token inside the window when there
    is one, otherwise it is cut hard at ``chunk_max``.
    """
    if chunk_max < 16:
        raise ValueError("chunk_max must be at least 16")
    words = text.split()
    chunks: list[Chunk] = []
    start = 0
    n = len(words)
    while start < n:
        stop = min(start + chunk_max, n)
        if stop < n:
            for j in range(stop - 1, start - 1, -1):
                if _ends_sentence(words[j]):
                    stop = j + 1
                    break
        chunks.append(Chunk(len(chunks), (start, stop), " ".join(words[start:stop])))
        start = stop
    return chunks


class Scorer(Protocol):
    """Anything that scores every chunk against a query string."""

    chunks: Sequence[Chunk]

    def score(self, query: str) -> list[float]: ...


@dataclass
class Index:
    """BM25 inverted index over chunks."""

    chunks: list[Chunk]
    df: Counter = field(default_factory=Counter)
    tf: list[Counter] = field(default_factory=list)
    lengths: list[int] = field(default_factory=list)
    postings: dict[str, list[int]] = field(default_factory=dict)
    avgdl: float = 0.0
    k1: float = 1.2
    b: float = 0.75

    def idf(self, term: str) -> float:
        n = self.df.get(term, 0)
        N = len(self.chunks)
        return math.log(1.0 + (N - n + 0.5) / (n + 0.5))

    def score(self, query: str) -> list[float]:
        scores = [0.0] * len(self.chunks)
        if not self.chunks:
            return scores
        for t in dict.fromkeys(terms(query)):
            plist = self.postings.get(t)
            if not plist:
                continue
            idf = self.idf(t)
            for cid in plist:
                f = self.tf[cid][t]
                norm = self.k1 * (1.0 - self.b + self.b * self.lengths[cid] / self.avgdl)
                scores[cid] += idf * f * (self.k1 + 1.0) / (f + norm)
        return scores


def build_index(chunks: Iterable[Chunk], k1: float = 1.2, b: float = 0.75) -> Index:
    chunks = list(chunks)
    idx = Index(chunks=chunks, k1=k1, b=b)
    postings: dict[str, list[int]] = {}
    for c in chunks:
        tf = Counter(terms(c.text))
        idx.tf.append(tf)
        idx.lengths.append(sum(tf.values()))
        for t in tf:
            idx.df[t] += 1
            postings.setdefault(t, []).append(c.chunk_id)
    idx.postings = {t: sorted(p) for t, p in postings.items()}
    idx.avgdl = (sum(idx.lengths) / len(chunks)) if chunks else 0.0
    if chunks and idx.avgdl == 0:
        idx.avgdl = 1.0
    return idx


@dataclass
class EvidenceSet:
    hits: list[tuple[int, float]]
    text: str

    @property
    def chunk_ids(self) -> list[int]:
        return [cid for cid, _ in self.hits]

    def __len__(self) -> int:
        return len(self.hits)


def fused_scores(queries: Sequence[str], index: Scorer) -> list[float]:
    """Per-chunk maximum score over all query strings."""
    best = [0.0] * len(index.chunks)
    for q in queries:
        for i, s in enumerate(index.score(q)):
            if s > best[i]:
                best[i] = s
    return best


def retrieve(queries: Sequence[str], index: Scorer, hits: int = DEFAULT_HITS) -> EvidenceSet:
    """Top ``hits`` chunks by max-fused score; evidence text keeps context order."""
    if hits < 1:
        raise ValueError("hits must be >= 1")
    scores = fused_scores(queries, index)
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:hits]
    top = [(index.chunks[i].chunk_id, scores[i]) for i in ranked]
    text = "\n".join(index.chunks[i].text for i in sorted(ranked))
    return EvidenceSet(hits=top, text=text)


def hit_at(evidence: EvidenceSet, gold: Iterable[int], k: int | None = None) -> bool:
    ids = evidence.chunk_ids if k is None else evidence.chunk_ids[:k]
    return bool(set(ids) & set(gold))
