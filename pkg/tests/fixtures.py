"""Hand-built fixtures shared by module and acceptance tests."""
import numpy as np

from globalmem.model import ModelConfig, init_params
from globalmem.pipeline import Pipeline, PipelineConfig
from globalmem.text import Vocab
from globalmem.training import RlgfSource

TOPICS = ["amber", "basalt", "cobalt", "dune", "ember", "fjord"]
FILLER = ["lorem", "ipsum", "dolor", "sit", "amet", "elit", "sed", "magna"]
GOLD_ANSWER = "sustique"


def rlgf_context(gold: int, rng: np.random.Generator) -> str:
    """Six 16-word chunks; chunk i names TOPICS[i] once, the gold chunk three times."""
    blocks = []
    for i, topic in enumerate(TOPICS):
        n_topic = 3 if i == gold else 1
        words = [topic] * n_topic + [FILLER[j] for j in rng.integers(len(FILLER), size=15 - n_topic)]
        words = [words[j] for j in rng.permutation(len(words))]
        blocks.append(" ".join(words + ["end."]))
    return " ".join(blocks)


def rlgf_source(seed: int, gold_clue: int) -> tuple[RlgfSource, int]:
    """Five clues, each naming a different chunk's topic; only clue ``gold_clue`` names the gold chunk."""
    rng = np.random.default_rng(seed)
    gold = int(rng.integers(len(TOPICS)))
    others = [t for i, t in enumerate(TOPICS) if i != gold]
    picked = [others[i] for i in rng.permutation(len(others))[:4]]
    clues = picked[:gold_clue] + [TOPICS[gold]] + picked[gold_clue:]
    return RlgfSource(rlgf_context(gold, rng), "which relic was hidden", clues, GOLD_ANSWER), gold


def stub_answerer(gold_chunk: int):
    """Answers correctly exactly when the gold chunk is among the evidence."""
    def answer(query, evidence):
        return GOLD_ANSWER if gold_chunk in evidence.chunk_ids else "unknown"
    return answer


def rlgf_vocab() -> Vocab:
    return Vocab(TOPICS + FILLER + [GOLD_ANSWER, "end", "unknown", "which", "relic", "was", "hidden"])


def rlgf_pipeline(gold_chunk: int, params=None, vocab=None) -> Pipeline:
    vocab = vocab or rlgf_vocab()
    if params is None:
        cfg = ModelConfig(vocab_size=len(vocab), d_model=16, n_layers=2, n_heads=2, window_l=16, mem_k=4, max_seq=128)
        params = init_params(cfg, seed=0, init_std=0.3)
    return Pipeline(params, vocab, PipelineConfig(chunk_max=16, beta=4), answerer=stub_answerer(gold_chunk))
