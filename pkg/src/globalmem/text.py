"""Word-level tokenization shared by the retriever, the metrics and the model vocabulary."""
from __future__ import annotations

import re
from typing import Iterable, Sequence

_WORD = re.compile(r"[^\W_]+")

BOS, EOS, SEP, NL, CLUE, ANS, UNK = "<bos>", "<eos>", "<sep>", "<nl>", "<clue>", "<ans>", "<unk>"
SPECIALS = (BOS, EOS, SEP, NL, CLUE, ANS, UNK)


def terms(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    return _WORD.findall(text.lower())


class Vocab:
    """Bidirectional word <-> id map; ids 0..len(SPECIALS)-1 are reserved specials."""

    def __init__(self, words: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            self.add(w)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocab":
        seen: dict[str, None] = {}
        for t in texts:
            for w in terms(t):
                seen.setdefault(w, None)
        return cls(sorted(seen))

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def __getitem__(self, word: str) -> int:
        return self.stoi[word]

    @property
    def eos(self) -> int:
        return self.stoi[EOS]

    def encode(self, text: str) -> list[int]:
        unk = self.stoi[UNK]
        return [self.stoi.get(w, unk) for w in terms(text)]

    def encode_lines(self, lines: Sequence[str]) -> list[int]:
        """Encode lines separated by the newline special (the clue-list format)."""
        out: list[int] = []
        for i, line in enumerate(lines):
            if i:
                out.append(self.stoi[NL])
            out += self.encode(line)
        return out

    def decode(self, ids: Sequence[int]) -> str:
        """Join words with spaces; the newline special becomes a line break and EOS ends the text."""
        out: list[str] = []
        for i in ids:
            w = self.itos[int(i)]
            if w == EOS:
                break
            if w == NL:
                out.append("\n")
            elif w in SPECIALS:
                continue
            else:
                out.append(w)
        text = " ".join(out)
        return text.replace(" \n ", "\n").replace(" \n", "\n").replace("\n ", "\n")

    def to_lines(self) -> str:
        return "\n".join(self.itos)

    @classmethod
    def from_lines(cls, blob: str) -> "Vocab":
        words = blob.split("\n")
        if tuple(words[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary block does not start with the reserved specials")
        return cls(words[len(SPECIALS):])
