"""WordPiece-style subword tokenizer over clinical descriptions."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BudgetExceeded, SizeTooSmall, UnknownId

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
N_SPECIAL = len(SPECIALS)
CONT = "##"
MAX_WORD_CHARS = 100
VISIBLE_ASCII = tuple(chr(i) for i in range(33, 127))

_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def normalize(text: str) -> list[str]:
    """Lowercase and split into words; punctuation marks become their own words."""
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:N_SPECIAL]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        index = {t: i for i, t in enumerate(tokens)}
        if len(index) != len(tokens):
            raise ValueError("vocabulary tokens are not unique")
        self.tokens = tokens
        self.index = index

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for t in self.tokens:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def build_vocab(
    corpus: Iterable[str],
    size: int,
    *,
    max_subword_len: int | None = None,
    ascii_base: bool = True,
) -> Vocabulary:
    """Frequency-ranked subword vocabulary of exactly ``size`` tokens.

    Layout: specials, then single characters in word-initial and ``##``
    continuation form, then multi-character substrings ranked by corpus
    frequency (ties broken lexicographically). Counting is over a multiset of
    words, so corpus order does not matter. If candidates run out before
    ``size`` is reached, ``[unusedN]`` fillers pad the vocabulary.
    """
    words: Counter[str] = Counter()
    for text in corpus:
        words.update(w for w in normalize(text) if len(w) <= MAX_WORD_CHARS)

    chars = {ch for w in words for ch in w}
    if ascii_base:
        chars.update(VISIBLE_ASCII)
    base = sorted(chars) + sorted(CONT + ch for ch in chars)
    if size < N_SPECIAL + len(base):
        raise SizeTooSmall(f"size {size} < {N_SPECIAL} specials + {len(base)} base characters")

    counts: Counter[str] = Counter()
    for w, f in words.items():
        n = len(w)
        top = n if max_subword_len is None else min(n, max_subword_len)
        for i in range(n):
            for length in range(2, top + 1):
                if i + length > n:
                    break
                sub = w[i : i + length]
                counts[sub if i == 0 else CONT + sub] += f

    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    tokens = list(SPECIALS) + base
    need = size - len(tokens)
    tokens.extend(t for t, _ in ranked[:need])
    filler = 0
    while len(tokens) < size:
        tokens.append(f"[unused{filler}]")
        filler += 1
    return Vocabulary(tokens)


def _wordpiece(word: str, vocab: Vocabulary) -> list[int]:
    if len(word) > MAX_WORD_CHARS:
        return [UNK_ID]
    out = []
    start = 0
    while start < len(word):
        end = len(word)
        piece = None
        while end > start:
            sub = word[start:end]
            if start > 0:
                sub = CONT + sub
            if sub in vocab.index:
                piece = vocab.index[sub]
                break
            end -= 1
        if piece is None:
            return [UNK_ID]
        out.append(piece)
        start = end
    return out


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Greedy longest-match-first subword ids; a word that cannot be covered becomes [UNK]."""
    ids: list[int] = []
    for word in normalize(text):
        ids.extend(_wordpiece(word, vocab))
    return ids


@dataclass(frozen=True)
class TokenizedSequence:
    ids: np.ndarray  # int64, length max_tokens
    description_index: np.ndarray  # int64, -1 on specials and padding
    attention_mask: np.ndarray  # int64, 1 on real tokens

    @property
    def length(self) -> int:
        return int(self.attention_mask.sum())


def encode_sequence(
    descriptions: Sequence[str], vocab: Vocabulary, max_tokens: int
) -> TokenizedSequence:
    """``[CLS] tokens(desc_0) ... tokens(desc_k) [SEP]`` padded to ``max_tokens``."""
    ids = [CLS_ID]
    didx = [-1]
    for i, desc in enumerate(descriptions):
        toks = tokenize(desc, vocab)
        ids.extend(toks)
        didx.extend([i] * len(toks))
    ids.append(SEP_ID)
    didx.append(-1)
    n = len(ids)
    if n > max_tokens:
        raise BudgetExceeded(f"{n} tokens exceed budget {max_tokens}")
    pad = max_tokens - n
    return TokenizedSequence(
        ids=np.array(ids + [PAD_ID] * pad, dtype=np.int64),
        description_index=np.array(didx + [-1] * pad, dtype=np.int64),
        attention_mask=np.array([1] * n + [0] * pad, dtype=np.int64),
    )


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    words: list[str] = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise UnknownId(i)
        if i < N_SPECIAL:
            continue
        tok = vocab.tokens[i]
        if tok.startswith(CONT) and words:
            words[-1] += tok[len(CONT) :]
        else:
            words.append(tok)
    return " ".join(words)
