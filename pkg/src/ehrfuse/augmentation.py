"""Clinical masking, comorbidity replication, loss weights and MLM corruption."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyCorpus
from .labeling import TaggedHistory
from .tokenizer import MASK_ID, N_SPECIAL, TokenizedSequence

IGNORE = -100

REMOVE, RETAIN, REPLACE = 0, 1, 2
MLM_MASK, MLM_RANDOM, MLM_KEEP = 0, 1, 2


class MaskMode(str, Enum):
    TRAIN_VAL = "train_val"
    TEST = "test"


def _check_probs(*ps: float) -> None:
    if any(not 0.0 <= p <= 1.0 for p in ps) or abs(sum(ps) - 1.0) > 1e-9:
        raise ValueError(f"probabilities {ps} must lie in [0, 1] and sum to 1")


@dataclass(frozen=True)
class MaskingConfig:
    p_remove: float = 0.80
    p_retain: float = 0.10
    p_replace: float = 0.10
    seed: int = 0

    def __post_init__(self):
        _check_probs(self.p_remove, self.p_retain, self.p_replace)

    @property
    def probs(self) -> tuple[float, float, float]:
        return (self.p_remove, self.p_retain, self.p_replace)


@dataclass(frozen=True)
class MlmConfig:
    p_select: float = 0.15
    p_mask_token: float = 0.80
    p_random: float = 0.10
    p_keep: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_select <= 1.0:
            raise ValueError("p_select must lie in [0, 1]")
        _check_probs(self.p_mask_token, self.p_random, self.p_keep)


def stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def sample_rng(seed: int, patient_id: str, replicate: int = 0, epoch: int = 0) -> np.random.Generator:
    """Counter-style stream keyed on (seed, patient, replicate, epoch)."""
    return np.random.default_rng(
        np.random.SeedSequence([seed & (2**64 - 1), stable_hash(patient_id), replicate, epoch])
    )


def draw_mask_actions(n: int, cfg: MaskingConfig, rng: np.random.Generator) -> np.ndarray:
    """Independent remove/retain/replace draws for ``n`` tagged entries."""
    u = rng.random(n)
    return np.where(u < cfg.p_remove, REMOVE, np.where(u < cfg.p_remove + cfg.p_retain, RETAIN, REPLACE))


def clinical_mask(
    tagged: TaggedHistory,
    phenotypes: str | Iterable[str],
    cfg: MaskingConfig,
    mode: MaskMode,
    rng: np.random.Generator | None = None,
    corpus: Sequence[str] = (),
) -> list[str]:
    """Mask descriptions tagged with any of ``phenotypes``.

    In TRAIN_VAL mode every tagged entry independently draws remove, retain
    or replace (uniform over ``corpus``). In TEST mode tagged entries are
    removed. Untagged entries pass through unchanged and in order.
    """
    targets = {phenotypes} if isinstance(phenotypes, str) else set(phenotypes)
    hits = [bool(t & targets) for t in tagged.tags]
    descs = tagged.descriptions
    if mode is MaskMode.TEST:
        return [d for d, h in zip(descs, hits) if not h]
    if rng is None:
        raise ValueError("TRAIN_VAL masking needs an rng")

    actions = draw_mask_actions(sum(hits), cfg, rng)
    out: list[str] = []
    k = 0
    for d, h in zip(descs, hits):
        if not h:
            out.append(d)
            continue
        a = actions[k]
        k += 1
        if a == RETAIN:
            out.append(d)
        elif a == REPLACE:
            if not corpus:
                raise EmptyCorpus("replacement drawn but the description corpus is empty")
            out.append(corpus[int(rng.integers(len(corpus)))])
    return out


@dataclass(frozen=True)
class Replicate:
    index: int
    phenotype_id: str | None  # phenotype masked in this replicate
    gamma: np.ndarray


def replicate_for_comorbidities(tagged: TaggedHistory) -> list[Replicate]:
    """One replicate per positive label; all-control patients get one with gamma = 0."""
    D = len(tagged.y)
    pos = tagged.positives()
    if not pos:
        return [Replicate(0, None, np.zeros(D, dtype=np.uint8))]
    reps = []
    for j, d in enumerate(pos):
        g = np.zeros(D, dtype=np.uint8)
        g[d] = 1
        reps.append(Replicate(j, tagged.phenotype_ids[d], g))
    return reps


def loss_weights(y, gamma) -> np.ndarray:
    y = np.asarray(y)
    gamma = np.asarray(gamma)
    if y.shape != gamma.shape:
        raise DimensionMismatch(f"y{y.shape} vs gamma{gamma.shape}")
    return (1 - y * (1 - gamma)).astype(np.uint8)


def apply_mlm_actions(
    ids: np.ndarray, positions: np.ndarray, actions: np.ndarray, random_ids: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    corrupted = ids.copy()
    labels = np.full_like(ids, IGNORE)
    labels[positions] = ids[positions]
    m = actions == MLM_MASK
    corrupted[positions[m]] = MASK_ID
    r = actions == MLM_RANDOM
    corrupted[positions[r]] = random_ids[r]
    return corrupted, labels


def mlm_mask(
    tokens: TokenizedSequence | np.ndarray,
    cfg: MlmConfig,
    vocab,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """BERT-style corruption of non-special tokens.

    Returns the corrupted ids and labels holding the original id at selected
    positions and ``IGNORE`` elsewhere.
    """
    vocab_size = vocab if isinstance(vocab, int) else len(vocab)
    ids = tokens.ids if isinstance(tokens, TokenizedSequence) else np.asarray(tokens)
    eligible = np.flatnonzero(ids >= N_SPECIAL)
    chosen = eligible[rng.random(len(eligible)) < cfg.p_select]
    u = rng.random(len(chosen))
    actions = np.where(
        u < cfg.p_mask_token,
        MLM_MASK,
        np.where(u < cfg.p_mask_token + cfg.p_random, MLM_RANDOM, MLM_KEEP),
    )
    random_ids = rng.integers(N_SPECIAL, vocab_size, size=len(chosen))
    return apply_mlm_actions(ids, chosen, actions, random_ids)
