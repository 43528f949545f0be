"""Turn tagged histories into encoded model samples and batches."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .augmentation import (
    MaskingConfig,
    MaskMode,
    clinical_mask,
    loss_weights,
    replicate_for_comorbidities,
    sample_rng,
)
from .labeling import TaggedHistory
from .records import split_overlong
from .tokenizer import Vocabulary, encode_sequence

# epoch key reserved for the fixed validation masking stream
VALIDATION_EPOCH = 2**31 - 1


@dataclass(frozen=True)
class EncodedSample:
    patient_id: str
    replicate: int
    chunk: int
    masked_phenotype: str | None
    ids: np.ndarray
    attention_mask: np.ndarray
    y: np.ndarray
    gamma: np.ndarray
    omega: np.ndarray
    descriptions: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "replicate": self.replicate,
            "chunk": self.chunk,
            "masked_phenotype": self.masked_phenotype,
            "y": self.y.tolist(),
            "gamma": self.gamma.tolist(),
            "omega": self.omega.tolist(),
            "descriptions": list(self.descriptions),
        }


def _chunks(
    patient_id: str,
    descs: Sequence[str],
    vocab: Vocabulary,
    max_tokens: int,
    replicate: int,
    masked: str | None,
    y: np.ndarray,
    gamma: np.ndarray,
) -> list[EncodedSample]:
    omega = loss_weights(y, gamma)
    out = []
    for c, chunk in enumerate(split_overlong(descs, vocab, max_tokens)):
        enc = encode_sequence(chunk, vocab, max_tokens)
        out.append(
            EncodedSample(patient_id, replicate, c, masked, enc.ids, enc.attention_mask,
                          y, gamma, omega, tuple(chunk))
        )
    return out


def classification_samples(
    tagged: Iterable[TaggedHistory],
    vocab: Vocabulary,
    max_tokens: int,
    masking: MaskingConfig,
    mode: MaskMode,
    epoch: int = 0,
    corpus: Sequence[str] = (),
) -> list[EncodedSample]:
    """Masked, replicated and chunked samples for one pass over ``tagged``.

    TRAIN_VAL: one replicate per positive phenotype, each masking only that
    phenotype's descriptions with the stochastic strategy. TEST: a single
    unreplicated sample with every tagged description removed.
    """
    out: list[EncodedSample] = []
    for t in tagged:
        if mode is MaskMode.TEST:
            descs = clinical_mask(t, t.phenotype_ids, masking, MaskMode.TEST)
            gamma = np.zeros_like(t.y)
            out.extend(_chunks(t.patient_id, descs, vocab, max_tokens, 0, None, t.y, gamma))
            continue
        for rep in replicate_for_comorbidities(t):
            if rep.phenotype_id is None:
                descs = t.descriptions
            else:
                rng = sample_rng(masking.seed, t.patient_id, rep.index, epoch)
                descs = clinical_mask(t, rep.phenotype_id, masking, mode, rng, corpus)
            out.extend(
                _chunks(t.patient_id, descs, vocab, max_tokens, rep.index, rep.phenotype_id,
                        t.y, rep.gamma)
            )
    return out


def plain_samples(
    tagged: Iterable[TaggedHistory], vocab: Vocabulary, max_tokens: int
) -> list[EncodedSample]:
    """Unmasked chunks of every history, used as the MLM corpus."""
    out = []
    for t in tagged:
        gamma = np.zeros_like(t.y)
        out.extend(_chunks(t.patient_id, t.descriptions, vocab, max_tokens, 0, None, t.y, gamma))
    return out


def write_sample_dump(samples: Iterable[EncodedSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")


@dataclass
class Batch:
    ids: torch.Tensor
    attention_mask: torch.Tensor
    y: torch.Tensor
    omega: torch.Tensor


def collate(samples: Sequence[EncodedSample], ids: Sequence[np.ndarray] | None = None) -> Batch:
    """Stack samples, trimming trailing columns that are padding in every row.

    Trimming does not change any real position's output: padded keys are
    masked out of attention and positions are absolute.
    """
    mask = np.stack([s.attention_mask for s in samples])
    width = int(mask.sum(axis=1).max())
    id_rows = ids if ids is not None else [s.ids for s in samples]
    return Batch(
        ids=torch.from_numpy(np.stack(id_rows)[:, :width].astype(np.int64)),
        attention_mask=torch.from_numpy(mask[:, :width].astype(np.int64)),
        y=torch.from_numpy(np.stack([s.y for s in samples]).astype(np.float32)),
        omega=torch.from_numpy(np.stack([s.omega for s in samples]).astype(np.float32)),
    )
