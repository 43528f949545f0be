"""Oracle phenotype labels over fused description sequences."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ontology import ConceptKey, PhenotypeDefinition, indicator
from .records import FusedEntry

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TaggedHistory:
    patient_id: str
    entries: tuple[FusedEntry, ...]
    tags: tuple[frozenset[str], ...]  # per entry: phenotype_ids whose indicator fires
    phenotype_ids: tuple[str, ...]
    y: np.ndarray  # uint8, length D, definition order

    @property
    def descriptions(self) -> list[str]:
        return [e.description for e in self.entries]

    def positives(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.y)]


class Tagger:
    """Memoizes the indicator over concepts for a fixed definition list."""

    def __init__(self, defs: Sequence[PhenotypeDefinition]):
        self.defs = tuple(defs)
        self.phenotype_ids = tuple(d.phenotype_id for d in defs)
        self._cache: dict[ConceptKey, frozenset[str]] = {}

    def tags(self, entry: FusedEntry) -> frozenset[str]:
        key = entry.concept.key
        hit = self._cache.get(key)
        if hit is None:
            hit = frozenset(d.phenotype_id for d in self.defs if indicator(d, entry.concept))
            self._cache[key] = hit
        return hit

    def __call__(self, patient_id: str, sequence: Sequence[FusedEntry]) -> TaggedHistory:
        tags = tuple(self.tags(e) for e in sequence)
        hit = set().union(*tags) if tags else set()
        y = np.array([pid in hit for pid in self.phenotype_ids], dtype=np.uint8)
        return TaggedHistory(patient_id, tuple(sequence), tags, self.phenotype_ids, y)


def tag_history(
    sequence: Sequence[FusedEntry], defs: Sequence[PhenotypeDefinition], patient_id: str = ""
) -> TaggedHistory:
    """Tag each entry with matching phenotypes and OR-aggregate into ``y``."""
    return Tagger(defs)(patient_id, sequence)


@dataclass(frozen=True)
class LabelMatrix:
    patient_ids: tuple[str, ...]
    phenotype_ids: tuple[str, ...]
    values: np.ndarray  # (N, D) uint8
    tagged: Mapping[str, TaggedHistory]

    def case_counts(self) -> np.ndarray:
        return self.values.sum(axis=0)

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("patient_id\t" + "\t".join(self.phenotype_ids) + "\n")
            for pid, row in zip(self.patient_ids, self.values):
                fh.write(pid + "\t" + "\t".join(str(int(v)) for v in row) + "\n")


def build_label_matrix(
    histories: Mapping[str, Sequence[FusedEntry]], defs: Sequence[PhenotypeDefinition]
) -> LabelMatrix:
    """One row per patient in input order, one column per definition."""
    tagger = Tagger(defs)
    tagged = {pid: tagger(pid, seq) for pid, seq in histories.items()}
    D = len(defs)
    values = (
        np.stack([t.y for t in tagged.values()])
        if tagged
        else np.zeros((0, D), dtype=np.uint8)
    )
    for j, n in enumerate(values.sum(axis=0) if len(values) else np.zeros(D)):
        if n == 0:
            log.warning("phenotype %s has no cases in this cohort", tagger.phenotype_ids[j])
    return LabelMatrix(tuple(tagged), tagger.phenotype_ids, values, tagged)
