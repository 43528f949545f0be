"""File-to-file preprocessing: events to fused, labeled, fold-assigned histories."""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .labeling import LabelMatrix, TaggedHistory, Tagger, build_label_matrix
from .ontology import OntologyCatalog, PhenotypeDefinition
from .records import (
    ClinicalEvent,
    FusedEntry,
    PatientHistory,
    Source,
    aggregate_hospital_visits,
    filter_min_terms,
    fuse_histories,
    ingest_events,
)
from .training.folds import FoldAssignment, stratified_folds


@dataclass
class PreparedCohort:
    tagged: list[TaggedHistory]  # aligned with folds.folds
    labels: LabelMatrix
    folds: FoldAssignment
    histories: dict[str, PatientHistory]  # aggregated, before the length filter
    dropped_events: int = 0
    excluded_patients: int = 0

    @property
    def patient_ids(self) -> tuple[str, ...]:
        return self.labels.patient_ids


def prepare_cohort(
    events_path: str | Path,
    catalog: OntologyCatalog,
    defs: Sequence[PhenotypeDefinition],
    window_days: int = 7,
    min_terms: int = 5,
    k: int = 5,
    seed: int = 0,
) -> PreparedCohort:
    raw, dropped = ingest_events(events_path, catalog)
    histories = {pid: aggregate_hospital_visits(raw[pid], window_days) for pid in sorted(raw)}
    fused = {pid: fuse_histories(h, catalog) for pid, h in histories.items()}
    kept, excluded = filter_min_terms(fused, min_terms)
    labels = build_label_matrix(kept, defs)
    folds = stratified_folds(labels.values, k, seed, labels.patient_ids)
    tagged = [labels.tagged[p] for p in labels.patient_ids]
    return PreparedCohort(tagged, labels, folds, histories, dropped, excluded)


def write_prepared(cohort: PreparedCohort, out_dir: str | Path) -> dict[str, Path]:
    """Write the fused sequences, label matrix and fold assignment."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "sequences": out / "sequences.jsonl",
        "labels": out / "labels.tsv",
        "folds": out / "folds.tsv",
    }
    with open(paths["sequences"], "w", encoding="utf-8", newline="\n") as fh:
        for t, f in zip(cohort.tagged, cohort.folds.folds):
            rec = {
                "patient_id": t.patient_id,
                "fold": int(f),
                "entries": [
                    [e.date.isoformat(), e.source.value, e.concept.ontology_id, e.concept.code]
                    for e in t.entries
                ],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    cohort.labels.write(paths["labels"])
    cohort.folds.write(paths["folds"])
    return paths


def read_prepared(
    out_dir: str | Path, catalog: OntologyCatalog, defs: Sequence[PhenotypeDefinition], k: int = 5
) -> PreparedCohort:
    """Reload sequences written by :func:`write_prepared` and re-tag them."""
    tagger = Tagger(defs)
    tagged, folds, histories = [], [], {}
    with open(Path(out_dir) / "sequences.jsonl", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            pid = rec["patient_id"]
            entries, events = [], []
            for date, src, ont, code in rec["entries"]:
                d, s = dt.date.fromisoformat(date), Source(src)
                entries.append(FusedEntry(catalog[(ont, code)], d, s))
                events.append(ClinicalEvent(pid, d, s, ont, code))
            tagged.append(tagger(pid, entries))
            folds.append(rec["fold"])
            histories[pid] = PatientHistory(pid, events)
    pids = tuple(t.patient_id for t in tagged)
    values = np.stack([t.y for t in tagged]) if tagged else np.zeros((0, len(defs)), np.uint8)
    labels = LabelMatrix(pids, tagger.phenotype_ids, values, {t.patient_id: t for t in tagged})
    return PreparedCohort(tagged, labels, FoldAssignment(np.array(folds, np.int64), k, pids), histories)


def mask_corpus(catalog: OntologyCatalog) -> list[str]:
    """Replacement pool for the REPLACE masking branch: every catalog description."""
    return catalog.descriptions()
