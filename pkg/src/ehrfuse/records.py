"""Patient event ingestion, hospital-visit aggregation and source fusion."""

from __future__ import annotations

import datetime as dt
import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DescriptionTooLong, MalformedLine, UnknownSource
from .ontology import Concept, ConceptKey, OntologyCatalog
from .tokenizer import Vocabulary, tokenize

log = logging.getLogger(__name__)

N_RESERVED = 2  # [CLS] and [SEP]


class Source(str, Enum):
    GP = "GP"
    HOSPITAL = "HOSPITAL"


# same-date tie-break: primary care first
_SOURCE_RANK = {Source.GP: 0, Source.HOSPITAL: 1}


@dataclass(frozen=True)
class ClinicalEvent:
    patient_id: str
    date: dt.date
    source: Source
    ontology_id: str
    code: str

    @property
    def key(self) -> ConceptKey:
        return (self.ontology_id, self.code)

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "date": self.date.isoformat(),
            "source": self.source.value,
            "ontology_id": self.ontology_id,
            "code": self.code,
        }


@dataclass
class PatientHistory:
    patient_id: str
    events: list[ClinicalEvent] = field(default_factory=list)

    def count(self, source: Source) -> int:
        return sum(e.source is source for e in self.events)


@dataclass(frozen=True)
class FusedEntry:
    concept: Concept
    date: dt.date
    source: Source

    @property
    def description(self) -> str:
        return self.concept.description


def _parse_event(line: str, lineno: int) -> ClinicalEvent:
    try:
        rec = json.loads(line)
        pid = str(rec["patient_id"])
        date = dt.date.fromisoformat(rec["date"])
        src = rec["source"]
        ont, code = str(rec["ontology_id"]).strip(), str(rec["code"]).strip()
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedLine(f"line {lineno}: {exc}") from None
    try:
        source = Source(src)
    except ValueError:
        raise UnknownSource(f"line {lineno}: source {src!r}") from None
    return ClinicalEvent(pid, date, source, ont, code)


def ingest_events(
    path: str | Path, catalog: OntologyCatalog
) -> tuple[dict[str, PatientHistory], int]:
    """Group a JSON-lines event file by patient.

    Returns the histories (date-sorted, ties in input order) and the number of
    events dropped because their concept is not in ``catalog``.
    """
    histories: dict[str, PatientHistory] = {}
    dropped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            ev = _parse_event(line, lineno)
            if ev.key not in catalog:
                dropped += 1
                continue
            histories.setdefault(ev.patient_id, PatientHistory(ev.patient_id)).events.append(ev)
    for h in histories.values():
        h.events.sort(key=lambda e: e.date)
    if dropped:
        log.warning("dropped %d events with unresolvable concepts", dropped)
    return histories, dropped


def write_events(events: Iterable[ClinicalEvent], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in events:
            fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")


def _order(events: list[ClinicalEvent]) -> list[ClinicalEvent]:
    return sorted(events, key=lambda e: (e.date, _SOURCE_RANK[e.source]))


def aggregate_hospital_visits(history: PatientHistory, window_days: int = 7) -> PatientHistory:
    """Merge hospital admissions less than ``window_days`` apart into one visit.

    Merging chains: each admission is compared with the latest admission
    already absorbed into the current visit. A merged visit is dated at its
    earliest admission and keeps the first occurrence of every concept.
    """
    if window_days < 1:
        raise ValueError("window_days must be >= 1")
    gp = [e for e in history.events if e.source is Source.GP]
    hosp = sorted(
        (e for e in history.events if e.source is Source.HOSPITAL), key=lambda e: e.date
    )

    visits: list[tuple[dt.date, list[ClinicalEvent]]] = []
    last: dt.date | None = None
    for e in hosp:
        if last is not None and (e.date - last).days < window_days:
            visits[-1][1].append(e)
        else:
            visits.append((e.date, [e]))
        last = e.date

    merged: list[ClinicalEvent] = []
    for start, evs in visits:
        seen: set[ConceptKey] = set()
        for e in evs:
            if e.key in seen:
                continue
            seen.add(e.key)
            merged.append(replace(e, date=start))
    return PatientHistory(history.patient_id, _order(gp + merged))


def fuse_histories(history: PatientHistory, catalog: OntologyCatalog) -> list[FusedEntry]:
    """Single time-ordered description sequence across both sources (GP first on ties)."""
    return [FusedEntry(catalog[e.key], e.date, e.source) for e in _order(history.events)]


def filter_min_terms(
    histories: Mapping[str, Sequence], min_terms: int = 5
) -> tuple[dict[str, Sequence], int]:
    kept = {pid: seq for pid, seq in histories.items() if len(seq) >= min_terms}
    excluded = len(histories) - len(kept)
    if excluded:
        log.info("excluded %d patients with fewer than %d terms", excluded, min_terms)
    return kept, excluded


def _text(entry) -> str:
    return entry if isinstance(entry, str) else entry.description


def split_overlong(sequence: Sequence, vocab: Vocabulary, max_tokens: int) -> list[list]:
    """Pack whole descriptions left to right into chunks that fit ``max_tokens``.

    The budget includes [CLS] and [SEP]. Descriptions are never cut; an empty
    sequence yields a single empty chunk.
    """
    budget = max_tokens - N_RESERVED
    if budget < 1:
        raise ValueError(f"max_tokens must exceed {N_RESERVED}")
    chunks: list[list] = [[]]
    used = 0
    for entry in sequence:
        n = len(tokenize(_text(entry), vocab))
        if n > budget:
            raise DescriptionTooLong(f"{n} tokens > budget {budget}: {_text(entry)[:60]!r}")
        if used + n > budget and chunks[-1]:
            chunks.append([])
            used = 0
        chunks[-1].append(entry)
        used += n
    return chunks


# -- cohort metadata ---------------------------------------------------------


@dataclass(frozen=True)
class Measurement:
    date: dt.date
    value: float
    unit: str = ""


@dataclass
class CohortMeta:
    patient_id: str
    sex: str
    birth_year: int
    last_followup: dt.date
    death_date: dt.date | None = None
    biomarkers: dict[str, list[Measurement]] = field(default_factory=dict)
    risk_scores: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.death_date is not None and self.death_date > self.last_followup:
            raise ValueError(f"{self.patient_id}: death after last follow-up")
        for name, series in self.biomarkers.items():
            if not all(math.isfinite(m.value) for m in series):
                raise ValueError(f"{self.patient_id}: non-finite {name} value")

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "sex": self.sex,
            "birth_year": self.birth_year,
            "last_followup": self.last_followup.isoformat(),
            "death_date": self.death_date.isoformat() if self.death_date else None,
            "biomarkers": {
                k: [[m.date.isoformat(), m.value, m.unit] for m in v]
                for k, v in self.biomarkers.items()
            },
            "risk_scores": self.risk_scores,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "CohortMeta":
        death = rec.get("death_date")
        return cls(
            patient_id=str(rec["patient_id"]),
            sex=rec["sex"],
            birth_year=int(rec["birth_year"]),
            last_followup=dt.date.fromisoformat(rec["last_followup"]),
            death_date=dt.date.fromisoformat(death) if death else None,
            biomarkers={
                k: [Measurement(dt.date.fromisoformat(d), float(v), u) for d, v, u in series]
                for k, series in rec.get("biomarkers", {}).items()
            },
            risk_scores={k: float(v) for k, v in rec.get("risk_scores", {}).items()},
        )


def load_cohort_meta(path: str | Path) -> dict[str, CohortMeta]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                m = CohortMeta.from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise MalformedLine(f"line {lineno}: {exc}") from None
            out[m.patient_id] = m
    return out


def write_cohort_meta(meta: Iterable[CohortMeta], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for m in meta:
            fh.write(json.dumps(m.to_json(), sort_keys=True) + "\n")
