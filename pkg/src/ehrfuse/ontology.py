"""Terminology catalogs and phenotype code lists.

A catalog maps ``(ontology_id, code)`` keys to a single text description. A
phenotype definition is a curated list of codes, optionally matching every
descendant of a code, where descendants are code-prefix extensions inside the
same ontology.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .errors import (
    DuplicateConflict,
    EmptyDefinitionSet,
    EmptyDescription,
    MalformedDefinition,
    MalformedRow,
)

log = logging.getLogger(__name__)

ConceptKey = tuple[str, str]


class UnresolvedCodeWarning(UserWarning):
    """A phenotype definition cites a code that the catalog cannot resolve."""


@dataclass(frozen=True, order=True)
class Concept:
    ontology_id: str
    code: str
    description: str

    @property
    def key(self) -> ConceptKey:
        return (self.ontology_id, self.code)


class OntologyCatalog:
    """Immutable index of concepts keyed by ``(ontology_id, code)``."""

    def __init__(self, concepts: Iterable[Concept] = ()):
        index: dict[ConceptKey, Concept] = {}
        for c in concepts:
            prev = index.get(c.key)
            if prev is not None and prev.description != c.description:
                raise DuplicateConflict(
                    f"{c.key}: {prev.description!r} vs {c.description!r}"
                )
            index[c.key] = c
        self._index = dict(sorted(index.items()))

    def __len__(self) -> int:
        return len(self._index)

    def __iter__(self) -> Iterator[Concept]:
        return iter(self._index.values())

    def __contains__(self, key: object) -> bool:
        return key in self._index

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, OntologyCatalog):
            return NotImplemented
        return self._index == other._index

    def get(self, key: ConceptKey) -> Concept | None:
        return self._index.get(key)

    def __getitem__(self, key: ConceptKey) -> Concept:
        return self._index[key]

    @property
    def ontologies(self) -> frozenset[str]:
        return frozenset(k[0] for k in self._index)

    def codes(self, ontology_id: str) -> list[str]:
        return [k[1] for k in self._index if k[0] == ontology_id]

    def descriptions(self) -> list[str]:
        """Sorted, de-duplicated description corpus across all ontologies."""
        return sorted({c.description for c in self._index.values()})


def _clean(s: str) -> str:
    return s.strip()


def load_catalog(path: str | Path) -> OntologyCatalog:
    """Read a headerless 3-column TSV of ontology_id, code, description."""
    concepts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise MalformedRow(f"{path}:{lineno}: expected 3 columns, got {len(parts)}")
            ont, code, desc = (_clean(p) for p in parts)
            if not desc:
                raise EmptyDescription(f"{path}:{lineno}: empty description for {ont}:{code}")
            concepts.append(Concept(ont, code, desc))
    return OntologyCatalog(concepts)


def write_catalog(catalog: Iterable[Concept], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for c in sorted(catalog):
            fh.write(f"{c.ontology_id}\t{c.code}\t{c.description}\n")


@dataclass(frozen=True)
class MatchCode:
    ontology_id: str
    code: str
    include_descendants: bool = False


@dataclass(frozen=True)
class PhenotypeDefinition:
    phenotype_id: str
    name: str
    codes: tuple[MatchCode, ...]
    unresolved: tuple[MatchCode, ...] = field(default=(), compare=False)

    def to_json(self) -> dict:
        return {
            "phenotype_id": self.phenotype_id,
            "name": self.name,
            "codes": [
                {
                    "ontology_id": m.ontology_id,
                    "code": m.code,
                    "include_descendants": m.include_descendants,
                }
                for m in self.codes
            ],
        }


def _resolves(m: MatchCode, catalog: OntologyCatalog) -> bool:
    if (m.ontology_id, m.code) in catalog:
        return True
    if m.include_descendants:
        return any(c.startswith(m.code) for c in catalog.codes(m.ontology_id))
    return False


def _parse_definition(obj: object, i: int) -> PhenotypeDefinition:
    if not isinstance(obj, dict):
        raise MalformedDefinition(f"definition #{i} is not an object")
    try:
        pid = str(obj["phenotype_id"]).strip()
        name = str(obj.get("name", pid))
        raw_codes = obj["codes"]
    except KeyError as exc:
        raise MalformedDefinition(f"definition #{i} missing field {exc}") from None
    if not pid or not isinstance(raw_codes, list):
        raise MalformedDefinition(f"definition #{i}: bad phenotype_id or codes")
    codes = []
    for rc in raw_codes:
        if not isinstance(rc, dict) or "ontology_id" not in rc or "code" not in rc:
            raise MalformedDefinition(f"definition {pid!r}: bad code entry {rc!r}")
        desc = rc.get("include_descendants", False)
        if not isinstance(desc, bool):
            raise MalformedDefinition(f"definition {pid!r}: include_descendants must be boolean")
        codes.append(MatchCode(str(rc["ontology_id"]).strip(), str(rc["code"]).strip(), desc))
    return PhenotypeDefinition(pid, name, tuple(codes))


def load_phenotype_definitions(
    path: str | Path, catalog: OntologyCatalog
) -> list[PhenotypeDefinition]:
    """Load an ordered JSON array of phenotype definitions.

    Codes that do not resolve against ``catalog`` are kept on the definition's
    ``unresolved`` tuple and reported with :class:`UnresolvedCodeWarning`.
    """
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        raise EmptyDefinitionSet(f"{path} is empty")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedDefinition(f"{path}: {exc}") from None
    if not isinstance(data, list):
        raise MalformedDefinition(f"{path}: expected a JSON array")
    if not data:
        raise EmptyDefinitionSet(f"{path} contains no phenotypes")

    defs: list[PhenotypeDefinition] = []
    seen: set[str] = set()
    for i, obj in enumerate(data):
        d = _parse_definition(obj, i)
        if d.phenotype_id in seen:
            raise MalformedDefinition(f"duplicate phenotype_id {d.phenotype_id!r}")
        seen.add(d.phenotype_id)
        unresolved = tuple(m for m in d.codes if not _resolves(m, catalog))
        for m in unresolved:
            msg = f"{d.phenotype_id}: code {m.ontology_id}:{m.code} not found in catalog"
            warnings.warn(msg, UnresolvedCodeWarning, stacklevel=2)
            log.warning(msg)
        defs.append(PhenotypeDefinition(d.phenotype_id, d.name, d.codes, unresolved))
    return defs


def write_phenotype_definitions(defs: Iterable[PhenotypeDefinition], path: str | Path) -> None:
    Path(path).write_text(
        json.dumps([d.to_json() for d in defs], indent=2) + "\n", encoding="utf-8"
    )


def indicator(defn: PhenotypeDefinition, concept: Concept) -> bool:
    """Whether ``concept`` is one of the phenotype's codes or a descendant."""
    for m in defn.codes:
        if m.ontology_id != concept.ontology_id:
            continue
        if concept.code == m.code:
            return True
        if m.include_descendants and concept.code.startswith(m.code):
            return True
    return False
