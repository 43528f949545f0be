"""Iterative multi-label stratification into k folds with rotating roles."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class FoldAssignment:
    folds: np.ndarray  # fold id per patient row
    k: int = 5
    patient_ids: tuple[str, ...] = ()

    def roles(self, model: int) -> dict:
        """Model ``i`` validates on fold ``i`` and tests on fold ``(i + 1) mod k``."""
        val = model % self.k
        test = (model + 1) % self.k
        train = tuple(f for f in range(self.k) if f not in (val, test))
        return {"train": train, "val": val, "test": test}

    def members(self, folds) -> np.ndarray:
        folds = [folds] if np.isscalar(folds) else list(folds)
        return np.flatnonzero(np.isin(self.folds, folds))

    def sizes(self) -> np.ndarray:
        return np.bincount(self.folds, minlength=self.k)

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("patient_id\tfold\n")
            for pid, f in zip(self.patient_ids, self.folds):
                fh.write(f"{pid}\t{int(f)}\n")

    @classmethod
    def read(cls, path: str | Path, k: int = 5) -> "FoldAssignment":
        pids, folds = [], []
        with open(path, encoding="utf-8") as fh:
            next(fh)
            for line in fh:
                pid, f = line.rstrip("\n").split("\t")
                pids.append(pid)
                folds.append(int(f))
        return cls(np.array(folds, dtype=np.int64), k, tuple(pids))


def stratified_folds(
    labels, k: int = 5, seed: int = 0, patient_ids: Sequence[str] = ()
) -> FoldAssignment:
    """Iterative stratification of a multi-label matrix ``(N, D)``.

    The phenotype with the fewest unassigned positives is handled first; each
    of its patients goes to the open fold with the largest remaining demand
    for that phenotype, then the largest remaining capacity, then a seeded
    random pick. Patients without positives fill folds by capacity. A fold is
    open while it can still grow without breaking the "sizes differ by at
    most one" rule.
    """
    Y = np.asarray(labels).astype(bool)
    N, D = Y.shape
    if N < k:
        raise ValueError(f"need at least k={k} patients, got {N}")
    rng = np.random.default_rng(seed)

    small, n_big = divmod(N, k)
    sizes = np.zeros(k, dtype=np.int64)
    demand = np.tile(Y.sum(axis=0) / k, (k, 1))  # (k, D)
    folds = np.full(N, -1, dtype=np.int64)

    def open_folds() -> np.ndarray:
        bigs = int((sizes > small).sum())
        return (sizes < small) | ((sizes == small) & (bigs < n_big))

    def pick(candidates: np.ndarray, keys: list[np.ndarray]) -> int:
        idx = np.flatnonzero(candidates)
        for key in keys:
            vals = key[idx]
            idx = idx[np.isclose(vals, vals.max(), rtol=0, atol=1e-12)]
            if len(idx) == 1:
                return int(idx[0])
        return int(rng.choice(idx))

    def assign(i: int, f: int) -> None:
        folds[i] = f
        sizes[f] += 1
        demand[f] -= Y[i]

    remaining = Y.copy()
    while remaining.any():
        counts = remaining.sum(axis=0)
        counts = np.where(counts > 0, counts, np.iinfo(np.int64).max)
        d = int(np.argmin(counts))
        rows = np.flatnonzero(remaining[:, d])
        rng.shuffle(rows)
        for i in rows:
            capacity = (N / k) - sizes
            f = pick(open_folds(), [demand[:, d], capacity])
            assign(i, f)
            remaining[i] = False

    for i in np.flatnonzero(folds < 0):
        capacity = (N / k) - sizes
        assign(i, pick(open_folds(), [capacity]))

    return FoldAssignment(folds, k, tuple(patient_ids))
