"""Test-set metrics, patient grouping, cohort expansion and downstream analyses."""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .errors import EmptyCohort, InsufficientData, NoPositives
from .records import CohortMeta, PatientHistory, Source


@dataclass
class PredictionSet:
    patient_ids: tuple[str, ...]
    phenotype_ids: tuple[str, ...]
    probabilities: np.ndarray  # (N, D) float64
    labels: np.ndarray  # (N, D) uint8
    folds: np.ndarray  # (N,)

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.size and (not np.isfinite(p).all() or p.min() < 0 or p.max() > 1):
            raise ValueError("probabilities must be finite and within [0, 1]")
        self.probabilities = p
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.folds = np.asarray(self.folds, dtype=np.int64)

    def column(self, phenotype: str | int) -> tuple[np.ndarray, np.ndarray]:
        d = phenotype if isinstance(phenotype, int) else self.phenotype_ids.index(phenotype)
        return self.probabilities[:, d], self.labels[:, d]

    @classmethod
    def concat(cls, parts: Sequence["PredictionSet"]) -> "PredictionSet":
        return cls(
            tuple(p for s in parts for p in s.patient_ids),
            parts[0].phenotype_ids,
            np.concatenate([s.probabilities for s in parts]),
            np.concatenate([s.labels for s in parts]),
            np.concatenate([s.folds for s in parts]),
        )

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("patient_id\tfold\tphenotype_id\tprobability\tlabel\n")
            for i, pid in enumerate(self.patient_ids):
                for d, ph in enumerate(self.phenotype_ids):
                    fh.write(
                        f"{pid}\t{int(self.folds[i])}\t{ph}\t"
                        f"{float(self.probabilities[i, d])!r}\t{int(self.labels[i, d])}\n"
                    )

    @classmethod
    def read(cls, path: str | Path) -> "PredictionSet":
        rows: dict[str, dict] = {}
        phenos: list[str] = []
        with open(path, encoding="utf-8") as fh:
            next(fh)
            for line in fh:
                pid, fold, ph, p, y = line.rstrip("\n").split("\t")
                if ph not in phenos:
                    phenos.append(ph)
                r = rows.setdefault(pid, {"fold": int(fold), "p": {}, "y": {}})
                r["p"][ph] = float(p)
                r["y"][ph] = int(y)
        pids = tuple(rows)
        return cls(
            pids,
            tuple(phenos),
            np.array([[rows[i]["p"][ph] for ph in phenos] for i in pids], dtype=np.float64).reshape(len(pids), len(phenos)),
            np.array([[rows[i]["y"][ph] for ph in phenos] for i in pids], dtype=np.uint8).reshape(len(pids), len(phenos)),
            np.array([rows[i]["fold"] for i in pids], dtype=np.int64),
        )


# -- classification metrics ---------------------------------------------------


@dataclass(frozen=True)
class ThresholdMetrics:
    recall: float
    precision: float
    tp: int
    fp: int
    fn: int
    tn: int


def metrics_at_threshold(scores, labels, threshold: float = 0.5) -> ThresholdMetrics:
    """Recall and precision with ``score >= threshold`` counted positive.

    Precision is 1 when nothing is predicted positive.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pred = s >= threshold
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    tn = int((~pred & ~y).sum())
    if tp + fn == 0:
        raise NoPositives("recall is undefined without positive labels")
    precision = tp / (tp + fp) if tp + fp else 1.0
    return ThresholdMetrics(tp / (tp + fn), precision, tp, fp, fn, tn)


def auprc(scores, labels) -> float:
    """Average precision with tied scores treated as a single threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("average precision needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tps = np.cumsum(y)
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = tps[ends]
    precision = tp / (ends + 1)
    new_pos = np.diff(np.r_[0, tp])
    return float(np.sum(new_pos * precision) / n_pos)


# -- groups and expansion -----------------------------------------------------


@dataclass(frozen=True)
class GroupPercentiles:
    controls_high: float = 98.0
    cases_high: float = 90.0
    cases_low: float = 12.0


@dataclass
class PatientGroups:
    phenotype_id: str
    members: dict[str, np.ndarray]  # group name -> row indices into the prediction set
    cutoffs: dict[str, float]
    patient_ids: tuple[str, ...] = ()

    def ids(self, group: str) -> list[str]:
        return [self.patient_ids[i] for i in self.members[group]]

    def sizes(self) -> dict[str, int]:
        return {k: int(len(v)) for k, v in self.members.items()}


def define_groups(
    scores,
    labels,
    percentiles: GroupPercentiles = GroupPercentiles(),
    phenotype_id: str = "",
    patient_ids: Sequence[str] = (),
) -> PatientGroups:
    """Split patients into cases/controls and their percentile-defined subgroups.

    Cutoffs are linear-interpolation percentiles of the probabilities within
    cases or controls respectively.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    cases, controls = np.flatnonzero(y), np.flatnonzero(~y)
    if len(cases) == 0 or len(controls) == 0:
        raise EmptyCohort("need at least one case and one control")
    c_hi = float(np.percentile(s[controls], percentiles.controls_high))
    k_hi = float(np.percentile(s[cases], percentiles.cases_high))
    k_lo = float(np.percentile(s[cases], percentiles.cases_low))
    members = {
        "cases": cases,
        "controls": controls,
        "controls_high": controls[s[controls] >= c_hi],
        "cases_high": cases[s[cases] >= k_hi],
        "cases_low": cases[s[cases] <= k_lo],
    }
    cutoffs = {"controls_high": c_hi, "cases_high": k_hi, "cases_low": k_lo}
    return PatientGroups(phenotype_id, members, cutoffs, tuple(patient_ids))


def expand_cohort(scores, labels, patient_ids: Sequence[str], percentile: float = 98.0) -> list[str]:
    """Controls at or above the given percentile of control probabilities (missed cases)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    controls = np.flatnonzero(~y)
    if len(controls) == 0:
        raise EmptyCohort("no controls to expand from")
    cut = np.percentile(s[controls], percentile)
    return [patient_ids[i] for i in controls[s[controls] >= cut]]


# -- survival -----------------------------------------------------------------


@dataclass
class SurvivalCurve:
    times: np.ndarray  # distinct event times
    survival: np.ndarray  # S just after each event time
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t: float) -> float:
        """Right-continuous step value S(t)."""
        k = np.searchsorted(self.times, t, side="right")
        return 1.0 if k == 0 else float(self.survival[k - 1])

    def rows(self) -> list[tuple[float, float, int, int]]:
        return [
            (float(t), float(s), int(n), int(d))
            for t, s, n, d in zip(self.times, self.survival, self.at_risk, self.events)
        ]


def km_estimate(times, events) -> SurvivalCurve:
    """Kaplan-Meier product-limit estimate for right-censored data.

    Subjects censored at an event time are still at risk for that event.
    """
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events).astype(bool)
    if t.size == 0:
        raise EmptyCohort("no subjects")
    if (t < 0).any():
        raise ValueError("times must be non-negative")
    uniq = np.unique(t[e])
    at_risk = np.array([(t >= u).sum() for u in uniq], dtype=np.int64)
    deaths = np.array([(e & (t == u)).sum() for u in uniq], dtype=np.int64)
    surv = np.cumprod((at_risk - deaths) / at_risk) if len(uniq) else np.array([])
    return SurvivalCurve(uniq, surv, at_risk, deaths)


# -- statistics ---------------------------------------------------------------


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p: float


def welch_t_test(a, b, alternative: str = "two-sided") -> WelchResult:
    """Unequal-variance t-test; ``alternative="greater"`` tests mean(a) > mean(b)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise InsufficientData("each sample needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        t = 0.0 if diff == 0 else math.copysign(math.inf, diff)
        df = float(a.size + b.size - 2)
    else:
        t = diff / math.sqrt(se2)
        df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    if alternative == "two-sided":
        p = 2 * stats.t.sf(abs(t), df)
    elif alternative == "greater":
        p = stats.t.sf(t, df)
    elif alternative == "less":
        p = stats.t.cdf(t, df)
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
    return WelchResult(float(t), float(df), float(min(1.0, p)))


def aggregate_biomarker(
    meta: Iterable[CohortMeta], name: str, q: float = 95.0
) -> tuple[dict[str, float], list[str]]:
    """Per-patient ``q``-th percentile of a biomarker; patients without values are excluded."""
    values, excluded = {}, []
    for m in meta:
        series = m.biomarkers.get(name, [])
        if not series:
            excluded.append(m.patient_id)
            continue
        values[m.patient_id] = float(np.percentile([x.value for x in series], q))
    return values, excluded


def percentile_median_curve(score, prediction, bins: int = 100) -> list[tuple[int, float]]:
    """Median prediction within equal-count bins of patients ranked by ``score``.

    Leading bins take one extra patient when the count does not divide evenly.
    """
    s = np.asarray(score, dtype=np.float64)
    p = np.asarray(prediction, dtype=np.float64)
    if s.size == 0:
        raise EmptyCohort("no patients")
    order = np.argsort(s, kind="mergesort")
    return [
        (i, float(np.median(p[chunk])))
        for i, chunk in enumerate(np.array_split(order, bins))
        if len(chunk)
    ]


# -- group summaries ----------------------------------------------------------


def five_number(values) -> dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {k: math.nan for k in ("min", "q1", "median", "q3", "max", "mean")}
    q = np.percentile(v, [0, 25, 50, 75, 100])
    return dict(zip(("min", "q1", "median", "q3", "max"), map(float, q))) | {"mean": float(v.mean())}


def survival_inputs(
    patient_ids: Sequence[str],
    histories: Mapping[str, PatientHistory],
    meta: Mapping[str, CohortMeta],
) -> tuple[np.ndarray, np.ndarray]:
    """Days from first recorded event to death or last follow-up, and death flags."""
    times, events = [], []
    for pid in patient_ids:
        m = meta.get(pid)
        h = histories.get(pid)
        if m is None or h is None or not h.events:
            continue
        origin = min(e.date for e in h.events)
        end = m.death_date or m.last_followup
        times.append(max(0, (end - origin).days))
        events.append(m.death_date is not None)
    return np.array(times, dtype=np.float64), np.array(events, dtype=bool)


@dataclass
class GroupStats:
    size: int
    gp_codes: dict[str, float]
    hospital_codes: dict[str, float]
    biomarkers: dict[str, dict[str, float]] = field(default_factory=dict)
    survival: SurvivalCurve | None = None


def group_summary(
    groups: PatientGroups,
    histories: Mapping[str, PatientHistory],
    meta: Mapping[str, CohortMeta],
    biomarkers: Sequence[str] = (),
    q: float = 95.0,
) -> dict[str, GroupStats]:
    out = {}
    for name in groups.members:
        pids = groups.ids(name)
        hs = [histories[p] for p in pids if p in histories]
        bio = {}
        for b in biomarkers:
            vals, _ = aggregate_biomarker((meta[p] for p in pids if p in meta), b, q)
            bio[b] = five_number(list(vals.values()))
        curve = None
        times, events = survival_inputs(pids, histories, meta)
        if times.size:
            curve = km_estimate(times, events)
        out[name] = GroupStats(
            size=len(pids),
            gp_codes=five_number([h.count(Source.GP) for h in hs]),
            hospital_codes=five_number([h.count(Source.HOSPITAL) for h in hs]),
            biomarkers=bio,
            survival=curve,
        )
    return out


# -- emitters -----------------------------------------------------------------


def phenotype_report(preds: PredictionSet, threshold: float = 0.5,
                     percentiles: GroupPercentiles = GroupPercentiles()) -> dict:
    """Per-phenotype metrics, group sizes and cutoffs as a JSON-ready dict."""
    report = {}
    for d, ph in enumerate(preds.phenotype_ids):
        s, y = preds.column(d)
        entry: dict = {"n": int(len(y)), "cases": int(y.sum())}
        if y.sum() > 0:
            m = metrics_at_threshold(s, y, threshold)
            entry |= {"recall": m.recall, "precision": m.precision, "auprc": auprc(s, y),
                      "tp": m.tp, "fp": m.fp, "fn": m.fn, "tn": m.tn}
        if 0 < y.sum() < len(y):
            g = define_groups(s, y, percentiles, ph, preds.patient_ids)
            entry |= {"group_sizes": g.sizes(), "cutoffs": g.cutoffs}
        report[ph] = entry
    return report


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n",
                          encoding="utf-8")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (dt.date,)):
        return o.isoformat()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(type(o))


def write_tsv(rows: Iterable[Sequence], header: Sequence[str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(repr(x) if isinstance(x, float) else str(x) for x in r) + "\n")
