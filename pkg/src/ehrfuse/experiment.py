"""Scaled-down synthetic end-to-end experiment driven through the CLI stages."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .cli import run_command
from .config import load_config
from .evaluation import (
    PredictionSet,
    aggregate_biomarker,
    auprc,
    define_groups,
    expand_cohort,
    metrics_at_threshold,
    percentile_median_curve,
    welch_t_test,
)
from .records import load_cohort_meta

STAGES = ("synth", "preprocess", "build-vocab", "pretrain", "train", "evaluate", "expand", "report")

# one fold-model at desk scale
DEFAULT_OVERRIDES = ("train.models=[0]",)


@dataclass
class PhenotypeOutcome:
    phenotype_id: str
    prevalence: float
    cases: int
    recall: float
    auprc: float
    median_cases: float
    median_controls: float
    welch_p: float
    expanded: int
    controls: int
    expanded_disjoint: bool
    risk_spearman: float


@dataclass
class ExperimentResult:
    out_dir: Path
    seconds: dict[str, float]
    phenotypes: dict[str, PhenotypeOutcome] = field(default_factory=dict)
    biomarker: dict[str, float] = field(default_factory=dict)


def run_stages(out_dir: str | Path, seed: int = 0, overrides: Sequence[str] = DEFAULT_OVERRIDES,
               stages: Sequence[str] = STAGES) -> dict[str, float]:
    seconds = {}
    for stage in stages:
        argv = [stage, "--out", str(out_dir), "--seed", str(seed)]
        for o in overrides:
            argv += ["--set", o]
        t0 = time.perf_counter()
        code = run_command(argv)
        seconds[stage] = time.perf_counter() - t0
        if code != 0:
            raise RuntimeError(f"stage {stage} exited with {code}")
    return seconds


def summarize(out_dir: str | Path, seed: int = 0, overrides: Sequence[str] = DEFAULT_OVERRIDES,
              biomarker: str = "hba1c", biomarker_phenotype: str = "t2dm") -> ExperimentResult:
    cfg = load_config(None, list(overrides), seed, str(out_dir))
    preds = PredictionSet.read(cfg.out_dir / "predictions" / "predictions.tsv")
    meta = load_cohort_meta(cfg.path("metadata"))
    result = ExperimentResult(cfg.out_dir, {})
    pcts = cfg.percentiles()
    prevalences = dict(zip(preds.phenotype_ids, cfg.synth.prevalences))
    for d, ph in enumerate(preds.phenotype_ids):
        s, y = preds.column(d)
        m = metrics_at_threshold(s, y, cfg.evaluation.threshold)
        w = welch_t_test(s[y == 1], s[y == 0], "greater")
        picked = expand_cohort(s, y, preds.patient_ids, cfg.evaluation.expand_percentile)
        cases = {preds.patient_ids[i] for i in np.flatnonzero(y)}
        risk = [meta[p].risk_scores[f"prs_{ph}"] for p in preds.patient_ids]
        curve = percentile_median_curve(risk, s, 10)
        rho = spearmanr([i for i, _ in curve], [v for _, v in curve])[0]
        result.phenotypes[ph] = PhenotypeOutcome(
            ph, prevalences[ph], int(y.sum()), m.recall, auprc(s, y),
            float(np.median(s[y == 1])), float(np.median(s[y == 0])), w.p,
            len(picked), int((y == 0).sum()), cases.isdisjoint(picked), float(rho),
        )
        if ph == biomarker_phenotype:
            g = define_groups(s, y, pcts, ph, preds.patient_ids)
            hi, _ = aggregate_biomarker((meta[p] for p in g.ids("cases_high")), biomarker,
                                        cfg.evaluation.biomarker_quantile)
            lo, _ = aggregate_biomarker((meta[p] for p in g.ids("cases_low")), biomarker,
                                        cfg.evaluation.biomarker_quantile)
            bw = welch_t_test(list(hi.values()), list(lo.values()), "greater")
            result.biomarker = {
                "mean_cases_high": float(np.mean(list(hi.values()))),
                "mean_cases_low": float(np.mean(list(lo.values()))),
                "n_high": len(hi), "n_low": len(lo), "p": bw.p,
            }
    return result


def run_experiment(out_dir: str | Path, seed: int = 0,
                   overrides: Sequence[str] = DEFAULT_OVERRIDES) -> ExperimentResult:
    seconds = run_stages(out_dir, seed, overrides)
    result = summarize(out_dir, seed, overrides)
    result.seconds = seconds
    return result
