"""Deterministic synthetic multi-terminology cohorts with injected phenotype signal.

Each phenotype owns three kinds of concepts:

* signal concepts, tagged by the phenotype definition (the oracle);
* correlated-background concepts, never tagged, that cases carry with a
  probability growing with disease severity (they survive TEST-mode masking,
  which is what makes undiagnosed-looking patients detectable);
* weak risk-factor concepts whose frequency rises smoothly with a latent
  liability shared with the synthetic risk score.

All three scale with the phenotype's association ``strength``; at strength 0
and no signal events, recorded events carry no information about status.
"""

from __future__ import annotations

import datetime as dt
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .errors import ConfigInvalid
from .ontology import Concept, ConceptKey, MatchCode, PhenotypeDefinition, write_catalog, write_phenotype_definitions
from .records import ClinicalEvent, CohortMeta, Measurement, Source, write_cohort_meta, write_events

ICD, READ = "ICD10", "READ2"
SOURCE_OF = {ICD: Source.HOSPITAL, READ: Source.GP}

_PHENOTYPES = [
    # id, name, ICD parent, Read stem
    ("t2dm", "Type 2 diabetes mellitus", "E11", "C10F"),
    ("hf", "Heart failure", "I50", "G58A"),
    ("breast_cancer", "Malignant neoplasm of breast", "C50", "B34A"),
    ("prostate_cancer", "Malignant neoplasm of prostate", "C61", "B46A"),
]
_QUALIFIERS = [
    "unspecified", "with renal complications", "with ophthalmic complications",
    "with neurological complications", "with peripheral circulatory complications",
    "without complications",
]
_READ_FORMS = ["{}", "{} annual review", "{} monitoring", "history of {}"]

# untagged concepts clinically related to each phenotype: the first block is
# used for severity-linked correlated background, the second for risk factors
_RELATED = {
    "t2dm": (
        "diabetic retinopathy screening", "diabetic foot examination", "metformin prescribed",
        "gliclazide prescribed", "haemoglobin a1c raised", "glycosuria", "diabetic neuropathy",
        "insulin therapy started", "sitagliptin prescribed", "diabetic nephropathy",
        "microalbuminuria", "retinal screening referral", "neuropathic foot ulcer",
        "hyperglycaemia", "blood glucose self monitoring", "structured diabetes education",
    ),
    "hf": (
        "furosemide prescribed", "bisoprolol prescribed", "ankle oedema",
        "breathlessness on exertion", "orthopnoea", "paroxysmal nocturnal dyspnoea",
        "echocardiogram abnormal", "left ventricular systolic dysfunction",
        "raised natriuretic peptide", "pulmonary oedema", "ramipril prescribed",
        "spironolactone prescribed", "cardiomegaly on chest radiograph", "third heart sound",
        "fluid restriction advised", "cardiology outpatient review",
    ),
    "breast_cancer": (
        "breast lump", "mammogram abnormal", "urgent breast clinic referral",
        "tamoxifen prescribed", "letrozole prescribed", "anastrozole prescribed", "mastectomy",
        "wide local excision of breast", "sentinel node biopsy", "breast ultrasound",
        "radiotherapy to breast", "adjuvant chemotherapy cycle", "nipple discharge",
        "axillary lymphadenopathy", "oncology follow up", "breast reconstruction",
    ),
    "prostate_cancer": (
        "raised prostate specific antigen", "urology referral", "transrectal prostate biopsy",
        "bicalutamide prescribed", "goserelin injection", "androgen deprivation therapy",
        "radical prostatectomy", "prostate mri abnormal", "nocturia", "urinary hesitancy",
        "poor urinary stream", "isotope bone scan", "prostate brachytherapy",
        "erectile dysfunction after pelvic surgery", "digital rectal examination abnormal",
        "prostate active surveillance",
    ),
}
_RISK_FACTORS = {
    "t2dm": (
        "obesity", "body mass index over thirty", "raised triglycerides", "sedentary lifestyle",
        "family history of diabetes", "impaired fasting glycaemia", "acanthosis nigricans",
        "raised waist circumference", "dietary advice given", "weight management referral",
        "polycystic ovary syndrome", "gestational diabetes history",
    ),
    "hf": (
        "ischaemic heart disease", "old myocardial infarction", "atrial fibrillation",
        "essential hypertension", "current smoker", "raised serum cholesterol",
        "angina pectoris", "aortic valve disease", "chronic kidney disease stage three",
        "statin prescribed", "aspirin prescribed", "peripheral arterial disease",
    ),
    "breast_cancer": (
        "family history of breast cancer", "brca gene testing", "hormone replacement therapy",
        "early menarche", "nulliparity", "late menopause", "dense breast tissue",
        "benign breast disease", "mastalgia", "alcohol excess", "combined oral contraceptive",
        "screening mammography invitation",
    ),
    "prostate_cancer": (
        "family history of prostate cancer", "benign prostatic hyperplasia",
        "lower urinary tract symptoms", "tamsulosin prescribed", "finasteride prescribed",
        "urinary frequency", "prostate specific antigen test", "male urinary tract infection",
        "raised post void residual", "chronic prostatitis", "visible haematuria",
        "urine dipstick normal",
    ),
}

_ADJ = [
    "acute", "chronic", "recurrent", "mild", "severe", "bilateral", "left", "right",
    "lower", "upper", "primary", "secondary", "benign", "viral", "bacterial", "allergic",
    "traumatic", "congenital", "nocturnal", "persistent",
]
_SITE = [
    "knee", "hip", "shoulder", "lumbar", "cervical", "chest", "abdominal", "skin", "eye",
    "ear", "throat", "sinus", "bladder", "kidney", "liver", "lung", "bowel", "foot", "hand",
    "scalp", "dental", "gastric", "thyroid", "venous", "muscle",
]
_COND = [
    "pain", "infection", "strain", "inflammation", "lesion", "swelling", "rash", "cyst",
    "obstruction", "ulcer", "fracture", "disorder", "syndrome", "bleeding", "stiffness",
    "deformity", "discharge", "injury", "polyp", "spasm",
]


@dataclass(frozen=True)
class ToyCatalog:
    concepts: tuple[Concept, ...]
    definitions: tuple[PhenotypeDefinition, ...]
    signal: dict[str, tuple[ConceptKey, ...]]
    related: dict[str, tuple[ConceptKey, ...]]  # untagged, clinically related concepts
    risk_factors: dict[str, tuple[ConceptKey, ...]]
    background: tuple[ConceptKey, ...]  # unrelated concepts tagged by no phenotype

    def write(self, catalog_path: str | Path, definitions_path: str | Path) -> None:
        write_catalog(self.concepts, catalog_path)
        write_phenotype_definitions(self.definitions, definitions_path)


def _icd_codes(rng: np.random.Generator, reserved: set[str]):
    letters = "ABDFGHJKLMNOPQRSTUVWXYZ"
    seen = set()
    while True:
        base = f"{letters[rng.integers(len(letters))]}{rng.integers(100):02d}"
        code = base if rng.random() < 0.4 else f"{base}.{rng.integers(10)}"
        if code in seen or any(code.startswith(r) for r in reserved):
            continue
        seen.add(code)
        yield code


def _read_codes(rng: np.random.Generator, reserved: set[str]):
    letters = "ABCDEFGHJKMNPRSTUVWXYZ"
    seen = set()
    while True:
        code = (
            f"{letters[rng.integers(len(letters))]}{rng.integers(10)}{rng.integers(10)}"
            f"{letters[rng.integers(len(letters))]}{'.' if rng.random() < 0.5 else rng.integers(10)}"
        )
        if code in seen or any(code.startswith(r) for r in reserved):
            continue
        seen.add(code)
        yield code


def generate_toy_catalog(n_concepts: int = 400, seed: int = 0) -> ToyCatalog:
    """Two-terminology catalog with four phenotypes spanning both terminologies.

    ICD-like hospital codes are matched through a parent code with
    descendants; Read-like primary-care codes are listed exactly.
    """
    n_signal = len(_PHENOTYPES) * (len(_QUALIFIERS) + len(_READ_FORMS))
    n_themed = sum(len(v) for v in _RELATED.values()) + sum(len(v) for v in _RISK_FACTORS.values())
    if n_concepts < n_signal + n_themed + 50:
        raise ConfigInvalid(f"n_concepts must be >= {n_signal + n_themed + 50}")
    rng = np.random.default_rng(seed)
    concepts: list[Concept] = []
    definitions = []
    signal: dict[str, tuple[ConceptKey, ...]] = {}
    for pid, name, parent, stem in _PHENOTYPES:
        base = name.lower()
        keys = []
        concepts.append(Concept(ICD, parent, name))
        keys.append((ICD, parent))
        for i, q in enumerate(_QUALIFIERS[1:]):
            c = Concept(ICD, f"{parent}.{i}", f"{base} {q}")
            concepts.append(c)
            keys.append(c.key)
        read_codes = []
        for i, form in enumerate(_READ_FORMS):
            code = f"{stem}{'.' if i == 0 else i}"
            concepts.append(Concept(READ, code, form.format(base)))
            keys.append((READ, code))
            read_codes.append(MatchCode(READ, code, False))
        signal[pid] = tuple(keys)
        definitions.append(
            PhenotypeDefinition(pid, name, (MatchCode(ICD, parent, True), *read_codes))
        )

    icd = _icd_codes(rng, {p[2] for p in _PHENOTYPES})
    read = _read_codes(rng, {p[3] for p in _PHENOTYPES})

    def themed(table):
        out = {}
        for pid, descs in table.items():
            keys = []
            for j, desc in enumerate(descs):
                c = Concept(ICD, next(icd), desc) if j % 2 == 0 else Concept(READ, next(read), desc)
                concepts.append(c)
                keys.append(c.key)
            out[pid] = tuple(keys)
        return out

    related = themed(_RELATED)
    risk_factors = themed(_RISK_FACTORS)

    words = list(itertools.product(_ADJ, _SITE, _COND))
    n_bg = n_concepts - len(concepts)
    if n_bg > len(words):
        raise ConfigInvalid(f"word bank supports at most {len(words) + len(concepts)} concepts")
    picks = rng.choice(len(words), size=n_bg, replace=False)
    background = []
    for j, w in enumerate(picks):
        desc = " ".join(words[w])
        c = Concept(ICD, next(icd), desc) if j % 2 == 0 else Concept(READ, next(read), desc)
        concepts.append(c)
        background.append(c.key)
    return ToyCatalog(tuple(sorted(concepts)), tuple(definitions), signal, related, risk_factors,
                      tuple(background))


# -- cohort -------------------------------------------------------------------


@dataclass(frozen=True)
class PhenotypeSpec:
    phenotype_id: str
    prevalence: float
    signal: tuple[ConceptKey, ...]
    correlated: tuple[ConceptKey, ...] = ()
    weak: tuple[ConceptKey, ...] = ()
    strength: float = 0.8
    risk_correlation: float = 0.3  # point-biserial r of the risk score with status
    mortality_log_hr: float = 0.7


@dataclass(frozen=True)
class BiomarkerSpec:
    name: str = "hba1c"
    phenotype_id: str = "t2dm"
    unit: str = "mmol/mol"
    case_mean: float = 55.0
    control_mean: float = 37.0
    severity_span: float = 36.0  # case mean moves +-span/2 across severity
    liability_slope: float = 2.0  # control mean shift per unit liability
    sd: float = 3.0
    mean_measurements: float = 5.0


@dataclass(frozen=True)
class SynthConfig:
    phenotypes: tuple[PhenotypeSpec, ...]
    n_patients: int = 2000
    comorbidity: tuple[tuple[float, ...], ...] | None = None  # pairwise odds multipliers
    background_rate: float = 6.0  # extra GP events beyond the guaranteed five
    hospital_rate: float = 1.5  # mean background admissions
    signal_events: tuple[int, int] = (1, 3)
    correlated_control_rate: float = 0.01
    weak_rate: float = 0.5
    biomarker: BiomarkerSpec | None = field(default_factory=BiomarkerSpec)
    start: dt.date = dt.date(2000, 1, 1)
    end: dt.date = dt.date(2021, 12, 31)
    base_mortality: float = 0.015  # deaths per person-year for a healthy patient
    seed: int = 0

    def validate(self) -> None:
        D = len(self.phenotypes)
        if self.n_patients < 1 or D == 0:
            raise ConfigInvalid("need at least one patient and one phenotype")
        for s in self.phenotypes:
            if not 0 < s.prevalence < 1:
                raise ConfigInvalid(f"{s.phenotype_id}: prevalence must lie in (0, 1)")
            if not 0 <= s.strength <= 1:
                raise ConfigInvalid(f"{s.phenotype_id}: strength must lie in [0, 1]")
            if not 0 <= s.risk_correlation < 1:
                raise ConfigInvalid(f"{s.phenotype_id}: risk_correlation must lie in [0, 1)")
        lo, hi = self.signal_events
        if not 0 <= lo <= hi:
            raise ConfigInvalid("signal_events must be an increasing pair of counts")
        if self.comorbidity is not None:
            m = np.asarray(self.comorbidity, dtype=float)
            if m.shape != (D, D) or not np.allclose(m, m.T) or (m <= 0).any():
                raise ConfigInvalid("comorbidity must be a symmetric positive D x D matrix")
        if self.end <= self.start:
            raise ConfigInvalid("end must follow start")


def default_config(
    toy: ToyCatalog,
    n_patients: int = 2000,
    prevalences: Sequence[float] = (0.12, 0.05, 0.03, 0.03),
    strength: float = 0.8,
    n_correlated: int = 16,
    n_weak: int = 12,
    seed: int = 0,
) -> SynthConfig:
    """Draw each phenotype's correlated and weak concepts from its related and risk-factor sets."""
    defs = toy.definitions
    rng = np.random.default_rng(seed + 7919)
    specs = []
    for i, d in enumerate(defs):
        related = toy.related[d.phenotype_id]
        risk = toy.risk_factors[d.phenotype_id]
        if n_correlated > len(related) or n_weak > len(risk):
            raise ConfigInvalid(
                f"{d.phenotype_id}: at most {len(related)} correlated and {len(risk)} weak concepts"
            )
        specs.append(
            PhenotypeSpec(
                d.phenotype_id,
                prevalences[i],
                toy.signal[d.phenotype_id],
                tuple(related[j] for j in sorted(rng.permutation(len(related))[:n_correlated])),
                tuple(risk[j] for j in sorted(rng.permutation(len(risk))[:n_weak])),
                strength,
            )
        )
    D = len(defs)
    como = np.ones((D, D))
    if D >= 2:
        como[0, 1] = como[1, 0] = 2.5  # diabetes and heart failure co-occur
    return SynthConfig(tuple(specs), n_patients, tuple(map(tuple, como)), seed=seed)


def _calibrate_intercepts(prev: Sequence[float], log_mult: np.ndarray) -> np.ndarray:
    """Base logits so that sequential comorbidity-adjusted draws hit each marginal exactly."""
    D = len(prev)
    b = np.zeros(D)
    for d in range(D):
        combos = list(itertools.product((0, 1), repeat=d))

        def joint(c):
            p = 1.0
            for e, s in enumerate(c):
                q = expit(b[e] + sum(c[f] * log_mult[e, f] for f in range(e)))
                p *= q if s else 1 - q
            return p

        weights = [joint(c) for c in combos]
        shifts = [sum(c[e] * log_mult[d, e] for e in range(d)) for c in combos]

        def marginal(x):
            return sum(w * expit(x + s) for w, s in zip(weights, shifts))

        lo, hi = -30.0, 30.0
        for _ in range(200):
            mid = (lo + hi) / 2
            lo, hi = (mid, hi) if marginal(mid) < prev[d] else (lo, mid)
        b[d] = (lo + hi) / 2
    return b


@dataclass
class SyntheticCohort:
    events: list[ClinicalEvent]
    meta: list[CohortMeta]
    patient_ids: tuple[str, ...]
    status: np.ndarray  # (N, D) true phenotype status
    liability: np.ndarray  # (N, D)
    severity: np.ndarray  # (N, D), in (0, 1) for cases, 0 for controls

    def write(self, events_path: str | Path, meta_path: str | Path) -> None:
        write_events(self.events, events_path)
        write_cohort_meta(self.meta, meta_path)


def _rand_date(rng, lo: dt.date, hi: dt.date) -> dt.date:
    span = (hi - lo).days
    return lo + dt.timedelta(days=int(rng.integers(span + 1)) if span > 0 else 0)


def generate_cohort(cfg: SynthConfig, toy: ToyCatalog) -> SyntheticCohort:
    """Draw statuses, event histories, biomarkers, risk scores and survival."""
    cfg.validate()
    known = {c.key for c in toy.concepts}
    for s in cfg.phenotypes:
        for k in (*s.signal, *s.correlated, *s.weak):
            if k not in known:
                raise ConfigInvalid(f"{s.phenotype_id}: concept {k} not in catalog")

    rng = np.random.default_rng(cfg.seed)
    N, D = cfg.n_patients, len(cfg.phenotypes)
    prev = [s.prevalence for s in cfg.phenotypes]
    log_mult = np.log(np.asarray(cfg.comorbidity if cfg.comorbidity is not None else np.ones((D, D))))
    base = _calibrate_intercepts(prev, log_mult)
    pq = np.array([p * (1 - p) for p in prev])
    r = np.array([s.risk_correlation for s in cfg.phenotypes])
    shift = r / np.sqrt(pq * (1 - r**2))  # liability mean shift giving point-biserial r

    bg_set = set(toy.background) - {k for s in cfg.phenotypes for k in (*s.correlated, *s.weak)}
    bg_gp = [k for k in toy.background if k in bg_set and k[0] == READ]
    bg_hosp = [k for k in toy.background if k in bg_set and k[0] == ICD]
    bio = cfg.biomarker
    bio_d = (
        [s.phenotype_id for s in cfg.phenotypes].index(bio.phenotype_id)
        if bio is not None and bio.phenotype_id in [s.phenotype_id for s in cfg.phenotypes]
        else None
    )

    events: list[ClinicalEvent] = []
    metas: list[CohortMeta] = []
    width = len(str(N))
    pids = tuple(f"P{i:0{width}d}" for i in range(N))
    status = np.zeros((N, D), dtype=np.uint8)
    liab = np.zeros((N, D))
    sev = np.zeros((N, D))

    for i, pid in enumerate(pids):
        for d in range(D):
            x = base[d] + sum(status[i, e] * log_mult[d, e] for e in range(d))
            status[i, d] = rng.random() < expit(x)
        liab[i] = rng.standard_normal(D) + shift * status[i]
        sev[i] = np.where(status[i] == 1, norm.cdf(liab[i] - shift), 0.0)

        origin = _rand_date(rng, cfg.start, cfg.start + dt.timedelta(days=3650))
        hazard = cfg.base_mortality * math.exp(
            sum(s.mortality_log_hr * status[i, d] * (0.5 + sev[i, d]) for d, s in enumerate(cfg.phenotypes))
        )
        years = rng.exponential(1 / hazard)
        death = origin + dt.timedelta(days=int(years * 365.25))
        if death > cfg.end:
            death = None
        stop = death or cfg.end

        keys: list[tuple[ConceptKey, Source]] = []
        n_gp = 5 + rng.poisson(cfg.background_rate)
        for k in rng.choice(len(bg_gp), size=n_gp):
            keys.append((bg_gp[k], Source.GP))
        admissions: list[list[ConceptKey]] = []
        extra = sum(rng.poisson(cfg.phenotypes[d].strength * (1 + 2 * sev[i, d])) for d in range(D) if status[i, d])
        for _ in range(rng.poisson(cfg.hospital_rate) + extra):
            admissions.append([bg_hosp[k] for k in rng.choice(len(bg_hosp), size=rng.integers(1, 4))])

        for d, s in enumerate(cfg.phenotypes):
            case = bool(status[i, d])
            if case and s.signal:
                lo, hi = cfg.signal_events
                for k in rng.choice(len(s.signal), size=rng.integers(lo, hi + 1)):
                    keys.append((s.signal[k], SOURCE_OF[s.signal[k][0]]))
            if case:
                p_corr = s.strength * (0.1 + 0.9 * sev[i, d])
            else:
                p_corr = s.strength * cfg.correlated_control_rate * 2.0 ** liab[i, d]
            for k in s.correlated:
                if rng.random() < min(1.0, p_corr):
                    keys.append((k, SOURCE_OF[k[0]]))
            p_weak = s.strength * cfg.weak_rate * expit(2.0 * liab[i, d] + 2.0 * case)
            for k in s.weak:
                if rng.random() < p_weak:
                    keys.append((k, SOURCE_OF[k[0]]))

        first = True
        for k, src in keys:
            date = origin if first else _rand_date(rng, origin, stop)
            first = False
            if src is Source.HOSPITAL:
                admissions.append([k])
                continue
            events.append(ClinicalEvent(pid, date, src, *k))
        for adm in admissions:
            date = _rand_date(rng, origin, stop)
            for k in adm:
                events.append(ClinicalEvent(pid, date, Source.HOSPITAL, *k))

        biomarkers = {}
        if bio is not None:
            n_meas = rng.poisson(bio.mean_measurements)
            if bio_d is not None and status[i, bio_d]:
                mean = bio.case_mean + bio.severity_span * (sev[i, bio_d] - 0.5)
            else:
                z = liab[i, bio_d] if bio_d is not None else 0.0
                mean = bio.control_mean + bio.liability_slope * z
            series = sorted(
                (_rand_date(rng, origin, stop), round(float(mean + bio.sd * rng.standard_normal()), 1))
                for _ in range(n_meas)
            )
            biomarkers[bio.name] = [Measurement(day, v, bio.unit) for day, v in series]
        metas.append(
            CohortMeta(
                patient_id=pid,
                sex="F" if rng.random() < 0.5 else "M",
                birth_year=int(rng.integers(1940, 1971)),
                last_followup=stop,
                death_date=death,
                biomarkers=biomarkers,
                risk_scores={
                    f"prs_{s.phenotype_id}": round(float(liab[i, d]), 6)
                    for d, s in enumerate(cfg.phenotypes)
                },
            )
        )

    events.sort(key=lambda e: (e.patient_id, e.date))
    return SyntheticCohort(events, metas, pids, status, liab, sev)
