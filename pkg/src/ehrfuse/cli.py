"""Command-line entry point: one subcommand per pipeline stage, files in and files out."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import synthgen
from .config import RunConfig, load_config
from .encoder import TextEncoder, load_checkpoint, save_checkpoint
from .errors import ConfigInvalid, EhrFuseError
from .evaluation import (
    PredictionSet,
    aggregate_biomarker,
    auprc,
    define_groups,
    expand_cohort,
    group_summary,
    percentile_median_curve,
    phenotype_report,
    welch_t_test,
    write_json,
    write_tsv,
)
from .ontology import load_catalog, load_phenotype_definitions
from .pipeline import mask_corpus, prepare_cohort, read_prepared, write_prepared
from .records import load_cohort_meta
from .samples import plain_samples
from .tokenizer import Vocabulary, build_vocab
from .training import run_finetuning, run_pretraining

EXIT_ARGS, EXIT_CONFIG, EXIT_RUNTIME = 1, 2, 3
COMMANDS = ("synth", "preprocess", "build-vocab", "pretrain", "train", "evaluate", "expand", "report")

log = logging.getLogger("ehrfuse")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ARGS, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides paths.out_dir)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field by dotted path; repeatable")
    p = _Parser(prog="ehrfuse", description=__doc__)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    helps = {
        "synth": "generate a synthetic catalog, definitions, events and metadata",
        "preprocess": "fuse, label and split patient histories",
        "build-vocab": "build the subword vocabulary from catalog descriptions",
        "pretrain": "masked-language-model pretraining",
        "train": "fine-tune the fold models and predict their test folds",
        "evaluate": "metrics and curves from test-fold predictions",
        "expand": "list high-probability controls as missed cases",
        "report": "group summaries, biomarker tests and survival curves",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return p


def _progress(**fields) -> None:
    print(json.dumps(fields, sort_keys=True), flush=True)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_jsonl(records, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _require(*paths: Path) -> None:
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise ConfigInvalid(f"missing input file(s): {', '.join(missing)}")


def _write_manifest(cfg: RunConfig, command: str, inputs: Sequence[Path], outputs: Sequence[Path]) -> Path:
    out = cfg.out_dir
    rel = lambda p: str(p.relative_to(out)) if p.is_relative_to(out) else str(p)
    manifest = {
        "command": command,
        "config": cfg.to_json(),
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "inputs": {rel(p): _sha256(p) for p in inputs},
        "outputs": {rel(p): _sha256(p) for p in outputs},
    }
    path = out / "manifests" / f"{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_json(manifest, path)
    return path


# -- shared loaders -----------------------------------------------------------


def _catalog_and_defs(cfg: RunConfig):
    _require(cfg.path("catalog"), cfg.path("definitions"))
    catalog = load_catalog(cfg.path("catalog"))
    return catalog, load_phenotype_definitions(cfg.path("definitions"), catalog)


def _prepared(cfg: RunConfig):
    catalog, defs = _catalog_and_defs(cfg)
    _require(cfg.out_dir / "preprocessed" / "sequences.jsonl")
    return catalog, defs, read_prepared(cfg.out_dir / "preprocessed", catalog, defs, cfg.preprocess.k)


def _predictions(cfg: RunConfig) -> PredictionSet:
    path = cfg.out_dir / "predictions" / "predictions.tsv"
    _require(path)
    return PredictionSet.read(path)


# -- commands -----------------------------------------------------------------


def cmd_synth(cfg: RunConfig):
    s = cfg.synth
    toy = synthgen.generate_toy_catalog(s.n_concepts, cfg.seed)
    if len(s.prevalences) != len(toy.definitions):
        raise ConfigInvalid(f"synth.prevalences needs {len(toy.definitions)} values")
    scfg = synthgen.default_config(toy, s.n_patients, s.prevalences, s.strength,
                                   s.n_correlated, s.n_weak, cfg.seed)
    cohort = synthgen.generate_cohort(scfg, toy)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    toy.write(cfg.path("catalog"), cfg.path("definitions"))
    cohort.write(cfg.path("events"), cfg.path("metadata"))
    truth = cfg.out_dir / "truth.tsv"
    ids = [d.phenotype_id for d in toy.definitions]
    with open(truth, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("patient_id\t" + "\t".join(f"{p}\t{p}_severity" for p in ids) + "\n")
        for i, pid in enumerate(cohort.patient_ids):
            cells = [f"{int(cohort.status[i, d])}\t{cohort.severity[i, d]:.6f}" for d in range(len(ids))]
            fh.write(pid + "\t" + "\t".join(cells) + "\n")
    _progress(stage="synth", patients=len(cohort.patient_ids), events=len(cohort.events),
              prevalence=[round(float(x), 4) for x in cohort.status.mean(axis=0)])
    outs = [cfg.path(n) for n in ("catalog", "definitions", "events", "metadata")] + [truth]
    return [], outs


def cmd_preprocess(cfg: RunConfig):
    catalog, defs = _catalog_and_defs(cfg)
    _require(cfg.path("events"))
    p = cfg.preprocess
    cohort = prepare_cohort(cfg.path("events"), catalog, defs, p.window_days, p.min_terms, p.k, cfg.seed)
    paths = write_prepared(cohort, cfg.out_dir / "preprocessed")
    summary = cfg.out_dir / "preprocessed" / "summary.json"
    write_json(
        {
            "patients": len(cohort.tagged),
            "excluded_patients": cohort.excluded_patients,
            "dropped_events": cohort.dropped_events,
            "case_counts": dict(zip(cohort.labels.phenotype_ids, cohort.labels.case_counts().tolist())),
            "fold_sizes": cohort.folds.sizes().tolist(),
        },
        summary,
    )
    _progress(stage="preprocess", patients=len(cohort.tagged), excluded=cohort.excluded_patients)
    return [cfg.path("catalog"), cfg.path("definitions"), cfg.path("events")], [*paths.values(), summary]


def cmd_build_vocab(cfg: RunConfig):
    _require(cfg.path("catalog"))
    catalog = load_catalog(cfg.path("catalog"))
    vocab = build_vocab(catalog.descriptions(), cfg.tokenizer.vocab_size,
                        max_subword_len=cfg.tokenizer.max_subword_len)
    vocab.save(cfg.path("vocab"))
    _progress(stage="build-vocab", size=len(vocab))
    return [cfg.path("catalog")], [cfg.path("vocab")]


def cmd_pretrain(cfg: RunConfig):
    _, defs, cohort = _prepared(cfg)
    _require(cfg.path("vocab"))
    vocab = Vocabulary.load(cfg.path("vocab"))
    mcfg = cfg.model_config(len(vocab), len(defs))
    samples = plain_samples(cohort.tagged, vocab, mcfg.max_tokens)
    model = TextEncoder(mcfg, seed=cfg.seed + 404)
    _progress(stage="pretrain", samples=len(samples))
    best, tlog = run_pretraining(samples, model, cfg.train_config(), cfg.mlm_config(),
                                 cfg.train.mlm_max_steps)
    ckpt = cfg.out_dir / "checkpoints" / "mlm.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(best, ckpt)
    logf = cfg.out_dir / "logs" / "pretrain.jsonl"
    _write_jsonl(tlog.records, logf)
    _progress(stage="pretrain", best_step=best.step,
              val_loss=min(tlog.losses("val"), default=None))
    return [cfg.out_dir / "preprocessed" / "sequences.jsonl", cfg.path("vocab")], [ckpt, logf]


def cmd_train(cfg: RunConfig):
    catalog, defs, cohort = _prepared(cfg)
    mlm_path = cfg.out_dir / "checkpoints" / "mlm.ckpt"
    _require(cfg.path("vocab"), mlm_path)
    vocab = Vocabulary.load(cfg.path("vocab"))
    pretrained = load_checkpoint(mlm_path)
    corpus = mask_corpus(catalog)
    tcfg = cfg.train_config()
    outs, parts = [], []
    for i in cfg.train.models:
        _progress(stage="train", model=i, status="start")
        res = run_finetuning(cohort.tagged, cohort.folds, i, tcfg, pretrained, vocab,
                             cfg.masking_config(), corpus)
        ck = cfg.out_dir / "checkpoints" / f"model{i}.ckpt"
        save_checkpoint(res.checkpoint, ck)
        pred = cfg.out_dir / "predictions" / f"model{i}.tsv"
        pred.parent.mkdir(parents=True, exist_ok=True)
        res.predictions.write(pred)
        logf = cfg.out_dir / "logs" / f"train_model{i}.jsonl"
        _write_jsonl(res.log.records, logf)
        info = cfg.out_dir / "logs" / f"train_model{i}.json"
        write_json({"roles": res.roles, "rho": res.rho.tolist(), "best_step": res.checkpoint.step}, info)
        parts.append(res.predictions)
        outs += [ck, pred, logf, info]
        _progress(stage="train", model=i, status="done", best_step=res.checkpoint.step,
                  test_fold=res.roles["test"])
    combined = cfg.out_dir / "predictions" / "predictions.tsv"
    PredictionSet.concat(parts).write(combined)
    return [cfg.out_dir / "preprocessed" / "sequences.jsonl", cfg.path("vocab"), mlm_path], [*outs, combined]


def _risk_scores(cfg: RunConfig, preds: PredictionSet) -> dict[str, np.ndarray]:
    if not cfg.path("metadata").exists():
        return {}
    meta = load_cohort_meta(cfg.path("metadata"))
    out = {}
    for ph in preds.phenotype_ids:
        name = f"prs_{ph}"
        vals = [meta[p].risk_scores.get(name) if p in meta else None for p in preds.patient_ids]
        if all(v is not None for v in vals):
            out[ph] = np.array(vals, dtype=np.float64)
    return out


def cmd_evaluate(cfg: RunConfig):
    preds = _predictions(cfg)
    e = cfg.evaluation
    report = phenotype_report(preds, e.threshold, cfg.percentiles())
    risk = _risk_scores(cfg, preds)
    pr_rows, risk_rows = [], []
    for d, ph in enumerate(preds.phenotype_ids):
        s, y = preds.column(d)
        if y.sum() >= 2 and len(y) - y.sum() >= 2:
            w = welch_t_test(s[y == 1], s[y == 0], "greater")
            report[ph]["cases_vs_controls"] = {
                "median_cases": float(np.median(s[y == 1])),
                "median_controls": float(np.median(s[y == 0])),
                "welch_t": w.t, "welch_df": w.df, "welch_p": w.p,
            }
        if y.sum():
            order = np.argsort(-s, kind="mergesort")
            tp = np.cumsum(y[order])
            k = np.arange(1, len(s) + 1)
            pr_rows += [(ph, float(s[i]), float(r), float(p))
                        for i, r, p in zip(order, tp / y.sum(), tp / k)]
        if ph in risk:
            for bins in (10, 100):
                risk_rows += [(ph, bins, b, m) for b, m in percentile_median_curve(risk[ph], s, bins)]
    out = cfg.out_dir / "evaluation"
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / "metrics.json"
    write_json({"model_folds": sorted(set(preds.folds.tolist())), "phenotypes": report}, metrics)
    pr = out / "pr_curves.tsv"
    write_tsv(pr_rows, ("phenotype_id", "threshold", "recall", "precision"), pr)
    rc = out / "risk_curves.tsv"
    write_tsv(risk_rows, ("phenotype_id", "bins", "bin", "median_probability"), rc)
    for ph, r in report.items():
        _progress(stage="evaluate", phenotype=ph, recall=r.get("recall"), auprc=r.get("auprc"))
    return [cfg.out_dir / "predictions" / "predictions.tsv"], [metrics, pr, rc]


def cmd_expand(cfg: RunConfig):
    preds = _predictions(cfg)
    path = cfg.out_dir / "evaluation" / "missed_cases.tsv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("phenotype_id\tpatient_id\tprobability\n")
        for d, ph in enumerate(preds.phenotype_ids):
            s, y = preds.column(d)
            if y.all():
                continue
            picked = expand_cohort(s, y, preds.patient_ids, cfg.evaluation.expand_percentile)
            row = {p: i for i, p in enumerate(preds.patient_ids)}
            for pid in picked:
                fh.write(f"{ph}\t{pid}\t{float(s[row[pid]])!r}\n")
            _progress(stage="expand", phenotype=ph, missed_cases=len(picked))
    return [cfg.out_dir / "predictions" / "predictions.tsv"], [path]


def cmd_report(cfg: RunConfig):
    preds = _predictions(cfg)
    _, _, cohort = _prepared(cfg)
    _require(cfg.path("metadata"))
    meta = load_cohort_meta(cfg.path("metadata"))
    names = sorted({b for m in meta.values() for b in m.biomarkers})
    q = cfg.evaluation.biomarker_quantile
    out = {}
    group_rows, km_rows = [], []
    for d, ph in enumerate(preds.phenotype_ids):
        s, y = preds.column(d)
        if not 0 < y.sum() < len(y):
            continue
        groups = define_groups(s, y, cfg.percentiles(), ph, preds.patient_ids)
        stats = group_summary(groups, cohort.histories, meta, names, q)
        for g, st in stats.items():
            for measure, summary in [("gp_codes", st.gp_codes), ("hospital_codes", st.hospital_codes),
                                     *[(b, st.biomarkers[b]) for b in names]]:
                group_rows.append((ph, g, st.size, measure, *(summary[k] for k in _FIVE)))
            if st.survival is not None:
                km_rows += [(ph, g, *row) for row in st.survival.rows()]
        tests = {}
        for b in names:
            hi, _ = aggregate_biomarker((meta[p] for p in groups.ids("cases_high")), b, q)
            lo, _ = aggregate_biomarker((meta[p] for p in groups.ids("cases_low")), b, q)
            if len(hi) >= 2 and len(lo) >= 2:
                w = welch_t_test(list(hi.values()), list(lo.values()), "greater")
                tests[b] = {"t": w.t, "df": w.df, "p": w.p,
                            "mean_cases_high": float(np.mean(list(hi.values()))),
                            "mean_cases_low": float(np.mean(list(lo.values())))}
        out[ph] = {"cutoffs": groups.cutoffs, "group_sizes": groups.sizes(),
                   "auprc": auprc(s, y), "cases_high_vs_low": tests}
        _progress(stage="report", phenotype=ph, groups=groups.sizes())
    ev = cfg.out_dir / "evaluation"
    ev.mkdir(parents=True, exist_ok=True)
    path = ev / "report.json"
    write_json(out, path)
    gpath = ev / "group_summary.tsv"
    write_tsv(group_rows, ("phenotype_id", "group", "size", "measure", *_FIVE), gpath)
    kpath = ev / "km_curves.tsv"
    write_tsv(km_rows, ("phenotype_id", "group", "days", "survival", "at_risk", "deaths"), kpath)
    return [cfg.out_dir / "predictions" / "predictions.tsv", cfg.path("metadata")], [path, gpath, kpath]


_FIVE = ("min", "q1", "median", "q3", "max", "mean")


HANDLERS: dict[str, Callable[[RunConfig], tuple[list[Path], list[Path]]]] = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "build-vocab": cmd_build_vocab,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "expand": cmd_expand,
    "report": cmd_report,
}


def run_command(argv: Sequence[str]) -> int:
    try:
        args = _parser().parse_args(list(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config, args.set, args.seed, args.out)
    except ConfigInvalid as exc:
        print(f"ehrfuse: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        inputs, outputs = HANDLERS[args.command](cfg)
        manifest = _write_manifest(cfg, args.command, inputs, outputs)
    except ConfigInvalid as exc:
        print(f"ehrfuse: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EhrFuseError, OSError, ValueError, KeyError) as exc:
        print(f"ehrfuse: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    _progress(stage=args.command, status="ok", manifest=str(manifest))
    return 0


def main(argv: Sequence[str] | None = None) -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
