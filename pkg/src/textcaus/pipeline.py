"""Stage functions behind the command line.

Each stage reads only the files written by earlier stages into the run
directory and writes into its own subdirectory, so the full pipeline and a
stage-by-stage run produce the same files.
"""

from __future__ import annotations

import csv
import json
import math
import os
import platform
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__, _kernels
from .config import ConfigError, RunConfig, check_inputs
from .corpus import (
    DocTermMatrix,
    TokenizeConfig,
    aggregate_patient_docs,
    build_dtm,
    build_vocabulary,
    key_term_covariates,
    read_notes_jsonl,
    read_stop_list,
    tokenize,
)
from .effects import (
    EffectEstimate,
    att_estimate,
    build_subgroups,
    interaction_scan,
    pool_effects,
    pool_subgroup_scan,
    read_embeddings,
    read_scan_csv,
    write_scan_csv,
)
from .impute import (
    SR_PREFIX,
    CovariateTable,
    ImputedSet,
    augment,
    cv_evaluate_many,
    mice,
    read_covariates_csv,
    write_covariates_csv,
)
from .match import (
    MatchedSample,
    balance_table,
    caliper_graph,
    effective_sample_size,
    fit_propensity,
    optimal_full_match,
    propensity_distances,
    text_match_within_calipers,
    write_balance_csv,
)
from .mnir import MnirConfig, fit_mnir, sr_scores

STAGES = ("ingest", "dtm", "mnir", "impute", "match", "effects", "hetfx", "report")
UPSTREAM = {
    "dtm": "ingest",
    "mnir": "dtm",
    "impute": "mnir",
    "match": "impute",
    "effects": "match",
    "hetfx": "match",
    "report": "effects",
}


class DataError(ValueError):
    """Input data or upstream artifacts are unusable."""


class StageExistsError(ValueError):
    """A stage directory already holds outputs (runs are write-once)."""


class Run:
    """Run directory bookkeeping shared by all stages."""

    def __init__(self, cfg: RunConfig, root: Path, threads: int = 1, overwrite: bool = False):
        self.cfg = cfg
        self.root = Path(root)
        self.threads = max(1, int(threads))
        _kernels.set_threads(self.threads)
        self.overwrite = overwrite
        self.root.mkdir(parents=True, exist_ok=True)

    def dir(self, stage: str) -> Path:
        return self.root / stage

    def begin(self, stage: str) -> Path:
        d = self.dir(stage)
        if d.exists() and any(d.iterdir()):
            if not self.overwrite:
                raise StageExistsError(f"stage '{stage}' already has outputs in {d}; use --overwrite to replace them")
            for f in sorted(d.rglob("*"), reverse=True):
                f.unlink() if f.is_file() else f.rmdir()
        d.mkdir(parents=True, exist_ok=True)
        return d

    def need(self, stage: str, *names: str) -> list[Path]:
        paths = [self.dir(stage) / n for n in names]
        missing = [p for p in paths if not p.exists()]
        if missing:
            raise DataError(f"missing upstream artifact {missing[0]}; run the '{stage}' stage first")
        return paths

    def record(self, stage: str, seconds: float) -> None:
        path = self.root / "manifest.json"
        manifest = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
        manifest["config_hash"] = self.cfg.digest()
        manifest["versions"] = _versions()
        manifest.setdefault("stages", {})[stage] = {
            "seconds": round(seconds, 3),
            "outputs": sorted(str(p.relative_to(self.root)) for p in self.dir(stage).rglob("*") if p.is_file()),
        }
        _atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def stage_seed(self, stage: str) -> int:
        return int(np.random.SeedSequence([self.cfg.seed, STAGES.index(stage)]).generate_state(1)[0])


def _versions() -> dict:
    import numba
    import scipy

    return {
        "textcaus": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "numba_enabled": _kernels.NUMBA_ENABLED,
    }


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _f(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_f(v) for v in r])


def _read_outcomes(path: Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"patient_id", "z", "y"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns patient_id,z,y")
        rows = list(reader)
    try:
        z = np.array([int(r["z"]) for r in rows])
        y = np.array([float(r["y"]) for r in rows])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not np.isin(z, (0, 1)).all():
        raise DataError(f"{path}: treatment z must be 0/1")
    return [r["patient_id"] for r in rows], z, y


def _tokenize_cfg(cfg: RunConfig) -> TokenizeConfig:
    pre = cfg.preprocess
    kw = {"ngram_orders": tuple(pre.ngram_orders), "stem": pre.stem}
    if pre.stop_list:
        kw["stop_words"] = read_stop_list(cfg.resolve(pre.stop_list))
    return TokenizeConfig(**kw)


# -- stages ------------------------------------------------------------------


SYNTH_INPUTS = {
    "notes": "notes.jsonl",
    "covariates": "covariates.csv",
    "outcomes": "outcomes.csv",
    "column_kinds": "column_kinds.json",
    "key_terms": "key_terms.txt",
    "embeddings": "embeddings.csv",
}


def stage_synth(run: Run) -> None:
    """Generate a synthetic cohort into ``<run>/synth`` from the ``synth`` section."""
    from .synth import SynthConfig, generate

    opts = dict(run.cfg.synth)
    opts.setdefault("seed", run.cfg.seed)
    try:
        scfg = SynthConfig.from_dict(opts)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth: {exc}") from exc
    out = run.begin("synth")
    generate(scfg).write(out)


def _with_synth_inputs(run: Run) -> RunConfig:
    """Fill unset input paths from ``<run>/synth`` when a synthetic cohort is present."""
    cfg = run.cfg
    d = run.dir("synth")
    if cfg.inputs.notes is not None or not (d / "notes.jsonl").exists():
        return cfg
    fill = {k: str((d / f).resolve()) for k, f in SYNTH_INPUTS.items() if getattr(cfg.inputs, k) is None and (d / f).exists()}
    return replace(cfg, inputs=replace(cfg.inputs, **fill))


def stage_ingest(run: Run) -> None:
    cfg = _with_synth_inputs(run)
    check_inputs(cfg, ("notes", "covariates", "outcomes"))
    kinds = None
    if cfg.inputs.column_kinds:
        kinds = json.loads(cfg.resolve(cfg.inputs.column_kinds).read_text(encoding="utf-8"))
    try:
        cov = read_covariates_csv(cfg.resolve(cfg.inputs.covariates), kinds)
        notes = read_notes_jsonl(cfg.resolve(cfg.inputs.notes))
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    ids, z, y = _read_outcomes(cfg.resolve(cfg.inputs.outcomes))
    if ids != cov.ids:
        raise DataError("outcomes and covariates must list the same patients in the same order")
    if len(set(ids)) != len(ids):
        raise DataError("duplicate patient ids")
    unknown = sorted({n.patient_id for n in notes} - set(ids))
    if unknown:
        raise DataError(f"notes reference unknown patients, e.g. {unknown[:3]}")
    docs = aggregate_patient_docs(notes, cfg.preprocess.cutoff_hours, ids)

    out = run.begin("ingest")
    write_covariates_csv(cov, out / "covariates.csv")
    (out / "column_kinds.json").write_text(json.dumps(dict(zip(cov.columns, cov.kinds)), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _write_rows(out / "outcomes.csv", ["patient_id", "z", "y"], zip(ids, z.tolist(), [int(v) if v == int(v) else v for v in y]))
    with open(out / "documents.jsonl", "w", encoding="utf-8") as fh:
        for pid in ids:
            fh.write(json.dumps({"patient_id": pid, "text": docs[pid]}, ensure_ascii=False) + "\n")
    per = {}
    for n in notes:
        if n.chart_offset_hours <= cfg.preprocess.cutoff_hours:
            per.setdefault(n.patient_id, []).append(n)
    rows = []
    for arm, label in ((0, "control"), (1, "treatment")):
        sel = [i for i, zz in zip(ids, z) if zz == arm]
        counts = np.array([len(per.get(i, ())) for i in sel], dtype=float)
        chars = np.array([len(docs[i]) for i in sel], dtype=float)
        rows.append([label, len(sel), counts.mean(), counts.std(ddof=1), chars.mean(), chars.std(ddof=1), float(np.mean(y[z == arm]))])
    _write_rows(out / "summary.csv", ["group", "n", "notes_mean", "notes_sd", "chars_mean", "chars_sd", "outcome_mean"], rows)


def _load_ingest(run: Run):
    cov_p, kinds_p, out_p, docs_p = run.need("ingest", "covariates.csv", "column_kinds.json", "outcomes.csv", "documents.jsonl")
    kinds = json.loads(kinds_p.read_text(encoding="utf-8"))
    cov = read_covariates_csv(cov_p, kinds)
    ids, z, y = _read_outcomes(out_p)
    return cov, z, y, docs_p


def stage_dtm(run: Run) -> None:
    _, _, _, docs_p = _load_ingest(run)
    with open(docs_p, encoding="utf-8") as fh:
        texts = [json.loads(line)["text"] for line in fh]
    tcfg = _tokenize_cfg(run.cfg)
    toks = [tokenize(t, tcfg) for t in texts]
    vocab = build_vocabulary(toks, run.cfg.preprocess.min_df, run.cfg.preprocess.max_df_fraction)
    if len(vocab) == 0:
        raise DataError("vocabulary is empty after document-frequency filtering; lower preprocess.min_df")
    dtm = build_dtm(toks, vocab)
    out = run.begin("dtm")
    dtm.save(out / "dtm.txt", out / "vocab.txt")


def _load_dtm(run: Run) -> DocTermMatrix:
    d, v = run.need("dtm", "dtm.txt", "vocab.txt")
    return DocTermMatrix.load(d, v)


def stage_mnir(run: Run) -> None:
    cov, _, _, _ = _load_ingest(run)
    dtm = _load_dtm(run)
    cc = cov.complete_rows()
    if cc.sum() < cov.shape[1] + 2:
        raise DataError(f"only {int(cc.sum())} complete cases for {cov.shape[1]} covariates")
    mcfg = MnirConfig(**asdict(run.cfg.mnir))
    try:
        model = fit_mnir(dtm.select_rows(np.flatnonzero(cc)), cov.values[cc], mcfg, cov.columns)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    scores = sr_scores(dtm, model)
    out = run.begin("mnir")
    model.save(out / "model.npz")
    _write_rows(out / "sr_scores.csv", ["patient_id"] + [SR_PREFIX + c for c in cov.columns], ([i] + row.tolist() for i, row in zip(cov.ids, scores)))
    _write_rows(
        out / "diagnostics.csv",
        ["token", "converged", "penalty", "deviance", "n_nonzero"],
        zip(dtm.vocab.tokens, model.converged.astype(int).tolist(), model.penalties.tolist(), model.deviance.tolist(), (model.phi != 0).sum(axis=1).tolist()),
    )


def stage_impute(run: Run) -> None:
    cfg = run.cfg
    cov, _, _, _ = _load_ingest(run)
    (sr_p,) = run.need("mnir", "sr_scores.csv")
    sr = read_covariates_csv(sr_p)
    seed = run.stage_seed("impute")
    x_star = augment(cov, sr.values, cov.columns) if cfg.impute.use_text else cov
    if cov.any_missing().any():
        imp = mice(x_star, m=cfg.impute.m, n_iter=cfg.impute.n_iter, seed=seed, threads=run.threads)
    else:
        imp = ImputedSet(1, [x_star.values.copy()], seed, list(x_star.ids), list(x_star.columns), list(x_star.kinds), 0)
    cv_rows = []
    if cfg.impute.evaluate:
        targets = cfg.impute.cv_targets or [c for c, k, miss in zip(cov.columns, cov.kinds, cov.mask.sum(axis=0)) if miss > 0 and k == "continuous"]
        if targets:
            dtm = _load_dtm(run)
            res = cv_evaluate_many(cov, dtm, targets, folds=cfg.impute.cv_folds, seed=seed, mnir_cfg=MnirConfig(**asdict(cfg.mnir)))
            for t in targets:
                r = res[t]
                diff = r["rmse_structured"] - r["rmse_text"]
                cv_rows.append([t, r["n_missing"], r["r2_structured"], r["r2_text"], r["rmse_structured"], r["rmse_text"], diff, 100.0 * diff / r["rmse_structured"]])
    out = run.begin("impute")
    imp.save(out, cov.columns)
    _write_rows(out / "cv_report.csv", ["variable", "n_missing", "r2_structured", "r2_text", "rmse_structured", "rmse_text", "rmse_diff", "pct_change"], cv_rows)


def _load_imputed(run: Run) -> tuple[ImputedSet, CovariateTable]:
    cov, _, _, _ = _load_ingest(run)
    run.need("impute", "manifest.json")
    imp = ImputedSet.load(run.dir("impute"), dict(zip(cov.columns, cov.kinds)))
    return imp, cov


def _key_terms(run: Run) -> list[str]:
    p = _with_synth_inputs(run).inputs.key_terms
    if not p:
        return []
    path = run.cfg.resolve(p)
    if not path.exists():
        raise DataError(f"key-term list not found: {p}")
    return [t.strip() for t in path.read_text(encoding="utf-8").splitlines() if t.strip()]


def _match_one(run: Run, x: np.ndarray, z: np.ndarray, dtm: DocTermMatrix) -> tuple[MatchedSample, MatchedSample, dict]:
    mc = run.cfg.match
    pm = fit_propensity(x, z, ridge=mc.ridge)
    graph = caliper_graph(pm, z, mc.caliper, scale=mc.scale)
    kw = {"solver": mc.solver, "max_controls": mc.max_controls, "max_treated": mc.max_treated}
    psm = optimal_full_match(graph, propensity_distances(graph, pm), **kw)
    text = text_match_within_calipers(dtm, graph, **kw)
    info = {"caliper_threshold": graph.threshold, "n_edges": graph.n_edges}
    return psm, text, info


def stage_match(run: Run) -> None:
    imp, cov = _load_imputed(run)
    _, z, _, _ = _load_ingest(run)
    dtm = _load_dtm(run)
    terms = _key_terms(run)
    xt = key_term_covariates(dtm, terms) if terms else None
    miss = cov.any_missing().astype(float)

    def job(k):
        x = imp.table(k).values
        psm, text, info = _match_one(run, x, z, dtm)
        reports = {}
        for name, sample in (("psm", psm), ("text", text)):
            reports[name] = balance_table(x, xt, z, sample.weights, cov.columns, terms, missing_indicator=miss)
        return psm, text, info, reports

    with ThreadPoolExecutor(max_workers=run.threads) as ex:
        results = list(ex.map(job, range(imp.m)))
    out = run.begin("match")
    rows = []
    for k, (psm, text, info, _) in enumerate(results, 1):
        for name, s in (("psm", psm), ("text", text)):
            s.save_csv(out / f"{name}_{k}.csv", cov.ids)
            wc = s.weights[z == 0]
            rows.append([k, name, len(s.sets), len(s.dropped_treated), len(s.dropped_control), int((wc > 0).sum()), effective_sample_size(wc), s.total_distance, info["caliper_threshold"]])
    _write_rows(out / "summary.csv", ["imputation", "method", "n_sets", "dropped_treated", "dropped_control", "retained_controls", "kish_ess_controls", "total_distance", "caliper_threshold"], rows)
    write_balance_csv(out / "balance.csv", [r[3]["psm"] for r in results], [r[3]["text"] for r in results])


def _load_matches(run: Run, m: int, z: np.ndarray) -> dict[str, list[MatchedSample]]:
    out: dict[str, list[MatchedSample]] = {"psm": [], "text": []}
    for name in out:
        for k in range(1, m + 1):
            (p,) = run.need("match", f"{name}_{k}.csv")
            sample, _ = MatchedSample.load_csv(p)
            if not np.array_equal(sample.z, z.astype(bool)):
                raise DataError(f"{p} does not match the ingested treatment vector")
            out[name].append(sample)
    return out


def _weighted_rate(y, w, mask) -> float:
    sel = mask & (w > 0)
    return float(np.sum(y[sel] * w[sel]) / np.sum(w[sel]))


def stage_effects(run: Run) -> None:
    imp, _ = _load_imputed(run)
    _, z, y, _ = _load_ingest(run)
    matches = _load_matches(run, imp.m, z)
    n = len(z)
    unit = np.ones(n)
    rows, per = [], []
    for label in ("before", "psm", "text"):
        ests: list[EffectEstimate] = []
        extra = []
        for k in range(imp.m):
            if label == "before":
                w, sid = unit, np.arange(n)
            else:
                s = matches[label][k]
                w, sid = s.weights, s.set_ids
            e = att_estimate(y, z, w, sid)
            ests.append(e)
            wc = w[z == 0]
            extra.append((int((wc > 0).sum()), effective_sample_size(wc), _weighted_rate(y, w, z == 0), _weighted_rate(y, w, z == 1)))
            per.append([label, k + 1, e.estimate, e.se, e.p_value, extra[-1][0], extra[-1][1], extra[-1][2], extra[-1][3]])
            if label == "before":
                break
        pooled = pool_effects(ests) if len(ests) > 1 else ests[0]
        ex = np.mean(np.array(extra), axis=0)
        rows.append([label, ex[0], ex[1], ex[2], ex[3], pooled.estimate, pooled.se, pooled.ci95[0], pooled.ci95[1], pooled.p_value, pooled.df])
    out = run.begin("effects")
    _write_rows(out / "att.csv", ["method", "retained_controls", "kish_ess_controls", "control_rate", "treated_rate", "estimate", "se", "ci_low", "ci_high", "p_value", "df"], rows)
    _write_rows(out / "att_by_imputation.csv", ["method", "imputation", "estimate", "se", "p_value", "retained_controls", "kish_ess_controls", "control_rate", "treated_rate"], per)


def stage_hetfx(run: Run) -> None:
    cfg = run.cfg
    h = cfg.hetfx
    imp, cov = _load_imputed(run)
    _, z, y, _ = _load_ingest(run)
    matches = _load_matches(run, imp.m, z)[h.sample]
    dtm = _load_dtm(run) if {"token_presence", "dtm_pca"} & set(h.methods) else None
    cfg = _with_synth_inputs(run)
    emb = read_embeddings(cfg.resolve(cfg.inputs.embeddings), cov.ids) if cfg.inputs.embeddings else None
    binary_y = np.isin(y, (0, 1)).all()

    for method in h.methods:
        if method != "token_presence" and not binary_y:
            raise DataError(f"{method} thresholds need a binary outcome")

    def scan(k):
        s = matches[k]
        x = imp.table(k, cov.columns).values
        rules, dropped = [], {}
        for method in h.methods:
            r, nd = build_subgroups(method, x=x, names=cov.columns, outcome=y, dtm=dtm, embeddings=emb, k=h.k, retained=s.retained)
            rules += r
            dropped[method] = nd
        eff, skipped = interaction_scan(y, z, rules, s.weights, s.set_ids, h.min_subgroup)
        return eff, skipped, dropped

    with ThreadPoolExecutor(max_workers=run.threads) as ex:
        results = list(ex.map(scan, range(imp.m)))
    common = set.intersection(*({e.label for e in r[0]} for r in results))
    scans = [[e for e in r[0] if e.label in common] for r in results]
    pooled = pool_subgroup_scan(scans, h.q)
    out = run.begin("hetfx")
    write_scan_csv(out / "scan.csv", pooled)
    summary = {
        "n_rules_scanned": len(pooled),
        "n_discoveries": int(sum(e.discovered for e in pooled)),
        "q": h.q,
        "sample": h.sample,
        "dropped_degenerate": {k: int(v) for k, v in sorted(results[0][2].items())},
        "skipped_small_or_collinear": sorted({lab for r in results for lab in r[1]}),
        "excluded_not_in_every_imputation": sorted({e.label for r in results for e in r[0]} - common),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def stage_report(run: Run) -> None:
    (cv_p,) = run.need("impute", "cv_report.csv")
    (bal_p,) = run.need("match", "balance.csv")
    (att_p,) = run.need("effects", "att.csv")
    scan_p = run.dir("hetfx") / "scan.csv"
    out = run.begin("report")
    lines = ["textcaus report", "=" * 15, ""]
    cv = list(csv.DictReader(open(cv_p, encoding="utf-8")))
    (out / "table2_imputation.csv").write_bytes(cv_p.read_bytes())
    if cv:
        lines.append("Imputation: held-out RMSE, structured only vs structured + text")
        for r in cv:
            lines.append(f"  {r['variable']:<14} {float(r['rmse_structured']):.3f} -> {float(r['rmse_text']):.3f} ({float(r['pct_change']):+.1f}%)")
        lines.append("")
    (out / "fig3_balance.csv").write_bytes(bal_p.read_bytes())
    bal = list(csv.DictReader(open(bal_p, encoding="utf-8")))
    for col in ("smd_before", "smd_psm", "smd_text"):
        vals = [abs(float(r[col])) for r in bal if r.get(col)]
        flagged = sum(v > 0.1 for v in vals)
        lines.append(f"Balance {col}: {flagged} of {len(vals)} covariates with |SMD| > 0.1")
    lines.append("")
    (out / "table3_effects.csv").write_bytes(att_p.read_bytes())
    lines.append("Average treatment effect on the treated (outcome units)")
    for r in csv.DictReader(open(att_p, encoding="utf-8")):
        lines.append(f"  {r['method']:<7} {float(r['estimate']):+.4f} (SE {float(r['se']):.4f})  control {float(r['control_rate']):.3f}  treated {float(r['treated_rate']):.3f}")
    lines.append("")
    if scan_p.exists():
        scan = read_scan_csv(scan_p)
        write_scan_csv(out / "fig4_subgroups.csv", scan)
        disc = [e for e in scan if e.discovered]
        lines.append(f"Subgroup scan: {len(disc)} of {len(scan)} rules discovered (BH q={run.cfg.hetfx.q:g})")
        lines.append("  interactions in outcome units, shrunk toward the DerSimonian-Laird pooled mean")
        for e in sorted(disc, key=lambda e: -abs(e.shrunken_estimate))[:10]:
            lines.append(f"  {e.label:<32} shrunk {e.shrunken_estimate:+.3f}  raw {e.interaction_estimate:+.3f}  q {e.q_value:.2g}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


STAGE_FUNCS: dict[str, Callable[[Run], None]] = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "dtm": stage_dtm,
    "mnir": stage_mnir,
    "impute": stage_impute,
    "match": stage_match,
    "effects": stage_effects,
    "hetfx": stage_hetfx,
    "report": stage_report,
}


def run_stage(run: Run, stage: str) -> None:
    t0 = time.perf_counter()
    STAGE_FUNCS[stage](run)
    run.record(stage, time.perf_counter() - t0)


def run_pipeline(run: Run) -> None:
    """All stages in order; generates a synthetic cohort first when no notes are configured."""
    if run.cfg.inputs.notes is None and not (run.dir("synth") / "notes.jsonl").exists():
        run_stage(run, "synth")
    for stage in STAGES:
        run_stage(run, stage)
