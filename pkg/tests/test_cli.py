import csv
import hashlib
import json
import subprocess
import sys
import warnings
from pathlib import Path

import numpy as np
import pytest
import yaml
from hypothesis import event, given, settings
from hypothesis import strategies as st

from textcaus import cli
from textcaus.config import from_mapping
from textcaus.impute import ImputedSet
from textcaus.match import InfeasibleMatchError, MatchedSample, fit_propensity
from textcaus.pipeline import STAGES, DataError, Run, StageExistsError, run_pipeline, run_stage
from textcaus.synth import SynthConfig, generate

SMALL = {
    "seed": 11,
    "synth": {"n_patients": 120, "p_covariates": 17, "vocab_size": 30, "phrases_per_note_mean": 8, "missing_rate": 0.02},
    "preprocess": {"ngram_orders": [1, 2], "min_df": 5},
    "impute": {"m": 2, "n_iter": 2, "cv_folds": 3, "cv_targets": ["Creatinine"]},
    "match": {"caliper": 0.3},
    "hetfx": {"k": 3, "min_subgroup": 5},
}


def _tree(root: Path) -> dict[str, str]:
    # the run manifest carries timings, so it is excluded
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p != root / "manifest.json"
    }


def _write_cfg(path: Path, raw: dict) -> Path:
    path.write_text(yaml.safe_dump(raw))
    return path


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = _write_cfg(d / "small.yaml", SMALL)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert cli.main(["pipeline", "-c", str(cfg), "-o", str(d / "run")]) == 0
    return d, cfg, d / "run"


def test_pipeline_smoke_manifest_lists_every_artifact(small_run):
    _, _, run = small_run
    manifest = json.loads((run / "manifest.json").read_text())
    assert set(manifest["stages"]) == {"synth", *STAGES}
    listed = {f for s in manifest["stages"].values() for f in s["outputs"]}
    on_disk = set(_tree(run))
    assert listed == on_disk
    assert manifest["config_hash"] == from_mapping(SMALL).digest()
    for name in ("table2_imputation.csv", "fig3_balance.csv", "table3_effects.csv", "fig4_subgroups.csv", "summary.txt"):
        assert (run / "report" / name).stat().st_size > 0
    methods = [r["method"] for r in csv.DictReader(open(run / "effects" / "att.csv"))]
    assert methods == ["before", "psm", "text"]


def test_outputs_are_write_once(small_run, capsys):
    _, cfg, run = small_run
    before = _tree(run)
    assert cli.main(["effects", "-c", str(cfg), "-o", str(run)]) == cli.EXIT_CONFIG
    assert "--overwrite" in capsys.readouterr().err
    assert _tree(run) == before
    assert cli.main(["effects", "-c", str(cfg), "-o", str(run), "--overwrite"]) == 0
    assert _tree(run) == before


def test_missing_upstream_names_stage(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "c.yaml", SMALL)
    assert cli.main(["mnir", "-c", str(cfg), "-o", str(tmp_path / "r")]) == cli.EXIT_DATA
    err = capsys.readouterr().err
    assert "missing upstream artifact" in err and "run the 'ingest' stage first" in err
    assert cli.main(["report", "-c", str(cfg), "-o", str(tmp_path / "r")]) == cli.EXIT_DATA
    assert "'impute'" in capsys.readouterr().err


def test_config_error_exit_code_and_field_path(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "c.yaml", {**SMALL, "match": {"caliper": -1}})
    assert cli.main(["pipeline", "-c", str(cfg), "-o", str(tmp_path / "r")]) == cli.EXIT_CONFIG
    assert "match.caliper" in capsys.readouterr().err
    noseed = _write_cfg(tmp_path / "n.yaml", {k: v for k, v in SMALL.items() if k != "seed"})
    assert cli.main(["synth", "-c", str(noseed)]) == cli.EXIT_CONFIG
    missing = _write_cfg(tmp_path / "m.yaml", {"seed": 1, "inputs": {"notes": "nope.jsonl", "covariates": "c.csv", "outcomes": "o.csv"}})
    assert cli.main(["ingest", "-c", str(missing), "-o", str(tmp_path / "r2")]) == cli.EXIT_CONFIG
    assert "inputs.notes" in capsys.readouterr().err


def test_infeasible_caliper_exit_code(small_run, tmp_path, capsys):
    d, _, run = small_run
    tight = _write_cfg(tmp_path / "t.yaml", {**SMALL, "match": {"caliper": 1e-12}})
    out = tmp_path / "r"
    out.mkdir()
    for stage in ("synth", "ingest", "dtm", "mnir", "impute"):
        (out / stage).symlink_to(run / stage, target_is_directory=True)
    assert cli.main(["match", "-c", str(tight), "-o", str(out)]) == cli.EXIT_INFEASIBLE
    assert "caliper too tight" in capsys.readouterr().err


def test_output_root_env(tmp_path, monkeypatch):
    cfg = _write_cfg(tmp_path / "named.yaml", {"seed": 2, "synth": {"n_patients": 30, "p_covariates": 17}})
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert cli.main(["synth", "-c", str(cfg)]) == 0
    assert (tmp_path / "root" / "named" / "synth" / "notes.jsonl").exists()
    out_dir = _write_cfg(tmp_path / "od.yaml", {"seed": 2, "synth": {"n_patients": 30, "p_covariates": 17}, "output_dir": "here"})
    assert cli.main(["synth", "-c", str(out_dir)]) == 0
    assert (tmp_path / "here" / "synth" / "notes.jsonl").exists()


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "textcaus", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "textcaus" in res.stdout
    res = subprocess.run([sys.executable, "-m", "textcaus", "ingest", "-c", str(tmp_path / "none.yaml")], capture_output=True, text=True)
    assert res.returncode == 2 and "config error" in res.stderr


def test_match_caliper_is_tenth_sd_of_propensity(small_run):
    _, _, run = small_run
    cfg = from_mapping({**SMALL, "match": {"caliper": 0.1}})
    r = Run(cfg, run.parent / "cal")
    for stage in ("synth", "ingest", "dtm", "mnir", "impute"):
        (r.root / stage).symlink_to(run / stage, target_is_directory=True)
    run_stage(r, "match")
    kinds = json.loads((run / "ingest" / "column_kinds.json").read_text())
    imp = ImputedSet.load(run / "impute", kinds)
    summary = list(csv.DictReader(open(r.root / "match" / "summary.csv")))
    for k in range(1, imp.m + 1):
        psm, _ = MatchedSample.load_csv(r.root / "match" / f"psm_{k}.csv")
        pm = fit_propensity(imp.table(k - 1).values, psm.z, ridge=cfg.match.ridge)
        thr = 0.1 * np.std(pm.scores, ddof=1)
        rec = [s for s in summary if s["imputation"] == str(k)]
        assert all(float(s["caliper_threshold"]) == pytest.approx(thr, rel=1e-12) for s in rec)
        for name in ("psm", "text"):
            sample, _ = MatchedSample.load_csv(r.root / "match" / f"{name}_{k}.csv")
            sample.validate()
            for ms in sample.sets:
                for t in ms.treated:
                    for c in ms.controls:
                        assert abs(pm.scores[t] - pm.scores[c]) <= thr + 1e-15


# -- invariants -----------------------------------------------------------------


@pytest.fixture(scope="module")
def cohorts(tmp_path_factory):
    """A few small external cohorts reused across property cases."""
    out = []
    for i, (n, miss) in enumerate([(60, 0.0), (80, 0.02), (100, 0.03)]):
        d = tmp_path_factory.mktemp(f"cohort{i}")
        generate(SynthConfig.from_dict({"seed": 100 + i, "n_patients": n, "p_covariates": 17, "vocab_size": 20, "phrases_per_note_mean": 8, "missing_rate": miss})).write(d)
        out.append(d)
    return out


_case = st.fixed_dictionaries(
    {
        "cohort": st.integers(0, 2),
        "seed": st.integers(0, 10**6),
        "m": st.integers(1, 2),
        "caliper": st.sampled_from([0.05, 0.2, 1.0]),
        "solver": st.sampled_from(["assignment", "flow"]),
        "orders": st.sampled_from([[1], [1, 2]]),
        "sample": st.sampled_from(["text", "psm"]),
        "threads": st.sampled_from([1, 3]),
    }
)


def _case_cfg(case, cohort: Path):
    raw = {
        "seed": case["seed"],
        "inputs": {k: str(cohort / f) for k, f in [("notes", "notes.jsonl"), ("covariates", "covariates.csv"), ("outcomes", "outcomes.csv"), ("column_kinds", "column_kinds.json"), ("key_terms", "key_terms.txt")]},
        "preprocess": {"ngram_orders": case["orders"], "min_df": 5},
        "impute": {"m": case["m"], "n_iter": 2, "evaluate": False},
        "match": {"caliper": case["caliper"], "solver": case["solver"]},
        "hetfx": {"k": 3, "min_subgroup": 5, "sample": case["sample"]},
    }
    return from_mapping(raw)


def _attempt(fn):
    try:
        fn()
        return None
    except (DataError, InfeasibleMatchError, ValueError) as exc:
        return type(exc).__name__


@settings(max_examples=200)
@given(case=_case)
def test_pipeline_equals_stagewise_and_inputs_untouched(case, cohorts, tmp_path_factory):
    cohort = cohorts[case["cohort"]]
    inputs_before = _tree(cohort)
    cfg = _case_cfg(case, cohort)
    base = tmp_path_factory.mktemp("case")
    a = Run(cfg, base / "a", threads=case["threads"])
    b = Run(cfg, base / "b", threads=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        err_a = _attempt(lambda: run_pipeline(a))
        state = {}

        def stagewise():
            for s in STAGES:
                state["stage"] = s
                run_stage(b, s)

        err_b = _attempt(stagewise)
    assert err_a == err_b
    event(f"outcome: {err_a or 'completed'}")
    assert _tree(a.root) == _tree(b.root)
    assert _tree(cohort) == inputs_before
    if err_a is None:
        ma = json.loads((a.root / "manifest.json").read_text())
        mb = json.loads((b.root / "manifest.json").read_text())
        assert {k: v["outputs"] for k, v in ma["stages"].items()} == {k: v["outputs"] for k, v in mb["stages"].items()}
        # write-once: any stage rerun is refused and leaves outputs alone
        snapshot = _tree(a.root)
        with pytest.raises(StageExistsError):
            run_stage(a, STAGES[case["seed"] % len(STAGES)])
        assert _tree(a.root) == snapshot
