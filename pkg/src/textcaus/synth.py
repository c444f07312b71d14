"""Synthetic ICU-like cohorts with known ground truth.

Generative story, per patient:

* latent severity ``h`` and a text-only latent ``u``, both standard normal;
* covariate ``k`` has standardized value ``s_k = lam_k h + sqrt(1 - lam_k^2) e_k``,
  mapped to clinical units (binary columns threshold ``s_k``);
* notes are drawn phrase by phrase from a multinomial whose weights are tilted
  by ``s_k`` (covariate verbalizations), by ``h`` (severity phrases, including
  the planted phrase) and by ``u`` (text-confounder phrases), plus Zipf filler;
* treatment and survival both depend on the covariate severity index ``r``
  and on ``u``, so the structured data alone leave confounding behind;
* ``y1`` shifts survival by ``true_att`` plus ``planted_delta`` for patients
  whose notes contain the planted phrase;
* missingness is MAR on an always-observed covariate and note length.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .corpus import ClinicalNote, write_notes_jsonl
from .impute import CovariateTable, imputation_rmse, write_covariates_csv

# Missing-capable columns with the missing counts of the reference cohort (N = 2 625)
MISSING_COUNTS = {
    "Creatinine": 61,
    "Weight": 250,
    "Temp": 10,
    "Hemoglobin": 95,
    "Potassium": 47,
    "PO2": 777,
    "Sodium": 54,
    "Platelet": 101,
    "BUN": 60,
    "Lactate": 1057,
    "PH": 731,
    "Bicarbonate": 64,
    "PCO2": 777,
    "Chloride": 57,
    "WBC": 102,
}
REFERENCE_N = 2625

_OTHER_COLUMNS = (
    "Age", "Sex", "HeartRate", "SysBP", "DiasBP", "MeanBP", "RespRate", "SpO2",
    "Glucose", "GCS", "SOFA", "SAPS", "Elixhauser", "Magnesium", "Calcium",
    "Phosphate", "Albumin", "Bilirubin", "INR", "PTT", "UrineOutput", "CHF",
    "Afib", "RenalDisease", "LiverDisease", "COPD", "CAD", "Stroke",
    "Malignancy", "Ventilated",
)
_BINARY = {"Sex", "CHF", "Afib", "RenalDisease", "LiverDisease", "COPD", "CAD", "Stroke", "Malignancy", "Ventilated"}
# (mean, sd) in clinical units; unknown columns default to (0, 1)
_UNITS = {
    "Creatinine": (1.5, 1.2), "Weight": (80.0, 22.0), "Temp": (37.0, 0.8),
    "Hemoglobin": (10.5, 2.0), "Potassium": (4.2, 0.7), "PO2": (150.0, 90.0),
    "Sodium": (138.0, 5.0), "Platelet": (220.0, 100.0), "BUN": (30.0, 22.0),
    "Lactate": (2.5, 2.0), "PH": (7.37, 0.08), "Bicarbonate": (23.0, 5.0),
    "PCO2": (41.0, 10.0), "Chloride": (104.0, 6.0), "WBC": (12.0, 6.0),
    "Age": (66.0, 17.0), "HeartRate": (90.0, 18.0), "SysBP": (118.0, 22.0),
    "DiasBP": (60.0, 13.0), "MeanBP": (78.0, 14.0), "RespRate": (20.0, 5.0),
    "SpO2": (96.0, 3.0), "Glucose": (140.0, 50.0), "GCS": (12.0, 3.0),
    "SOFA": (6.0, 3.5), "SAPS": (40.0, 14.0), "Elixhauser": (5.0, 7.0),
    "Magnesium": (2.0, 0.3), "Calcium": (8.4, 0.7), "Phosphate": (3.6, 1.2),
    "Albumin": (3.0, 0.6), "Bilirubin": (1.5, 2.5), "INR": (1.5, 0.6),
    "PTT": (38.0, 14.0), "UrineOutput": (1800.0, 900.0),
}

SEVERITY_PHRASES = (
    "sinus tach", "intubated", "sedated", "lethargic", "hypotensive",
    "diaphoretic", "mottled", "agitated", "tachypneic", "oliguric",
)
CONFOUNDER_PHRASES = (
    "cardiac", "lasix", "nicardipine", "dobutamine", "pressors",
    "edema", "echo", "troponin",
)
_FILLER_SEED_WORDS = (
    "patient", "noted", "plan", "continue", "monitor", "family", "stable",
    "overnight", "given", "remains", "assessment", "bedside", "resting",
    "comfortable", "pain", "skin", "intact", "dressing", "line", "iv",
    "fluids", "diet", "tolerating", "ambulating", "bowel", "urine", "foley",
    "oral", "care", "turned", "repositioned", "alert", "oriented", "follows",
    "commands", "lungs", "clear", "diminished", "bases", "abdomen", "soft",
    "distended", "tender", "extremities", "pulses", "palpable", "warm", "dry",
    "neuro", "exam", "labs", "pending", "review", "team", "rounds", "consult",
    "discussed", "update", "wound", "drain", "output", "input", "vitals",
    "chart", "meds", "dose", "held", "started", "weaned", "titrated", "night",
    "morning", "afternoon", "shift", "report", "nurse", "resident", "attending",
)
STRONG_TEXT_SIGNAL = 1.5


def _word_list(n: int) -> list[str]:
    """Filler vocabulary; fixed across seeds so vocabularies line up between runs."""
    words = list(_FILLER_SEED_WORDS[:n])
    rng = np.random.default_rng(20240101)
    cons = list("bcdfghklmnprstvz")
    vows = list("aeiou")
    taken = set(words) | {w for p in SEVERITY_PHRASES + CONFOUNDER_PHRASES for w in p.split()}
    while len(words) < n:
        k = int(rng.integers(2, 4))
        w = "".join(rng.choice(cons) + rng.choice(vows) for _ in range(k))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def default_columns(p: int) -> list[str]:
    cols = list(MISSING_COUNTS) + list(_OTHER_COLUMNS)
    cols += [f"X{j + 1}" for j in range(len(cols), p)]
    return cols[:p]


@dataclass
class SynthConfig:
    n_patients: int = REFERENCE_N
    p_covariates: int = 45
    vocab_size: int = 300
    notes_per_patient_mean: float = 2.7
    phrases_per_note_mean: float = 60.0
    text_signal_strength: float = 1.0
    confounding_strength: float = 1.0
    text_confounding: float = 0.7
    text_confounder_tilt: float = 1.0
    text_confounder_weight: float = 0.12
    outcome_severity_effect: float = 1.2
    outcome_text_effect: float = 0.4
    treated_fraction: float = 0.51
    control_survival: float = 0.72
    true_att: float = 0.09
    planted_phrase: str = "sinus tach"
    planted_delta: float = 0.0
    missing_rate: Any = None  # None: reference counts; float: all missing-capable columns; dict: per column
    mar_dependence: dict = field(default_factory=lambda: {"driver": "Age", "driver_coef": 0.5, "note_length_coef": 0.5})
    embedding_dim: int = 0
    note_window_hours: float = 48.0
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 10:
            raise ValueError("n_patients must be at least 10")
        if self.p_covariates < 2:
            raise ValueError("p_covariates must be at least 2")
        if self.vocab_size < 10:
            raise ValueError("vocab_size must be at least 10")
        if self.text_signal_strength < 0:
            raise ValueError("text_signal_strength must be nonnegative")
        if self.notes_per_patient_mean < 1 or self.phrases_per_note_mean <= 0:
            raise ValueError("notes_per_patient_mean must be >= 1 and phrases_per_note_mean > 0")
        for name in ("treated_fraction", "control_survival"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.planted_phrase not in SEVERITY_PHRASES:
            raise ValueError(f"planted_phrase must be one of {SEVERITY_PHRASES}")
        for col, rate in self.missing_rates().items():
            if not 0 <= rate <= 1:
                raise ValueError(f"missing rate for {col} must lie in [0, 1]")
        driver = self.mar_dependence.get("driver")
        if driver is not None and driver not in self.columns:
            raise ValueError(f"MAR driver {driver!r} is not a covariate")
        if driver in self.missing_rates() and self.missing_rates()[driver] > 0:
            raise ValueError("the MAR driver must be fully observed")

    @property
    def columns(self) -> list[str]:
        return default_columns(self.p_covariates)

    def missing_rates(self) -> dict[str, float]:
        cols = self.columns
        if self.missing_rate is None:
            return {c: n / REFERENCE_N for c, n in MISSING_COUNTS.items() if c in cols}
        if isinstance(self.missing_rate, Mapping):
            unknown = set(self.missing_rate) - set(cols)
            if unknown:
                raise ValueError(f"missing rates for unknown columns {sorted(unknown)}")
            return {c: float(v) for c, v in self.missing_rate.items()}
        return {c: float(self.missing_rate) for c in MISSING_COUNTS if c in cols}

    @classmethod
    def paper_like(cls, **overrides) -> "SynthConfig":
        return cls(**overrides)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthDataset:
    config: SynthConfig
    ids: list[str]
    covariates: CovariateTable
    covariates_full: CovariateTable
    notes: list[ClinicalNote]
    z: np.ndarray
    y: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    p0: np.ndarray
    p1: np.ndarray
    planted: np.ndarray
    h: np.ndarray
    u: np.ndarray
    missing_prob: np.ndarray
    embeddings: np.ndarray | None = None

    @property
    def tau(self) -> np.ndarray:
        return self.p1 - self.p0

    @property
    def true_att(self) -> float:
        """Mean individual risk difference among the treated."""
        return float(self.tau[self.z == 1].mean())

    @property
    def key_terms(self) -> list[str]:
        return list(CONFOUNDER_PHRASES) + list(SEVERITY_PHRASES)

    def true_interaction(self, indicator, retained=None) -> float:
        """Difference in mean individual effect between g=1 and g=0 among retained treated."""
        g = np.asarray(indicator).astype(bool)
        keep = self.z == 1 if retained is None else (self.z == 1) & np.asarray(retained, bool)
        a, b = keep & g, keep & ~g
        if not a.any() or not b.any():
            return math.nan
        return float(self.tau[a].mean() - self.tau[b].mean())

    def ground_truth(self) -> dict:
        return {
            "true_att": self.true_att,
            "configured_att": self.config.true_att,
            "planted_phrase": self.config.planted_phrase,
            "planted_delta": self.config.planted_delta,
            "planted_patients": [i for i, f in zip(self.ids, self.planted) if f],
            "text_confounder_terms": list(CONFOUNDER_PHRASES),
            "severity_terms": list(SEVERITY_PHRASES),
            "missing_mechanism": {
                "type": "MAR" if any(self.config.mar_dependence.get(k, 0) for k in ("driver_coef", "note_length_coef")) else "MCAR",
                "rates": self.config.missing_rates(),
                **self.config.mar_dependence,
            },
            "tau": [float(v) for v in self.tau],
            "y0": [int(v) for v in self.y0],
            "y1": [int(v) for v in self.y1],
            "config": self.config.to_dict(),
        }

    def write(self, directory: str | Path) -> dict[str, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {
            "notes": d / "notes.jsonl",
            "covariates": d / "covariates.csv",
            "covariates_full": d / "covariates_full.csv",
            "outcomes": d / "outcomes.csv",
            "column_kinds": d / "column_kinds.json",
            "key_terms": d / "key_terms.txt",
            "ground_truth": d / "ground_truth.json",
        }
        write_notes_jsonl(self.notes, paths["notes"])
        write_covariates_csv(self.covariates, paths["covariates"])
        write_covariates_csv(self.covariates_full, paths["covariates_full"])
        with open(paths["outcomes"], "w", encoding="utf-8") as fh:
            fh.write("patient_id,z,y\n")
            for i, zz, yy in zip(self.ids, self.z, self.y):
                fh.write(f"{i},{int(zz)},{int(yy)}\n")
        paths["column_kinds"].write_text(
            json.dumps(dict(zip(self.covariates.columns, self.covariates.kinds)), indent=1, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        paths["key_terms"].write_text("\n".join(self.key_terms) + "\n", encoding="utf-8")
        paths["ground_truth"].write_text(json.dumps(self.ground_truth(), sort_keys=True) + "\n", encoding="utf-8")
        if self.embeddings is not None:
            from .effects import write_embeddings

            paths["embeddings"] = d / "embeddings.csv"
            write_embeddings(paths["embeddings"], self.ids, self.embeddings)
        return paths


def _calibrate(f, target: float) -> float:
    """Intercept c with f(c) = target, f increasing.

    Targets beyond what f reaches on the bracket map to the nearer end.
    """
    lo, hi = -40.0, 40.0
    g_lo, g_hi = f(lo) - target, f(hi) - target
    if g_lo >= 0:
        return lo
    if g_hi <= 0:
        return hi
    return brentq(lambda c: f(c) - target, lo, hi, xtol=1e-12)


def generate(cfg: SynthConfig) -> SynthDataset:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_patients
    cols = cfg.columns
    p = len(cols)
    ids = [f"P{i:05d}" for i in range(n)]

    # structural parameters
    loadings = rng.uniform(0.3, 0.85, size=p)
    h = rng.standard_normal(n)
    u = rng.standard_normal(n)
    eps = rng.standard_normal((n, p))
    s = h[:, None] * loadings + eps * np.sqrt(1 - loadings**2)

    values = np.empty((n, p))
    kinds = []
    prevalence = rng.uniform(0.1, 0.5, size=p)
    for k, c in enumerate(cols):
        if c in _BINARY:
            values[:, k] = (s[:, k] > np.quantile(s[:, k], 1 - prevalence[k])).astype(float)
            kinds.append("binary")
        else:
            mu, sd = _UNITS.get(c, (0.0, 1.0))
            values[:, k] = np.round(mu + sd * s[:, k], 3)
            kinds.append("continuous")
    # severity index driving treatment and survival, a function of the covariates
    r = s @ loadings
    r = (r - r.mean()) / r.std()

    # notes
    filler = _word_list(cfg.vocab_size)
    zipf = 1.0 / np.arange(2, len(filler) + 2) ** 1.1
    zipf = zipf / zipf.sum()
    verbal = [f"{c.lower()}hi" for c in cols] + [f"{c.lower()}lo" for c in cols]
    phrases = filler + verbal + list(SEVERITY_PHRASES) + list(CONFOUNDER_PHRASES)
    nf, nv, ns, nc = len(filler), len(verbal), len(SEVERITY_PHRASES), len(CONFOUNDER_PHRASES)
    planted_idx = nf + nv + SEVERITY_PHRASES.index(cfg.planted_phrase)
    a = cfg.text_signal_strength
    base = np.concatenate(
        [
            0.6 * zipf,
            np.full(nv, 0.18 / nv),
            np.full(ns, 0.035 / ns),
            np.full(nc, cfg.text_confounder_weight / nc),
        ]
    )
    n_notes = 1 + rng.poisson(cfg.notes_per_patient_mean - 1, size=n)
    lengths = np.maximum(1, rng.poisson(cfg.phrases_per_note_mean, size=n_notes.sum()))
    categories = rng.choice(len(_CATEGORY_P), size=n_notes.sum(), p=_CATEGORY_P)
    offsets = np.round(rng.uniform(0, cfg.note_window_hours, size=n_notes.sum()), 2)
    notes: list[ClinicalNote] = []
    planted = np.zeros(n, dtype=bool)
    note_len = np.zeros(n)
    sev_tilt = np.linspace(0.6, 1.4, ns)
    j = 0
    for i in range(n):
        tilt = np.concatenate(
            [
                np.zeros(nf),
                a * s[i],
                -a * s[i],
                a * sev_tilt * h[i],
                np.full(nc, cfg.text_confounder_tilt * u[i]),
            ]
        )
        w = base * np.exp(tilt - tilt.max())
        w /= w.sum()
        for _ in range(n_notes[i]):
            counts = rng.multinomial(lengths[j], w)
            seq = np.repeat(np.arange(len(phrases)), counts)
            rng.shuffle(seq)
            planted[i] |= counts[planted_idx] > 0
            note_len[i] += lengths[j]
            words = [phrases[t] for t in seq]
            text = " ".join(words)
            notes.append(ClinicalNote(ids[i], _CATEGORIES[categories[j]], float(offsets[j]), text[:1].upper() + text[1:] + "."))
            j += 1
    # planted indicator must equal token presence in the aggregated document
    treat_index = r + cfg.text_confounding * u
    a0 = _calibrate(lambda c: expit(c + cfg.confounding_strength * treat_index).mean(), cfg.treated_fraction)
    pz = expit(a0 + cfg.confounding_strength * treat_index)
    z = (rng.random(n) < pz).astype(np.int8)

    risk = cfg.outcome_severity_effect * r + cfg.outcome_text_effect * u

    def surv(c):
        return 0.15 + 0.75 * expit(c - risk)

    b0 = _calibrate(lambda c: float(np.sum((1 - pz) * surv(c)) / np.sum(1 - pz)), cfg.control_survival)
    p0 = np.clip(surv(b0), 0.01, 0.99)
    p1 = np.clip(p0 + cfg.true_att + cfg.planted_delta * planted, 0.01, 0.99)
    unif = rng.random(n)
    y0 = (unif < p0).astype(np.int8)
    y1 = (unif < p1).astype(np.int8)
    y = np.where(z == 1, y1, y0).astype(np.int8)

    # MAR missingness on always-observed quantities
    mar = cfg.mar_dependence
    lin = np.zeros(n)
    if mar.get("driver") is not None and mar.get("driver_coef", 0):
        dv = values[:, cols.index(mar["driver"])]
        lin += mar["driver_coef"] * (dv - dv.mean()) / (dv.std() or 1.0)
    if mar.get("note_length_coef", 0):
        ll = np.log(note_len)
        lin += mar["note_length_coef"] * (ll - ll.mean()) / (ll.std() or 1.0)
    observed = values.copy()
    miss_prob = np.zeros((n, p))
    for col, rate in sorted(cfg.missing_rates().items()):
        k = cols.index(col)
        if rate <= 0:
            continue
        if rate >= 1:
            prob = np.ones(n)
        else:
            c = _calibrate(lambda c: expit(c + lin).mean(), rate)
            prob = expit(c + lin)
        miss_prob[:, k] = prob
        observed[rng.random(n) < prob, k] = np.nan

    emb = None
    if cfg.embedding_dim > 0:
        drivers = np.column_stack([h, u, planted.astype(float), s])
        proj = rng.standard_normal((drivers.shape[1], cfg.embedding_dim)) / math.sqrt(drivers.shape[1])
        emb = np.tanh(drivers @ proj) + 0.3 * rng.standard_normal((n, cfg.embedding_dim))
        emb = np.round(emb, 6)

    return SynthDataset(
        config=cfg,
        ids=ids,
        covariates=CovariateTable(ids, cols, observed, kinds),
        covariates_full=CovariateTable(ids, cols, values, kinds),
        notes=notes,
        z=z,
        y=y,
        y0=y0,
        y1=y1,
        p0=p0,
        p1=p1,
        planted=planted,
        h=h,
        u=u,
        missing_prob=miss_prob,
        embeddings=emb,
    )


_CATEGORIES = ("nursing", "physician", "other")
_CATEGORY_P = np.array([0.25, 0.25, 0.5])


def evaluate_run(
    dataset: SynthDataset,
    outputs: Mapping[str, Any],
    fdr_null_tol: float = 1e-9,
) -> dict:
    """Scorecard against ground truth.

    Recognized ``outputs`` keys (all optional): ``imputed`` and
    ``imputed_no_text`` (ImputedSet), ``balance_psm`` and ``balance_text``
    (BalanceReport), ``att`` (EffectEstimate or a list of them), ``scan``
    (pooled SubgroupEffect list), ``rules`` (SubgroupRule list aligned by
    label) and ``retained`` (bool mask of retained units).
    """
    card: dict[str, Any] = {}
    truth = dataset.covariates_full.values
    mask = dataset.covariates.mask
    for key in ("imputed", "imputed_no_text"):
        if key in outputs:
            card[f"rmse_{key}"] = imputation_rmse(truth, outputs[key], mask)
    conf = set(CONFOUNDER_PHRASES)
    for key in ("balance_psm", "balance_text"):
        if key in outputs:
            rows = [rw for rw in outputs[key].rows if rw.kind == "text" and rw.name in conf]
            card[f"confounder_abs_smd_{key.split('_')[1]}"] = float(np.mean([abs(rw.smd_after) for rw in rows])) if rows else math.nan
            srows = [rw for rw in outputs[key].rows if rw.kind == "structured"]
            card[f"max_structured_abs_smd_{key.split('_')[1]}"] = max((abs(rw.smd_after) for rw in srows if np.isfinite(rw.smd_after)), default=math.nan)
    if "att" in outputs:
        ests = outputs["att"]
        ests = ests if isinstance(ests, (list, tuple)) else [ests]
        target = dataset.true_att
        bias = [e.estimate - target for e in ests]
        card["att_bias"] = float(np.mean(bias))
        card["att_coverage"] = float(np.mean([abs(b) <= 1.96 * e.se for b, e in zip(bias, ests)]))
    if "scan" in outputs:
        scan = outputs["scan"]
        disc = [e for e in scan if e.discovered]
        planted_label = "token:" + dataset.config.planted_phrase.replace(" ", "_")
        card["planted_discovered"] = any(e.label == planted_label for e in disc)
        card["n_discoveries"] = len(disc)
        rules = {r.label: r for r in outputs.get("rules", [])}
        retained = outputs.get("retained")
        false = 0
        raw_se, shr_se = [], []
        for e in scan:
            if e.label not in rules:
                continue
            ti = dataset.true_interaction(rules[e.label].indicator, retained)
            if not np.isfinite(ti):
                continue
            raw_se.append((e.interaction_estimate - ti) ** 2)
            shr_se.append((e.shrunken_estimate - ti) ** 2)
            if e.discovered and abs(ti) <= fdr_null_tol:
                false += 1
        if rules:
            card["empirical_fdr"] = false / len(disc) if disc else 0.0
            card["mse_raw"] = float(np.mean(raw_se)) if raw_se else math.nan
            card["mse_shrunk"] = float(np.mean(shr_se)) if shr_se else math.nan
    return card
