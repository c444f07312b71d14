"""Clinical note ingestion, tokenization and document-term matrices."""

from __future__ import annotations

import json
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from . import _kernels

# NLTK's English stop list.
STOP_WORDS = frozenset(
    """
    i me my myself we our ours ourselves you you're you've you'll you'd your
    yours yourself yourselves he him his himself she she's her hers herself it
    it's its itself they them their theirs themselves what which who whom this
    that that'll these those am is are was were be been being have has had
    having do does did doing a an the and but if or because as until while of
    at by for with about against between into through during before after
    above below to from up down in out on off over under again further then
    once here there when where why how all any both each few more most other
    some such no nor not only own same so than too very s t can will just don
    don't should should've now d ll m o re ve y ain aren aren't couldn
    couldn't didn didn't doesn doesn't hadn hadn't hasn hasn't haven haven't
    isn isn't ma mightn mightn't mustn mustn't needn needn't shan shan't
    shouldn shouldn't wasn wasn't weren weren't won won't wouldn wouldn't
    """.split()
)

NOTE_CATEGORIES = ("nursing", "physician", "other")

_SPLIT = re.compile(r"[\W_]+", re.UNICODE)


@dataclass(frozen=True)
class ClinicalNote:
    patient_id: str
    category: str
    chart_offset_hours: float
    text: str

    def __post_init__(self):
        if not self.patient_id:
            raise ValueError("patient_id must be nonempty")
        if not self.chart_offset_hours >= 0:
            raise ValueError(
                f"chart_offset_hours must be >= 0 (patient {self.patient_id})"
            )
        if self.category not in NOTE_CATEGORIES:
            raise ValueError(f"unknown note category {self.category!r}")


def read_notes_jsonl(path: str | Path) -> list[ClinicalNote]:
    notes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                notes.append(
                    ClinicalNote(
                        patient_id=str(rec["patient_id"]),
                        category=rec.get("category", "other"),
                        chart_offset_hours=float(rec["chart_offset_hours"]),
                        text=rec["text"],
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad note record: {exc}") from exc
    return notes


def write_notes_jsonl(notes: Iterable[ClinicalNote], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for n in notes:
            rec = {
                "patient_id": n.patient_id,
                "category": n.category,
                "chart_offset_hours": n.chart_offset_hours,
                "text": n.text,
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_stop_list(path: str | Path) -> frozenset[str]:
    with open(path, encoding="utf-8") as fh:
        return frozenset(w.strip().lower() for w in fh if w.strip())


def _light_stem(tok: str) -> str:
    # plural/gerund/past suffix stripping; no dictionary
    for suf, rep in (("ies", "y"), ("ing", ""), ("ed", ""), ("es", ""), ("s", "")):
        if tok.endswith(suf) and len(tok) - len(suf) >= 3 and not tok.endswith("ss"):
            return tok[: len(tok) - len(suf)] + rep
    return tok


@dataclass(frozen=True)
class TokenizeConfig:
    ngram_orders: tuple[int, ...] = (1, 2, 3)
    stop_words: frozenset[str] = STOP_WORDS
    stem: bool = False

    def __post_init__(self):
        if not self.ngram_orders or any(n < 1 for n in self.ngram_orders):
            raise ValueError("ngram_orders must be positive integers")


DEFAULT_TOKENIZE = TokenizeConfig()


def unigrams(text: str, cfg: TokenizeConfig = DEFAULT_TOKENIZE) -> list[str]:
    """Lowercased alphanumeric tokens with stop words removed."""
    toks = [t for t in _SPLIT.split(text.lower()) if t and t not in cfg.stop_words]
    if cfg.stem:
        toks = [_light_stem(t) for t in toks]
    return toks


def tokenize(text: str, cfg: TokenizeConfig = DEFAULT_TOKENIZE) -> list[str]:
    """Token sequence of ``text``: unigrams followed by the configured n-grams.

    N-grams join consecutive surviving unigrams with ``_``; since the
    splitter treats ``_`` as punctuation, no unigram ever contains one.

    >>> tokenize("Sinus tach noted.")
    ['sinus', 'tach', 'noted', 'sinus_tach', 'tach_noted', 'sinus_tach_noted']
    """
    uni = unigrams(text, cfg)
    out: list[str] = []
    for n in sorted(set(cfg.ngram_orders)):
        if n == 1:
            out.extend(uni)
        else:
            out.extend("_".join(uni[i : i + n]) for i in range(len(uni) - n + 1))
    return out


def normalize_term(term: str, cfg: TokenizeConfig = DEFAULT_TOKENIZE) -> str:
    """Map a human-written phrase like ``"Sinus Tach"`` to its DTM token."""
    return "_".join(unigrams(term, cfg))


def aggregate_patient_docs(
    notes: Sequence[ClinicalNote],
    cutoff_hours: float,
    patient_ids: Sequence[str] | None = None,
) -> dict[str, str]:
    """One document per patient from the notes charted at or before the cutoff.

    Notes are concatenated in chart-offset order (stable for ties). When
    ``patient_ids`` is given the result has exactly those keys, in that
    order, and patients without qualifying notes map to ``""``.
    """
    by_patient: dict[str, list[ClinicalNote]] = {}
    for note in notes:
        by_patient.setdefault(note.patient_id, []).append(note)
    ids = list(patient_ids) if patient_ids is not None else sorted(by_patient)
    docs = {}
    for pid in ids:
        kept = [n for n in by_patient.get(pid, ()) if n.chart_offset_hours <= cutoff_hours]
        kept.sort(key=lambda n: n.chart_offset_hours)
        docs[pid] = "\n".join(n.text for n in kept)
    return docs


@dataclass
class Vocabulary:
    tokens: list[str]
    document_frequency: np.ndarray
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.document_frequency = np.asarray(self.document_frequency, dtype=np.int64)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def ngram_order(self) -> np.ndarray:
        return np.array([t.count("_") + 1 for t in self.tokens], dtype=np.int64)

    def subset(self, tokens: Iterable[str]) -> "Vocabulary":
        keep = sorted(self.index[t] for t in set(tokens))
        return Vocabulary([self.tokens[i] for i in keep], self.document_frequency[keep])

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


def build_vocabulary(
    tokenized_docs: Sequence[Sequence[str]],
    min_df: int = 5,
    max_df_fraction: float = 0.95,
) -> Vocabulary:
    """Tokens whose document frequency lies in ``[min_df, max_df_fraction * N]``."""
    df: Counter[str] = Counter()
    for toks in tokenized_docs:
        df.update(set(toks))
    upper = max_df_fraction * len(tokenized_docs)
    kept = sorted(t for t, c in df.items() if min_df <= c <= upper)
    return Vocabulary(kept, np.array([df[t] for t in kept], dtype=np.int64))


class DocTermMatrix:
    """Sparse N x d token count matrix tied to a vocabulary."""

    def __init__(self, counts: sp.spmatrix, vocab: Vocabulary):
        counts = sp.csr_matrix(counts, dtype=np.int64)
        counts.sum_duplicates()
        counts.eliminate_zeros()
        counts.sort_indices()
        if counts.shape[1] != len(vocab):
            raise ValueError(
                f"count matrix has {counts.shape[1]} columns, vocabulary {len(vocab)}"
            )
        if counts.nnz and counts.data.min() < 1:
            raise ValueError("counts must be positive integers")
        self.counts = counts
        self.vocab = vocab

    @property
    def n_docs(self) -> int:
        return self.counts.shape[0]

    @property
    def row_totals(self) -> np.ndarray:
        return np.asarray(self.counts.sum(axis=1)).ravel().astype(np.int64)

    def entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        coo = self.counts.tocoo()
        return coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data

    def select_rows(self, rows) -> "DocTermMatrix":
        return DocTermMatrix(self.counts[np.asarray(rows)], self.vocab)

    def select_tokens(self, tokens: Iterable[str]) -> "DocTermMatrix":
        sub = self.vocab.subset(tokens)
        cols = [self.vocab.index[t] for t in sub.tokens]
        return DocTermMatrix(self.counts[:, cols], sub)

    def save(self, path: str | Path, vocab_path: str | Path | None = None) -> None:
        """Write ``n_docs n_terms nnz`` then 0-indexed ``doc term count`` lines."""
        path = Path(path)
        vocab_path = Path(vocab_path) if vocab_path else path.with_suffix(".vocab")
        r, c, v = self.entries()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{self.n_docs} {len(self.vocab)} {len(v)}\n")
            for a, b, x in zip(r.tolist(), c.tolist(), v.tolist()):
                fh.write(f"{a} {b} {x}\n")
        with open(vocab_path, "w", encoding="utf-8") as fh:
            for t in self.vocab.tokens:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path: str | Path, vocab_path: str | Path | None = None) -> "DocTermMatrix":
        path = Path(path)
        vocab_path = Path(vocab_path) if vocab_path else path.with_suffix(".vocab")
        with open(vocab_path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 3:
                raise ValueError(f"{path}: header must be 'n_docs n_terms nnz'")
            n_docs, n_terms, nnz = (int(h) for h in header)
            body = np.loadtxt(fh, dtype=np.int64, ndmin=2) if nnz else np.zeros((0, 3), np.int64)
        if body.shape[0] != nnz:
            raise ValueError(f"{path}: expected {nnz} entries, found {body.shape[0]}")
        if n_terms != len(tokens):
            raise ValueError(f"{path}: {n_terms} terms but vocabulary has {len(tokens)}")
        if nnz and (
            body[:, 0].min() < 0 or body[:, 0].max() >= n_docs or body[:, 1].max() >= n_terms
        ):
            raise ValueError(f"{path}: entry index out of range")
        mat = sp.coo_matrix((body[:, 2], (body[:, 0], body[:, 1])), shape=(n_docs, n_terms))
        if nnz and mat.tocsr().nnz != nnz:
            raise ValueError(f"{path}: duplicate (doc, term) entries")
        df = np.diff(mat.tocsc().indptr)
        return cls(mat, Vocabulary(tokens, df))


def build_dtm(tokenized_docs: Sequence[Sequence[str]], vocab: Vocabulary) -> DocTermMatrix:
    """Count matrix of ``tokenized_docs`` over ``vocab``; unknown tokens are ignored."""
    index = vocab.index
    rows, cols, vals = [], [], []
    for i, toks in enumerate(tokenized_docs):
        counts = Counter(index[t] for t in toks if t in index)
        for j in sorted(counts):
            rows.append(i)
            cols.append(j)
            vals.append(counts[j])
    mat = sp.csr_matrix(
        (np.array(vals, dtype=np.int64), (np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64))),
        shape=(len(tokenized_docs), len(vocab)),
    )
    return DocTermMatrix(mat, vocab)


def vectorize(
    texts: Sequence[str],
    cfg: TokenizeConfig = DEFAULT_TOKENIZE,
    min_df: int = 5,
    max_df_fraction: float = 0.95,
) -> DocTermMatrix:
    toks = [tokenize(t, cfg) for t in texts]
    return build_dtm(toks, build_vocabulary(toks, min_df, max_df_fraction))


def cosine_distance(x, y) -> float:
    """``1 - cos(x, y)``, with the all-zero convention ``distance = 1``."""
    x = np.asarray(x.todense() if sp.issparse(x) else x, dtype=float).ravel()
    y = np.asarray(y.todense() if sp.issparse(y) else y, dtype=float).ravel()
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        return 1.0
    return float(min(1.0, max(0.0, 1.0 - x @ y / (nx * ny))))


def normalized_rows(counts: sp.spmatrix) -> sp.csr_matrix:
    mat = sp.csr_matrix(counts, dtype=np.float64)
    norms = np.sqrt(np.asarray(mat.multiply(mat).sum(axis=1)).ravel())
    scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    out = sp.diags(scale) @ mat
    out = sp.csr_matrix(out)
    out.sort_indices()
    return out


def edge_cosine_distances(dtm: DocTermMatrix, rows_a, rows_b) -> np.ndarray:
    """Cosine distances for many (row_a, row_b) pairs at once."""
    norm = normalized_rows(dtm.counts)
    sim = _kernels.edge_dot(
        norm.indptr.astype(np.int64), norm.indices.astype(np.int64), norm.data, rows_a, rows_b
    )
    empty = np.diff(norm.indptr) == 0
    dist = np.clip(1.0 - sim, 0.0, 1.0)
    dist[empty[np.asarray(rows_a)] | empty[np.asarray(rows_b)]] = 1.0
    return dist


def key_term_covariates(
    dtm: DocTermMatrix,
    terms: Sequence[str],
    indicator: bool = False,
    cfg: TokenizeConfig = DEFAULT_TOKENIZE,
) -> np.ndarray:
    """Per-document counts (or presence flags) of each listed term."""
    if len(terms) == 0:
        raise ValueError("no terms")
    out = np.zeros((dtm.n_docs, len(terms)))
    csc = dtm.counts.tocsc()
    missing = []
    for k, term in enumerate(terms):
        tok = normalize_term(term, cfg)
        j = dtm.vocab.index.get(tok)
        if j is None:
            missing.append(term)
            continue
        col = csc[:, j].toarray().ravel()
        out[:, k] = (col > 0) if indicator else col
    if missing:
        warnings.warn(f"key terms absent from vocabulary: {missing}", stacklevel=2)
    return out
