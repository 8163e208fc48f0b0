"""Text-generation evaluation and the tagging probe.

Corpus scores are macro averages of per-example scores. The sequence work
(n-gram clipping, LCS, unigram alignment) runs on integer token ids through
the kernels package, so the compiled and pure backends feed identical
arithmetic.

Report fields: b_u is the arithmetic mean of the four n-gram precision
scores (each with its own brevity penalty), m_r the alignment F-mean with
fragmentation penalty, r_l the LCS F-measure, bert_s the greedy-matching
embedding F. bert_s needs an embedding backend; without one the report
carries None and renders an explicit marker instead of a number.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, InputError

ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5
BLEU_MAX_ORDER = 4

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^a-z0-9\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens; every punctuation mark is its own token."""
    return _TOKEN_RE.findall(text.lower())


def _intern(cand: Sequence[str], refs: Sequence[Sequence[str]]):
    """Map tokens to small ints shared across candidate and references."""
    vocab: dict[str, int] = {}

    def ids(tokens):
        return [vocab.setdefault(t, len(vocab)) for t in tokens]

    return ids(cand), [ids(r) for r in refs]


def _check_refs(references: Sequence[str]) -> None:
    if not references:
        raise InputError("need at least one reference")


# ---------------------------------------------------------------------------
# n-gram precision score (b_u)
# ---------------------------------------------------------------------------

def _closest_ref_length(c: int, ref_lens: Sequence[int]) -> int:
    # ties between equally close reference lengths go to the shorter one
    return min((abs(r - c), r) for r in ref_lens)[1]


def _bleu_n_tokens(cand: list[int], refs: list[list[int]], n: int) -> float:
    clipped, total = kernels.clipped_ngram_matches(cand, refs, n)
    if total == 0:
        return 0.0
    c = len(cand)
    r = _closest_ref_length(c, [len(ref) for ref in refs])
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * (clipped / total)


def bleu_weighted_tokens(cand: Sequence[str],
                         refs: Sequence[Sequence[str]]) -> float:
    if not cand:
        return 0.0
    cand_ids, ref_ids = _intern(cand, refs)
    return 0.25 * sum(_bleu_n_tokens(cand_ids, ref_ids, n)
                      for n in range(1, BLEU_MAX_ORDER + 1))


def bleu_weighted(candidate: str, references: Sequence[str]) -> float:
    _check_refs(references)
    return bleu_weighted_tokens(tokenize(candidate),
                                [tokenize(r) for r in references])


# ---------------------------------------------------------------------------
# LCS F-measure (r_l)
# ---------------------------------------------------------------------------

def rouge_l_tokens(cand: Sequence[str],
                   refs: Sequence[Sequence[str]]) -> float:
    if not cand:
        return 0.0
    cand_ids, ref_ids = _intern(cand, refs)
    best = 0.0
    b2 = ROUGE_BETA * ROUGE_BETA
    for ref in ref_ids:
        if not ref:
            continue
        lcs = kernels.lcs_length(cand_ids, ref)
        p = lcs / len(cand_ids)
        r = lcs / len(ref)
        if p + r == 0:
            continue
        best = max(best, (1.0 + b2) * p * r / (r + b2 * p))
    return best


def rouge_l(candidate: str, references: Sequence[str]) -> float:
    _check_refs(references)
    return rouge_l_tokens(tokenize(candidate),
                          [tokenize(r) for r in references])


# ---------------------------------------------------------------------------
# alignment F-mean with fragmentation penalty (m_r)
# ---------------------------------------------------------------------------

def meteor_tokens(cand: Sequence[str],
                  refs: Sequence[Sequence[str]]) -> float:
    if not cand:
        return 0.0
    cand_ids, ref_ids = _intern(cand, refs)
    best = 0.0
    for ref in ref_ids:
        if not ref:
            continue
        matches, chunks = kernels.greedy_align(cand_ids, ref)
        if matches == 0:
            continue
        p = matches / len(cand_ids)
        r = matches / len(ref)
        f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r)
        penalty = METEOR_GAMMA * (chunks / matches) ** METEOR_BETA
        best = max(best, f_mean * (1.0 - penalty))
    return best


def meteor(candidate: str, references: Sequence[str]) -> float:
    _check_refs(references)
    return meteor_tokens(tokenize(candidate),
                         [tokenize(r) for r in references])


# ---------------------------------------------------------------------------
# embedding-similarity F (bert_s)
# ---------------------------------------------------------------------------

class EmbeddingBackend(Protocol):
    """Anything that turns a token sequence into per-token vectors."""

    name: str

    def embed_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        """(len(tokens), dim) array."""
        ...


class HashEmbeddingBackend:
    """Deterministic unit vector per distinct token, seeded from its hash.

    An offline stand-in for a contextual model: exact token overlap scores
    high, everything else is near-orthogonal noise. Pluggable like any
    other backend; scores are comparable only within one backend.
    """

    def __init__(self, dim: int = 64):
        if dim < 2:
            raise ConfigError(f"embedding dim must be >= 2, got {dim}")
        self.dim = dim
        self.name = f"hash{dim}"
        self._cache: dict[str, np.ndarray] = {}

    def _vector(self, token: str) -> np.ndarray:
        v = self._cache.get(token)
        if v is None:
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
            v = rng.standard_normal(self.dim)
            v /= np.linalg.norm(v)
            self._cache[token] = v
        return v

    def embed_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.dim))
        return np.stack([self._vector(t) for t in tokens])


def greedy_match_f(cand_emb: np.ndarray, ref_emb: np.ndarray) -> float:
    """Greedy-matching F over cosine similarities (each side's best match)."""
    cand = np.asarray(cand_emb, dtype=np.float64)
    ref = np.asarray(ref_emb, dtype=np.float64)
    if cand.size == 0 or ref.size == 0:
        return 0.0
    cn = np.linalg.norm(cand, axis=1, keepdims=True)
    rn = np.linalg.norm(ref, axis=1, keepdims=True)
    cand = np.where(cn > 0, cand / np.where(cn == 0, 1.0, cn), cand)
    ref = np.where(rn > 0, ref / np.where(rn == 0, 1.0, rn), ref)
    sims = cand @ ref.T
    precision = float(np.mean(np.max(sims, axis=1)))
    recall = float(np.mean(np.max(sims, axis=0)))
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def bert_style_f(candidate: str, references: Sequence[str],
                 backend: EmbeddingBackend) -> float:
    """Best greedy-matching F against any reference."""
    _check_refs(references)
    cand_tokens = tokenize(candidate)
    if not cand_tokens:
        return 0.0
    cand_emb = backend.embed_tokens(cand_tokens)
    best = 0.0
    for reference in references:
        ref_tokens = tokenize(reference)
        if not ref_tokens:
            continue
        best = max(best, greedy_match_f(cand_emb,
                                        backend.embed_tokens(ref_tokens)))
    return best


# ---------------------------------------------------------------------------
# corpus evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    b_u: float
    m_r: float
    r_l: float
    bert_s: float | None
    n_examples: int

    def to_dict(self) -> dict:
        return {"b_u": self.b_u, "m_r": self.m_r, "r_l": self.r_l,
                "bert_s": self.bert_s, "n_examples": self.n_examples}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(b_u=d["b_u"], m_r=d["m_r"], r_l=d["r_l"],
                   bert_s=d.get("bert_s"), n_examples=d["n_examples"])


BERT_S_UNAVAILABLE = "n/a (no embedding backend)"


def format_report(report: EvalReport) -> str:
    """Fixed-width text table, three decimals per metric."""
    bert = BERT_S_UNAVAILABLE if report.bert_s is None else f"{report.bert_s:.3f}"
    lines = [
        f"{'examples':<10} {report.n_examples}",
        f"{'b_u':<10} {report.b_u:.3f}",
        f"{'m_r':<10} {report.m_r:.3f}",
        f"{'r_l':<10} {report.r_l:.3f}",
        f"{'bert_s':<10} {bert}",
    ]
    return "\n".join(lines)


def evaluate_model(predictions: Mapping[str, str],
                   references: Mapping[str, Sequence[str]],
                   bert_backend: EmbeddingBackend | None = None) -> EvalReport:
    """Macro-averaged report over id-matched predictions and references.

    The id sets must match exactly. Iteration runs over sorted ids, so the
    report does not depend on input ordering.
    """
    if not predictions:
        raise InputError("no predictions to evaluate")
    pred_ids, ref_ids = set(predictions), set(references)
    if pred_ids != ref_ids:
        missing = sorted(pred_ids - ref_ids)[:5]
        extra = sorted(ref_ids - pred_ids)[:5]
        raise InputError(
            f"prediction and reference ids do not match "
            f"(predictions without references: {missing}, "
            f"references without predictions: {extra})")

    b_u = m_r = r_l = bert = 0.0
    n = len(predictions)
    for example_id in sorted(predictions):
        cand = tokenize(predictions[example_id])
        refs_text = list(references[example_id])
        _check_refs(refs_text)
        refs = [tokenize(r) for r in refs_text]
        b_u += bleu_weighted_tokens(cand, refs)
        m_r += meteor_tokens(cand, refs)
        r_l += rouge_l_tokens(cand, refs)
        if bert_backend is not None:
            bert += bert_style_f(predictions[example_id], refs_text,
                                 bert_backend)
    return EvalReport(b_u=b_u / n, m_r=m_r / n, r_l=r_l / n,
                      bert_s=(bert / n if bert_backend is not None else None),
                      n_examples=n)


def read_predictions(path: str | Path) -> dict[str, str]:
    """JSONL rows {"id": ..., "text": ...} -> id-keyed dict."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                example_id, text = str(d["id"]), str(d["text"])
            except (json.JSONDecodeError, KeyError) as err:
                raise InputError(f"{path}:{lineno}: bad prediction row: {err}")
            if example_id in out:
                raise InputError(f"{path}:{lineno}: duplicate id {example_id!r}")
            out[example_id] = text
    return out


def read_references(path: str | Path) -> dict[str, list[str]]:
    """JSONL rows {"id", "references": [...]} (or {"id", "text"})."""
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                example_id = str(d["id"])
                if "references" in d:
                    refs = [str(r) for r in d["references"]]
                else:
                    refs = [str(d["text"])]
            except (json.JSONDecodeError, KeyError, TypeError) as err:
                raise InputError(f"{path}:{lineno}: bad reference row: {err}")
            if not refs:
                raise InputError(f"{path}:{lineno}: empty reference list")
            if example_id in out:
                raise InputError(f"{path}:{lineno}: duplicate id {example_id!r}")
            out[example_id] = refs
    return out


# ---------------------------------------------------------------------------
# tagging probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaggingProbeResult:
    auc: float
    ap: float
    num_tags: int


def pool_embedding(emb) -> np.ndarray:
    """Frame-mean per layer, layers concatenated: (num_layers*feature_dim,)."""
    values = np.asarray(emb.values if hasattr(emb, "values") else emb,
                        dtype=np.float64)
    if values.ndim != 3:
        raise InputError(f"expected (layers, frames, dim), got {values.shape}")
    return values.mean(axis=1).reshape(-1)


def tagging_probe(features, labels, seed: int = 0) -> TaggingProbeResult:
    """Linear probe over pooled features; macro ROC-AUC and AP.

    features: (n, d) array, or a list of layer-stacked embeddings which are
    pooled via pool_embedding. labels: (n, num_tags) binary matrix. The
    rows are split half/half into fit and eval sets with a seeded shuffle.
    Tags with a single class in either split cannot be scored and are
    excluded with a warning.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.metrics import average_precision_score, roc_auc_score

    if isinstance(features, (list, tuple)):
        features = np.stack([pool_embedding(e) for e in features])
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2:
        raise InputError(f"features must be 2-D, got shape {x.shape}")
    if y.ndim != 2 or y.shape[0] != x.shape[0]:
        raise InputError(
            f"labels must be (n, num_tags) aligned with features, got {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise InputError("labels must be binary")
    n = x.shape[0]
    if n < 4:
        raise InputError(f"need at least 4 clips to split, got {n}")

    order = np.random.default_rng(seed).permutation(n)
    half = n // 2
    fit_idx, eval_idx = order[:half], order[half:]

    aucs, aps = [], []
    excluded = []
    for tag in range(y.shape[1]):
        y_fit, y_eval = y[fit_idx, tag], y[eval_idx, tag]
        if len(np.unique(y_fit)) < 2 or len(np.unique(y_eval)) < 2:
            excluded.append(tag)
            continue
        clf = LogisticRegression(max_iter=1000)
        clf.fit(x[fit_idx], y_fit)
        scores = clf.decision_function(x[eval_idx])
        aucs.append(float(roc_auc_score(y_eval, scores)))
        aps.append(float(average_precision_score(y_eval, scores)))
    if excluded:
        warnings.warn(
            f"excluded {len(excluded)} degenerate tag(s) with a single class "
            f"in a split: {excluded}", stacklevel=2)
    if not aucs:
        raise InputError("every tag was degenerate; nothing to score")
    return TaggingProbeResult(auc=float(np.mean(aucs)),
                              ap=float(np.mean(aps)),
                              num_tags=len(aucs))
