"""Senone error rate, token error rate, Levenshtein decomposition and correlations."""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .models import enhance


@dataclass
class ErrorCounts:
    insertions: int = 0
    deletions: int = 0
    substitutions: int = 0
    ref_length: int = 0

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(self.insertions + other.insertions, self.deletions + other.deletions,
                           self.substitutions + other.substitutions,
                           self.ref_length + other.ref_length)

    @property
    def total(self) -> int:
        return self.insertions + self.deletions + self.substitutions


def error_rate(counts: ErrorCounts) -> float:
    """(S + D + I) / N."""
    if counts.ref_length <= 0:
        raise ValueError("error rate undefined for an empty reference")
    return counts.total / counts.ref_length


def levenshtein(ref: Sequence, hyp: Sequence) -> ErrorCounts:
    """Unit-cost alignment of ``hyp`` against ``ref``.

    The backtrace prefers the diagonal (match or substitution), then deletion,
    then insertion, so the decomposition is reproducible; the total distance
    does not depend on this order.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i, j] = min(d[i - 1, j - 1] + cost, d[i - 1, j] + 1, d[i, j - 1] + 1)
    i, j = n, m
    ins = dels = subs = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return ErrorCounts(int(ins), int(dels), int(subs), n)


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.size < 3:
        raise ValueError("pearson needs two equally long sequences of length >= 3")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0 or sy == 0:
        raise ValueError("pearson undefined: zero variance")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def feature_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over frames of the cosine similarity between columns of two (F, T) arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[1] == 0:
        raise ValueError("no frames")
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    denom = np.maximum(na * nb, 1e-12)
    return float(np.mean((a * b).sum(axis=0) / denom))


# ---------------------------------------------------------------------------
# model-based metrics
# ---------------------------------------------------------------------------

def _check_compat(am, corpus) -> None:
    spec = getattr(am, "spec", None)
    if spec is None or not corpus:
        return
    f = corpus[0].frames.shape[0]
    if f != spec.feature_dim:
        raise ValueError(f"model expects {spec.feature_dim} features, corpus has {f}")
    top = max(int(u.senone_labels.max(initial=0)) for u in corpus)
    if top >= spec.n_senones:
        raise ValueError(f"corpus label {top} outside model's {spec.n_senones} senones")


def predict_senones(am, generator, frames: np.ndarray) -> np.ndarray:
    """Per-frame argmax senone of ``am`` on (optionally enhanced) frames."""
    if frames.shape[1] == 0:
        return np.zeros(0, dtype=np.int64)
    x = enhance(generator, frames)
    was_training = getattr(am, "training", False)
    if hasattr(am, "eval"):
        am.eval()
    try:
        with no_grad():
            lp = am.frame_log_probs(Tensor(x)).data
    finally:
        if hasattr(am, "train"):
            am.train(was_training)
    return np.argmax(lp, axis=1)


def corpus_predictions(am, generator, corpus) -> list[np.ndarray]:
    """Per-utterance argmax senones, with every spliced frame scored in one batch.

    The acoustic model runs in eval mode, so batching does not change any row.
    """
    from .corpus import context_window

    radius = am.spec.context_radius
    rows, bounds = [], [0]
    for utt in corpus:
        x = enhance(generator, utt.frames)
        if x.shape[1]:
            rows.append(context_window(x, radius).T)
        bounds.append(bounds[-1] + x.shape[1])
    if not rows:
        return [np.zeros(0, dtype=np.int64) for _ in corpus]
    was_training = am.training
    am.eval()
    try:
        with no_grad():
            pred = np.argmax(am.forward(Tensor(np.concatenate(rows))).data, axis=1)
    finally:
        am.train(was_training)
    return [pred[bounds[i]:bounds[i + 1]] for i in range(len(corpus))]


def seer(am, generator, corpus) -> float:
    """Fraction of frames whose argmax senone differs from the aligned label."""
    _check_compat(am, corpus)
    total = sum(u.n_frames for u in corpus)
    if total == 0:
        raise ValueError("empty corpus")
    preds = corpus_predictions(am, generator, corpus)
    errors = sum(int(np.sum(p != u.senone_labels)) for p, u in zip(preds, corpus))
    return errors / total


def collapse_tokens(senones: np.ndarray, senone_to_token: np.ndarray, min_run: int = 2) -> list:
    """Map frames to tokens, drop runs shorter than ``min_run``, merge repeats."""
    toks = senone_to_token[np.asarray(senones, dtype=np.int64)] if len(senones) else []
    runs: list = []
    for tok in toks:
        if runs and runs[-1][0] == tok:
            runs[-1][1] += 1
        else:
            runs.append([int(tok), 1])
    out: list = []
    for tok, length in runs:
        if length < min_run or tok < 0:
            continue
        if not out or out[-1] != tok:
            out.append(tok)
    return out


def decode_tokens(am, generator, utt, senone_to_token: np.ndarray, min_run: int = 2) -> list:
    if utt.n_frames == 0:
        return []
    return collapse_tokens(predict_senones(am, generator, utt.frames), senone_to_token, min_run)


@dataclass
class EvalReport:
    seer: float
    token_error_rate: float
    counts: ErrorCounts
    per_utterance: list = field(default_factory=list)

    def to_json(self) -> str:
        doc = {"seer": self.seer, "token_error_rate": self.token_error_rate,
               "counts": asdict(self.counts), "total_errors": self.counts.total,
               "per_utterance": self.per_utterance}
        return json.dumps(doc, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("utt_id,frames,frame_errors,insertions,deletions,substitutions,ref_tokens\n")
        for row in self.per_utterance:
            buf.write(",".join(str(row[k]) for k in (
                "utt_id", "frames", "frame_errors", "insertions", "deletions",
                "substitutions", "ref_tokens")) + "\n")
        return buf.getvalue()


def evaluate(am, generator, corpus, senone_to_token: np.ndarray, min_run: int = 2) -> EvalReport:
    _check_compat(am, corpus)
    totals = ErrorCounts()
    frame_err = frame_total = 0
    rows = []
    for utt, pred in zip(corpus, corpus_predictions(am, generator, corpus)):
        fe = int(np.sum(pred != utt.senone_labels))
        counts = levenshtein(utt.tokens, collapse_tokens(pred, senone_to_token, min_run))
        totals = totals + counts
        frame_err += fe
        frame_total += utt.n_frames
        rows.append({"utt_id": utt.utt_id, "frames": utt.n_frames, "frame_errors": fe,
                     "insertions": counts.insertions, "deletions": counts.deletions,
                     "substitutions": counts.substitutions, "ref_tokens": counts.ref_length})
    return EvalReport(frame_err / max(frame_total, 1), error_rate(totals), totals, rows)


def correlation_study(am, generators: Sequence, corpus, senone_to_token: np.ndarray,
                      labels: Sequence | None = None, min_run: int = 2,
                      strict: bool = True) -> tuple[list, float]:
    """Evaluate each generator with one acoustic model; return rows and Pearson r(SeER, TER).

    With ``strict=False`` a constant metric column yields r = nan instead of an error.
    """
    if len(generators) < 3:
        raise ValueError("correlation study needs at least 3 checkpoints")
    labels = list(labels) if labels is not None else list(range(len(generators)))
    rows = []
    for label, gen in zip(labels, generators):
        rep = evaluate(am, gen, corpus, senone_to_token, min_run)
        rows.append({"label": label, "seer": rep.seer, "ter": rep.token_error_rate})
    try:
        r = pearson([row["seer"] for row in rows], [row["ter"] for row in rows])
    except ValueError:
        if strict:
            raise
        r = float("nan")
    return rows, r
