import functools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from guidedgan import functional as F
from guidedgan.autodiff import Tensor
from guidedgan.corpus import CorpusManifest, FeatureUtterance, build_lexicon, synth_corpus
from guidedgan.metrics import (ErrorCounts, collapse_tokens, correlation_study, decode_tokens,
                               error_rate, evaluate, feature_correlation, levenshtein, pearson,
                               predict_senones, seer)
from guidedgan.models import AcousticModelSpec, build_acoustic_model
from guidedgan.nn import Module

MANIFEST = CorpusManifest(n_utterances=10, feature_dim=4, n_senones=8, vocab_size=4, emit_sigma=0.0)


class NearestMeanAM(Module):
    """Scores each frame by negative squared distance to the senone means (centre slot only)."""

    def __init__(self, means, flip=False):
        super().__init__()
        c, f = means.shape
        self.spec = AcousticModelSpec(feature_dim=f, n_senones=c, context_radius=1)
        self.means = means.astype(np.float64)
        self.flip = flip

    def forward(self, rows):
        f = self.spec.feature_dim
        centre = rows.data[:, f:2 * f].astype(np.float64)
        score = -((centre[:, None, :] - self.means[None]) ** 2).sum(axis=2)
        if self.flip:
            score = -score
        return F.log_softmax(Tensor(score))

    def frame_log_probs(self, frames):
        return self.forward(F.context_splice(frames, 1))


class Identity(Module):
    def forward(self, x):
        return x


@pytest.fixture(scope="module")
def clean():
    lex = build_lexicon(MANIFEST)
    return synth_corpus(MANIFEST), lex.means, lex.senone_to_token(MANIFEST.n_senones)


def test_error_rate_paper_arithmetic():
    counts = ErrorCounts(insertions=984, deletions=1317, substitutions=8228, ref_length=54402)
    assert counts.total == 10529
    assert f"{100 * error_rate(counts):.2f}" == "19.35"


def test_error_rate_edges():
    assert error_rate(ErrorCounts(0, 0, 0, 5)) == 0.0
    assert error_rate(ErrorCounts(5, 0, 0, 5)) == 1.0
    with pytest.raises(ValueError):
        error_rate(ErrorCounts(0, 0, 0, 0))


def test_levenshtein_fixtures():
    assert levenshtein(list("abc"), list("abc")) == ErrorCounts(0, 0, 0, 3)
    assert levenshtein(list("abc"), list("axc")) == ErrorCounts(0, 0, 1, 3)
    assert levenshtein(list("abc"), list("ac")) == ErrorCounts(0, 1, 0, 3)
    assert levenshtein(list("ac"), list("abc")) == ErrorCounts(1, 0, 0, 2)
    assert levenshtein([], list("ab")) == ErrorCounts(2, 0, 0, 0)


def memo_distance(a, b):
    @functools.lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j - 1) + (a[i - 1] != b[j - 1]), d(i - 1, j) + 1, d(i, j - 1) + 1)

    return d(len(a), len(b))


tokens = st.lists(st.integers(0, 3), max_size=9)


@settings(max_examples=80, deadline=None)
@given(ref=tokens, hyp=tokens)
def test_levenshtein_total_matches_memoized_recursion(ref, hyp):
    c = levenshtein(ref, hyp)
    assert c.total == memo_distance(tuple(ref), tuple(hyp))
    assert c.substitutions + c.deletions <= c.ref_length == len(ref)
    assert len(ref) - c.deletions + c.insertions == len(hyp)


@settings(max_examples=50, deadline=None)
@given(ref=tokens, hyp=tokens)
def test_levenshtein_is_symmetric_with_swapped_insertions(ref, hyp):
    ab, ba = levenshtein(ref, hyp), levenshtein(hyp, ref)
    assert ab.total == ba.total
    # I and D swap roles; the exact split may differ only through ties
    assert ab.insertions - ab.deletions == ba.deletions - ba.insertions


def test_pearson_fixtures():
    xs = [1.0, 2.0, 3.0, 4.0, 6.0]
    assert pearson(xs, [2 * x + 1 for x in xs]) == pytest.approx(1.0, abs=1e-12)
    assert pearson(xs, [-x for x in xs]) == pytest.approx(-1.0, abs=1e-12)
    # hand computation: mean x = 3.2, mean y = 2.6, Sxy = 4.4, Sxx = 14.8, Syy = 5.2
    ys = [2.0, 1.0, 4.0, 3.0, 3.0]
    assert abs(pearson(xs, ys) - 4.4 / (14.8 * 5.2) ** 0.5) <= 1e-9


def test_pearson_guards():
    with pytest.raises(ValueError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1, 2], [1, 2])


def test_feature_correlation_cases():
    a = np.random.default_rng(0).standard_normal((4, 9))
    assert feature_correlation(a, a) == pytest.approx(1.0)
    assert feature_correlation(a, -a) == pytest.approx(-1.0)
    e = np.eye(2)
    assert feature_correlation(e, e[::-1]) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        feature_correlation(a, a[:, :3])


def test_seer_oracle_and_adversary(clean):
    corpus, means, _ = clean
    assert seer(NearestMeanAM(means), None, corpus) == 0.0
    assert seer(NearestMeanAM(means, flip=True), None, corpus) == 1.0


def test_seer_matches_per_frame_loop():
    am = build_acoustic_model(AcousticModelSpec(feature_dim=4, n_senones=8, hidden_units=8,
                                                hidden_layers=2))
    rng = np.random.default_rng(0)
    corpus = [FeatureUtterance(f"u{i}", rng.standard_normal((4, t)).astype(np.float32),
                               rng.integers(0, 8, t), [0]) for i, t in enumerate([5, 1, 12])]
    errors = frames = 0
    for u in corpus:
        pred = predict_senones(am, None, u.frames)
        for t in range(u.n_frames):
            errors += pred[t] != u.senone_labels[t]
            frames += 1
    assert seer(am, None, corpus) == errors / frames
    assert am.training


def test_identity_generator_gives_identical_seer():
    am = build_acoustic_model(AcousticModelSpec(feature_dim=4, n_senones=8, hidden_units=8,
                                                hidden_layers=1))
    corpus = synth_corpus(CorpusManifest(n_utterances=4, feature_dim=4, n_senones=8, vocab_size=4))
    identity = Identity()
    assert seer(am, identity, corpus) == seer(am, None, corpus)


def test_seer_rejects_mismatched_corpus(clean):
    corpus, means, _ = clean
    with pytest.raises(ValueError):
        seer(NearestMeanAM(means[:, :3]), None, corpus)
    with pytest.raises(ValueError):
        seer(NearestMeanAM(means[:4]), None, corpus)


def test_zero_noise_decoding_recovers_tokens(clean):
    corpus, means, table = clean
    am = NearestMeanAM(means)
    for u in corpus:
        assert decode_tokens(am, None, u, table) == u.tokens
    report = evaluate(am, None, corpus, table)
    assert report.seer == 0.0 and report.token_error_rate == 0.0


def test_decode_empty_utterance(clean):
    _, means, table = clean
    empty = FeatureUtterance("e", np.zeros((4, 0), np.float32), np.zeros(0, np.int64), [])
    assert decode_tokens(NearestMeanAM(means), None, empty, table) == []


def test_min_run_only_matters_for_single_frame_glitches():
    table = np.array([0, 1, 2])
    glitchy = np.array([0, 0, 0, 1, 0, 0, 2, 2])
    assert collapse_tokens(glitchy, table, 1) == [0, 1, 0, 2]
    assert collapse_tokens(glitchy, table, 2) == [0, 2]
    steady = np.array([0, 0, 1, 1, 2, 2])
    assert collapse_tokens(steady, table, 1) == collapse_tokens(steady, table, 2) == [0, 1, 2]


def test_evaluate_counts_are_order_independent_sums(clean):
    corpus, means, table = clean
    am = build_acoustic_model(AcousticModelSpec(feature_dim=4, n_senones=8, hidden_units=8,
                                                hidden_layers=1))
    fwd = evaluate(am, None, corpus, table)
    rev = evaluate(am, None, corpus[::-1], table)
    assert fwd.counts == rev.counts and fwd.token_error_rate == rev.token_error_rate
    assert fwd.counts.insertions == sum(r["insertions"] for r in fwd.per_utterance)
    doc = json.loads(fwd.to_json())
    assert doc["counts"]["ref_length"] == sum(len(u.tokens) for u in corpus)
    assert fwd.to_csv().splitlines()[0].startswith("utt_id,frames,frame_errors")


def test_correlation_study_rejects_degenerate_metrics(clean):
    corpus, means, table = clean
    am = NearestMeanAM(means)
    with pytest.raises(ValueError):
        correlation_study(am, [None] * 10, corpus, table)
    with pytest.raises(ValueError):
        correlation_study(am, [None] * 2, corpus, table)
