import math

import numpy as np
import pytest

from interkd.corpus import deterministic_language, sample_sentence
from interkd.ngram import NgramLm, ngram_logprob, ngram_train

TOKENS = ["a", "b", "c"]


def test_unigram_is_add_one():
    lm = ngram_train([[0, 0, 1]], 1, TOKENS)
    # counts a=2, b=1, c=0 over N=3 and |V|=3
    assert lm.logprob([], 0) == pytest.approx(math.log(3 / 6))
    assert lm.logprob([2, 1], 2) == pytest.approx(math.log(1 / 6))


def test_unnormalised_scores_follow_stupid_backoff_by_hand():
    lm = ngram_train([[0, 1], [0, 2], [1, 1]], 2, TOKENS, normalized=False)
    s = lm.scores([0])
    # after "a": b and c seen once each; a backs off to 0.4 * unigram (2 + 1) / (6 + 3)
    np.testing.assert_allclose(s, [0.4 * 3 / 9, 0.5, 0.5], rtol=1e-12)
    start = lm.scores([])
    # sentence start: a seen twice, b once, c backs off
    np.testing.assert_allclose(start, [2 / 3, 1 / 3, 0.4 * 2 / 9], rtol=1e-12)


def test_normalised_rows_sum_to_one_and_are_finite():
    rng = np.random.default_rng(0)
    sents = [list(rng.integers(0, 3, size=rng.integers(1, 6))) for _ in range(50)]
    lm = ngram_train(sents, 4, TOKENS)
    for _ in range(30):
        hist = list(rng.integers(0, 3, size=rng.integers(0, 5)))
        p = lm.scores(hist)
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        assert all(math.isfinite(lm.logprob(hist, w)) for w in range(3))


def test_unseen_context_backs_off_to_unigram():
    lm = ngram_train([[0, 0, 0]], 3, TOKENS)
    uni = ngram_train([[0, 0, 0]], 1, TOKENS)
    np.testing.assert_allclose(lm.scores([2, 1]), uni.scores([]), rtol=1e-12)


def test_deterministic_language_is_near_certain():
    spec = deterministic_language(8, seed=0)
    rng = np.random.default_rng(0)
    sents = [sample_sentence(spec, rng) for _ in range(300)]
    lm = ngram_train(sents, 6, [f"w{i}" for i in range(8)])
    nxt = spec.transitions.argmax(axis=1)
    for s in sents[:20]:
        for i in range(1, len(s)):
            assert lm.logprob(s[:i], s[i]) > math.log(0.9)
            assert s[i] == nxt[s[i - 1]]


def test_sentence_logprob_sums_positions():
    lm = ngram_train([[0, 1, 2], [1, 2]], 3, TOKENS)
    s = [1, 2, 0]
    assert lm.sentence_logprob(s) == pytest.approx(sum(ngram_logprob(lm, s[:i], w)
                                                       for i, w in enumerate(s)))


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    sents = [list(rng.integers(0, 3, size=rng.integers(1, 8))) for _ in range(40)]
    lm = ngram_train(sents, 6, TOKENS)
    lm.save(tmp_path / "lm.txt")
    back = NgramLm.load(tmp_path / "lm.txt")
    assert back.order == 6 and back.tokens == lm.tokens and back.normalized
    for _ in range(20):
        hist = list(rng.integers(0, 3, size=rng.integers(0, 7)))
        assert back.scores(hist).tobytes() == lm.scores(hist).tobytes()
    back.save(tmp_path / "again.txt")
    assert (tmp_path / "again.txt").read_bytes() == (tmp_path / "lm.txt").read_bytes()


def test_errors():
    with pytest.raises(ValueError, match="order"):
        NgramLm(0, TOKENS)
    with pytest.raises(ValueError, match="empty"):
        ngram_train([], 2, TOKENS)
