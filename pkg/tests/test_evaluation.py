import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import spindle as sp
from spindle import denoiser as dn, oracle as orc
from spindle.rng import stream


def test_bleu_identity():
    assert sp.bleu4(["the cat sat down"], ["the cat sat down"]) == pytest.approx(1.0)


def test_bleu_hand_checked_example():
    """Candidate 'the cat sat' vs reference 'the cat sat down': precisions
    (3/3, 2/2, 1/1, smoothed 1), BP = e^(1 - 4/3). Frozen from an independent
    hand computation of the corpus-BLEU formula."""
    got = sp.bleu4(["the cat sat"], ["the cat sat down"])
    assert got == pytest.approx(math.exp(1.0 - 4.0 / 3.0), abs=1e-12)


def test_bleu_disjoint_vocab_is_smoothing_floor():
    cand = " ".join(f"a{i}" for i in range(20))
    ref = " ".join(f"b{i}" for i in range(20))
    got = sp.bleu4([cand], [ref])
    # add-one smoothing on all four orders: exactly the smoothing floor
    expected = (1 / 21 * 1 / 20 * 1 / 19 * 1 / 18) ** 0.25
    assert got == pytest.approx(expected, abs=1e-12)
    assert got < 0.1


def test_bleu_empty_candidate_scores_zero():
    assert sp.sentence_bleu("", ["a b c"]) == 0.0


def test_bleu_matches_independent_implementation():
    """Cross-check against a from-scratch BLEU written differently (explicit
    clipping loops, no shared code)."""

    def ref_bleu(cand, refs):
        cand = cand.split()
        refs = [r.split() for r in refs]
        if not cand:
            return 0.0
        log_sum = 0.0
        for order in range(1, 5):
            cand_ngrams = [tuple(cand[i:i + order]) for i in range(len(cand) - order + 1)]
            matched = 0
            for gram in set(cand_ngrams):
                best = max(
                    sum(1 for j in range(len(r) - order + 1) if tuple(r[j:j + order]) == gram)
                    for r in refs
                )
                matched += min(cand_ngrams.count(gram), best)
            total = len(cand_ngrams)
            if matched == 0:
                log_sum += math.log((matched + 1) / (total + 1))
            else:
                log_sum += math.log(matched / total)
        c = len(cand)
        r = min((abs(len(r_) - c), len(r_)) for r_ in refs)[1]
        bp = 1.0 if c >= r else math.exp(1 - r / c)
        return bp * math.exp(log_sum / 4)

    rng = np.random.default_rng(0)
    vocab = ["a", "b", "c", "d", "e"]
    for _ in range(40):
        cand = " ".join(rng.choice(vocab, size=rng.integers(1, 9)))
        refs = [" ".join(rng.choice(vocab, size=rng.integers(1, 9)))
                for _ in range(int(rng.integers(1, 4)))]
        assert sp.sentence_bleu(cand, refs) == pytest.approx(ref_bleu(cand, refs), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_bleu_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    vocab = ["a", "b", "c", "d"]
    cands = [" ".join(rng.choice(vocab, size=5)) for _ in range(4)]
    refs = [" ".join(rng.choice(vocab, size=6)) for _ in range(3)]
    perm = list(rng.permutation(4))
    assert sp.bleu4(cands, refs) == pytest.approx(sp.bleu4([cands[i] for i in perm], refs))


def test_self_bleu_identical_sentences():
    assert sp.self_bleu4(["x y z w"] * 5) == pytest.approx(1.0)


def test_self_bleu_needs_two():
    with pytest.raises(ValueError):
        sp.self_bleu4(["just one"])


def test_self_bleu_diverse_lower_than_repetitive():
    diverse = ["a b c d", "e f g h", "c a d b", "h g e f"]
    repetitive = ["a b c d", "a b c d", "a b c e", "a b c f"]
    assert sp.self_bleu4(diverse) < sp.self_bleu4(repetitive)


def test_elbo_eval_uniform_model_telescopes_to_log_vocab(word_corpus):
    """Uniform untrained model with lam=0: the per-token bound telescopes to
    exactly ln(content vocab), independent of T (up to MC noise)."""
    vocab, table = word_corpus["vocab"], word_corpus["table"]
    seqs = word_corpus["seqs"]
    params = dn.init_params(
        dn.DenoiserConfig(vocab_size=len(vocab), mode="tad", num_layers=1, d_model=16,
                          num_heads=2, n_max=16, num_steps=8, dropout=0.0),
        0,
    )
    got = sp.elbo_eval(params, seqs, sp.ScheduleParams(num_steps=8, lam=0.0), table,
                       t_samples_per_example=64, seed=5)
    assert got == pytest.approx(math.log(vocab.num_content), rel=0.05)


def test_elbo_eval_exact_telescoping_exhaustive(word_corpus):
    """Same statement but exact: exhaustive averaging gives ln C per token."""
    vocab = word_corpus["vocab"]
    params = dn.init_params(
        dn.DenoiserConfig(vocab_size=len(vocab), mode="tad", num_layers=1, d_model=16,
                          num_heads=2, n_max=4, num_steps=4, dropout=0.0),
        0,
    )
    x0 = np.array([5, 7])
    sched = sp.flat_schedule(2, sp.ScheduleParams(num_steps=4, lam=0.0))
    total = sp.exact_elbo(sp.model_predict_fn(params), x0, sched)
    assert total / 2 == pytest.approx(math.log(vocab.num_content), abs=1e-9)


def test_elbo_eval_deterministic_and_seed_sensitive(word_corpus):
    vocab, table, seqs = word_corpus["vocab"], word_corpus["table"], word_corpus["seqs"]
    params = dn.init_params(
        dn.DenoiserConfig(vocab_size=len(vocab), mode="tad", num_layers=1, d_model=16,
                          num_heads=2, n_max=16, num_steps=8, dropout=0.0),
        0,
    )
    sched = sp.ScheduleParams(num_steps=8, lam=0.3)
    a = sp.elbo_eval(params, seqs, sched, table, 4, seed=1)
    b = sp.elbo_eval(params, seqs, sched, table, 4, seed=1)
    c = sp.elbo_eval(params, seqs, sched, table, 4, seed=2)
    assert a == b
    assert a != c


def test_elbo_eval_consistency_under_more_samples(word_corpus):
    vocab, table, seqs = word_corpus["vocab"], word_corpus["table"], word_corpus["seqs"]
    params = dn.init_params(
        dn.DenoiserConfig(vocab_size=len(vocab), mode="tad", num_layers=1, d_model=16,
                          num_heads=2, n_max=16, num_steps=8, dropout=0.0),
        0,
    )
    sched = sp.ScheduleParams(num_steps=8, lam=0.0)
    few = sp.elbo_eval(params, seqs, sched, table, 8, seed=3)
    many = sp.elbo_eval(params, seqs, sched, table, 16, seed=3)
    # uniform model: both are near ln C; doubling samples moves the estimate
    # by less than its own noise scale
    assert abs(many - few) < 0.15


def test_elbo_eval_empty_dataset_errors(word_corpus):
    params = dn.init_params(
        dn.DenoiserConfig(vocab_size=len(word_corpus["vocab"]), mode="tad", num_layers=1,
                          d_model=16, num_heads=2, n_max=16, num_steps=8),
        0,
    )
    with pytest.raises(ValueError):
        sp.elbo_eval(params, [], sp.ScheduleParams(num_steps=8), word_corpus["table"])


def test_metrics_report_round_trip():
    import json

    rep = sp.MetricsReport(0.5, math.exp(0.5), 0.4, 0.2, 100, {"seed": 1})
    payload = json.loads(rep.to_json())
    assert payload["format_version"] == 1
    assert payload["ppl_proxy"] >= 1.0
    assert 0 <= payload["bleu4"] <= 1 and 0 <= payload["self_bleu4"] <= 1
