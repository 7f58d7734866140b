import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from seqmatch.dataio import data_support, toy_grammar
from seqmatch.evalx import (
    REP_ORDERS,
    EvalReport,
    backspace_rate_of,
    chain_closed_forms,
    chain_experiment,
    chain_vocab,
    diversity,
    draw,
    rep_n,
    rep_n_checked,
    valid_rate,
)
from seqmatch.occupancy import data_policy
from seqmatch.policy import TabularPolicy


def brute_rep(seq, n):
    grams = Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))
    total = sum(grams.values())
    return 0.0 if total == 0 else 100.0 * (1 - len(grams) / total)


def test_rep_n_examples():
    assert rep_n("abcde", 2) == 0.0
    assert rep_n("aaaaa", 2) == 75.0
    assert rep_n("aaaaa", 4) == 50.0
    assert rep_n_checked("ab", 3) == (0.0, True)
    assert rep_n_checked("abc", 3) == (0.0, False)
    assert rep_n(["a", "a", "<eos>", "a"], 2, skip=["<eos>"]) == 50.0
    with pytest.raises(ValueError):
        rep_n("abc", 0)


def test_diversity_examples():
    assert diversity("abcdefg") == 1.0
    assert diversity("aaaaa") == pytest.approx(0.25 * (1 / 3) * 0.5)
    assert diversity("aaaaa") == pytest.approx(0.04167, abs=1e-5)


def test_diversity_non_increasing_when_repeats_appended():
    seq = list("abcab")
    prev = diversity(seq)
    for _ in range(6):
        seq = seq + seq[-4:-2]
        cur = diversity(seq)
        assert cur <= prev + 1e-15
        prev = cur


def test_metrics_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        seq = rng.integers(0, int(rng.integers(1, 5)), size=int(rng.integers(0, 30))).tolist()
        reps = {n: brute_rep(seq, n) for n in REP_ORDERS}
        for n in REP_ORDERS:
            assert rep_n(seq, n) == reps[n]
        assert diversity(seq) == np.prod([1 - reps[n] / 100 for n in REP_ORDERS])


@given(st.lists(st.integers(0, 3), max_size=25), st.integers(1, 5))
def test_rep_n_in_range(seq, n):
    assert 0.0 <= rep_n(seq, n) <= 100.0


def test_chain_example_values():
    rep = chain_experiment(10, 0.1)
    assert rep.sequence["kl"] == pytest.approx(1.05361, abs=1e-5)
    assert rep.completion_prob == pytest.approx(0.34868, abs=1e-5)
    assert math.isinf(rep.sequence["reverse_kl"])


def test_chain_eps_zero():
    rep = chain_experiment(5, 0.0)
    assert rep.completion_prob == 1.0
    for d in (rep.sequence, rep.occupancy):
        for v in d.values():
            assert v == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("eps", [0.0, 0.01, 0.1, 0.3])
def test_chain_matches_closed_forms(eps):
    for n in range(1, 21):
        rep = chain_experiment(n, eps, 0.9)
        assert rep.max_gap() < 1e-9


def test_chain_kl_linear_in_n():
    kls = [chain_closed_forms(n, 0.1, 0.9)[1]["kl"] for n in range(1, 8)]
    np.testing.assert_allclose(np.diff(kls), -math.log(0.9), rtol=1e-12)


def test_chain_errors():
    with pytest.raises(ValueError):
        chain_experiment(0, 0.1)
    with pytest.raises(ValueError):
        chain_experiment(3, 1.0)


def _log_policy(vocab, T, finite_policy):
    p = TabularPolicy.zeros(vocab, T)
    with np.errstate(divide="ignore"):
        for s, row in finite_policy.rows.items():
            if s in p.state_index:
                p.set_logits(s, np.log(row))
    return p


def test_valid_rate_chain_model():
    v = chain_vocab()
    n, eps = 10, 0.1
    p = TabularPolicy.zeros(v, n + 2)
    with np.errstate(divide="ignore"):
        for k in range(n):
            p.set_logits((v.bos,) + (0,) * k, np.log([1 - eps, eps, 0.0]))
        p.set_logits((v.bos,) + (0,) * n, np.log([0.0, 1.0, 0.0]))
    support = {(v.bos,) + (0,) * n + (v.eos,)}
    assert valid_rate(p, support, 100_000, seed=0) == pytest.approx(0.9**10, abs=0.01)


def test_valid_rate_data_policy_vs_uniform():
    ds = toy_grammar()
    support = data_support(ds, 8)
    p = _log_policy(ds.vocab, 8, data_policy(ds.records, ds.vocab, 8))
    assert valid_rate(p, support, 2000, seed=1) == 1.0
    uniform = TabularPolicy.zeros(ds.vocab, 8)
    assert valid_rate(uniform, support, 2000, seed=1) < 1.0


def test_draw_thread_invariant_and_rates():
    ds = toy_grammar()
    p = TabularPolicy.zeros(ds.vocab, 8)
    a = draw(p, 100, seed=3)
    assert a == draw(p, 100, seed=3, threads=4)
    rate = backspace_rate_of(a, ds.vocab)
    assert 0.0 < rate < 1.0


def test_report_serialization():
    rep = EvalReport(0.5, {2: 10.0, 3: 20.0, 4: 30.0}, 0.1, 0.9, 3.0, 10, {"kl": 0.2}, 1.5)
    d = json.loads(rep.to_json())
    assert d["rep_n"] == {"2": 10.0, "3": 20.0, "4": 30.0}
    assert d["divergences"] == {"kl": 0.2}
    lines = rep.table().splitlines()
    assert lines[0].split() == ["samples", "10"]
    assert [ln.split()[0] for ln in lines][-2:] == ["perplexity", "kl"]
