import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from domsot.core import TokenSequence, build_vocabulary, encode_transcript
from domsot.ctc import ctc_loss
from domsot.model import out_class
from domsot.serialization import (SerializationError, build_serialized_label, ce_loss, dom_loss,
                                  dom_order, fifo_order, pit_best_permutation, split_on_sc)

from oracles import ce_naive, finite_difference, rel_error

V = build_vocabulary(list("abcd"))
V_OUT = V.n_content + 2


def tx(text):
    return encode_transcript(text, V)


def classes_of(label):
    return [out_class(V, t) for t in label.ids.ids]


def one_hot_logits(label, margin=30.0):
    cls = classes_of(label)
    z = np.zeros((len(cls), V_OUT))
    z[np.arange(len(cls)), cls] = margin
    return z


def test_label_patterns():
    L1, L2 = tx("a b"), tx("c")
    sc, eos = V.sc_id, V.eos_id
    assert build_serialized_label([L1], [0], V).ids.ids == (0, 1, sc, eos)
    assert build_serialized_label([L1, L2], (0, 1), V).ids.ids == (0, 1, sc, 2, sc, eos)
    assert build_serialized_label([L1, L2], (1, 0), V).ids.ids == (2, sc, 0, 1, sc, eos)


def test_bad_permutation():
    with pytest.raises(SerializationError):
        build_serialized_label([tx("a"), tx("b")], (0, 0), V)


transcripts = st.lists(st.lists(st.integers(0, 3), min_size=1, max_size=5), min_size=1, max_size=4)


@given(transcripts, st.randoms())
def test_segments_recover_permuted_transcripts(raw, rnd):
    ts = [TokenSequence(tuple(t), V) for t in raw]
    order = list(range(len(ts)))
    rnd.shuffle(order)
    label = build_serialized_label(ts, order, V)
    assert label.segments() == [list(ts[i].ids) for i in order]
    assert split_on_sc(label.ids.ids, V) == label.segments()


def test_ce_limits():
    label = build_serialized_label([tx("a b"), tx("c d a")], (0, 1), V)
    n = len(label)
    assert ce_loss(np.zeros((n, V_OUT)), label)[0] == pytest.approx(n * math.log(V_OUT), rel=1e-12)
    assert ce_loss(one_hot_logits(label, 50.0), label)[0] < 1e-20


def test_ce_matches_naive_sum():
    rng = np.random.default_rng(0)
    for _ in range(50):
        ts = [TokenSequence(tuple(rng.integers(0, 4, size=rng.integers(1, 5))), V) for _ in range(2)]
        label = build_serialized_label(ts, (1, 0), V)
        logits = rng.standard_normal((len(label), V_OUT)) * 3
        loss, _ = ce_loss(logits, label)
        ref = ce_naive(logits, classes_of(label))
        assert abs(loss - ref) <= 1e-12 * ref


def test_ce_gradient():
    rng = np.random.default_rng(1)
    label = build_serialized_label([tx("a b"), tx("c")], (0, 1), V)
    logits = rng.standard_normal((len(label), V_OUT))
    _, g = ce_loss(logits, label, with_grad=True)
    fd = finite_difference(lambda: ce_loss(logits, label)[0], logits)
    assert rel_error(g, fd) < 1e-6


def test_ce_length_mismatch():
    label = build_serialized_label([tx("a")], (0,), V)
    with pytest.raises(SerializationError):
        ce_loss(np.zeros((2, V_OUT)), label)


def test_fifo_order():
    assert fifo_order([300, 0]) == (1, 0)
    assert fifo_order([0, 0]) == (0, 1)
    assert fifo_order([0, 100, 50]) == (0, 2, 1)


def test_dom_order():
    assert dom_order([5.2, 3.1]) == (1, 0)
    assert dom_order([2.0, 2.0]) == (0, 1)
    assert dom_order([4.0, None, 1.0]) == (2, 0, 1)


@given(st.lists(st.one_of(st.none(), st.floats(0, 100)), min_size=1, max_size=6))
def test_dom_order_is_sorting_permutation(scores):
    eps = dom_order(scores)
    assert sorted(eps) == list(range(len(scores)))
    finite = [scores[i] for i in eps if scores[i] is not None]
    assert finite == sorted(finite)
    assert all(scores[i] is None for i in eps[len(finite):])


def test_pit_single_speaker():
    label = build_serialized_label([tx("a b")], (0,), V)
    logits = np.random.default_rng(2).standard_normal((len(label), V_OUT))
    res = pit_best_permutation(lambda lab: logits, [tx("a b")], V)
    assert list(res.all_losses) == [(0,)]
    assert res.best_loss == ce_loss(logits, label)[0]


def test_pit_finds_emitted_order():
    L1, L2 = tx("a b"), tx("c")
    target = build_serialized_label([L1, L2], (1, 0), V)
    logits = one_hot_logits(target, 5.0)
    res = pit_best_permutation(lambda lab: logits, [L1, L2], V)
    explicit = {p: ce_loss(logits, build_serialized_label([L1, L2], p, V))[0] for p in [(0, 1), (1, 0)]}
    assert res.best_permutation == (1, 0) == min(explicit, key=explicit.get)
    assert res.all_losses == explicit


def test_pit_three_speakers_and_limit():
    ts = [tx("a"), tx("b c"), tx("d")]
    rng = np.random.default_rng(3)
    n = sum(len(t) + 1 for t in ts) + 1
    res = pit_best_permutation(lambda lab: rng.standard_normal((n, V_OUT)), ts, V)
    assert len(res.all_losses) == 6
    with pytest.raises(SerializationError):
        pit_best_permutation(lambda lab: None, [tx("a")] * 5, V)


def _dom_case(seed):
    rng = np.random.default_rng(seed)
    ts = [TokenSequence(tuple(rng.integers(0, 4, size=rng.integers(1, 4))), V) for _ in range(2)]
    grid = rng.standard_normal((12, V.n_content + 1))
    n = sum(len(t) + 1 for t in ts) + 1
    table = {}

    def provider(label):
        key = label.permutation
        if key not in table:
            table[key] = rng.standard_normal((n, V_OUT))
        return table[key]
    return ts, grid, provider


def test_dom_alpha_endpoints():
    for seed in range(20):
        ts, grid, provider = _dom_case(seed)
        l0, bd = dom_loss(grid, provider, ts, 0.0, V)
        assert abs(l0 - ce_loss(provider(bd.label), bd.label)[0]) < 1e-12
        l1, bd = dom_loss(grid, provider, ts, 1.0, V)
        assert abs(l1 - min(ctc_loss(grid, t.ids).loss for t in ts)) < 1e-12


def test_dom_argmin_is_first_in_order():
    for seed in range(20):
        ts, grid, provider = _dom_case(seed)
        _, bd = dom_loss(grid, provider, ts, 0.1, V)
        assert bd.argmin == bd.order[0] == int(np.argmin(bd.scores))
        assert bd.label.permutation == bd.order


def test_dom_gradient_scaling():
    ts, grid, provider = _dom_case(0)
    _, bd = dom_loss(grid, provider, ts, 0.3, V, with_grad=True)
    ctc = ctc_loss(grid, ts[bd.argmin].ids, with_grad=True)
    assert np.allclose(bd.ctc_grad, 0.3 * ctc.grad)


def test_dom_all_infeasible():
    grid = np.zeros((1, V.n_content + 1))
    with pytest.raises(SerializationError):
        dom_loss(grid, lambda lab: None, [tx("a b"), tx("c d")], 0.1, V)


def test_dom_alpha_range():
    with pytest.raises(SerializationError):
        dom_loss(np.zeros((4, 5)), lambda lab: None, [tx("a")], 1.5, V)


def test_pit_optimality_against_enumeration():
    rng = np.random.default_rng(4)
    for _ in range(50):
        n_spk = int(rng.integers(2, 4))
        ts = [TokenSequence(tuple(rng.integers(0, 4, size=rng.integers(1, 4))), V) for _ in range(n_spk)]
        n = sum(len(t) + 1 for t in ts) + 1
        cache = {p: rng.standard_normal((n, V_OUT)) for p in itertools.permutations(range(n_spk))}
        res = pit_best_permutation(lambda lab: cache[lab.permutation], ts, V)
        brute = {p: ce_naive(cache[p], classes_of(build_serialized_label(ts, p, V))) for p in cache}
        best = min(brute, key=lambda p: (brute[p], p))
        assert res.best_permutation == best
        assert res.best_loss <= res.all_losses[tuple(range(n_spk))]
