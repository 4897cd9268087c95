import csv
import io
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowforge.errors import DomainError
from flowforge.flowgen import insertion_index_set
from flowforge.multiindex import PreMultiIndex, derive_params, enumerate_populated
from flowforge.renorm import (
    GenMultiIndex,
    SpaceTimeIndex,
    counterterms_csv,
    decoration_balance,
    enumerate_relevant,
    generalized_insertion_set,
    indices_of_size,
    iter_decorations,
    localization_order,
    taylor_localization,
)

import oracles

H = lambda *s: PreMultiIndex.from_mapping({"h": s})
X1 = SpaceTimeIndex(0, (1,))
Z1 = SpaceTimeIndex.zero(1)
P_HALF = derive_params(Fraction(1, 2))

# frozen from oracles.relevant_count (tree multisets + labelled decorations)
RELEVANT_COUNTS = {
    (Fraction(1, 2), 1): 29,
    (Fraction(3, 4), 1): 4,
    (Fraction(1), 1): 4,
    (Fraction(1, 2), 2): 33,
}


def test_spacetime_index():
    l = SpaceTimeIndex(1, (2, 0))
    assert l.size == 4
    assert (l + SpaceTimeIndex(0, (1, 1))).components() == (1, 3, 1)
    assert [x.to_list() for x in indices_of_size(2, 1)] == [[0, 2], [1, 0]]
    assert len(indices_of_size(2, 2)) == 4
    with pytest.raises(DomainError):
        SpaceTimeIndex(-1, (0,))


def test_relevant_examples():
    entries = enumerate_relevant(P_HALF)
    hh = [e for e in entries if e.a == H(1, 1) and not e.decor]
    assert len(hh) == 1
    assert hh[0].scaling == -1 and hh[0].signature.render() == "h·h′"
    one = enumerate_relevant(derive_params(1))
    hh1 = [e for e in one if e.a == H(1, 1) and not e.decor]
    assert hh1 and hh1[0].scaling == 0


@pytest.mark.parametrize("key", sorted(RELEVANT_COUNTS))
def test_relevant_counts(key):
    alpha, n = key
    assert len(enumerate_relevant(derive_params(alpha, n))) == RELEVANT_COUNTS[key]


def test_relevant_count_oracle_alpha_half():
    assert oracles.relevant_count(Fraction(1, 2), 1, 8, 6) == RELEVANT_COUNTS[(Fraction(1, 2), 1)]


def test_relevant_entry_properties():
    for alpha in (Fraction(1, 3), Fraction(1, 2), Fraction(3, 4), Fraction(1)):
        p = derive_params(alpha)
        for e in enumerate_relevant(p):
            s = {k: e.a.label_size(k) for k in "bcdefgh"}
            lsize = sum(l.size for _, _, l in e.decor)
            assert s["h"] * alpha + s["d"] + s["f"] + 2 * (s["b"] + s["c"] + s["e"]) + lsize <= 2
            assert 1 <= e.order <= p.gamma
            assert e.signature.is_local()
            assert e.ell == localization_order(e.scaling)


def test_alpha_half_shape():
    for e in enumerate_relevant(P_HALF):
        assert e.a.label_size("h") <= 4
        assert 2 * (e.a.label_size("b") + e.a.label_size("c") + e.a.label_size("e")) <= 2


def test_localization_order_examples():
    assert localization_order(Fraction(-1)) == 2
    assert localization_order(Fraction(-1, 2)) == 1
    assert localization_order(0) == 1
    with pytest.raises(DomainError):
        localization_order(-2)


def test_taylor_ell1():
    exp = taylor_localization((Z1,), 1, 1)
    assert exp.delta_part == [((Z1,), 1)]
    assert exp.remainder_part == [((X1,), 1)]


def test_taylor_ell2():
    exp = taylor_localization((Z1,), 2, 1)
    assert sorted(m for m, _ in exp.delta_part) == [(Z1,), (X1,)]
    assert all(c == 1 for _, c in exp.delta_part)
    # coefficient |m| * binom with parabolic |m| = 2
    assert sorted(exp.remainder_part) == [((SpaceTimeIndex(0, (2,)),), 2), ((SpaceTimeIndex(1, (0,)),), 2)]


def test_taylor_binomials():
    exp = taylor_localization((X1, Z1), 2, 1)
    coeffs = {m: c for m, c in exp.remainder_part}
    # shift on the decorated vertex: binom((0;2),(0;1)) = 2, times |m| = 1
    assert coeffs[(X1, Z1)] == 2
    assert coeffs[(Z1, X1)] == 1
    assert len(exp.remainder_part) == 2 and exp.delta_part == [((Z1, Z1), 1)]


@settings(max_examples=50)
@given(st.lists(st.sampled_from([Z1, X1]), min_size=1, max_size=3), st.sampled_from([1, 2]))
def test_taylor_size_bookkeeping(dec, ell):
    exp = taylor_localization(tuple(dec), ell, 1)
    base = sum(l.size for l in dec)
    for ms, _ in exp.delta_part:
        assert base + sum(m.size for m in ms) < ell
    for ms, c in exp.remainder_part:
        assert base + sum(m.size for m in ms) == ell
        assert c == sum(m.size for m in ms) * _binom(dec, ms)


def _binom(dec, ms):
    out = 1
    for l, m in zip(dec, ms):
        out *= (l + m).binom(l)
    return out


def test_csv_format():
    text = counterterms_csv(enumerate_relevant(P_HALF))
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["a_json", "l_json", "order", "scaling_num", "scaling_den", "ell", "signature"]
    assert len(rows) == 1 + 29
    assert any(r[6] == "h·h′" and r[3] == "-1" and r[5] == "2" for r in rows[1:])


def test_iter_decorations():
    decs = list(iter_decorations(H(1, 1), 1, 1))
    assert len(decs) == 3  # none, on h0, on h1
    decs2 = list(iter_decorations(H(2), 1, 2))
    # multisets over two h0 vertices of total size <= 2: 0, x, xx, t, {x,x}
    assert len(decs2) == 5


def test_generalized_insertion_plain():
    g = GenMultiIndex(H(1, 1), (), 0, 1)
    terms = generalized_insertion_set(g, P_HALF)
    assert len(terms) == 1
    t = terms[0]
    assert t.b.a == t.c.a == H(1)
    assert not t.b.decor and not t.c.decor and t.l_d.is_zero()


def test_generalized_insertion_leibniz():
    g = GenMultiIndex(H(1, 1), (), 1, 1)
    terms = generalized_insertion_set(g, P_HALF)
    assert sorted((t.b.s, t.c.s) for t in terms) == [(0, 1), (1, 0)]
    assert all(t.prefactor == 1 for t in terms)
    g2 = GenMultiIndex(H(1, 1), (), 2, 1)
    pref = {(t.b.s, t.c.s): t.prefactor for t in generalized_insertion_set(g2, P_HALF)}
    assert pref == {(0, 2): 1, (1, 1): 2, (2, 0): 1}


def test_generalized_insertion_decoration_routing():
    g = GenMultiIndex(H(1, 1), (("h", 0, X1),), 0, 1)
    terms = generalized_insertion_set(g, P_HALF)
    routes = sorted((t.b.decoration_size, t.c.decoration_size, t.l_d.size) for t in terms)
    assert routes == [(0, 0, 1), (0, 1, 0), (1, 0, 0)]
    assert all(decoration_balance(g, t) for t in terms)


def test_generalized_contract():
    with pytest.raises(DomainError):
        generalized_insertion_set(GenMultiIndex(H(1, 1), (), 0, 0), P_HALF)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_generalized_reduces_to_plain(k):
    for a in enumerate_populated(k):
        plain = insertion_index_set(a, P_HALF)
        gen = generalized_insertion_set(GenMultiIndex(a, (), 0, 1), P_HALF)
        assert [(t.b, t.c, t.d, t.multiplicity, t.prefactor, t.deriv_count) for t in plain] == [
            (t.b.a, t.c.a, t.d, t.multiplicity, t.prefactor, t.deriv_count) for t in gen
        ]


ORDER2 = [a for a in enumerate_populated(2) if a.order >= 1]


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(ORDER2), st.integers(0, 2), st.data())
def test_generalized_conservation(a, s, data):
    decs = list(iter_decorations(a, 1, 2))
    dec = data.draw(st.sampled_from(decs))
    g = GenMultiIndex(a, dec, s, 1)
    terms = generalized_insertion_set(g, P_HALF)
    for t in terms:
        assert decoration_balance(g, t)
        assert t.b.s + t.c.s == s
        assert t.b.t == t.c.t == 0
    # total sigma-weight per plain term is a! times the Leibniz sum 2^s when
    # all decoration mass stays available: the routing only redistributes it
    if not dec:
        plain = insertion_index_set(a, P_HALF)
        assert sum(t.weight for t in terms) == sum(t.prefactor * t.multiplicity for t in plain) * 2**s
