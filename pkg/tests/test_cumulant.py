import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowforge.errors import DomainError, ResourceError
from flowforge.multiindex import PreMultiIndex, derive_params, enumerate_populated
from flowforge.cumulant import (
    CumulantList,
    Partition,
    classify_cumulants,
    count_decorations,
    cumulant_flow_index_set,
    cumulant_scaling,
    entry_cost,
    integrability_index,
    iter_cumulant_lists,
    noise_covariance,
    partitions,
    q_partitions,
    scanned_count,
    vanishing_reason,
)
from flowforge.renorm import GenMultiIndex, SpaceTimeIndex, iter_decorations

import oracles

H = lambda *s: PreMultiIndex.from_mapping({"h": s})
E = lambda a, t=0, n=1: GenMultiIndex(a, (), 0, t, n)
HALF = derive_params(Fraction(1, 2))

# frozen from oracles.brute_relevant_lists (labelled tree vertices, direct scaling):
# alpha = 1/5, p <= 3, order <= 1 -> 12 relevant lists out of 30344
SCAN_FIFTH = (12, 30344)


def test_partition_counts():
    assert len(partitions([1, 2])) == 2
    assert len(partitions([1, 2, 3])) == 5
    assert [len(partitions(range(k))) for k in range(7)] == [oracles.bell(k) for k in range(7)]
    assert len(q_partitions([1], [1, 2])) == 3
    assert q_partitions([], [1, 2]) == [type(q)(q.rho) for q in q_partitions([], [1, 2])]
    assert [q.rho for q in q_partitions([], [1, 2])] == partitions([1, 2])


def test_partition_conventions():
    for rho in partitions(range(1, 6)):
        mins = [min(b) for b in rho.blocks]
        assert mins == sorted(mins)
        assert rho.ground == frozenset(range(1, 6))
    with pytest.raises(DomainError):
        Partition(((2,), (1,)))
    with pytest.raises(ResourceError):
        partitions(range(9))


def test_partitions_match_oracle():
    mine = {tuple(tuple(b) for b in p.blocks) for p in partitions([1, 2, 3, 4])}
    ref = {tuple(sorted(tuple(sorted(b)) for b in part)) for part in oracles.set_partitions([1, 2, 3, 4])}
    assert mine == ref


def _cumulant_identity(nI, nJ, seed):
    rng = np.random.default_rng(seed)
    outcomes = 6
    cols = rng.normal(size=(outcomes, nI + nJ))
    probs = rng.random(outcomes)
    probs /= probs.sum()
    X = list(range(nI))
    Y = list(range(nI, nI + nJ))
    prod = np.prod(cols[:, Y], axis=1)
    vals = np.column_stack([cols, prod])
    lhs = oracles.joint_cumulant(vals, probs, X + [nI + nJ])
    rhs = 0.0
    for q in q_partitions(range(1, nI + 1), range(1, nJ + 1)):
        term = 1.0
        for k, block in enumerate(q.rho.blocks):
            idx = [X[i - 1] for i in q.pi_block(k)] + [Y[j - 1] for j in block]
            term *= oracles.joint_cumulant(vals, probs, idx)
        rhs += term
    return lhs, rhs


@pytest.mark.parametrize("nI,nJ", [(0, 2), (1, 2), (2, 2), (1, 3), (2, 3), (0, 4)])
def test_cumulant_identity(nI, nJ):
    lhs, rhs = _cumulant_identity(nI, nJ, 7 * nI + nJ)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_integrability_index():
    assert integrability_index(HALF).value == 1
    assert integrability_index(derive_params(1, 2)).infinite
    p = derive_params(Fraction(3, 4), 1, iota=Fraction(1, 10))
    assert integrability_index(p).value == Fraction(11, 5)
    assert p.r == integrability_index(p)


def test_scaling_examples():
    assert cumulant_scaling(noise_covariance(), HALF) == 0
    hh = CumulantList((E(H(1, 1)), E(H(1, 1))))
    for alpha in (Fraction(1, 5), Fraction(1, 3), Fraction(1, 2)):
        assert cumulant_scaling(hh, derive_params(alpha)) == -1 + 4 * alpha
    single = CumulantList((GenMultiIndex(H(1, 1), (("h", 0, SpaceTimeIndex(0, (1,))),), 0, 0, 1),))
    assert cumulant_scaling(single, HALF) == 0
    assert cumulant_scaling(noise_covariance(2), derive_params(1, 2)) == 0
    # iota enters exactly: covariance slightly relevant for alpha > 1/2
    p = derive_params(Fraction(3, 4), 1, iota=Fraction(1, 10))
    assert cumulant_scaling(noise_covariance(), p) == Fraction(-5, 2) + 2 + Fraction(5, 11)


ENTRIES = [E(a) for a in enumerate_populated(2)]


@settings(max_examples=80)
@given(st.lists(st.sampled_from(ENTRIES), min_size=1, max_size=3),
       st.lists(st.sampled_from(ENTRIES), min_size=1, max_size=3),
       st.sampled_from([Fraction(1, 3), Fraction(1, 2), Fraction(3, 4), Fraction(1)]))
def test_scaling_additivity(xs, ys, alpha):
    p = derive_params(alpha)
    A, B = CumulantList(tuple(xs)), CumulantList(tuple(ys))
    assert cumulant_scaling(A + B, p) == cumulant_scaling(A, p) + cumulant_scaling(B, p) + entry_cost(p)


def test_vanishing_reasons():
    assert vanishing_reason(CumulantList((E(H(1)), E(H(1, 1))))) == "odd-noise-parity"
    b0 = E(PreMultiIndex.unit("b"))
    assert vanishing_reason(CumulantList((b0, E(H(1))))) == "odd-noise-parity"
    assert vanishing_reason(CumulantList((b0, E(H(1, 1))))) == "deterministic-entry"
    assert vanishing_reason(noise_covariance()) is None


@pytest.mark.parametrize("alpha", ["3/10", "1/3", "2/5", "1/2", "3/4", "1"])
def test_classify_consistent(alpha):
    rep = classify_cumulants(derive_params(Fraction(alpha)), 4, 3)
    assert rep.paper_consistent
    assert any(c.status == "covariance" for c in rep.relevant)
    assert all(c.cumulants.p == 1 or c.status in ("covariance", "vanishing") for c in rep.relevant)


def test_classify_alpha_fifth():
    rep = classify_cumulants(derive_params(Fraction(1, 5)), 4, 3)
    assert not rep.paper_consistent
    hh = CumulantList((E(H(1, 1)), E(H(1, 1))))
    bad = {c.cumulants: c.scaling for c in rep.violations}
    assert bad[hh] == Fraction(-1, 5)
    doc = json.loads(json.dumps(rep.to_json_obj()))
    assert set(doc) >= {"params", "scanned_count", "relevant_lists", "paper_consistent", "violations"}
    assert doc["paper_consistent"] is False and doc["violations"]


def test_classify_contract():
    with pytest.raises(DomainError):
        classify_cumulants(HALF, 1, 3)
    with pytest.raises(DomainError):
        classify_cumulants(HALF, 2, 0)


def _key(L):
    out = []
    for e in L.entries:
        verts = []
        for k, i in e.a.support():
            for l in e.slot_decorations(k, i):
                verts.append(((k, i), l.components()))
        out.append((e.a.seqs, tuple(sorted(verts))))
    return tuple(sorted(out))


@pytest.mark.parametrize("alpha,pmax,cap", [(Fraction(1, 5), 3, 1), (Fraction(1, 2), 2, 2)])
def test_scan_against_brute_force(alpha, pmax, cap):
    p = derive_params(alpha)
    ref, total = oracles.brute_relevant_lists(alpha, 1, p.iota, pmax, cap)
    mine = {_key(L): s for s, L in iter_cumulant_lists(p, pmax, cap)}
    assert mine == dict(ref)
    assert scanned_count(p, pmax, cap) == total
    if (alpha, pmax, cap) == (Fraction(1, 5), 3, 1):
        assert (len(mine), total) == SCAN_FIFTH


def test_count_decorations_matches_listing():
    for a in enumerate_populated(2):
        for n in (1, 2):
            assert count_decorations(a, n, 2) == sum(1 for _ in iter_decorations(a, n, 2))


@pytest.mark.parametrize("alpha", [Fraction(1, 5), Fraction(3, 10), Fraction(1, 3), Fraction(1, 2)])
def test_threshold_min_scaling(alpha):
    # p = 2 lists of order <= 2 that neither vanish nor are the covariance
    p = derive_params(alpha)
    cov = noise_covariance()
    vals = [s for s, L in iter_cumulant_lists(p, 2, 2, max_scaling=1)
            if L.p == 2 and L != cov and vanishing_reason(L) is None]
    assert min(vals) == -1 + 4 * alpha
    assert (min(vals) > 0) == (alpha > Fraction(1, 4))


def test_flow_index_example():
    L = CumulantList((E(H(1, 1), t=1),))
    fis = cumulant_flow_index_set(L, HALF)
    assert fis.case == "differentiated"
    assert len(fis.terms) == 2
    coarse, fine = fis.terms
    h0 = E(PreMultiIndex.unit("h"))
    assert coarse.b == (h0, h0)
    assert [c.entries for c in coarse.c] == [(h0, h0)]
    assert [c.entries for c in fine.c] == [(h0,), (h0,)]


def test_flow_index_cases():
    rel = cumulant_flow_index_set(CumulantList((E(H(1, 1)),)), HALF)
    assert rel.case == "relevant" and rel.boundary == "mu=1" and len(rel.terms) == 2
    irr = CumulantList((E(H(1, 1)), E(H(1, 1))))
    fis = cumulant_flow_index_set(irr, HALF)
    assert fis.case == "irrelevant" and {t.i for t in fis.terms} == {1, 2}
    # one entry differentiated, the other spread over the two blocks or glued to one
    assert len(fis.terms) == 2 * (1 + 2)
    assert cumulant_flow_index_set(noise_covariance(), HALF).case == "constant"
    with pytest.raises(DomainError):
        cumulant_flow_index_set(irr, derive_params(Fraction(1, 5)))


@pytest.mark.parametrize("alpha", [Fraction(1, 2), Fraction(1)])
def test_flow_hierarchy_graded(alpha):
    p = derive_params(alpha)
    lists = [CumulantList((E(a, t=1),)) for a in enumerate_populated(3) if a.order >= 1]
    lists += [CumulantList((E(a, t=1), E(b))) for a in enumerate_populated(2)[:40] if a.order >= 1
              for b in enumerate_populated(1)[:6]]
    for L in lists:
        for t in cumulant_flow_index_set(L, p).terms:
            assert sum(c.order for c in t.c) == L.order - 1
            assert all(c.order <= L.order - 1 for c in t.c)
            assert sum(c.p for c in t.c) == L.p + 1
