"""Joint cumulants of force coefficients: partitions, scaling, relevance.

A cumulant list is an ordered tuple of decorated multi-indices.  Its
scaling adds the entries' scalings and pays ``2 + n/r`` for every entry
beyond the first, where r is the spatial integrability index of the norm.
Relevance scans work on multisets of entries (the scaling is symmetric).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, Sequence

from .errors import DomainError, ResourceError
from .flowgen import Derivator
from .multiindex import LABEL_INDEX, ModelParams, PreMultiIndex, count_populated, iter_populated, scaling
from .renorm import GenMultiIndex, SpaceTimeIndex, generalized_insertion_set, indices_of_size, iter_decorations

PARTITION_CAP = 8
MAX_ENTRY_DECORATION = 2


# ---------------------------------------------------------------------------
# partitions


@dataclass(frozen=True)
class Partition:
    """Blocks of a finite index set, ordered by their minima."""

    blocks: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        mins = [min(b) for b in self.blocks if b]
        if len(mins) != len(self.blocks):
            raise DomainError("partition blocks must be non-empty")
        if mins != sorted(mins):
            raise DomainError("blocks must be ordered by their minima")
        flat = [x for b in self.blocks for x in b]
        if len(flat) != len(set(flat)):
            raise DomainError("partition blocks overlap")

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def ground(self) -> frozenset:
        return frozenset(x for b in self.blocks for x in b)

    def to_list(self) -> list[list[int]]:
        return [list(b) for b in self.blocks]


@dataclass(frozen=True)
class QPartition:
    """A partition rho of J together with a map pi: I -> blocks of rho.

    ``pi`` is stored as sorted pairs (i, q) with q a 0-based block index.
    """

    rho: Partition
    pi: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if any(not 0 <= q < len(self.rho) for _, q in self.pi):
            raise DomainError("pi must map into the blocks of rho")

    def pi_block(self, q: int) -> tuple[int, ...]:
        """The (possibly empty) preimage pi^{-1}(q)."""
        return tuple(i for i, qq in self.pi if qq == q)

    def to_obj(self) -> dict:
        return {"rho": self.rho.to_list(), "pi": [[i, q + 1] for i, q in self.pi]}


def _set_partitions(items: list) -> Iterator[list[list]]:
    # restricted growth strings in lexicographic order
    n = len(items)
    if n == 0:
        yield []
        return
    rgs = [0] * n

    def rec(pos: int, top: int):
        if pos == n:
            blocks: list[list] = [[] for _ in range(top + 1)]
            for x, b in zip(items, rgs):
                blocks[b].append(x)
            yield blocks
            return
        for b in range(top + 2):
            rgs[pos] = b
            yield from rec(pos + 1, max(top, b))

    rgs[0] = 0
    yield from rec(1, 0)


def partitions(J: Iterable[int], cap: int = PARTITION_CAP) -> list[Partition]:
    """All partitions of J, blocks ordered by minima, in canonical order."""
    items = sorted(set(J))
    if len(items) > cap:
        raise ResourceError(f"|J| = {len(items)} exceeds the partition cap {cap}")
    return [Partition(tuple(tuple(b) for b in blocks)) for blocks in _set_partitions(items)]


def q_partitions(I: Iterable[int], J: Iterable[int], cap: int = PARTITION_CAP) -> list[QPartition]:
    """All (pi, rho) with rho a partition of J and pi: I -> [|rho|].

    With I empty this is just the partitions of J.
    """
    I = sorted(set(I))
    if len(I) > cap:
        raise ResourceError(f"|I| = {len(I)} exceeds the partition cap {cap}")
    out = []
    for rho in partitions(J, cap):
        for image in itertools.product(range(len(rho)), repeat=len(I)):
            out.append(QPartition(rho, tuple(zip(I, image))))
    return out


# ---------------------------------------------------------------------------
# integrability index and scaling


@dataclass(frozen=True)
class IntegrabilityIndex:
    """Spatial integrability exponent r; ``value=None`` encodes r = infinity."""

    value: Fraction | None

    @property
    def infinite(self) -> bool:
        return self.value is None

    def n_over_r(self, n: int) -> Fraction:
        return Fraction(0) if self.value is None else Fraction(n) / self.value

    def __str__(self) -> str:
        return "inf" if self.value is None else f"{self.value.numerator}/{self.value.denominator}"


def integrability_index(p: ModelParams) -> IntegrabilityIndex:
    if p.n == 1 and p.alpha <= Fraction(1, 2):
        return IntegrabilityIndex(Fraction(1))
    if p.alpha == 1:
        return IntegrabilityIndex(None)
    return IntegrabilityIndex(Fraction(p.n) * (1 + p.iota) / (2 - 2 * p.alpha))


def entry_cost(p: ModelParams) -> Fraction:
    """Scaling paid for every list entry beyond the first."""
    return 2 + integrability_index(p).n_over_r(p.n)


@dataclass(frozen=True)
class CumulantList:
    entries: tuple[GenMultiIndex, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.entries:
            raise DomainError("a cumulant list needs at least one entry")
        if len({e.n for e in self.entries}) != 1:
            raise DomainError("entries live in different dimensions")

    @property
    def p(self) -> int:
        return len(self.entries)

    @property
    def order(self) -> int:
        return sum(e.a.order for e in self.entries)

    @property
    def s(self) -> int:
        return sum(e.s for e in self.entries)

    @property
    def t(self) -> int:
        return sum(e.t for e in self.entries)

    @property
    def noise_count(self) -> int:
        return sum(e.a.label_size("h") for e in self.entries)

    def __add__(self, other: "CumulantList") -> "CumulantList":
        return CumulantList(self.entries + other.entries)

    def sub(self, idx: Sequence[int]) -> tuple[GenMultiIndex, ...]:
        """Entries at the given 1-based positions."""
        return tuple(self.entries[i - 1] for i in idx)

    def to_json_obj(self) -> list:
        return [_entry_obj(e) for e in self.entries]

    def short(self) -> str:
        return "[" + ", ".join(e.short() for e in self.entries) + "]"


def _entry_obj(e: GenMultiIndex) -> dict:
    return {"a": e.a.to_json_obj(), "l": e.decor_json(), "s": e.s, "t": e.t}


def cumulant_scaling(L: CumulantList, p: ModelParams) -> Fraction:
    for e in L.entries:
        if e.n != p.n:
            raise DomainError("entry dimension differs from the model dimension")
    total = sum((scaling(e.a, p.alpha) + e.decoration_size for e in L.entries), Fraction(0))
    return total + (L.p - 1) * entry_cost(p)


def noise_covariance(n: int = 1) -> CumulantList:
    h0 = GenMultiIndex(PreMultiIndex.unit("h"), (), 0, 0, n)
    return CumulantList((h0, h0))


def vanishing_reason(L: CumulantList) -> str | None:
    """Why the joint cumulant is identically zero, if it is.

    Every noise vertex contributes one factor of the centred Gaussian noise,
    so an odd total count kills the cumulant; a noise-free entry is
    deterministic and has no joint cumulant with anything else.
    """
    if L.noise_count % 2:
        return "odd-noise-parity"
    if L.p >= 2 and any(e.a.label_size("h") == 0 for e in L.entries):
        return "deterministic-entry"
    return None


# ---------------------------------------------------------------------------
# scanning


def count_decorations(a: PreMultiIndex, n: int, budget: int) -> int:
    """Number of canonical decorations of ``a`` with size <= budget."""
    per_size = [0] + [len(indices_of_size(sz, n)) for sz in range(1, budget + 1)]
    # ways[m][w]: multisets of m nonzero indices of total size w
    kinds = [sz for sz in range(1, budget + 1) for _ in range(per_size[sz])]
    poly = [1] + [0] * budget  # over total size, aggregated across slots
    for k, i in a.support():
        mult = a.get(k, i)
        # multisets of at most `mult` elements drawn from kinds, by size
        table = [[0] * (budget + 1) for _ in range(mult + 1)]
        table[0][0] = 1
        for sz in kinds:
            for m in range(1, mult + 1):
                for w in range(sz, budget + 1):
                    table[m][w] += table[m - 1][w - sz]
        slot = [sum(table[m][w] for m in range(mult + 1)) for w in range(budget + 1)]
        poly = [sum(poly[u] * slot[w - u] for u in range(w + 1)) for w in range(budget + 1)]
    return sum(poly)


def _multisets(nitems: int, size: int) -> int:
    return math.comb(nitems + size - 1, size) if nitems else int(size == 0)


def count_lists(per_order: Sequence[int], pmax: int, order_cap: int) -> int:
    """Multisets of 1..pmax entries with total order <= order_cap.

    ``per_order[o]`` is the number of distinct entries of order o.
    """
    # dp[p][o] = multisets of size p and total order o
    dp = [[0] * (order_cap + 1) for _ in range(pmax + 1)]
    dp[0][0] = 1
    for o, cnt in enumerate(per_order):
        if cnt == 0:
            continue
        new = [[0] * (order_cap + 1) for _ in range(pmax + 1)]
        for pp in range(pmax + 1):
            for oo in range(order_cap + 1):
                if not dp[pp][oo]:
                    continue
                for m in range(0, pmax - pp + 1):
                    ot = oo + m * o
                    if ot > order_cap:
                        break
                    new[pp + m][ot] += dp[pp][oo] * _multisets(cnt, m)
        dp = new
    return sum(dp[pp][oo] for pp in range(1, pmax + 1) for oo in range(order_cap + 1))


def entry_pool(p: ModelParams, order_cap: int, max_scaling=0) -> list[tuple[Fraction, GenMultiIndex]]:
    """Entries (s = t = 0, |l| <= 2) of order <= order_cap with scaling <= max_scaling.

    Sorted by scaling.  Every entry has scaling >= -2 + alpha, so each extra
    list entry adds at least alpha + n/r > 0: entries that are too costly
    alone can never appear in a list below the same threshold.
    """
    max_scaling = Fraction(max_scaling)
    out = []
    for o in range(order_cap + 1):
        for a in iter_populated(o, p.alpha, max_scaling=max_scaling):
            sa = scaling(a, p.alpha)
            budget = min(MAX_ENTRY_DECORATION, math.floor(max_scaling - sa))
            if budget < 0:
                continue
            for decor in iter_decorations(a, p.n, budget):
                e = GenMultiIndex(a, decor, 0, 0, p.n)
                out.append((sa + e.decoration_size, e))
    out.sort(key=lambda se: (se[0], se[1].a.order, _entry_key(se[1])))
    return out


def _entry_key(e: GenMultiIndex):
    return (e.a.sort_key(), [(LABEL_INDEX[k], i, l) for k, i, l in e.decor])


def iter_cumulant_lists(p: ModelParams, pmax: int, order_cap: int, max_scaling=0,
                        cap: int = 1_000_000) -> Iterator[tuple[Fraction, CumulantList]]:
    """All entry multisets with scaling <= max_scaling (pruned depth-first)."""
    pool = entry_pool(p, order_cap, max_scaling)
    cost = entry_cost(p)
    bound = Fraction(max_scaling)
    seen = 0

    def rec(start: int, chosen: list[int], total: Fraction, order: int):
        nonlocal seen
        for j in range(start, len(pool)):
            sj, e = pool[j]
            new_total = total + sj + (cost if chosen else 0)
            if new_total > bound:
                break  # pool is sorted, later entries only cost more
            o = order + e.a.order
            if o > order_cap:
                continue
            chosen.append(j)
            seen += 1
            if seen > cap:
                raise ResourceError(f"more than {cap} cumulant lists below the threshold")
            yield new_total, CumulantList(tuple(pool[k][1] for k in chosen))
            if len(chosen) < pmax:
                yield from rec(j, chosen, new_total, o)
            chosen.pop()

    yield from rec(0, [], Fraction(0), 0)


@dataclass
class ClassifiedList:
    cumulants: CumulantList
    scaling: Fraction
    status: str  # expectation | covariance | vanishing | violation
    reason: str | None = None

    def to_json_obj(self) -> dict:
        obj = {
            "entries": self.cumulants.to_json_obj(),
            "scaling": f"{self.scaling.numerator}/{self.scaling.denominator}",
            "p": self.cumulants.p,
            "order": self.cumulants.order,
            "status": self.status,
        }
        if self.reason:
            obj["reason"] = self.reason
        return obj


@dataclass
class CumulantReport:
    params: ModelParams
    pmax: int
    order_cap: int
    scanned_count: int
    relevant: list[ClassifiedList] = field(default_factory=list)

    @property
    def violations(self) -> list[ClassifiedList]:
        return [c for c in self.relevant if c.status == "violation"]

    @property
    def vanishing(self) -> list[ClassifiedList]:
        return [c for c in self.relevant if c.status == "vanishing"]

    @property
    def paper_consistent(self) -> bool:
        return not self.violations

    def to_json_obj(self) -> dict:
        params = self.params.as_dict()
        params["r"] = str(integrability_index(self.params))
        return {
            "params": params,
            "pmax": self.pmax,
            "order_cap": self.order_cap,
            "scanned_count": self.scanned_count,
            "relevant_lists": [c.to_json_obj() for c in self.relevant],
            "paper_consistent": self.paper_consistent,
            "violations": [c.to_json_obj() for c in self.violations],
            "vanishing_lists": [c.to_json_obj() for c in self.vanishing],
        }


def scanned_count(p: ModelParams, pmax: int, order_cap: int, cap: int = 2_000_000) -> int:
    """Size of the scanned space of entry multisets, counted without listing."""
    if count_populated(order_cap) > cap:
        raise ResourceError(f"order cap {order_cap} exceeds the scan cap")
    per_order = []
    for o in range(order_cap + 1):
        per_order.append(sum(count_decorations(a, p.n, MAX_ENTRY_DECORATION) for a in iter_populated(o)))
    return count_lists(per_order, pmax, order_cap)


def classify_cumulants(p: ModelParams, pmax: int = 4, order_cap: int = 3, cap: int = 1_000_000) -> CumulantReport:
    """Every list with s = t = 0, p <= pmax, o <= order_cap and scaling <= 0.

    Expectations (p = 1) and the noise covariance are expected to be the
    only relevant cumulants; identically vanishing lists are set aside and
    anything else is a violation.
    """
    if pmax < 2 or order_cap < 1:
        raise DomainError("classify_cumulants needs pmax >= 2 and order_cap >= 1")
    cov = noise_covariance(p.n)
    report = CumulantReport(p, pmax, order_cap, scanned_count(p, pmax, order_cap))
    for sc, L in iter_cumulant_lists(p, pmax, order_cap, 0, cap):
        why = vanishing_reason(L)
        if L.p == 1:
            status = "expectation"
        elif L == cov:
            status = "covariance"
        elif why:
            status = "vanishing"
        else:
            status = "violation"
        report.relevant.append(ClassifiedList(L, sc, status, why if status == "vanishing" else None))
    report.relevant.sort(key=lambda c: (c.cumulants.p, c.scaling, c.cumulants.order,
                                        [_entry_key(e) for e in c.cumulants.entries]))
    return report


# ---------------------------------------------------------------------------
# flow index sets


@dataclass(frozen=True)
class CumulantFlowTerm:
    i: int  # 1-based position of the differentiated entry
    multiplicity: int
    prefactor: Fraction
    b: tuple[GenMultiIndex, GenMultiIndex]
    d: Derivator
    l_d: SpaceTimeIndex
    q: QPartition
    c: tuple[CumulantList, ...]

    def to_json_obj(self) -> dict:
        return {
            "i": self.i,
            "mult": self.multiplicity,
            "prefactor": f"{self.prefactor.numerator}/{self.prefactor.denominator}",
            "b": [_entry_obj(x) for x in self.b],
            "d": self.d.as_list(),
            "l_d": self.l_d.to_list(),
            "partition": self.q.to_obj(),
            "c": [x.to_json_obj() for x in self.c],
        }


@dataclass
class CumulantFlowIndexSet:
    cumulants: CumulantList
    case: str  # differentiated | irrelevant | relevant | constant | vanishing
    boundary: str | None
    terms: list[CumulantFlowTerm]

    def to_json_obj(self) -> dict:
        return {
            "cumulants": self.cumulants.to_json_obj(),
            "case": self.case,
            "boundary": self.boundary,
            "terms": [t.to_json_obj() for t in self.terms],
        }


def _terms_for_entry(L: CumulantList, i: int, p: ModelParams) -> list[CumulantFlowTerm]:
    ai = L.entries[i - 1]
    hat = GenMultiIndex(ai.a, ai.decor, ai.s, 1, ai.n)
    others = [j for j in range(1, L.p + 1) if j != i]
    qs = q_partitions(others, [1, 2])
    out = []
    for term in generalized_insertion_set(hat, p):
        b = (term.b, term.c)
        for q in qs:
            cs = []
            for k, block in enumerate(q.rho.blocks):
                cs.append(CumulantList(L.sub(q.pi_block(k)) + tuple(b[j - 1] for j in block)))
            out.append(CumulantFlowTerm(i, term.multiplicity, term.prefactor, b, term.d, term.l_d, q, tuple(cs)))
    return out


def cumulant_flow_index_set(L: CumulantList, p: ModelParams) -> CumulantFlowIndexSet:
    """Index set of the flow equation of the joint cumulant of ``L``.

    With a mu-derivative present the first differentiated entry is expanded;
    an undifferentiated irrelevant cumulant is integrated from mu = 0 and
    expands every entry in turn; a relevant expectation is integrated down
    from mu = 1, where the counterterm fixes its value.
    """
    sc = cumulant_scaling(L, p)
    if L.t == 0 and sc <= 0 and L.p > 1:
        if L == noise_covariance(p.n):
            return CumulantFlowIndexSet(L, "constant", None, [])
        if vanishing_reason(L):
            return CumulantFlowIndexSet(L, "vanishing", None, [])
        raise DomainError("relevant cumulant of length > 1 outside the covariance whitelist")
    if L.order < 1:
        raise DomainError("flow index sets need order >= 1")
    if L.t >= 1:
        i = next(j for j, e in enumerate(L.entries, 1) if e.t == 1)
        return CumulantFlowIndexSet(L, "differentiated", None, _terms_for_entry(L, i, p))
    terms = [t for i in range(1, L.p + 1) for t in _terms_for_entry(L, i, p)]
    if sc > 0:
        return CumulantFlowIndexSet(L, "irrelevant", "mu=0", terms)
    return CumulantFlowIndexSet(L, "relevant", "mu=1", terms)
