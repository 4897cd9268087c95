"""Decorated multi-indices, relevance, Taylor localization and counterterms.

A decorated (generalized) multi-index carries, on top of ``a``, a
space-time polynomial index on each vertex (the power of ``x - y`` attached
to that vertex's argument) plus counts ``s`` of epsilon- and ``t`` of
mu-derivatives.  Vertices of the same type are interchangeable, so the
decorations of a vertex type are stored as a sorted multiset with the zero
decorations left implicit.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator

from .errors import DomainError
from .flowgen import Derivator, insertion_index_set
from .multiindex import (
    BASE_FUNCTION,
    LABEL_INDEX,
    ModelParams,
    PreMultiIndex,
    Signature,
    _GRADIENTS,
    functional_signature,
    iter_populated,
    multifactorial,
    scaling,
)

MAX_DECORATION = 2


# ---------------------------------------------------------------------------
# space-time indices


@dataclass(frozen=True, order=True)
class SpaceTimeIndex:
    l0: int
    spatial: tuple[int, ...]

    def __post_init__(self):
        if self.l0 < 0 or any(x < 0 for x in self.spatial):
            raise DomainError("space-time index entries must be non-negative")

    @classmethod
    def zero(cls, n: int) -> "SpaceTimeIndex":
        return cls(0, (0,) * n)

    @property
    def n(self) -> int:
        return len(self.spatial)

    @property
    def size(self) -> int:
        """Parabolic size: time counts twice."""
        return 2 * self.l0 + sum(self.spatial)

    def is_zero(self) -> bool:
        return self.l0 == 0 and not any(self.spatial)

    def __add__(self, other: "SpaceTimeIndex") -> "SpaceTimeIndex":
        return SpaceTimeIndex(self.l0 + other.l0, tuple(x + y for x, y in zip(self.spatial, other.spatial)))

    def components(self) -> tuple[int, ...]:
        return (self.l0,) + self.spatial

    def factorial(self) -> int:
        return math.prod(math.factorial(x) for x in self.components())

    def binom(self, lower: "SpaceTimeIndex") -> int:
        return math.prod(math.comb(x, y) for x, y in zip(self.components(), lower.components()))

    def to_list(self) -> list[int]:
        return list(self.components())

    @classmethod
    def from_list(cls, xs) -> "SpaceTimeIndex":
        return cls(int(xs[0]), tuple(int(x) for x in xs[1:]))


def indices_of_size(size: int, n: int) -> list[SpaceTimeIndex]:
    """All space-time indices of exactly the given parabolic size."""
    out = []
    for l0 in range(size // 2 + 1):
        rest = size - 2 * l0
        for sp in _weak_compositions(rest, n):
            out.append(SpaceTimeIndex(l0, sp))
    return sorted(out)


def _weak_compositions(total: int, parts: int) -> Iterator[tuple[int, ...]]:
    if parts == 0:
        if total == 0:
            yield ()
        return
    if parts == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for tail in _weak_compositions(total - head, parts - 1):
            yield (head,) + tail


def _splits3(l: SpaceTimeIndex) -> Iterator[tuple[SpaceTimeIndex, SpaceTimeIndex, SpaceTimeIndex]]:
    """All (m1, m2, m3) with m1 + m2 + m3 = l componentwise."""
    per = [[(x, y, c - x - y) for x in range(c + 1) for y in range(c - x + 1)] for c in l.components()]
    for combo in itertools.product(*per):
        parts = list(zip(*combo))
        yield tuple(SpaceTimeIndex(p[0], tuple(p[1:])) for p in parts)


# ---------------------------------------------------------------------------
# decorated multi-indices

Decoration = tuple[tuple[str, int, SpaceTimeIndex], ...]


def canonical_decoration(items: Iterable[tuple[str, int, SpaceTimeIndex]]) -> Decoration:
    items = [(k, i, l) for k, i, l in items if not l.is_zero()]
    return tuple(sorted(items, key=lambda t: (LABEL_INDEX[t[0]], t[1], t[2])))


@dataclass(frozen=True)
class GenMultiIndex:
    a: PreMultiIndex
    decor: Decoration = ()
    s: int = 0
    t: int = 0
    n: int = 1

    def __post_init__(self):
        if not (0 <= self.s <= 2 and 0 <= self.t <= 1):
            raise DomainError("s must lie in {0,1,2} and t in {0,1}")
        object.__setattr__(self, "decor", canonical_decoration(self.decor))
        used: dict[tuple[str, int], int] = defaultdict(int)
        for k, i, l in self.decor:
            if l.n != self.n:
                raise DomainError("decoration dimension mismatch")
            used[(k, i)] += 1
        for (k, i), m in used.items():
            if m > self.a.get(k, i):
                raise DomainError(f"more decorations than vertices of type {k}{i}")

    @property
    def decoration_size(self) -> int:
        return sum(l.size for _, _, l in self.decor)

    def slot_decorations(self, k: str, i: int) -> list[SpaceTimeIndex]:
        """Full decoration multiset of a vertex type, zeros included."""
        nz = [l for kk, ii, l in self.decor if (kk, ii) == (k, i)]
        return nz + [SpaceTimeIndex.zero(self.n)] * (self.a.get(k, i) - len(nz))

    def decor_json(self) -> list:
        return [[k, i, l.to_list()] for k, i, l in self.decor]

    def short(self) -> str:
        extra = " ".join(f"{k}{i}:{l.to_list()}" for k, i, l in self.decor)
        return f"({self.a.short()}{' | ' + extra if extra else ''}; s={self.s}, t={self.t})"


# ---------------------------------------------------------------------------
# relevance


@dataclass(frozen=True)
class CountertermEntry:
    a: PreMultiIndex
    decor: Decoration
    scaling: Fraction
    ell: int
    signature: "LocalSignature"

    @property
    def order(self) -> int:
        return self.a.order

    def csv_row(self) -> list:
        return [
            self.a.to_json(),
            json.dumps([[k, i, l.to_list()] for k, i, l in self.decor], separators=(",", ":")),
            self.a.order,
            self.scaling.numerator,
            self.scaling.denominator,
            self.ell,
            self.signature.render(),
        ]


@dataclass(frozen=True)
class LocalSignature:
    """Elementary differential with decorations turned into derivatives.

    ``base`` holds the derivative orders after decorations have been
    consumed.  A spatial decoration on a vertex
    without gradient factors raises that vertex's function derivative by one
    and adds a factor of the gradient; anything else (time derivatives, or a
    derivative hitting a gradient factor) is counted in ``nonlocal_hits``.
    """

    base: Signature
    gradients: int
    nonlocal_hits: int = 0

    @property
    def derivatives(self):
        return self.base.derivatives

    def render(self) -> str:
        text = Signature(self.base.derivatives, self.gradients).render()
        if self.nonlocal_hits:
            text += f" [+{self.nonlocal_hits} higher-derivative factor(s)]"
        return text

    def is_local(self) -> bool:
        return self.nonlocal_hits == 0


def local_signature(a: PreMultiIndex, decor: Decoration) -> LocalSignature:
    per_fn: dict[str, list[int]] = {fn: list(orders) for fn, orders in functional_signature(a).derivatives}
    grads = functional_signature(a).gradients
    bad = 0
    for k, i, l in decor:
        j = LABEL_INDEX[k]
        fn = BASE_FUNCTION[j]
        if l.l0 or _GRADIENTS[j] or sum(l.spatial) > 1:
            bad += 1
            continue
        # d/dx f^{(i)}(psi) = f^{(i+1)}(psi) * d psi
        per_fn[fn].remove(i)
        per_fn[fn].append(i + 1)
        grads += 1
    derivs = tuple((fn, tuple(sorted(per_fn[fn]))) for fn in ("b", "d", "g", "h") if fn in per_fn)
    return LocalSignature(Signature(derivs, grads), grads, bad)


def iter_decorations(a: PreMultiIndex, n: int, budget: int) -> Iterator[Decoration]:
    """Canonical decorations of ``a`` with total parabolic size <= budget."""
    slots = a.support()
    nonzero = [l for sz in range(1, budget + 1) for l in indices_of_size(sz, n)]

    def rec(idx: int, left: int) -> Iterator[list]:
        if idx == len(slots):
            yield []
            return
        k, i = slots[idx]
        cap = a.get(k, i)
        for m in range(0, cap + 1):
            for combo in itertools.combinations_with_replacement(nonzero, m):
                used = sum(l.size for l in combo)
                if used > left:
                    continue
                for tail in rec(idx + 1, left - used):
                    yield [(k, i, l) for l in combo] + tail

    for items in rec(0, budget):
        yield canonical_decoration(items)


def relevant_order_bound(alpha) -> int:
    """Largest order compatible with |a| <= 0 via the lower scaling bound."""
    alpha = Fraction(alpha)
    # -2 + alpha + (alpha/2) o <= 0
    return math.floor((2 - alpha) * 2 / alpha)


def enumerate_relevant(p: ModelParams, max_order: int | None = None) -> list[CountertermEntry]:
    """All (a, decoration) with 1 <= o(a) <= Gamma and |a| + |l| <= 0."""
    top = p.gamma if max_order is None else min(max_order, p.gamma)
    top = min(top, relevant_order_bound(p.alpha))
    out = []
    for o in range(1, top + 1):
        for a in iter_populated(o, p.alpha, max_scaling=0):
            sa = scaling(a, p.alpha)
            if sa > 0:
                continue
            budget = min(MAX_DECORATION, math.floor(-sa))
            for decor in iter_decorations(a, p.n, budget):
                size = sum(l.size for _, _, l in decor)
                tot = sa + size
                if tot > 0:
                    continue
                out.append(CountertermEntry(a, decor, tot, localization_order(tot), local_signature(a, decor)))
    out.sort(key=lambda e: (e.a.sort_key(), [(LABEL_INDEX[k], i, l) for k, i, l in e.decor]))
    return out


def localization_order(combined) -> int:
    """Smallest ell in {1, 2} making the combined scaling strictly positive."""
    combined = Fraction(combined)
    if combined <= -2:
        raise DomainError(f"combined scaling {combined} <= -2 lies outside the localization window")
    return 1 if combined + 1 > 0 else 2


def counterterms_csv(entries: list[CountertermEntry]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["a_json", "l_json", "order", "scaling_num", "scaling_den", "ell", "signature"])
    for e in entries:
        w.writerow(e.csv_row())
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Taylor localization


@dataclass
class LocalizationExpansion:
    ell: int
    delta_part: list[tuple[tuple[SpaceTimeIndex, ...], int]] = field(default_factory=list)
    remainder_part: list[tuple[tuple[SpaceTimeIndex, ...], int]] = field(default_factory=list)


def taylor_localization(decoration: tuple[SpaceTimeIndex, ...], ell: int, n: int) -> LocalizationExpansion:
    """Enumerate the shifts m of a labelled decoration l (one index per vertex).

    Delta part: |l + m| < ell with coefficient binom(l + m, l).  Remainder:
    |l + m| = ell with coefficient |m| binom(l + m, l).
    """
    if ell not in (1, 2):
        raise DomainError("ell must be 1 or 2")
    base = sum(l.size for l in decoration)
    out = LocalizationExpansion(ell)
    if base > ell:
        return out
    pool = [l for sz in range(0, ell - base + 1) for l in indices_of_size(sz, n)]
    for ms in itertools.product(pool, repeat=len(decoration)):
        tot = base + sum(m.size for m in ms)
        if tot > ell:
            continue
        coeff = math.prod((l + m).binom(l) for l, m in zip(decoration, ms))
        if tot < ell:
            out.delta_part.append((ms, coeff))
        else:
            out.remainder_part.append((ms, sum(m.size for m in ms) * coeff))
    return out


# ---------------------------------------------------------------------------
# generalized insertion


@dataclass(frozen=True)
class GenInsertionTerm:
    b: GenMultiIndex
    c: GenMultiIndex
    d: Derivator
    l_d: SpaceTimeIndex
    multiplicity: int
    prefactor: Fraction
    deriv_count: int

    @property
    def weight(self) -> Fraction:
        """Net coefficient after dividing the sigma count by a!."""
        return self.prefactor * self.multiplicity


def _split_slot(dec: list[SpaceTimeIndex], nb: int, nconv: int):
    """Split a slot's decoration multiset into (b-part, converted, c-part).

    Yields (Db, Dconv, Dc, sigma_count) where sigma_count is the number of
    permutations of the slot's vertices realising that split.
    """
    total = len(dec)
    cnt = defaultdict(int)
    for l in dec:
        cnt[l] += 1
    keys = sorted(cnt)
    nc = total - nb - nconv

    def choose(ks, need, avail):
        if not ks:
            if need == 0:
                yield {}
            return
        k, rest = ks[0], ks[1:]
        for x in range(min(need, avail[k]) + 1):
            for tail in choose(rest, need - x, avail):
                yield {k: x, **tail}

    for pb in choose(keys, nb, cnt):
        left = {k: cnt[k] - pb.get(k, 0) for k in keys}
        for pv in choose(keys, nconv, left):
            pc = {k: left[k] - pv.get(k, 0) for k in keys}
            ways = math.factorial(nb) * math.factorial(nconv) * math.factorial(nc)
            for k in keys:
                ways *= math.factorial(cnt[k])
                ways //= math.factorial(pb.get(k, 0)) * math.factorial(pv.get(k, 0)) * math.factorial(pc[k])
            expand = lambda part: [k for k in keys for _ in range(part.get(k, 0))]
            yield expand(pb), expand(pv), expand(pc), ways


def _multinomial(parts: list[SpaceTimeIndex], total: SpaceTimeIndex) -> int:
    return total.factorial() // math.prod(m.factorial() for m in parts)


def generalized_insertion_set(at: GenMultiIndex, p: ModelParams) -> list[GenInsertionTerm]:
    """Terms of the flow of a decorated coefficient carrying one mu-derivative.

    For each plain insertion (b, c, d) the decorations of a are routed:
    vertices staying in b keep theirs, the converted vertex passes its
    decoration to b's differentiated vertex, and each vertex moved into c
    splits l = m_b + m_d + m_c, the m_b parts collecting on b's
    differentiated vertex, the m_d parts on the kernel polynomial and m_c
    staying with the vertex.
    """
    if at.t != 1:
        raise DomainError("generalized insertion applies to t = 1 only")
    n = at.n
    zero = SpaceTimeIndex.zero(n)
    acc: dict[tuple, list] = {}
    for term in insertion_index_set(at.a, p):
        b, c, d = term.b, term.c, term.d
        conv_slot = (d.k1_label, d.k1)
        slots = at.a.support()
        per_slot = []
        for k, i in slots:
            nconv = 1 if (k, i) == conv_slot else 0
            nb = b.get(k, i) - (1 if (k, i) == (d.k0_label, d.k0) else 0)
            per_slot.append(list(_split_slot(at.slot_decorations(k, i), nb, nconv)))
        for choice in itertools.product(*per_slot):
            ways = 1
            b_dec, c_items, conv_dec = [], [], zero
            for (k, i), (db, dv, dc, w) in zip(slots, choice):
                ways *= w
                b_dec += [(k, i, l) for l in db]
                if dv:
                    conv_dec = dv[0]
                c_items += [(k, i, l) for l in dc]
            # each c-vertex decoration splits three ways
            for splits in itertools.product(*[list(_splits3(l)) for _, _, l in c_items]):
                mb = [s[0] for s in splits]
                md = [s[1] for s in splits]
                conv_total = conv_dec
                for m in mb:
                    conv_total = conv_total + m
                l_d = zero
                for m in md:
                    l_d = l_d + m
                coeff = _multinomial([conv_dec] + mb, conv_total) * _multinomial(md, l_d)
                bdec = b_dec + [(d.k0_label, d.k0, conv_total)]
                cdec = [(k, i, s[2]) for (k, i, _), s in zip(c_items, splits)]
                for s1 in range(at.s + 1):
                    s2 = at.s - s1
                    lb = math.comb(at.s, s1)
                    bt = GenMultiIndex(b, tuple(bdec), s1, 0, n)
                    ct = GenMultiIndex(c, tuple(cdec), s2, 0, n)
                    key = (bt, ct, d, l_d)
                    weight = Fraction(term.prefactor * lb * coeff * ways, multifactorial(at.a))
                    slot = acc.setdefault(key, [0, Fraction(0)])
                    slot[0] += ways
                    slot[1] += weight
    out = []
    a_fact = multifactorial(at.a)
    for (bt, ct, d, l_d), (ways, weight) in acc.items():
        # weight = prefactor * ways / a!  ->  prefactor = weight * a! / ways
        out.append(GenInsertionTerm(bt, ct, d, l_d, ways, weight * a_fact / ways, d.deriv_count))
    out.sort(key=lambda t: (t.b.a.to_json(), t.c.a.to_json(), t.d.sort_key(), t.b.decor_json().__repr__(),
                            t.c.decor_json().__repr__(), t.l_d, t.b.s))
    return out


def decoration_balance(at: GenMultiIndex, term: GenInsertionTerm) -> bool:
    return at.decoration_size == term.b.decoration_size + term.c.decoration_size + term.l_d.size
