"""Derivators, insertion arithmetic and the hierarchy of flow equations.

The flow of a coefficient ``xi^a`` is driven by bilinear terms
``B(xi^b, xi^c)``: a vertex of ``b`` is differentiated (its type moves from
``(k0, i0)`` to ``(k1, i1)``) and ``c`` is hung below it.  At the level of
multi-indices this is ``a = b + c + d(dv)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

from .errors import DomainError, ResourceError
from .multiindex import (
    LABEL_INDEX,
    LABELS,
    ModelParams,
    PreMultiIndex,
    _submultisets,
    arity,
    count_populated,
    enumerate_populated,
    is_populated,
    multifactorial,
    scaling,
)

# cross-label moves allowed on top of the same-label index raise
_CROSS = (("c", "d"), ("e", "f"), ("f", "g"))


@dataclass(frozen=True, order=True)
class Derivator:
    k0_label: str
    k1_label: str
    k0: int
    k1: int

    def __post_init__(self):
        if self.k0_label not in LABEL_INDEX or self.k1_label not in LABEL_INDEX:
            raise DomainError(f"unknown label in derivator {self}")
        same = self.k0_label == self.k1_label and self.k1 == self.k0 + 1
        cross = (self.k0_label, self.k1_label) in _CROSS and self.k1 == self.k0
        if self.k0 < 0 or not (same or cross):
            raise DomainError(f"{self.as_list()} is not a derivator")

    @property
    def deriv_count(self) -> int:
        """Power of the spatial derivative falling on the kernel."""
        return self.k0 + 1 - self.k1

    def shift(self) -> dict[tuple[str, int], int]:
        out = {(self.k1_label, self.k1): 1}
        key = (self.k0_label, self.k0)
        out[key] = out.get(key, 0) - 1
        return out

    def sort_key(self):
        return (self.k0, LABEL_INDEX[self.k0_label], LABEL_INDEX[self.k1_label], self.k1)

    def as_list(self) -> list:
        return [self.k0_label, self.k1_label, self.k0, self.k1]


def derivator_slice(kmax: int) -> list[Derivator]:
    """All derivators with ``k0 <= kmax``."""
    if kmax < 0:
        raise DomainError("kmax must be >= 0")
    out = []
    for k in range(kmax + 1):
        for lab in LABELS:
            out.append(Derivator(lab, lab, k, k + 1))
        for l0, l1 in _CROSS:
            out.append(Derivator(l0, l1, k, k))
    out.sort(key=Derivator.sort_key)
    return out


def apply_derivator(b: PreMultiIndex, d: Derivator) -> PreMultiIndex | None:
    """``b + d(dv)``, or None when an entry would go negative."""
    return b.add_signed(d.shift())


@dataclass(frozen=True)
class InsertionTerm:
    b: PreMultiIndex
    c: PreMultiIndex
    d: Derivator
    multiplicity: int
    prefactor: Fraction
    deriv_count: int

    def sort_key(self):
        return (self.b.to_json(), self.c.to_json(), self.d.sort_key())

    def to_json_obj(self) -> dict:
        return {
            "b": self.b.to_json_obj(),
            "c": self.c.to_json_obj(),
            "d": self.d.as_list(),
            "mult": self.multiplicity,
            "prefactor": f"{self.prefactor.numerator}/{self.prefactor.denominator}",
            "dx": self.deriv_count,
        }


def _splittings(total: PreMultiIndex, populated_only: bool = False) -> Iterable[tuple[PreMultiIndex, PreMultiIndex]]:
    """Ordered pairs (b, c) of non-zero pre-multi-indices with b + c = total."""
    support = total.support()
    counts = tuple(total.get(k, i) for k, i in support)
    ar = tuple(arity(k, i) for k, i in support)
    for sub in _submultisets(counts):
        if not any(sub) or sub == counts:
            continue
        if populated_only:
            # cheap pre-filter: population only needs size and order
            if sum(sub) != sum(m * w for m, w in zip(sub, ar)) + 1:
                continue
        b = PreMultiIndex.from_counts({kv: m for kv, m in zip(support, sub) if m})
        c = PreMultiIndex.from_counts({kv: x - m for kv, x, m in zip(support, counts, sub) if x - m})
        yield b, c


def insertion_index_set(a: PreMultiIndex, p: ModelParams | None = None, max_input_order: int | None = None) -> list[InsertionTerm]:
    """Right-hand side terms of the flow equation for ``xi^a``.

    Inputs ``b, c`` are populated with order at most ``max_input_order``
    (default Gamma).  Terms whose prefactor ``b^{k0}_{k0}`` vanishes are
    dropped.
    """
    # no short-cut for unpopulated a: emptiness there follows from the
    # splitting filter and is tested as a property
    if max_input_order is None:
        max_input_order = p.gamma if p is not None else a.order
    mult = multifactorial(a)
    terms: list[InsertionTerm] = []
    for d in derivator_slice(a.order):
        # a - d(dv): undo the conversion of one vertex
        inv = {kv: -m for kv, m in d.shift().items()}
        base = a.add_signed(inv)
        if base is None:
            continue
        for b, c in _splittings(base, populated_only=True):
            n0 = b.get(d.k0_label, d.k0)
            if n0 == 0:
                continue
            if not (is_populated(b) and is_populated(c)):
                continue
            if b.order > max_input_order or c.order > max_input_order:
                continue
            pref = Fraction(n0 * (2 if (d.k0_label, d.k1_label) == ("e", "f") else 1))
            terms.append(InsertionTerm(b, c, d, mult, pref, d.deriv_count))
    terms.sort(key=InsertionTerm.sort_key)
    return terms


def scaling_balance(term: InsertionTerm, a: PreMultiIndex, alpha) -> bool:
    """``|a| = |b| + |c| + 2 - dx`` (one kernel Gdot gains 2, each gradient costs 1)."""
    return scaling(a, alpha) == scaling(term.b, alpha) + scaling(term.c, alpha) + 2 - term.deriv_count


@dataclass
class FlowHierarchy:
    params: ModelParams
    max_order: int
    nodes: dict[PreMultiIndex, list[InsertionTerm]] = field(default_factory=dict)

    def order_sequence(self) -> list[PreMultiIndex]:
        return sorted(self.nodes, key=PreMultiIndex.sort_key)

    def flow_block(self) -> list[PreMultiIndex]:
        """Coordinates kept by the projection onto order <= Gamma."""
        return [a for a in self.order_sequence() if a.order <= self.params.gamma]

    def overflow_block(self) -> list[PreMultiIndex]:
        return [a for a in self.order_sequence() if a.order > self.params.gamma]

    def initial_nodes(self) -> list[PreMultiIndex]:
        return [a for a in self.order_sequence() if not self.nodes[a]]

    def to_json_obj(self) -> dict:
        nodes = []
        for a in self.order_sequence():
            s = scaling(a, self.params.alpha)
            nodes.append(
                {
                    "a": a.to_json_obj(),
                    "order": a.order,
                    "scaling": f"{s.numerator}/{s.denominator}",
                    "terms": [t.to_json_obj() for t in self.nodes[a]],
                }
            )
        return {"params": self.params.as_dict(), "max_order": self.max_order, "nodes": nodes}

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), separators=(",", ":"), sort_keys=True)


def build_hierarchy(p: ModelParams, max_order: int | None = None, cap: int = 250_000) -> FlowHierarchy:
    """Flow equations for every populated ``a`` with order <= max_order.

    The full range (max_order = 2 Gamma + 1) is astronomically large for
    small alpha, so the node count is checked against ``cap`` first.
    """
    if max_order is None:
        max_order = 2 * p.gamma + 1
    if max_order < 0:
        raise DomainError("max_order must be >= 0")
    total = count_populated(max_order)
    if total > cap:
        raise ResourceError(f"hierarchy up to order {max_order} has {total} nodes, above cap {cap}")
    h = FlowHierarchy(p, max_order)
    for a in enumerate_populated(max_order):
        h.nodes[a] = insertion_index_set(a, p)
    return h


def support_window(a: PreMultiIndex, mu) -> tuple[Fraction, Fraction]:
    """Admissible time offsets of all arguments relative to x0."""
    mu = Fraction(mu)
    if not (0 < mu <= 1):
        raise DomainError("mu must lie in (0, 1]")
    return (-2 * mu * mu * a.order, Fraction(0))


def support_window_recursive(h: FlowHierarchy, mu) -> dict[PreMultiIndex, tuple[Fraction, Fraction]]:
    """Windows rebuilt from the flow terms: b's arguments, then c's behind one
    kernel step of length at most 2 mu^2."""
    mu = Fraction(mu)
    step = 2 * mu * mu
    out: dict[PreMultiIndex, tuple[Fraction, Fraction]] = {}
    for a in h.order_sequence():
        terms = h.nodes[a]
        if not terms:
            out[a] = (Fraction(0), Fraction(0))
            continue
        lo = Fraction(0)
        for t in terms:
            lb = out[t.b][0] if t.b in out else support_window(t.b, mu)[0]
            lc = out[t.c][0] if t.c in out else support_window(t.c, mu)[0]
            lo = min(lo, lb, lb - step + lc)
        out[a] = (lo, Fraction(0))
    return out
