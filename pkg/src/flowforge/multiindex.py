"""Exact arithmetic on label-indexed sequences ("pre-multi-indices").

A pre-multi-index is a septuple of finitely supported sequences of
non-negative integers, one per label in ``b c d e f g h``.  Entry ``a[k][i]``
counts the vertices of type ``k`` carrying ``i`` derivatives of the
corresponding coefficient function.  Everything here is exact: parameters
and scalings are ``fractions.Fraction``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Iterator, Mapping, Sequence

from .errors import DomainError, ResourceError

LABELS: tuple[str, ...] = ("b", "c", "d", "e", "f", "g", "h")
LABEL_INDEX = {k: i for i, k in enumerate(LABELS)}

# Extra descendants carried by a vertex on top of its derivative index.
_EXTRA = (0, 0, 1, 0, 1, 2, 0)
# Labels whose vertex multiplies the equation by a gradient of psi.
_GRADIENTS = (0, 1, 0, 2, 1, 0, 0)
# Coefficient function attached to each label in the elementary differential.
BASE_FUNCTION = ("b", "d", "d", "g", "g", "g", "h")

Rational = Fraction


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class ModelParams:
    alpha: Fraction
    n: int
    iota: Fraction
    gamma: int
    delta: Fraction
    kappa0: Fraction
    diverging_variance: bool = False

    @property
    def r(self):
        from .cumulant import integrability_index

        return integrability_index(self)

    def as_dict(self) -> dict:
        return {
            "alpha": f"{self.alpha.numerator}/{self.alpha.denominator}",
            "n": self.n,
            "iota": f"{self.iota.numerator}/{self.iota.denominator}",
            "Gamma": self.gamma,
            "delta": f"{self.delta.numerator}/{self.delta.denominator}",
            "kappa0": f"{self.kappa0.numerator}/{self.kappa0.denominator}",
            "diverging_variance": self.diverging_variance,
        }


def derive_params(alpha, n: int = 1, iota=Fraction(1, 100)) -> ModelParams:
    """Derive Gamma, delta and kappa0 from (alpha, n, iota).

    For n = 1 the window alpha <= 1/4 is accepted but flagged: the noise
    variance of higher-order objects diverges there.
    """
    alpha = Fraction(alpha)
    iota = Fraction(iota)
    if not isinstance(n, int) or n < 1:
        raise DomainError(f"n must be a positive integer, got {n!r}")
    if not (0 < alpha <= 1):
        raise DomainError(f"alpha must lie in (0, 1], got {alpha}")
    if iota <= 0:
        raise DomainError(f"iota must be positive, got {iota}")
    threshold = Fraction(1, 2) - Fraction(n, 4)
    flagged = n == 1 and alpha <= Fraction(1, 4)
    if alpha <= threshold and not flagged:
        raise DomainError(f"alpha={alpha} violates subcriticality alpha > 1/2 - n/4 = {threshold}")
    gamma = math.floor(4 / alpha)
    delta = -2 + alpha + alpha / 2 * (gamma + 1)
    kappa0 = min(alpha / 2, delta / (2 * gamma + 2))
    assert delta > alpha
    return ModelParams(alpha, n, iota, gamma, delta, kappa0, flagged)


# ---------------------------------------------------------------------------
# sequences


def _strip(seq: Sequence[int]) -> tuple[int, ...]:
    seq = list(seq)
    while seq and seq[-1] == 0:
        seq.pop()
    return tuple(int(x) for x in seq)


def seq_order(q: Sequence[int]) -> int:
    return sum(i * x for i, x in enumerate(q))


def seq_size(q: Sequence[int]) -> int:
    return sum(q)


def seq_length(q: Sequence[int]) -> int:
    """Largest index in the support (0 for the zero sequence)."""
    q = _strip(q)
    return len(q) - 1 if q else 0


# ---------------------------------------------------------------------------
# pre-multi-indices


@dataclass(frozen=True)
class PreMultiIndex:
    seqs: tuple[tuple[int, ...], ...] = field(default=((),) * 7)

    def __post_init__(self):
        if len(self.seqs) != 7:
            raise DomainError("a pre-multi-index has exactly seven sequences")
        clean = tuple(_strip(s) for s in self.seqs)
        if any(x < 0 for s in clean for x in s):
            raise DomainError("pre-multi-index entries must be non-negative")
        object.__setattr__(self, "seqs", clean)
        object.__setattr__(self, "_size", sum(sum(s) for s in clean))
        object.__setattr__(
            self, "_order", sum(seq_order(s) + _EXTRA[j] * sum(s) for j, s in enumerate(clean))
        )

    # construction -----------------------------------------------------
    @classmethod
    def _make(cls, seqs: tuple[tuple[int, ...], ...], order: int, size: int) -> "PreMultiIndex":
        # trusted fast path: seqs already stripped and non-negative
        obj = object.__new__(cls)
        object.__setattr__(obj, "seqs", seqs)
        object.__setattr__(obj, "_order", order)
        object.__setattr__(obj, "_size", size)
        return obj

    @classmethod
    def from_mapping(cls, data: Mapping[str, Sequence[int]]) -> "PreMultiIndex":
        bad = set(data) - set(LABELS)
        if bad:
            raise DomainError(f"unknown labels {sorted(bad)}")
        return cls(tuple(tuple(data.get(k, ())) for k in LABELS))

    @classmethod
    def from_counts(cls, counts: Mapping[tuple[str, int], int]) -> "PreMultiIndex":
        seqs: list[list[int]] = [[] for _ in LABELS]
        order = size = 0
        for (k, i), m in counts.items():
            j = LABEL_INDEX[k]
            s = seqs[j]
            if len(s) <= i:
                s.extend([0] * (i + 1 - len(s)))
            s[i] += m
            size += m
            order += m * (i + _EXTRA[j])
        if any(x < 0 for s in seqs for x in s):
            raise DomainError("pre-multi-index entries must be non-negative")
        return cls._make(tuple(_strip_fast(s) for s in seqs), order, size)

    @classmethod
    def unit(cls, label: str, k: int = 0) -> "PreMultiIndex":
        return cls.from_counts({(label, k): 1})

    @classmethod
    def from_json(cls, obj) -> "PreMultiIndex":
        if isinstance(obj, str):
            obj = json.loads(obj)
        return cls.from_mapping(obj)

    # access -------------------------------------------------------------
    def get(self, label: str, i: int) -> int:
        s = self.seqs[LABEL_INDEX[label]]
        return s[i] if i < len(s) else 0

    def seq(self, label: str) -> tuple[int, ...]:
        return self.seqs[LABEL_INDEX[label]]

    def support(self) -> list[tuple[str, int]]:
        return [(k, i) for k, s in zip(LABELS, self.seqs) for i, x in enumerate(s) if x]

    def items(self) -> Iterator[tuple[str, int, int]]:
        for k, s in zip(LABELS, self.seqs):
            for i, x in enumerate(s):
                if x:
                    yield k, i, x

    def label_size(self, label: str) -> int:
        return sum(self.seqs[LABEL_INDEX[label]])

    @property
    def order(self) -> int:
        return self._order

    @property
    def size(self) -> int:
        return self._size

    @property
    def length(self) -> int:
        return max((len(s) - 1 for s in self.seqs if s), default=0)

    # arithmetic ---------------------------------------------------------
    def add_signed(self, other: Mapping[tuple[str, int], int]) -> "PreMultiIndex | None":
        """Add a signed sparse correction; None if an entry would turn negative."""
        seqs = [list(s) for s in self.seqs]
        for (k, i), m in other.items():
            s = seqs[LABEL_INDEX[k]]
            if len(s) <= i:
                s.extend([0] * (i + 1 - len(s)))
            s[i] += m
            if s[i] < 0:
                return None
        return PreMultiIndex(tuple(tuple(s) for s in seqs))

    def __add__(self, other: "PreMultiIndex") -> "PreMultiIndex":
        out = []
        for s, t in zip(self.seqs, other.seqs):
            m = max(len(s), len(t))
            out.append(tuple((s[i] if i < len(s) else 0) + (t[i] if i < len(t) else 0) for i in range(m)))
        return PreMultiIndex(tuple(out))

    def __sub__(self, other: "PreMultiIndex") -> "PreMultiIndex | None":
        return self.add_signed({(k, i): -x for k, i, x in other.items()})

    def is_zero(self) -> bool:
        return not any(self.seqs)

    # ordering and serialization ---------------------------------------
    def sort_key(self):
        return (self.order, self.seqs)

    def __lt__(self, other: "PreMultiIndex") -> bool:
        return self.sort_key() < other.sort_key()

    def to_json_obj(self) -> dict[str, list[int]]:
        return {k: list(s) for k, s in zip(LABELS, self.seqs)}

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), separators=(",", ":"))

    def short(self) -> str:
        parts = [f"{k}{list(s)}" for k, s in zip(LABELS, self.seqs) if s]
        return " ".join(parts) if parts else "0"

    def __repr__(self) -> str:
        return f"PreMultiIndex({self.short()})"


# ---------------------------------------------------------------------------
# characteristics


@dataclass(frozen=True)
class Characteristics:
    order: int
    size: int
    length: int
    scaling: Fraction


def scaling(a: PreMultiIndex, alpha) -> Fraction:
    """Scaling from the general definition (valid for every pre-multi-index)."""
    alpha = Fraction(alpha)
    s = {k: a.label_size(k) for k in LABELS}
    return (
        -(2 - alpha) * a.size
        + 2 * a.order
        + (2 - alpha) * (s["b"] + s["c"] + s["e"])
        + (1 - alpha) * (s["d"] + s["f"])
        - alpha * s["g"]
    )


def scaling_populated(a: PreMultiIndex, alpha) -> Fraction:
    """Reduced scaling formula, equal to :func:`scaling` on populated input."""
    alpha = Fraction(alpha)
    s = {k: a.label_size(k) for k in LABELS}
    return -2 + alpha * s["h"] + (s["d"] + s["f"]) + 2 * (s["b"] + s["c"] + s["e"])


def scaling_lower_bound(a: PreMultiIndex, alpha) -> Fraction:
    alpha = Fraction(alpha)
    s = {k: a.label_size(k) for k in LABELS}
    return (
        -2
        + alpha
        + alpha / 2 * a.order
        + (2 - alpha) * (s["b"] + s["c"] + s["e"])
        + (1 - alpha) * (s["d"] + s["f"])
    )


def characteristics(a: PreMultiIndex, p: ModelParams) -> Characteristics:
    return Characteristics(a.order, a.size, a.length, scaling(a, p.alpha))


def is_populated(a: PreMultiIndex) -> bool:
    return a.size == a.order + 1


def arity(label: str, i: int) -> int:
    """Number of children of a vertex of type (label, i)."""
    return i + _EXTRA[LABEL_INDEX[label]]


def hilbert_dim(a: PreMultiIndex, n: int) -> int:
    if n < 1:
        raise DomainError("n must be >= 1")
    return n ** (a.label_size("d") + a.label_size("f")) * (n * (n + 1) // 2) ** a.label_size("g")


def multifactorial(a: PreMultiIndex) -> int:
    out = 1
    for _, _, x in a.items():
        out *= math.factorial(x)
    return out


# ---------------------------------------------------------------------------
# trees


def _vertex_types(a: PreMultiIndex) -> tuple[tuple[tuple[str, int], ...], tuple[int, ...]]:
    types = tuple(a.support())
    return types, tuple(a.get(k, i) for k, i in types)


def tree_count(a: PreMultiIndex, cap: int = 10) -> int:
    """Number of unordered rooted typed trees whose vertex multiset is ``a``.

    Brute force over canonical forms; exponential, so guarded by ``cap``.
    """
    if a.size > cap:
        raise ResourceError(f"size {a.size} exceeds tree enumeration cap {cap}")
    if a.is_zero():
        return 0
    types, counts = _vertex_types(a)
    arities = tuple(arity(k, i) for k, i in types)
    return len(_trees(arities, counts))


@lru_cache(maxsize=None)
def _trees(arities: tuple[int, ...], counts: tuple[int, ...]) -> frozenset:
    out = set()
    for t, c in enumerate(counts):
        if c == 0:
            continue
        rest = list(counts)
        rest[t] -= 1
        for forest in _forests(arities, tuple(rest), arities[t]):
            out.add((t, forest))
    return frozenset(out)


def _submultisets(counts: tuple[int, ...]):
    if not counts:
        yield ()
        return
    for head in range(counts[0] + 1):
        for tail in _submultisets(counts[1:]):
            yield (head,) + tail


@lru_cache(maxsize=None)
def _forests(arities: tuple[int, ...], counts: tuple[int, ...], w: int) -> frozenset:
    if w == 0:
        return frozenset({()}) if not any(counts) else frozenset()
    total = sum(counts)
    if total < w:
        return frozenset()
    out = set()
    for sub in _submultisets(counts):
        if not any(sub):
            continue
        rest = tuple(c - s for c, s in zip(counts, sub))
        firsts = _trees(arities, sub)
        if not firsts:
            continue
        tails = _forests(arities, rest, w - 1)
        for tree in firsts:
            for tail in tails:
                out.add(tuple(sorted((tree,) + tail)))
    return frozenset(out)


# ---------------------------------------------------------------------------
# enumeration


def _nonleaf_types(k: int) -> list[tuple[str, int, int]]:
    out = []
    for j, lab in enumerate(LABELS):
        for i in range(k + 1):
            w = i + _EXTRA[j]
            if 1 <= w <= k:
                out.append((lab, i, w))
    return out


_LEAVES = ("b", "c", "e", "h")
_LEAF_ROWS = tuple(LABEL_INDEX[k] for k in _LEAVES)


def _strip_fast(row: list[int]) -> tuple[int, ...]:
    end = len(row)
    while end and row[end - 1] == 0:
        end -= 1
    return tuple(row[:end])


def _compositions(total: int, parts: int) -> Iterator[tuple[int, ...]]:
    if parts == 1:
        yield (total,)
        return
    for head in range(total, -1, -1):
        for tail in _compositions(total - head, parts - 1):
            yield (head,) + tail


# per-label cost in the reduced scaling formula (h costs alpha)
_COST = {"b": 2, "c": 2, "d": 1, "e": 2, "f": 1, "g": 0}


def iter_populated(order: int, alpha=None, max_scaling=None) -> Iterator[PreMultiIndex]:
    """All populated pre-multi-indices of exactly the given order (unsorted).

    Leaves (index-0 vertices of b, c, e, h) carry no order, every other
    vertex type carries its arity, and population forces the leaf count to
    1 + sum over non-leaves of (arity - 1).  With ``max_scaling`` set, only
    those with scaling <= max_scaling (at the given alpha) are produced; the
    reduced scaling formula is a sum of non-negative per-vertex costs, which
    makes the pruning exact.
    """
    if order < 0:
        return
    types = _nonleaf_types(order)
    if max_scaling is not None:
        alpha = Fraction(alpha)
        budget0 = Fraction(max_scaling) + 2
        cost = {lab: (alpha if lab == "h" else Fraction(_COST[lab])) for lab in LABELS}
        if budget0 < 0:
            return
    else:
        budget0 = None

    def leaf_comps(leaves: int, left):
        if left is None:
            yield from _compositions(leaves, 4)
            return
        # leaves are b, c, e (cost 2 each) and h (cost alpha)
        for heavy in range(leaves + 1):
            if 2 * heavy + cost["h"] * (leaves - heavy) > left:
                continue
            for comp in _compositions(heavy, 3):
                yield comp + (leaves - heavy,)

    def rec(idx: int, budget: int, chosen: list[tuple[int, int, int]], excess: int, left):
        if budget == 0:
            base = [[0] * (order + 1) for _ in LABELS]
            for j, i, m in chosen:
                base[j][i] = m
            size = sum(m for _, _, m in chosen)
            leaves = excess + 1
            for comp in leaf_comps(leaves, left):
                for j, m in zip(_LEAF_ROWS, comp):
                    base[j][0] = m
                yield PreMultiIndex._make(tuple(_strip_fast(r) for r in base), order, size + leaves)
            return
        if idx == len(types):
            return
        lab, i, w = types[idx]
        j = LABEL_INDEX[lab]
        m = 0
        while m * w <= budget:
            nleft = None if left is None else left - m * cost[lab]
            if nleft is not None and nleft < 0:
                break
            if m:
                chosen.append((j, i, m))
            yield from rec(idx + 1, budget - m * w, chosen, excess + m * (w - 1), nleft)
            if m:
                chosen.pop()
            m += 1

    yield from rec(0, order, [], 0, budget0)


def enumerate_populated(k: int, cap: int | None = None) -> list[PreMultiIndex]:
    """Populated pre-multi-indices of order <= k in canonical order."""
    if k < 0:
        raise DomainError("k must be >= 0")
    if cap is not None and count_populated(k) > cap:
        raise ResourceError(f"{count_populated(k)} pre-multi-indices of order <= {k} exceed cap {cap}")
    out: list[PreMultiIndex] = []
    for o in range(k + 1):
        out.extend(sorted(iter_populated(o), key=lambda a: a.seqs))
    return out


def enumerate_indices(p: ModelParams, k: int, cap: int | None = None) -> list[PreMultiIndex]:
    """Populated pre-multi-indices of order <= k (the set does not depend on alpha)."""
    return enumerate_populated(k, cap)


def count_populated_by_order(k: int) -> list[int]:
    """Counts of populated pre-multi-indices by order via a generating function.

    Independent of :func:`iter_populated`: tracks (order, leaf excess) and
    multiplies by the number of ways to spread the leaves over four types.
    """
    poly: dict[tuple[int, int], int] = {(0, 0): 1}
    for lab, i, w in _nonleaf_types(k):
        new: dict[tuple[int, int], int] = {}
        for (o, e), c in poly.items():
            m = 0
            while o + m * w <= k:
                key = (o + m * w, e + m * (w - 1))
                new[key] = new.get(key, 0) + c
                m += 1
        poly = new
    out = [0] * (k + 1)
    for (o, e), c in poly.items():
        out[o] += c * math.comb(e + 1 + 3, 3)
    return out


def count_populated(k: int) -> int:
    return sum(count_populated_by_order(k))


# ---------------------------------------------------------------------------
# elementary differential signature


@dataclass(frozen=True)
class Signature:
    """Derivative orders of each coefficient function plus gradient count."""

    derivatives: tuple[tuple[str, tuple[int, ...]], ...]
    gradients: int

    def render(self) -> str:
        parts = []
        for fn, orders in self.derivatives:
            for i in orders:
                parts.append(fn + _primes(i))
        if self.gradients == 1:
            parts.append("(∂ψ)")
        elif self.gradients > 1:
            parts.append(f"(∂ψ)^{self.gradients}")
        return "·".join(parts) if parts else "1"


def _primes(i: int) -> str:
    return "′" * i if i <= 3 else f"^({i})"


def functional_signature(a: PreMultiIndex) -> Signature:
    per_fn: dict[str, list[int]] = {}
    grads = 0
    for j, s in enumerate(a.seqs):
        fn = BASE_FUNCTION[j]
        for i, x in enumerate(s):
            per_fn.setdefault(fn, []).extend([i] * x)
            grads += _GRADIENTS[j] * x
    derivs = tuple((fn, tuple(sorted(per_fn[fn]))) for fn in ("b", "d", "g", "h") if fn in per_fn)
    return Signature(derivs, grads)


def canonical_json(items: Sequence[PreMultiIndex]) -> str:
    return json.dumps([a.to_json_obj() for a in items], separators=(",", ":"))
