"""Desk-scale numerics for the regularised equation.

Coloured, mollified noise on the periodic grid; the divergent constants of
the two leading counterterms; low-order flow coefficients on a scale-adapted
patch; an exponential-Euler solver and the coupled epsilon-ladder study.
"""

from __future__ import annotations

import math
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from fractions import Fraction

import numpy as np
from numpy.polynomial import polynomial as P
from scipy import signal, special

from ._util import worker_count
from .errors import DomainError
from .flowgen import insertion_index_set
from .kernels import (
    GridSpec,
    KernelOp,
    SpaceTimeField,
    _check_eps,
    besov_norm,
    bump,
    covariance_multiplier,
    dchi_mu,
    irfft_space,
    mollifier_space_symbol,
    rfft_space,
)
from .multiindex import ModelParams, PreMultiIndex, scaling

# ---------------------------------------------------------------------------
# nonlinearities


_SPEC_RE = re.compile(r"^\s*([a-z]+)\s*(?:\[(.*)\])?\s*$")


def _num(s: str) -> float:
    return float(Fraction(s.strip()))


@dataclass(frozen=True)
class ScalarFn:
    """A named closed-form function with analytic derivatives of every order."""

    spec: str

    def __post_init__(self):
        kind, args = self._parsed
        if kind not in ("zero", "const", "poly", "cos", "sin", "tanh", "exp"):
            raise DomainError(f"unknown function {self.spec!r}")
        if kind in ("const", "poly") and not args:
            raise DomainError(f"{kind} needs coefficients, e.g. {kind}[1/4]")
        if kind == "const" and len(args) != 1:
            raise DomainError("const takes exactly one value")

    @cached_property
    def _parsed(self) -> tuple[str, tuple[float, ...]]:
        m = _SPEC_RE.match(self.spec)
        if not m:
            raise DomainError(f"cannot parse function {self.spec!r}")
        try:
            args = tuple(_num(a) for a in m.group(2).split(",")) if m.group(2) else ()
        except (ValueError, ZeroDivisionError) as exc:
            raise DomainError(f"bad coefficients in {self.spec!r}") from exc
        return m.group(1), args

    @property
    def is_zero(self) -> bool:
        kind, args = self._parsed
        return kind == "zero" or (kind in ("const", "poly") and not any(args))

    def __call__(self, x: np.ndarray, k: int = 0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        kind, args = self._parsed
        if kind == "zero" or (kind == "const" and k > 0):
            return np.zeros_like(x)
        if kind == "const":
            return np.full_like(x, args[0])
        if kind == "poly":
            c = P.polyder(np.array(args), k) if k else np.array(args)
            return P.polyval(x, c) if len(c) else np.zeros_like(x)
        if kind in ("cos", "sin"):
            shift = k + (1 if kind == "cos" else 0)
            return np.sin(x + shift * np.pi / 2)
        if kind == "exp":
            return np.exp(x)
        # tanh: d/dx p(t) = p'(t) (1 - t^2) with t = tanh x
        c = np.array([0.0, 1.0])
        for _ in range(k):
            c = P.polymul(P.polyder(c), [1.0, 0.0, -1.0])
        return P.polyval(np.tanh(x), c)


@dataclass(frozen=True)
class NonlinearitySpec:
    """b(psi) + sum d_i(psi) d_i psi + sum g_ij(psi) d_i psi d_j psi + h(psi) xi."""

    n: int
    b: ScalarFn
    d: tuple[ScalarFn, ...]
    g: tuple[tuple[ScalarFn, ...], ...]
    h: ScalarFn
    order: int = 12  # declared derivative order (all registry entries are analytic)

    def __post_init__(self):
        if len(self.d) != self.n or len(self.g) != self.n or any(len(r) != self.n for r in self.g):
            raise DomainError("d must have n entries and g must be n x n")
        for i in range(self.n):
            for j in range(self.n):
                if self.g[i][j] != self.g[j][i]:
                    raise DomainError("g must be symmetric")

    @classmethod
    def build(cls, n: int = 1, b="zero", d="zero", g="zero", h="zero", order: int = 12) -> "NonlinearitySpec":
        """Single names broadcast: d to every component, g to g * identity."""
        d_t = tuple(ScalarFn(x) for x in ([d] * n if isinstance(d, str) else d))
        if isinstance(g, str):
            g_t = tuple(tuple(ScalarFn(g if i == j else "zero") for j in range(n)) for i in range(n))
        else:
            g_t = tuple(tuple(ScalarFn(x) for x in row) for row in g)
        return cls(n, ScalarFn(b), d_t, g_t, ScalarFn(h), order)

    def check(self, p: ModelParams):
        if self.n != p.n:
            raise DomainError("nonlinearity and model dimensions differ")
        if self.order < p.gamma + 1:
            raise DomainError(f"need derivatives up to order {p.gamma + 1}")

    @property
    def has_gradient_terms(self) -> bool:
        return not (all(f.is_zero for f in self.d) and all(f.is_zero for r in self.g for f in r))

    def to_json_obj(self) -> dict:
        return {
            "b": self.b.spec,
            "d": [f.spec for f in self.d],
            "g": [[f.spec for f in r] for r in self.g],
            "h": self.h.spec,
        }


# ---------------------------------------------------------------------------
# noise


def _time_kernel(eps: float, dt: float) -> np.ndarray:
    """Sampled time mollifier at lags -J..J, unit discrete mass."""
    J = int(math.ceil(eps * eps / dt))
    w = bump(np.arange(-J, J + 1) * dt / (eps * eps))
    return w / w.sum()


class NoiseSource:
    """One draw of base white noise, shared by every epsilon up to ``eps_max``.

    Row ``r`` of ``base`` is the step starting at time ``(r - pad) * dt``; the
    padding lets the time mollifier see noise before 0 and after T.
    """

    def __init__(self, p: ModelParams, grid: GridSpec, seed, eps_max: float | None):
        if grid.n != p.n:
            raise DomainError("grid and model dimensions differ")
        if eps_max is not None:
            _check_eps(eps_max, grid)
        self.p, self.grid, self.eps_max = p, grid, eps_max
        self.pad = 0 if eps_max is None else int(math.ceil(eps_max**2 / grid.dt)) + 1
        rng = np.random.default_rng(seed)
        rows = grid.nt + 2 * self.pad
        scale = 1.0 / math.sqrt(grid.dt * grid.dx**grid.n)
        self.base = rng.standard_normal((rows,) + grid.space_shape) * scale

    def field(self, eps: float | None) -> SpaceTimeField:
        grid, pad = self.grid, self.pad
        if eps is None:
            vals = self.base[pad:pad + grid.nt]
            mult = 1.0
        else:
            if self.eps_max is None or eps > self.eps_max * (1 + 1e-12):
                raise DomainError("eps exceeds the padding of this noise source")
            _check_eps(eps, grid)
            w = _time_kernel(eps, grid.dt)
            J = (len(w) - 1) // 2
            chunk = self.base[pad - J:pad + grid.nt + J]
            kern = w.reshape((-1,) + (1,) * grid.n)
            vals = signal.fftconvolve(chunk, kern, mode="valid", axes=0)
            mult = mollifier_space_symbol(eps, grid)
        mult = mult * np.sqrt(covariance_multiplier(self.p.alpha, grid.n, grid))
        out = irfft_space(rfft_space(vals, grid.n) * mult, grid.n, grid.M)
        return SpaceTimeField(out, grid)


def sample_noise(p: ModelParams, grid: GridSpec, seed, eps: float | None, eps_max: float | None = None) -> SpaceTimeField:
    """xi_eps on ``grid``; pass the ladder's largest eps as ``eps_max`` to share base noise."""
    return NoiseSource(p, grid, seed, eps_max if eps_max is not None else eps).field(eps)


# ---------------------------------------------------------------------------
# counterterm constants

_GL_TIME = special.roots_legendre(96)


def time_autocorrelation(u) -> np.ndarray:
    """(beta * beta)(u) for the unit bump beta; supported in [-2, 2]."""
    xg, wg = _GL_TIME
    u = np.asarray(u, dtype=float)
    a = np.maximum(-1.0, -1.0 - u)[..., None]
    b = np.minimum(1.0, 1.0 - u)[..., None]
    s = a + (b - a) * (xg + 1) / 2
    val = np.sum(wg * bump(s) * bump(s + u[..., None]), axis=-1) * (b - a)[..., 0] / 2
    return np.where(np.abs(u) < 2, val, 0.0)


def _spectral_weights(p: ModelParams, eps: float, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """(|2 pi k|^2, m(k) |rho_eps(k)|^2 * multiplicity) over the rfft layout."""
    if grid.n != p.n:
        raise DomainError("grid and model dimensions differ")
    _check_eps(eps, grid)
    lam = grid.laplacian_symbol()
    w = covariance_multiplier(p.alpha, grid.n, grid) * mollifier_space_symbol(eps, grid) ** 2
    k_last = grid.wavenumbers()[-1]
    mult = np.where((k_last == 0) | (np.abs(k_last) == grid.M // 2), 1.0, 2.0)
    return lam.ravel(), (w * mult).ravel()


def leading_counterterm(p: ModelParams, eps: float, grid: GridSpec, panels: int = 24) -> float:
    """C_1(eps) = -int_0^1 int Gdot_nu(z) Cov_eps(z) dz dnu > 0, by nested quadrature.

    Gdot_nu lives on times [nu^2, 2 nu^2] and Cov_eps on |t| <= 2 eps^2, so
    only nu <= sqrt(2) eps contributes.  With t = nu^2 u the inner integral
    runs over u in [1, 2].
    """
    lam, w = _spectral_weights(p, eps, grid)
    xu, wu = special.roots_legendre(24)
    u = 1.5 + 0.5 * xu
    wu = 0.5 * wu
    xn, wn = special.roots_legendre(8)
    edges = np.linspace(0.0, math.sqrt(2.0) * eps, panels + 1)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        nu = lo + (hi - lo) * (xn + 1) / 2
        t = (nu[:, None] ** 2) * u[None, :]  # (nodes, u)
        S = np.exp(-t.reshape(-1, 1) * lam[None, :]) @ w
        R = time_autocorrelation(t.ravel() / eps**2) / eps**2
        gdot = dchi_mu(t, nu[:, None]) * nu[:, None] ** 2  # dt = nu^2 du
        inner = (gdot.ravel() * S * R).reshape(t.shape) @ wu
        total += 0.5 * (hi - lo) * float(wn @ inner)
    return float(-total)


def second_order_constant(p: ModelParams, eps: float, grid: GridSpec, nodes: int = 200) -> float:
    """C_2(eps) = E[(d_1 G xi_eps)^2] in the stationary regime (per direction)."""
    lam, w = _spectral_weights(p, eps, grid)
    xt, wt = special.roots_legendre(nodes)
    t = eps**2 * (xt + 1)  # [0, 2 eps^2]
    R = time_autocorrelation(t / eps**2) / eps**2
    # int int_{s1,s2>0} e^{-lam(s1+s2)} R(s1-s2) = (1/lam) int_0 e^{-lam t} R(t) dt, times (2 pi k_1)^2
    k1 = (2 * np.pi * grid.wavenumbers()[0]).ravel() ** 2
    safe = np.where(lam > 0, lam, 1.0)
    S = np.exp(-np.outer(t, lam)) @ (w * np.where(lam > 0, k1 / safe, 0.0))
    return float(eps**2 * np.sum(wt * S * R))


# ---------------------------------------------------------------------------
# counterterm catalogue


_MODE_RE = re.compile(r"^(off|leading|catalog\[(\d+)\])$")


def parse_counterterm_mode(mode: str) -> int:
    """Maximal order of counterterms: off -> 0, leading -> 1, catalog[k] -> k."""
    m = _MODE_RE.match(mode.strip())
    if not m:
        raise DomainError(f"unknown counterterm mode {mode!r} (off, leading, catalog[k])")
    if m.group(1) == "off":
        return 0
    if m.group(1) == "leading":
        return 1
    k = int(m.group(2))
    if k < 1:
        raise DomainError("catalog order must be >= 1")
    return k


_HH = PreMultiIndex.from_mapping({"h": (1, 1)})
_GHH = PreMultiIndex.from_mapping({"g": (1,), "h": (2,)})


@dataclass
class Counterterm:
    """Local functional -(sign C1 h' h + C2 sum_i g_ii h^2) with its bookkeeping."""

    eps: float
    c1: float = 0.0
    c2: float = 0.0
    sign: int = 1
    catalog: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __call__(self, psi: np.ndarray, nl: NonlinearitySpec) -> np.ndarray:
        out = np.zeros_like(psi)
        if self.c1:
            out += self.sign * self.c1 * nl.h(psi, 1) * nl.h(psi)
        if self.c2:
            tr = sum(nl.g[i][i](psi) for i in range(nl.n))
            out += self.sign * self.c2 * tr * nl.h(psi) ** 2
        return -out

    def to_json_obj(self) -> dict:
        return {"eps": self.eps, "C1": self.c1, "C2": self.c2, "sign": self.sign,
                "catalog": self.catalog, "warnings": self.warnings}


def build_counterterm(p: ModelParams, eps: float, grid: GridSpec, mode: str, sign: int = 1) -> Counterterm:
    from .renorm import enumerate_relevant

    k = parse_counterterm_mode(mode)
    ct = Counterterm(eps, sign=sign)
    if k == 0:
        return ct
    ct.c1 = leading_counterterm(p, eps, grid)
    if mode.strip() == "leading":
        ct.catalog.append({"signature": "h·h′", "constant": ct.c1, "status": "computed"})
        return ct
    for e in enumerate_relevant(p, max_order=k):
        sig = e.signature.render()
        row = {"a": e.a.to_json_obj(), "decor": [[kk, i, l.to_list()] for kk, i, l in e.decor],
               "signature": sig, "scaling": str(e.scaling)}
        if e.a == _HH and not e.decor:
            row.update(constant=ct.c1, status="computed")
        elif e.a == _GHH and not e.decor:
            ct.c2 = second_order_constant(p, eps, grid)
            row.update(constant=ct.c2, status="computed")
        elif e.a.label_size("h") % 2:
            row.update(constant=0.0, status="vanishes: odd number of noises")
        else:
            row.update(constant=0.0, status="not implemented")
            ct.warnings.append(f"counterterm constant for {sig} (scaling {e.scaling}) set to 0")
        ct.catalog.append(row)
    return ct


# ---------------------------------------------------------------------------
# solver


@dataclass
class SimConfig:
    params: ModelParams
    grid: GridSpec
    eps_ladder: tuple[float, ...]
    seed: int = 0
    initial: np.ndarray | None = None
    counterterm_mode: str = "leading"
    mc_samples: int = 1
    sign: int = 1
    blowup_bound: float = 1e6
    gradient_bound: float = 1e4
    snapshots: int = 100

    def __post_init__(self):
        g = self.grid
        if g.n != self.params.n:
            raise DomainError("grid and model dimensions differ")
        if g.T0 != 0 or not 0 < g.T1 <= 1:
            raise DomainError("simulation window must be [0, T] with 0 < T <= 1")
        self.eps_ladder = tuple(float(e) for e in self.eps_ladder)
        if not self.eps_ladder:
            raise DomainError("empty epsilon ladder")
        if any(a <= b for a, b in zip(self.eps_ladder, self.eps_ladder[1:])):
            raise DomainError("epsilon ladder must be strictly decreasing")
        for e in self.eps_ladder:
            _check_eps(e, g)
        parse_counterterm_mode(self.counterterm_mode)
        if self.mc_samples < 1:
            raise DomainError("mc_samples must be >= 1")
        if self.sign not in (1, -1):
            raise DomainError("sign must be +1 or -1")
        if g.steps % self.snapshots:
            raise DomainError("number of steps must be a multiple of the snapshot count")
        if self.initial is None:
            self.initial = np.zeros(g.space_shape)
        self.initial = np.asarray(self.initial, dtype=float)
        if self.initial.shape != g.space_shape or not np.all(np.isfinite(self.initial)):
            raise DomainError("initial condition must be a finite field on the spatial grid")

    @classmethod
    def make(cls, params: ModelParams, M: int, T: float, eps_ladder, dt: float | None = None,
             snapshots: int = 100, **kw) -> "SimConfig":
        """Grid with dt <= (1/M)^2 / 4, rounded down so that T / dt is a multiple of ``snapshots``."""
        dt0 = (1.0 / M) ** 2 / 4 if dt is None else dt
        steps = snapshots * int(math.ceil(T / (dt0 * snapshots) - 1e-9))
        grid = GridSpec(params.n, M, 0.0, T, T / steps)
        return cls(params, grid, tuple(eps_ladder), snapshots=snapshots, **kw)

    def snapshot_grid(self) -> GridSpec:
        g = self.grid
        return GridSpec(g.n, g.M, 0.0, g.T1, g.T1 / self.snapshots)

    def to_json_obj(self) -> dict:
        g = self.grid
        return {"params": self.params.as_dict(), "M": g.M, "n": g.n, "T": g.T1, "dt": g.dt,
                "eps_ladder": list(self.eps_ladder), "seed": self.seed,
                "counterterm_mode": self.counterterm_mode, "mc_samples": self.mc_samples,
                "sign": self.sign, "blowup_bound": self.blowup_bound}


@dataclass
class SolveResult:
    field: SpaceTimeField  # snapshots, last value held after a blow-up
    blown_up: bool
    blowup_time: float | None
    counterterm: Counterterm

    @property
    def final(self) -> np.ndarray:
        return self.field.values[-1]


def _check_initial(cfg: SimConfig, nl: NonlinearitySpec):
    if not nl.has_gradient_terms:
        return  # gPAM: bounded data suffice
    g = cfg.grid
    grads = [irfft_space(rfft_space(cfg.initial, g.n) * (2j * np.pi * k), g.n, g.M) for k in g.wavenumbers()]
    worst = max(float(np.max(np.abs(x))) for x in grads)
    if worst > cfg.gradient_bound:
        raise DomainError(f"initial gradient {worst:.3g} exceeds {cfg.gradient_bound:g}; "
                          "gradient nonlinearities need differentiable data")


def solve_regularized(cfg: SimConfig, nl: NonlinearitySpec, eps: float | None = None,
                      noise: SpaceTimeField | None = None, counterterm: Counterterm | None = None) -> SolveResult:
    """Exponential Euler: psi_hat <- e^{-lam dt} psi_hat + (1 - e^{-lam dt}) / lam * N_hat."""
    p, g = cfg.params, cfg.grid
    nl.check(p)
    _check_initial(cfg, nl)
    eps = cfg.eps_ladder[0] if eps is None else eps
    if counterterm is None:
        counterterm = build_counterterm(p, eps, g, cfg.counterterm_mode, cfg.sign)
    noisy = not nl.h.is_zero
    if noisy and noise is None:
        noise = sample_noise(p, g, cfg.seed, eps, max(cfg.eps_ladder))
    if noisy and noise.grid != g:
        raise DomainError("noise grid differs from the simulation grid")

    lam = g.laplacian_symbol()
    decay = np.exp(-lam * g.dt)
    phi = np.where(lam > 0, -np.expm1(-lam * g.dt) / np.where(lam > 0, lam, 1.0), g.dt)
    ks = [2j * np.pi * k for k in g.wavenumbers()]
    for k in ks:
        k[np.abs(k.imag) >= np.pi * g.M - 1e-9] = 0  # odd derivative: drop Nyquist
    grad = nl.has_gradient_terms
    active_b = not nl.b.is_zero
    ct_on = counterterm.c1 != 0 or counterterm.c2 != 0

    if g.n == 1:
        fwd, inv = np.fft.rfft, (lambda c: np.fft.irfft(c, g.M))
    else:
        fwd, inv = np.fft.rfft2, (lambda c: np.fft.irfft2(c, (g.M, g.M)))
    c1s, c2s = counterterm.sign * counterterm.c1, counterterm.sign * counterterm.c2
    diag = [nl.g[a][a] for a in range(g.n)]
    if all(f._parsed[0] in ("zero", "const") for f in diag):
        tr0 = sum(float(f(0.0)) for f in diag)
        trg = lambda x: tr0
    else:
        trg = lambda x: sum(f(x) for f in diag)
    d_terms = [(a, f) for a, f in enumerate(nl.d) if not f.is_zero]
    g_terms = [(a, c, nl.g[a][c]) for a in range(g.n) for c in range(g.n) if not nl.g[a][c].is_zero]

    every = g.steps // cfg.snapshots
    snaps = np.empty((cfg.snapshots + 1,) + g.space_shape)
    psi = cfg.initial.copy()
    snaps[0] = psi
    blown, t_blow = False, None
    for i in range(g.steps):
        psi_hat = fwd(psi)
        rhs = nl.b(psi) if active_b else np.zeros_like(psi)
        if grad:
            dpsi = [inv(psi_hat * k) for k in ks]
            for a, f in d_terms:
                rhs += f(psi) * dpsi[a]
            for a, c, f in g_terms:
                rhs += f(psi) * dpsi[a] * dpsi[c]
        if noisy:
            hv = nl.h(psi)
            rhs += hv * noise.values[i]
        if ct_on:
            hv = hv if noisy else nl.h(psi)
            rhs -= (c1s * nl.h(psi, 1) + c2s * trg(psi) * hv) * hv
        psi_hat = decay * psi_hat + phi * fwd(rhs)
        new = inv(psi_hat)
        if not np.all(np.isfinite(new)) or np.max(np.abs(new)) > cfg.blowup_bound:
            blown, t_blow = True, (i + 1) * g.dt
            snaps[i // every + 1:] = psi
            break
        psi = new
        if (i + 1) % every == 0:
            snaps[(i + 1) // every] = psi
    return SolveResult(SpaceTimeField(snaps, cfg.snapshot_grid()), blown, t_blow, counterterm)


# ---------------------------------------------------------------------------
# convergence study


def replica_seed(seed: int, replica: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(replica,)).generate_state(1, np.uint64)[0])


def _run_replica(cfg: SimConfig, nl: NonlinearitySpec, replica: int, cts: dict) -> dict:
    src = NoiseSource(cfg.params, cfg.grid, replica_seed(cfg.seed, replica), max(cfg.eps_ladder)) \
        if not nl.h.is_zero else None
    out = {}
    for mode in ("on", "off"):
        runs = []
        for eps in cfg.eps_ladder:
            noise = src.field(eps) if src is not None else None
            runs.append(solve_regularized(cfg, nl, eps, noise, cts[mode][eps]))
        out[mode] = runs
    return out


def _besov_levels(g: GridSpec) -> int:
    # mu_j = 2^-j must satisfy mu^2 >= 2 dt
    return int(math.floor(math.log2(1.0 / (2.0 * g.dt)) / 2)) + 1


@dataclass
class ConvergenceReport:
    config: dict
    nonlinearity: dict
    ladder: tuple[float, ...]
    beta: float
    per_eps: dict[str, list[dict]]  # mode -> one row per eps
    pairs: dict[str, list[dict]]  # mode -> one row per consecutive pair
    constants: list[dict]
    warnings: list[str]
    runtime_s: float

    def sup_medians(self, mode: str = "on") -> list[float]:
        return [r["sup_median"] for r in self.pairs[mode]]

    def drift_medians(self, mode: str = "off") -> list[float]:
        return [r["abs_drift_median"] for r in self.per_eps[mode]]

    def to_json_obj(self) -> dict:
        return {
            "config": self.config,
            "nonlinearity": self.nonlinearity,
            "eps_ladder": list(self.ladder),
            "besov_exponent": self.beta,
            "per_eps": self.per_eps,
            "pairs": self.pairs,
            "constants": self.constants,
            "warnings": self.warnings,
            "runtime_s": self.runtime_s,
        }

    def tables(self) -> dict[str, str]:
        rows = ["mode,eps,abs_drift_median,sup_median,blowups"]
        for mode, lst in self.per_eps.items():
            for r in lst:
                rows.append(f"{mode},{r['eps']!r},{r['abs_drift_median']!r},{r['sup_median']!r},{r['blowups']}")
        pairs = ["mode,eps,eps_next,sup_median,besov_median,blown"]
        for mode, lst in self.pairs.items():
            for r in lst:
                pairs.append(f"{mode},{r['eps']!r},{r['eps_next']!r},{r['sup_median']!r},{r['besov_median']!r},{r['blown']}")
        consts = ["eps,C1,C2"] + [f"{c['eps']!r},{c['C1']!r},{c['C2']!r}" for c in self.constants]
        return {"per_eps.csv": "\n".join(rows) + "\n", "pairs.csv": "\n".join(pairs) + "\n",
                "constants.csv": "\n".join(consts) + "\n"}


def convergence_study(cfg: SimConfig, nl: NonlinearitySpec, workers: int | None = None) -> ConvergenceReport:
    """Coupled ladder runs with the counterterm on and off.

    "on" uses ``cfg.counterterm_mode`` (``leading`` when that is ``off``).
    """
    t0 = time.perf_counter()
    p, g = cfg.params, cfg.grid
    nl.check(p)
    on_mode = cfg.counterterm_mode if parse_counterterm_mode(cfg.counterterm_mode) else "leading"
    cts = {"on": {e: build_counterterm(p, e, g, on_mode, cfg.sign) for e in cfg.eps_ladder},
           "off": {e: Counterterm(e) for e in cfg.eps_ladder}}
    workers = min(worker_count(workers), cfg.mc_samples)
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            reps = list(ex.map(_run_replica, [cfg] * cfg.mc_samples, [nl] * cfg.mc_samples,
                               range(cfg.mc_samples), [cts] * cfg.mc_samples))
    else:
        reps = [_run_replica(cfg, nl, r, cts) for r in range(cfg.mc_samples)]

    beta = float(p.alpha - p.kappa0)
    levels = _besov_levels(cfg.snapshot_grid())
    per_eps, pairs = {}, {}
    m0 = float(np.mean(cfg.initial))
    for mode in ("on", "off"):
        rows = []
        for j, eps in enumerate(cfg.eps_ladder):
            runs = [r[mode][j] for r in reps]
            drift = [abs(float(np.mean(s.final)) - m0) for s in runs]
            sups = [s.field.sup() for s in runs]
            rows.append({"eps": eps, "abs_drift_median": float(np.median(drift)), "abs_drift": drift,
                         "sup_median": float(np.median(sups)), "blowups": sum(s.blown_up for s in runs)})
        per_eps[mode] = rows
        prow = []
        for j in range(len(cfg.eps_ladder) - 1):
            sup_d, bes_d, blown = [], [], 0
            for r in reps:
                a, b = r[mode][j], r[mode][j + 1]
                if a.blown_up or b.blown_up:
                    blown += 1
                    continue
                diff = a.field - b.field
                sup_d.append(diff.sup())
                bes_d.append(besov_norm(diff, beta, levels) if levels >= 3 else float("nan"))
            prow.append({"eps": cfg.eps_ladder[j], "eps_next": cfg.eps_ladder[j + 1],
                         "sup_median": float(np.median(sup_d)) if sup_d else float("nan"),
                         "besov_median": float(np.median(bes_d)) if bes_d else float("nan"),
                         "sup": sup_d, "blown": blown})
        pairs[mode] = prow
    warnings = sorted({w for c in cts["on"].values() for w in c.warnings})
    if levels < 3:
        warnings.append("snapshot spacing too coarse for the dyadic Besov surrogate")
    constants = [{"eps": e, "C1": cts["on"][e].c1, "C2": cts["on"][e].c2} for e in cfg.eps_ladder]
    return ConvergenceReport(cfg.to_json_obj() | {"counterterm_on": on_mode}, nl.to_json_obj(),
                             cfg.eps_ladder, beta, per_eps, pairs, constants, warnings,
                             time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# low-order flow coefficients


@dataclass(frozen=True)
class Patch:
    """Periodic space-time patch scaled to mu: ``cells`` cells per mu, dt = dx^2.

    Spatial length ``extent * mu``, temporal length ``extent * mu^2``.
    """

    mu: float
    cells: int = 3
    extent: int = 8

    @property
    def nx(self) -> int:
        return self.extent * self.cells

    @property
    def nt(self) -> int:
        return self.extent * self.cells**2

    @property
    def dx(self) -> float:
        return self.mu / self.cells

    @property
    def dt(self) -> float:
        return self.dx**2

    @property
    def length(self) -> float:
        return self.nx * self.dx

    def lag_positions(self) -> np.ndarray:
        m = np.arange(self.nx)
        return np.where(m <= self.nx // 2, m, m - self.nx) * self.dx


def _lag_cell_nodes(patch: Patch, J: int, q: int = 24) -> tuple[np.ndarray, np.ndarray]:
    """Time nodes and averaging weights per lag cell j = 0..J.

    Cell j covers lags [(j - 1/2) dt, (j + 1/2) dt]; only s > 0 contributes,
    so cell 0 is the half interval [0, dt/2].  Weights average over dt.
    """
    xg, wg = special.roots_legendre(q)
    dt = patch.dt
    lo = np.maximum((np.arange(J + 1) - 0.5) * dt, 0.0)
    hi = (np.arange(J + 1) + 0.5) * dt
    s = lo[:, None] + (hi - lo)[:, None] * (xg[None, :] + 1) / 2
    w = (hi - lo)[:, None] * wg[None, :] / 2 / dt
    # cell 0 starts at s = 0 where the cell average behaves like sqrt(s): use s = sigma^2
    sig = math.sqrt(hi[0]) * (xg + 1) / 2
    s[0] = sig**2
    w[0] = math.sqrt(hi[0]) * wg / 2 * 2 * sig / dt
    return s, w


def heat_cell_average(s: np.ndarray, z: np.ndarray, dx: float, length: float, deriv: int = 0,
                      images: int = 4) -> np.ndarray:
    """Periodic heat kernel at times s > 0 averaged over spatial cells centred at z.

    ``deriv = 1`` averages the x-derivative instead.  Shape (len(s), len(z)).
    """
    s = np.asarray(s, dtype=float).ravel()[:, None]
    r = np.sqrt(4.0 * s)
    out = np.zeros((s.shape[0], len(z)))
    for m in range(-images, images + 1):
        zz = np.asarray(z)[None, :] + m * length
        if deriv == 0:
            out += (special.erf((zz + dx / 2) / r) - special.erf((zz - dx / 2) / r)) / (2 * dx)
        elif deriv == 1:
            heat = lambda y: np.exp(-y * y / (4 * s)) / np.sqrt(4 * np.pi * s)
            out += (heat(zz + dx / 2) - heat(zz - dx / 2)) / dx
        else:
            raise DomainError("only 0 or 1 spatial derivatives")
    return out


def stepped_cutoff_kernel(patch: Patch, deriv: int = 0, nu_steps: int = 960) -> np.ndarray:
    """-int_0^mu Gdot_nu dnu on the patch's lag cells by explicit nu-stepping.

    Returns an (nt, nx) array indexed by (time lag, space lag) modulo the
    patch; it vanishes identically for lags outside [0, 2 mu^2].
    """
    mu = patch.mu
    J = int(math.ceil(2 * mu * mu / patch.dt)) + 1
    if J >= patch.nt:
        raise DomainError("patch too short for the kernel support")
    s, w = _lag_cell_nodes(patch, J)
    xg, wg = special.roots_legendre(4)
    acc = np.zeros_like(s)
    # for lag s the integrand lives on nu in [sqrt(s/2), sqrt(s)]: geometric steps
    # resolve every lag down to s ~ 1e-12 mu^2 (below that it is zero anyway)
    edges = np.concatenate([[0.0], mu * np.geomspace(1e-6, 1.0, nu_steps + 1)])
    for lo, hi in zip(edges[:-1], edges[1:]):
        for x, wq in zip(xg, wg):
            nu = lo + (hi - lo) * (x + 1) / 2
            acc -= 0.5 * (hi - lo) * wq * dchi_mu(s, nu)
    heat = heat_cell_average(s, patch.lag_positions(), patch.dx, patch.length, deriv)
    heat = heat.reshape(s.shape + (patch.nx,))
    out = np.zeros((patch.nt, patch.nx))
    out[: J + 1] = np.einsum("jq,jq,jqm->jm", w, acc, heat)
    return out


def _patch_k_hat(patch: Patch, N: int = 1) -> np.ndarray:
    """Fourier transform of K_{N,mu} on the periodic patch, shape (nt, nx)."""
    mu2 = patch.mu**2
    reps = 12  # periods folded in; the time tail is e^{-extent * reps}
    xg, wg = special.roots_legendre(8)
    j = np.arange(patch.nt * reps)
    s = (j[:, None] + (xg[None, :] + 1) / 2) * patch.dt
    prof = KernelOp("KNmu", patch.mu, N=N).time_profile(s.ravel()).reshape(s.shape)
    mass = prof @ wg * patch.dt / 2
    kt = mass.reshape(reps, patch.nt).sum(axis=0)
    k = np.fft.fftfreq(patch.nx, 1.0 / patch.nx)
    kx = (1.0 + mu2 * (2 * np.pi * k / patch.length) ** 2) ** (-N)
    return np.fft.fft(kt)[:, None] * kx[None, :]


def _patch_noise(patch: Patch, alpha, rng: np.random.Generator) -> np.ndarray:
    xi = rng.standard_normal((patch.nt, patch.nx)) / math.sqrt(patch.dt * patch.dx)
    expo = 1.0 - 0.5 - float(alpha)
    if expo == 0:
        return xi
    k = np.fft.rfftfreq(patch.nx, 1.0 / patch.nx)
    m = (1.0 + (2 * np.pi * k / patch.length) ** 2) ** (expo / 2)
    return np.fft.irfft(np.fft.rfft(xi, axis=1) * m, patch.nx, axis=1)


def _patch_covariance(patch: Patch, alpha) -> np.ndarray:
    """E[xi(x) xi(y)] as a function of the lag, shape (nt, nx)."""
    k = np.fft.rfftfreq(patch.nx, 1.0 / patch.nx)
    m = (1.0 + (2 * np.pi * k / patch.length) ** 2) ** (1.0 - 0.5 - float(alpha))
    cov = np.zeros((patch.nt, patch.nx))
    cov[0] = np.fft.irfft(m, patch.nx) / (patch.dt * patch.dx)
    return cov


@dataclass
class FlowCoefficientResult:
    a: PreMultiIndex
    alpha: Fraction
    mus: tuple[float, ...]
    norms: list[list[float]]  # per mu, one triple norm per sample
    target_exponent: Fraction
    fitted_exponent: float
    outside_mass: float  # largest mass of |xi^a(x, .)| outside the support window
    renormalized: bool
    flow_terms: int
    kernel_sup: list[float]  # sup of the stepped kernel per mu (0 for order 0)
    fields: list[np.ndarray] = field(repr=False, default_factory=list)  # first sample, per mu

    @property
    def mean_norms(self) -> list[float]:
        return [float(np.mean(v)) for v in self.norms]

    def to_json_obj(self) -> dict:
        return {
            "a": self.a.to_json_obj(),
            "alpha": str(self.alpha),
            "mus": list(self.mus),
            "mean_norms": self.mean_norms,
            "target_exponent": str(self.target_exponent),
            "fitted_exponent": self.fitted_exponent,
            "outside_mass": self.outside_mass,
            "renormalized": self.renormalized,
            "flow_terms": self.flow_terms,
            "samples": len(self.norms[0]) if self.norms else 0,
        }


def _order0_value(b: PreMultiIndex, xi: np.ndarray) -> np.ndarray:
    (k, _), = b.support()
    return xi if k == "h" else np.ones_like(xi)


def flow_coefficient(a: PreMultiIndex, p: ModelParams, mus=(1 / 8, 1 / 16, 1 / 32), samples: int = 64,
                     seed: int = 0, N: int = 1, cells: int = 3, extent: int = 8) -> FlowCoefficientResult:
    """Coefficient xi^a_mu for o(a) <= 1 from white cell noise on scale-adapted patches.

    The flow starts from xi^a_0 = 0 for o(a) = 1; the inputs have order 0 and
    do not move, so the bilinear right-hand side integrates to the stepped
    cut-off kernel between them.  For two noise inputs the expectation is
    subtracted.  The triple norm is sup_x int |K (x) K lambda(x, y)| dy.
    """
    if a.order > 1:
        raise DomainError("flow_coefficient covers o(a) <= 1 only")
    if p.n != 1:
        raise DomainError("flow_coefficient is implemented for n = 1")
    mus = tuple(float(m) for m in mus)
    if len(mus) < 2 or samples < 1:
        raise DomainError("need at least two mu values and one sample")
    terms = insertion_index_set(a, p) if a.order == 1 else []
    noise_inputs = [(t.b.support()[0][0] == "h") + (t.c.support()[0][0] == "h") for t in terms]
    renorm = a.order == 1 and a.label_size("h") == 2
    target = scaling(a, p.alpha)

    norms, fields, ksup, outside = [], [], [], 0.0
    for li, mu in enumerate(mus):
        patch = Patch(mu, cells, extent)
        nt, nx = patch.nt, patch.nx
        khat = _patch_k_hat(patch, N)
        vol = patch.dt * patch.dx
        if terms:
            it, ix = np.arange(nt), np.arange(nx)
            lt = (it[:, None, None, None] - it[None, None, :, None]) % nt
            lx = (ix[None, :, None, None] - ix[None, None, None, :]) % nx
            kernels = [float(t.prefactor) * stepped_cutoff_kernel(patch, t.deriv_count) for t in terms]
            ksup.append(max(float(np.max(np.abs(k))) for k in kernels))
            full = [k[lt, lx] for k in kernels]
            J = int(math.floor(2 * mu * mu * a.order / patch.dt + 0.5))
            outside_mask = (np.arange(nt) > J)[lt] | np.zeros((1, 1, 1, nx), bool)
            if renorm:
                cov = _patch_covariance(patch, p.alpha)[lt, lx]
                mean = sum(f * cov for f, kn in zip(full, noise_inputs) if kn == 2)
        else:
            ksup.append(0.0)
        vals = []
        for s_i in range(samples):
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(li, s_i)))
            xi = _patch_noise(patch, p.alpha, rng)
            if not terms:
                if a.order == 1:  # unpopulated: no flow terms, stays zero
                    z = np.zeros_like(xi)
                else:
                    z = _order0_value(a, xi)
                if s_i == 0:
                    fields.append(z.copy())
                sm = np.real(np.fft.ifft2(np.fft.fft2(z) * khat))
                vals.append(float(np.max(np.abs(sm))))
                continue
            z = np.zeros((nt, nx, nt, nx))
            for t, f in zip(terms, full):
                cb = _order0_value(t.b, xi)[:, :, None, None]
                cc = _order0_value(t.c, xi)[None, None, :, :]
                z += cb * f * cc
            if renorm:
                z -= mean
            outside = max(outside, float(np.max(np.sum(np.abs(z) * outside_mask, axis=(2, 3)) * vol)))
            if s_i == 0:
                fields.append(z[nt - 1, 0].copy())
            F = np.fft.fftn(z) * khat[:, :, None, None] * khat[None, None, :, :]
            sm = np.real(np.fft.ifftn(F))
            vals.append(float(np.max(np.sum(np.abs(sm), axis=(2, 3)) * vol)))
        norms.append(vals)
    slope = float(np.polyfit(np.log(mus), np.log([np.mean(v) for v in norms]), 1)[0])
    return FlowCoefficientResult(a, p.alpha, mus, norms, target, slope, outside, renorm, len(terms), ksup, fields)
