"""Space-time kernels on a periodic grid: heat, cut-off heat, Q_mu, K_{N,mu}.

Space is handled exactly mode by mode through real FFTs.  Time is handled
by product integration: the input is taken piecewise linear between grid
times and the kernel is integrated exactly (closed forms for pure
exponentials, Gauss-Legendre otherwise) against each hat function, which
turns every kernel into a causal discrete convolution done by FFT.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np
from scipy import integrate, special

from ._util import atomic_write
from .errors import DomainError, NumericError, ResolutionError

KINDS = ("Heat", "Gmu", "GmuDot", "Qmu", "KNmu", "Pmu", "PmuDagger")
_QUAD_NODES = 8


# ---------------------------------------------------------------------------
# profiles


def smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)


def chi(u):
    """Cut-off profile: 0 on [0,1], 1 on [2,inf), quintic smoothstep between."""
    return smoothstep(np.asarray(u, dtype=float) - 1.0)


def dchi(u):
    v = np.asarray(u, dtype=float) - 1.0
    inside = (v > 0) & (v < 1)
    vv = np.where(inside, v, 0.0)
    return np.where(inside, 30.0 * vv * vv * (1.0 - vv) ** 2, 0.0)


def chi_mu(t, mu):
    return chi(np.asarray(t, dtype=float) / (mu * mu))


def dchi_mu(t, mu):
    """d/dmu of chi(t / mu^2); non-positive, supported in [mu^2, 2 mu^2]."""
    t = np.asarray(t, dtype=float)
    return dchi(t / (mu * mu)) * (-2.0 * t / mu**3)


def _bump_raw(u):
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    m = np.abs(u) < 1
    out[m] = np.exp(-1.0 / (1.0 - u[m] ** 2))
    return out


_BUMP_MASS = integrate.quad(lambda u: float(_bump_raw(np.array(u))), -1, 1, epsabs=1e-14, epsrel=1e-14)[0]


def bump(u):
    """Unit-mass smooth bump supported in [-1, 1]."""
    return _bump_raw(u) / _BUMP_MASS


# ---------------------------------------------------------------------------
# grid and fields


@dataclass(frozen=True)
class GridSpec:
    n: int = 1
    M: int = 256
    T0: float = 0.0
    T1: float = 1.0
    dt: float = 1e-3

    def __post_init__(self):
        if self.n not in (1, 2):
            raise DomainError("only n = 1 and n = 2 are supported")
        if self.M < 16 or self.M & (self.M - 1):
            raise DomainError("M must be a power of two >= 16")
        if not self.dt > 0 or not self.T1 > self.T0:
            raise DomainError("need dt > 0 and T1 > T0")
        steps = (self.T1 - self.T0) / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise DomainError("(T1 - T0) / dt must be an integer")

    @property
    def steps(self) -> int:
        return int(round((self.T1 - self.T0) / self.dt))

    @property
    def nt(self) -> int:
        return self.steps + 1

    @property
    def dx(self) -> float:
        return 1.0 / self.M

    @property
    def space_shape(self) -> tuple[int, ...]:
        return (self.M,) * self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.nt,) + self.space_shape

    def times(self) -> np.ndarray:
        return self.T0 + self.dt * np.arange(self.nt)

    def coords(self) -> list[np.ndarray]:
        x = np.arange(self.M) * self.dx
        return list(np.meshgrid(*([x] * self.n), indexing="ij"))

    def wavenumbers(self, real: bool = True) -> list[np.ndarray]:
        """Integer wavenumbers on the (r)fft layout, broadcast to full shape."""
        axes = [np.fft.fftfreq(self.M, 1.0 / self.M)] * self.n
        if real:
            axes[-1] = np.fft.rfftfreq(self.M, 1.0 / self.M)
        return list(np.meshgrid(*axes, indexing="ij"))

    def laplacian_symbol(self, real: bool = True) -> np.ndarray:
        """|2 pi k|^2 on the spectral layout."""
        return sum((2 * np.pi * k) ** 2 for k in self.wavenumbers(real))

    def with_window(self, T0: float, T1: float) -> "GridSpec":
        return GridSpec(self.n, self.M, T0, T1, self.dt)


def _space_axes(n: int) -> tuple[int, ...]:
    return tuple(range(1, n + 1))


def rfft_space(values: np.ndarray, n: int) -> np.ndarray:
    return np.fft.rfftn(values, axes=tuple(range(values.ndim - n, values.ndim)))


def irfft_space(coeffs: np.ndarray, n: int, M: int) -> np.ndarray:
    axes = tuple(range(coeffs.ndim - n, coeffs.ndim))
    return np.fft.irfftn(coeffs, s=(M,) * n, axes=axes)


@dataclass
class SpaceTimeField:
    values: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise DomainError(f"field shape {self.values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("field contains non-finite values")

    @classmethod
    def zeros(cls, grid: GridSpec) -> "SpaceTimeField":
        return cls(np.zeros(grid.shape), grid)

    @classmethod
    def from_function(cls, grid: GridSpec, fn: Callable) -> "SpaceTimeField":
        t = grid.times().reshape((-1,) + (1,) * grid.n)
        xs = [x[None] for x in grid.coords()]
        return cls(np.broadcast_to(fn(t, *xs), grid.shape).copy(), grid)

    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))

    def flat(self) -> np.ndarray:
        """Values as (time_steps, M**n)."""
        return self.values.reshape(self.grid.nt, -1)

    def __sub__(self, other: "SpaceTimeField") -> "SpaceTimeField":
        return SpaceTimeField(self.values - other.values, self.grid)


def heat_semigroup(values: np.ndarray, t: float, n: int = 1) -> np.ndarray:
    """e^{t Delta} on a periodic spatial array (last n axes)."""
    M = values.shape[-1]
    lam = GridSpec(n, M).laplacian_symbol()
    return irfft_space(rfft_space(values, n) * np.exp(-t * lam), n, M)


# ---------------------------------------------------------------------------
# kernel operators


@dataclass(frozen=True)
class KernelOp:
    kind: str
    mu: float = 0.0
    N: int = 1
    history: str = "zero"  # zero | hold (input frozen at its first value before T0)
    space_deriv: int = 0  # order of d/dx_1 applied to the kernel

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown kernel kind {self.kind!r}")
        if not 0 <= self.mu <= 1:
            raise DomainError("mu must lie in [0, 1]")
        if self.N < 1:
            raise DomainError("N must be >= 1")
        if self.history not in ("zero", "hold"):
            raise DomainError("history must be 'zero' or 'hold'")
        if self.kind == "GmuDot" and self.mu == 0:
            raise DomainError("GmuDot needs mu > 0")

    @property
    def scale_dependent(self) -> bool:
        return self.kind != "Heat"

    def time_profile(self, s: np.ndarray, lam: np.ndarray | None = None) -> np.ndarray:
        """Kernel time factor at lags s >= 0, shape (len(s),) or (len(s), len(lam))."""
        s = np.asarray(s, dtype=float)
        mu = self.mu
        if self.kind in ("Heat", "Gmu", "GmuDot"):
            lam = np.zeros(1) if lam is None else lam
            heat = np.exp(-np.outer(s, lam)) * (s > 0)[:, None]
            if self.kind == "Heat" or mu == 0:
                return heat
            cut = chi_mu(s, mu) if self.kind == "Gmu" else dchi_mu(s, mu)
            return heat * cut[:, None]
        if self.kind in ("Qmu", "KNmu"):
            N = 1 if self.kind == "Qmu" else self.N
            m2 = mu * mu
            out = np.where(s >= 0, s ** (N - 1) * np.exp(-s / m2), 0.0)
            return out / (m2**N * math.factorial(N - 1))
        raise DomainError(f"{self.kind} is a differential operator")

    def space_multiplier(self, lam: np.ndarray) -> np.ndarray:
        if self.kind in ("Qmu", "KNmu"):
            N = 1 if self.kind == "Qmu" else self.N
            return (1.0 + self.mu**2 * lam) ** (-N)
        return np.ones_like(lam)


def _deriv_multiplier(grid: GridSpec, order: int) -> np.ndarray | complex:
    if order == 0:
        return 1.0
    k = grid.wavenumbers()[0]
    return (2j * np.pi * k) ** order


def _exp_hat_weights(c: np.ndarray, nt: int, dt: float) -> np.ndarray:
    """Exact hat-function weights of e^{-c s} on [0, inf); shape (nt, len(c))."""
    x = np.asarray(c, dtype=float) * dt
    small = x < 1e-6
    xs = np.where(small, 1.0, x)
    w0 = np.where(small, 0.5 - x / 6.0, (xs + np.expm1(-xs)) / xs**2)
    core = np.where(small, 1.0 - x, (-np.expm1(-xs) / xs) ** 2)
    j = np.arange(1, nt)[:, None]
    W = np.empty((nt, len(x)))
    W[0] = dt * w0
    W[1:] = dt * core[None, :] * np.exp(-(j - 1) * x[None, :])
    return W


def _quad_hat_weights(profile: Callable, nt: int, dt: float, rows: slice | None = None) -> np.ndarray:
    """Hat-function weights of an arbitrary profile by Gauss-Legendre per step."""
    xg, wg = special.roots_legendre(_QUAD_NODES)
    u = (xg + 1) / 2
    wg = wg / 2
    lo, hi = (0, nt) if rows is None else (rows.start, rows.stop)
    idx = np.arange(lo, hi)
    s = ((idx[:, None] + u[None, :]) * dt).ravel()
    k = profile(s)
    k = k.reshape(len(idx), _QUAD_NODES, -1)
    L = dt * np.einsum("q,iqm->im", wg * (1 - u), k)
    R = dt * np.einsum("q,iqm->im", wg * u, k)
    W = np.zeros((nt, k.shape[-1]))
    W[lo:hi] += L
    hi_r = min(hi + 1, nt)
    W[lo + 1:hi_r] += R[: hi_r - lo - 1]
    return W


def time_weights(op: KernelOp, grid: GridSpec, lam: np.ndarray) -> np.ndarray:
    """Hat weights W[j, m] for lag j*dt and unique symbol values lam[m]."""
    nt, dt, mu = grid.nt, grid.dt, op.mu
    if op.kind == "Heat" or (op.kind == "Gmu" and mu == 0):
        return _exp_hat_weights(lam, nt, dt)
    if op.kind == "Qmu":
        return _exp_hat_weights(np.array([1.0 / mu**2]), nt, dt) / mu**2
    if op.kind == "GmuDot":
        lo = max(0, int(math.floor(mu * mu / dt)) - 1)
        hi = min(nt, int(math.ceil(2 * mu * mu / dt)) + 1)
        return _quad_hat_weights(lambda s: op.time_profile(s, lam), nt, dt, slice(lo, hi))
    if op.kind == "Gmu":
        return _quad_hat_weights(lambda s: op.time_profile(s, lam), nt, dt)
    return _quad_hat_weights(lambda s: op.time_profile(s)[:, None], nt, dt)


def time_mass(op: KernelOp, lam: np.ndarray) -> np.ndarray:
    """Integral of the time factor over [0, inf) per symbol value."""
    if op.kind in ("Qmu", "KNmu"):
        return np.ones(1)
    if op.kind == "GmuDot":
        m2 = op.mu**2
        xg, wg = special.roots_legendre(64)
        s = m2 * (1.5 + 0.5 * xg)
        return 0.5 * m2 * wg @ op.time_profile(s, lam)
    raise DomainError(f"'hold' history needs an integrable time kernel, not {op.kind}")


def _check_resolution(op: KernelOp, grid: GridSpec):
    if op.scale_dependent and op.mu > 0 and op.mu**2 < 2 * grid.dt:
        raise ResolutionError(f"mu = {op.mu:g} under-resolved: need mu^2 >= 2 dt = {2 * grid.dt:g}")


def _causal_convolve(W: np.ndarray, fhat: np.ndarray) -> np.ndarray:
    nt = fhat.shape[0]
    nfft = 1 << int(math.ceil(math.log2(2 * nt)))
    a = np.fft.fft(W, nfft, axis=0)
    b = np.fft.fft(fhat, nfft, axis=0)
    return np.fft.ifft(a * b, axis=0)[:nt]


def apply_kernel(op: KernelOp, f: SpaceTimeField) -> SpaceTimeField:
    """Space-time convolution of ``f`` with the kernel of ``op``."""
    grid = f.grid
    _check_resolution(op, grid)
    n = grid.n
    if op.kind in ("Qmu", "KNmu") and op.mu == 0 and op.space_deriv == 0:
        return SpaceTimeField(f.values.copy(), grid)  # Q_0 is the identity
    lam_full = grid.laplacian_symbol()
    fhat = rfft_space(f.values, n)
    dmul = _deriv_multiplier(grid, op.space_deriv)
    if op.kind in ("Pmu", "PmuDagger"):
        m2 = op.mu**2
        dt = grid.dt
        g = fhat
        if op.kind == "Pmu":
            prev = g[0] if op.history == "hold" else np.zeros_like(g[0])
            ext = np.concatenate([prev[None], prev[None], g], axis=0)
            dg = (3 * ext[2:] - 4 * ext[1:-1] + ext[:-2]) / (2 * dt)
            dg[0] = (g[0] - prev) / dt
            sign = 1.0
        else:
            ext = np.concatenate([g, np.zeros_like(g[:2])], axis=0)
            dg = (-3 * ext[:-2] + 4 * ext[1:-1] - ext[2:]) / (2 * dt)
            sign = -1.0
        out = (g + sign * m2 * dg) * (1 + m2 * lam_full)[None] * dmul
        return _finish(out, grid)
    lam_u, inv = np.unique(lam_full.ravel(), return_inverse=True)
    mode_dependent = op.kind in ("Heat", "Gmu", "GmuDot")
    W = time_weights(op, grid, lam_u if mode_dependent else lam_u[:1])
    if mode_dependent:
        W = W[:, inv].reshape((grid.nt,) + lam_full.shape)
    else:
        W = W[:, 0].reshape((grid.nt,) + (1,) * n)
    out = _causal_convolve(W, fhat)
    if op.history == "hold":
        mass = time_mass(op, lam_u if mode_dependent else lam_u[:1])
        Wflat = W.reshape(grid.nt, -1)
        mass = mass[inv] if mode_dependent else mass
        tail = mass.reshape(-1)[None, :] - np.cumsum(Wflat, axis=0)
        tail = tail.reshape((grid.nt,) + (W.shape[1:]))
        out = out + tail * fhat[0][None]
    out = out * op.space_multiplier(lam_full)[None] * dmul
    return _finish(out, grid)


def _finish(coeffs: np.ndarray, grid: GridSpec) -> SpaceTimeField:
    vals = irfft_space(coeffs, grid.n, grid.M)
    if not np.all(np.isfinite(vals)):
        raise NumericError("kernel application produced non-finite values")
    return SpaceTimeField(vals, grid)


def kernel_samples(op: KernelOp, grid: GridSpec) -> SpaceTimeField:
    """The kernel itself at lags s = t - T0 and positions x (x = 0 at index 0)."""
    if op.kind in ("Pmu", "PmuDagger"):
        raise DomainError("differential operators have no kernel samples")
    _check_resolution(op, grid)
    s = grid.times() - grid.T0
    lam = grid.laplacian_symbol()
    lam_u, inv = np.unique(lam.ravel(), return_inverse=True)
    if op.kind in ("Heat", "Gmu", "GmuDot"):
        prof = op.time_profile(s, lam_u)[:, inv].reshape((grid.nt,) + lam.shape)
    else:
        prof = op.time_profile(s).reshape((grid.nt,) + (1,) * grid.n)
    coeffs = prof * op.space_multiplier(lam)[None] * _deriv_multiplier(grid, op.space_deriv)
    # density: inverse DFT scaled by the number of points
    return SpaceTimeField(irfft_space(coeffs, grid.n, grid.M) * grid.M**grid.n, grid)


# ---------------------------------------------------------------------------
# mollifier and covariance


def _check_eps(eps: float, grid: GridSpec):
    if not 0 < eps <= 1:
        raise DomainError("epsilon must lie in (0, 1]")
    if eps < 4.0 / grid.M or eps * eps < 4 * grid.dt:
        raise ResolutionError(f"epsilon = {eps:g} under-resolved (need eps >= 4/M and eps^2 >= 4 dt)")


def periodic_offsets(grid: GridSpec) -> list[np.ndarray]:
    """Signed distances to the origin on the torus, per axis."""
    return [np.where(x > 0.5, x - 1.0, x) for x in grid.coords()]


def mollifier_field(eps: float, grid: GridSpec, profile: Callable = bump) -> SpaceTimeField:
    """rho_eps(t, x) = eps^{-(n+2)} rho(t/eps^2) prod rho(x_i/eps), at grid times t.

    The grid window should straddle t = 0 for the full mass to be visible.
    """
    _check_eps(eps, grid)
    t = grid.times()
    tw = profile(t / eps**2)
    # each 1D factor is normalised by its Riemann sum so the grid mass is exact
    vals = (tw / (tw.sum() * grid.dt)).reshape((-1,) + (1,) * grid.n)
    xs = np.arange(grid.M) * grid.dx
    xw = profile(np.where(xs > 0.5, xs - 1.0, xs) / eps)
    xw = xw / (xw.sum() * grid.dx)
    for axis in range(grid.n):
        shape = [1] * (grid.n + 1)
        shape[axis + 1] = grid.M
        vals = vals * xw.reshape(shape)
    return SpaceTimeField(vals, grid)


def mollifier_space_symbol(eps: float, grid: GridSpec, profile: Callable = bump) -> np.ndarray:
    """Discrete Fourier symbol of the spatial part of rho_eps (unit at k = 0)."""
    _check_eps(eps, grid)
    vals = np.ones(grid.space_shape)
    for x in periodic_offsets(grid):
        vals = vals * profile(x / eps) / eps
    sym = np.real(rfft_space(vals, grid.n)) * grid.dx**grid.n
    return sym / sym.flat[0]


def covariance_multiplier(alpha, n: int, grid: GridSpec) -> np.ndarray:
    """(1 + |2 pi k|^2)^{1 - n/2 - alpha} on the rfft layout."""
    expo = 1.0 - n / 2.0 - float(Fraction(alpha))
    return (1.0 + grid.laplacian_symbol()) ** expo


def covariance_field(p, grid: GridSpec) -> SpaceTimeField:
    """Noise covariance as a field: spatial kernel at lag 0 times a discrete time delta."""
    if grid.n != p.n:
        raise DomainError("grid and model dimensions differ")
    mult = covariance_multiplier(p.alpha, p.n, grid)
    spatial = irfft_space(mult, grid.n, grid.M) * grid.M**grid.n
    vals = np.zeros(grid.shape)
    i0 = int(np.argmin(np.abs(grid.times())))
    vals[i0] = spatial / grid.dt
    return SpaceTimeField(vals, grid)


# ---------------------------------------------------------------------------
# Besov-type surrogate norm


def besov_norm(f: SpaceTimeField, beta, dyadic_levels: int) -> float:
    """max_j mu_j^{-beta} |(Q_mu - Id) f|_inf (beta > 0) or |K_{N,mu} f|_inf (beta < 0)."""
    beta = float(Fraction(beta))
    if beta == 0:
        raise DomainError("beta = 0 has no dyadic surrogate")
    if not -2 < beta < 1:
        raise DomainError("beta must lie in (-2, 1)")
    if dyadic_levels < 3:
        raise DomainError("need at least 3 dyadic levels")
    best = 0.0
    for j in range(dyadic_levels):
        mu = 2.0**-j
        if beta > 0:
            g = apply_kernel(KernelOp("Qmu", mu, history="hold"), f).values - f.values
        else:
            g = apply_kernel(KernelOp("KNmu", mu, N=math.ceil(-beta), history="hold"), f).values
        best = max(best, mu ** (-beta) * float(np.max(np.abs(g))))
    return best


# ---------------------------------------------------------------------------
# scaling estimates


DEFAULT_MUS = (2.0**-2, 2.0**-3, 2.0**-4, 2.0**-5)


@dataclass
class EstimateRow:
    estimate_id: str
    mu: float
    measured: float
    predicted_exponent: float
    fitted_exponent: float = float("nan")
    relative_error: float = float("nan")


@dataclass
class EstimatesReport:
    rows: list[EstimateRow]
    checks: dict[str, bool]
    notes: list[str] = field(default_factory=list)

    def fitted(self, estimate_id: str) -> float:
        return next(r.fitted_exponent for r in self.rows if r.estimate_id == estimate_id)

    def measured(self, estimate_id: str) -> list[float]:
        return [r.measured for r in self.rows if r.estimate_id == estimate_id]

    def to_csv(self) -> str:
        lines = ["estimate_id,mu,measured,predicted_exponent,fitted_exponent,relative_error"]
        for r in self.rows:
            lines.append(f"{r.estimate_id},{r.mu:.10g},{r.measured:.12g},{r.predicted_exponent:g},"
                         f"{r.fitted_exponent:.6g},{r.relative_error:.6g}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        atomic_write(path, self.to_csv())


def loglog_slope(mus, values) -> float:
    return float(np.polyfit(np.log(mus), np.log(values), 1)[0])


def _spatial_kernel(mult: np.ndarray, grid: GridSpec) -> np.ndarray:
    return irfft_space(mult, grid.n, grid.M) * grid.M**grid.n


def default_estimate_grid(n: int = 1, M: int = 256, mus=DEFAULT_MUS) -> GridSpec:
    dt = min(mus) ** 2 / 32
    return GridSpec(n, M, 0.0, 1.0, dt)


def verify_estimates(p=None, grid: GridSpec | None = None, report_path=None, mus=DEFAULT_MUS) -> EstimatesReport:
    """Measure the kernel estimates at dyadic mu and fit log-log exponents.

    Norms of convolution operators are read off their kernels: the
    L^inf -> L^inf norm is the L^1 norm of the kernel and the
    L^{1,1} -> L^inf norm is its sup.
    """
    n = p.n if p is not None else (grid.n if grid is not None else 1)
    grid = grid or default_estimate_grid(n)
    if p is not None and grid.n != p.n:
        raise DomainError("grid and model dimensions differ")
    for mu in mus:
        _check_resolution(KernelOp("Qmu", mu), grid)
    vol = grid.dx**grid.n
    lam = grid.laplacian_symbol()
    s = grid.times() - grid.T0
    rows: list[EstimateRow] = []
    norm_k, dnorm, supk, gdot, outside = [], [], [], [], []
    for mu in mus:
        l1 = 0.0
        for N in (1, 2):
            op = KernelOp("KNmu", mu, N=N)
            W = time_weights(op, grid, lam.ravel()[:1])[:, 0]
            r = _spatial_kernel(op.space_multiplier(lam), grid)
            l1 = max(l1, float(np.sum(np.abs(W))) * float(np.sum(np.abs(r))) * vol)
        norm_k.append(l1)
        q1 = KernelOp("Qmu", mu)
        Wq = time_weights(q1, grid, lam.ravel()[:1])[:, 0]
        dr = _spatial_kernel(q1.space_multiplier(lam) * _deriv_multiplier(grid, 1), grid)
        dnorm.append(float(np.sum(np.abs(Wq))) * float(np.sum(np.abs(dr))) * vol)
        r1 = _spatial_kernel(q1.space_multiplier(lam), grid)
        supk.append(float(np.max(q1.time_profile(s))) * float(np.max(np.abs(r1))))
        # |Gdot_mu|_{L^1}: Gauss-Legendre over its support, heat kernel slices in space
        xg, wg = special.roots_legendre(48)
        m2 = mu * mu
        nodes = m2 * (1.5 + 0.5 * xg)
        tot = 0.0
        for si, wi in zip(nodes, wg):
            hk = _spatial_kernel(np.exp(-si * lam), grid)
            tot += 0.5 * m2 * wi * abs(float(dchi_mu(si, mu))) * float(np.sum(np.abs(hk))) * vol
        gdot.append(tot)
        prof = dchi_mu(s, mu)
        mask = (s < m2) | (s > 2 * m2)
        outside.append(float(np.max(np.abs(prof[mask]))) if mask.any() else 0.0)
    series = [
        ("normKmu", norm_k, 0.0),
        ("spacederivKmu", dnorm, -1.0),
        ("KmuLp_1_1", supk, -(grid.n + 2.0)),
        ("heat1_GmuDot_L1", gdot, 1.0),
    ]
    checks = {}
    for eid, vals, pred in series:
        slope = loglog_slope(mus, vals)
        err = abs(slope - pred) / abs(pred) if pred else abs(slope - pred)
        for mu, v in zip(mus, vals):
            rows.append(EstimateRow(eid, mu, v, pred, slope, err))
        checks[eid] = (max(vals) <= 1 + 1e-6) if eid == "normKmu" else err <= 0.10
    for mu, v in zip(mus, outside):
        rows.append(EstimateRow("support_GmuDot", mu, v, float("nan")))
    checks["support_GmuDot"] = all(v == 0.0 for v in outside)
    notes = [f"time window truncated to [{grid.T0:g}, {grid.T1:g}] with dt = {grid.dt:g}",
             "normKmu reports max over N in {1, 2} of the discrete kernel l1 norm"]
    report = EstimatesReport(rows, checks, notes)
    if report_path is not None:
        report.write(report_path)
    return report
