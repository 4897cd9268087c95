import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowforge.errors import DomainError, ResolutionError
from flowforge.kernels import GridSpec, heat_semigroup, mollifier_space_symbol, rfft_space, irfft_space, covariance_multiplier
from flowforge.multiindex import PreMultiIndex, derive_params
from flowforge.simulator import (
    Counterterm,
    NoiseSource,
    NonlinearitySpec,
    Patch,
    ScalarFn,
    SimConfig,
    _time_kernel,
    build_counterterm,
    convergence_study,
    flow_coefficient,
    leading_counterterm,
    parse_counterterm_mode,
    sample_noise,
    second_order_constant,
    solve_regularized,
    stepped_cutoff_kernel,
)

import oracles

HALF = derive_params(Fraction(1, 2))
HH = PreMultiIndex.from_mapping({"h": (1, 1)})


@settings(max_examples=40)
@given(st.sampled_from(["cos", "sin", "tanh", "exp", "poly[1,-2,1/3,1/4]"]), st.floats(-2, 2), st.integers(0, 4))
def test_scalar_derivatives(name, x, k):
    f = ScalarFn(name)
    h = 1e-4
    fd = (f(x + h, k) - f(x - h, k)) / (2 * h)
    assert abs(fd - f(x, k + 1)) < 1e-5 * max(1.0, abs(f(x, k + 1)))


def test_scalar_registry():
    assert ScalarFn("const[1/4]")(np.array([3.0]))[0] == 0.25
    assert ScalarFn("const[1/4]")(np.array([3.0]), 1)[0] == 0.0
    assert ScalarFn("zero").is_zero and ScalarFn("poly[0,0]").is_zero
    with pytest.raises(DomainError):
        ScalarFn("sqrt")
    with pytest.raises(DomainError):
        ScalarFn("const")


def test_nonlinearity_contract():
    nl = NonlinearitySpec.build(2, g="const[1]", h="cos")
    assert nl.g[0][1].is_zero and not nl.g[1][1].is_zero
    with pytest.raises(DomainError):
        NonlinearitySpec.build(2, g=[["cos", "sin"], ["cos", "cos"]])
    with pytest.raises(DomainError):
        NonlinearitySpec.build(1, h="cos", order=3).check(HALF)  # Gamma + 1 = 9
    assert not NonlinearitySpec.build(1, b="tanh", h="cos").has_gradient_terms


G_NOISE = GridSpec(1, 64, 0.0, 0.25, 2.5e-5)


def test_noise_deterministic():
    a = sample_noise(HALF, G_NOISE, 7, 1 / 8)
    b = sample_noise(HALF, G_NOISE, 7, 1 / 8)
    assert np.array_equal(a.values, b.values)
    c = sample_noise(HALF, G_NOISE, 8, 1 / 8)
    assert not np.array_equal(a.values, c.values)


@pytest.mark.parametrize("alpha", [Fraction(1, 2), Fraction(3, 4)])
def test_noise_spectrum(alpha):
    p = derive_params(alpha)
    xi = sample_noise(p, G_NOISE, 1, None).values[:10000]
    X = np.fft.rfft(xi, axis=1)
    emp = np.mean(np.abs(X) ** 2, axis=0) * G_NOISE.dt * G_NOISE.dx / G_NOISE.M
    mult = covariance_multiplier(alpha, 1, G_NOISE)
    for k in range(1, 9):
        assert abs(emp[k] / mult[k] - 1) < 0.05
    if alpha == Fraction(1, 2):
        assert np.all(mult == 1.0)


def test_noise_coupling_reconstruction():
    g = GridSpec(1, 64, 0.0, 0.05, 1e-4)
    src = NoiseSource(HALF, g, 3, 1 / 8)
    e1, e2 = 1 / 8, 1 / 16

    def rebuild(eps):
        # direct lag sum on the stored base noise, then the spatial symbol
        w = _time_kernel(eps, g.dt)
        J = (len(w) - 1) // 2
        out = np.zeros(g.shape)
        for j, wj in enumerate(w):
            lag = j - J
            out += wj * src.base[src.pad - lag:src.pad - lag + g.nt]
        return irfft_space(rfft_space(out, 1) * mollifier_space_symbol(eps, g), 1, g.M)

    diff = src.field(e1).values - src.field(e2).values
    ref = rebuild(e1) - rebuild(e2)
    assert np.max(np.abs(diff - ref)) < 1e-9 * np.max(np.abs(ref))
    # the ladder shares one base: the smaller eps drawn alone sees the same noise
    alone = sample_noise(HALF, g, 3, e2, eps_max=e1)
    assert np.array_equal(alone.values, src.field(e2).values)


def test_noise_resolution_guard():
    with pytest.raises(ResolutionError):
        sample_noise(HALF, G_NOISE, 0, 1 / 32)


G512 = GridSpec(1, 512, 0.0, 1.0, 2.0**-20)


@pytest.mark.parametrize("alpha,eps", [(Fraction(1, 2), 1 / 8), (Fraction(1, 2), 1 / 32), (Fraction(3, 4), 1 / 16)])
def test_leading_counterterm_dual_route(alpha, eps):
    c = leading_counterterm(derive_params(alpha), eps, G512)
    ref = oracles.counterterm_closed_form(float(alpha), eps, 512)
    assert c > 0
    assert abs(c / ref - 1) < 1e-7


def test_second_constant_identity():
    for eps in (1 / 8, 1 / 16, 1 / 32):
        c1 = leading_counterterm(HALF, eps, G512)
        assert abs(second_order_constant(HALF, eps, G512) - (c1 - 0.5)) < 1e-9 * c1


def test_counterterm_modes():
    assert [parse_counterterm_mode(m) for m in ("off", "leading", "catalog[3]")] == [0, 1, 3]
    with pytest.raises(DomainError):
        parse_counterterm_mode("full")
    g = GridSpec(1, 256, 0.0, 0.1, 1e-5)
    lead = build_counterterm(HALF, 1 / 16, g, "leading")
    assert lead.c2 == 0 and len(lead.catalog) == 1 and not lead.warnings
    cat = build_counterterm(HALF, 1 / 16, g, "catalog[2]")
    assert cat.c1 == lead.c1 and cat.c2 > 0
    assert cat.warnings and all("set to 0" in w for w in cat.warnings)
    sigs = {r["signature"]: r["status"] for r in cat.catalog}
    assert sigs["h·h′"] == "computed" and sigs["g·h·h"] == "computed"
    nl = NonlinearitySpec.build(1, h="cos")
    x = np.linspace(-1, 1, 7)
    flipped = Counterterm(lead.eps, lead.c1, 0.0, sign=-1)
    assert np.allclose(flipped(x, nl), -lead(x, nl))
    assert np.allclose(lead(x, nl), -lead.c1 * (-np.sin(x)) * np.cos(x))


def _cfg(**kw):
    base = dict(params=HALF, M=64, T=0.02, eps_ladder=(1 / 8,), snapshots=10)
    base.update(kw)
    return SimConfig.make(**base)


def test_config_validation():
    with pytest.raises(DomainError):
        _cfg(T=1.5)
    with pytest.raises(DomainError):
        _cfg(eps_ladder=(1 / 16, 1 / 8))
    with pytest.raises(ResolutionError):
        _cfg(eps_ladder=(1 / 32,))
    with pytest.raises(DomainError):
        _cfg(counterterm_mode="all")
    cfg = _cfg()
    assert cfg.grid.dt <= (1 / 64) ** 2 / 4 and cfg.grid.steps % 10 == 0


def test_heat_flow_exact():
    x = np.arange(64) / 64
    init = np.sin(2 * np.pi * x) + 0.3 * np.cos(6 * np.pi * x) + 0.5
    cfg = _cfg(initial=init, counterterm_mode="off")
    res = solve_regularized(cfg, NonlinearitySpec.build(1))
    ref = heat_semigroup(init, cfg.grid.T1, 1)
    assert np.max(np.abs(res.final - ref)) < 1e-8
    assert not res.blown_up


def test_zero_solution_exact():
    cfg = _cfg(counterterm_mode="leading")
    res = solve_regularized(cfg, NonlinearitySpec.build(1))
    assert np.count_nonzero(res.field.values) == 0


def test_blowup_marked():
    # psi' = psi^2 from psi = 2 blows up at t = 1/2
    cfg = SimConfig.make(HALF, 16, 1.0, (1 / 4,), dt=1e-4, snapshots=100,
                         initial=np.full(16, 2.0), counterterm_mode="off")
    res = solve_regularized(cfg, NonlinearitySpec.build(1, b="poly[0,0,1]"))
    assert res.blown_up and abs(res.blowup_time - 0.5) < 0.01
    assert np.all(np.isfinite(res.field.values))


def test_gpam_accepts_rough_data():
    x = np.arange(64) / 64
    step = np.where(x < 0.5, 1.0, -1.0) * 50
    cfg = _cfg(initial=step, counterterm_mode="leading", gradient_bound=10.0)
    res = solve_regularized(cfg, NonlinearitySpec.build(1, h="cos"))
    assert not res.blown_up
    with pytest.raises(DomainError):
        solve_regularized(cfg, NonlinearitySpec.build(1, g="const[1/4]", h="cos"))


def test_study_single_eps_and_determinism():
    cfg = _cfg(mc_samples=2, seed=11)
    nl = NonlinearitySpec.build(1, g="const[1/4]", h="cos")
    rep = convergence_study(cfg, nl, workers=1)
    assert rep.pairs["on"] == [] and rep.pairs["off"] == []
    assert len(rep.per_eps["on"]) == 1
    again = convergence_study(cfg, nl, workers=1)
    a, b = rep.to_json_obj(), again.to_json_obj()
    a.pop("runtime_s"), b.pop("runtime_s")
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_study_pairs_and_tables():
    cfg = _cfg(eps_ladder=(1 / 4, 1 / 8, 1 / 16), mc_samples=2, counterterm_mode="catalog[2]")
    rep = convergence_study(cfg, NonlinearitySpec.build(1, g="const[1/4]", h="cos"), workers=1)
    assert len(rep.pairs["on"]) == 2 and all(math.isfinite(v) for v in rep.sup_medians("on"))
    assert all(math.isfinite(r["besov_median"]) for r in rep.pairs["off"])
    tables = rep.tables()
    assert tables["pairs.csv"].startswith("mode,eps,eps_next,sup_median")
    assert len(tables["constants.csv"].splitlines()) == 4


def test_stepped_kernel_matches_closed_form():
    patch = Patch(1 / 8)
    K = stepped_cutoff_kernel(patch)
    z = patch.lag_positions()
    for j, m in [(0, 0), (1, 0), (3, 1), (9, 0), (12, 2), (17, 23)]:
        ref = oracles.cutoff_heat_cell(patch.mu, patch.dt, patch.dx, patch.length, j, z[m])
        assert abs(K[j, m] - ref) < 1e-6 * np.max(K)
    J = int(math.ceil(2 * patch.mu**2 / patch.dt))
    assert np.all(K[J + 1:] == 0.0)


def test_flow_coefficient_support_and_contract():
    res = flow_coefficient(HH, HALF, mus=(1 / 8, 1 / 16), samples=2, seed=1)
    assert res.outside_mass < 1e-8 and res.renormalized and res.flow_terms == 1
    with pytest.raises(DomainError):
        flow_coefficient(PreMultiIndex.from_mapping({"h": (1, 2)}), HALF, samples=1)
    with pytest.raises(DomainError):
        flow_coefficient(HH, derive_params(1, 2), samples=1)


def test_order_zero_constant_in_mu():
    h0 = PreMultiIndex.unit("h")
    res = flow_coefficient(h0, HALF, mus=(1 / 8, 1 / 16), samples=2, seed=4)
    assert res.flow_terms == 0 and res.kernel_sup == [0.0, 0.0]
    # the stored field is the untouched initial noise of each patch
    rng = np.random.default_rng(np.random.SeedSequence(4, spawn_key=(1, 0)))
    patch = Patch(1 / 16)
    xi = rng.standard_normal((patch.nt, patch.nx)) / math.sqrt(patch.dt * patch.dx)
    assert np.array_equal(res.fields[1], xi)
    b0 = flow_coefficient(PreMultiIndex.unit("b"), HALF, mus=(1 / 8, 1 / 16), samples=1)
    assert np.all(b0.fields[0] == 1.0) and abs(b0.fitted_exponent) < 1e-9
