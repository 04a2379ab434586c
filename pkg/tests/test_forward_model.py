import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from emg_iae.forward_model import (
    ElectrodeArray,
    EstimatedParams,
    FibreParams,
    GeometryError,
    MotorUnit,
    SamplingGrid,
    VolumeConductorConfig,
    fibre_kernel_h,
    fibre_matrix,
    fibre_potential,
    intracellular_action_potential,
    mean_fibre_potential_with_gradient,
    motor_unit_matrix,
    motor_unit_potential,
)
from oracles import fd_mean_fibre_grad, quad_fibre_potential, scaled_rel_err

A, B = 96.0, 90.0


# --- intracellular action potential ------------------------------------------

def test_iap_resting_at_and_before_front():
    assert intracellular_action_potential(0.0) == -B
    assert intracellular_action_potential(-3.0) == -B
    assert np.all(intracellular_action_potential(np.array([-10.0, -1e-9])) == -B)


def test_iap_peak_at_three_by_grid_search():
    s = np.arange(0.0, 20.0 + 1e-9, 1e-4)
    vals = intracellular_action_potential(s)
    assert s[np.argmax(vals)] == pytest.approx(3.0, abs=1e-4)
    assert vals.max() == pytest.approx(A * 27 * math.exp(-3) - B)


def test_iap_continuous_at_zero():
    eps = 1e-8
    assert abs(intracellular_action_potential(eps) - intracellular_action_potential(-eps)) < 1e-20


# --- kernel ----------------------------------------------------------------------

def _direct_kernel(x, p, t, z, cfg):
    # closed form written out again: lam^2 psi''(s) / (4 pi sigma r), scaled to volts
    s = cfg.ap_scale * (p.v * t - abs(z - p.iz))
    d2 = 0.0 if s <= 0 else A * (6 * s - 6 * s * s + s ** 3) * math.exp(-s)
    r = math.dist(x, (z, p.lateral_offset, -p.depth))
    return cfg.source_scale * 1e-3 * cfg.ap_scale ** 2 * d2 / (4 * math.pi * cfg.conductivity * r)


def test_kernel_zero_before_wave_arrives(shallow_fibre, vc):
    # at t = 1 ms the fronts are 4 mm from iz
    assert fibre_kernel_h((0.0, 0.0, 0.0), shallow_fibre, 1e-3, shallow_fibre.iz + 0.02, vc) == 0.0
    assert fibre_kernel_h((0.0, 0.0, 0.0), shallow_fibre, 1e-3, shallow_fibre.iz - 0.02, vc) == 0.0


def test_kernel_mirror_symmetry(shallow_fibre, vc):
    p = shallow_fibre
    for d_obs, d_src, t in ((0.013, 0.004, 2e-3), (0.05, 0.01, 4e-3), (0.0, 0.02, 6e-3)):
        a = fibre_kernel_h((p.iz + d_obs, 0.0, 0.0), p, t, p.iz + d_src, vc)
        b = fibre_kernel_h((p.iz - d_obs, 0.0, 0.0), p, t, p.iz - d_src, vc)
        assert a == pytest.approx(b, rel=1e-13)


def test_kernel_spot_values_match_direct_formula(vc):
    p = FibreParams(iz=-0.004, v=3.7, length=0.15, depth=0.012, lateral_offset=0.003)
    for x, t, z in (((0.01, 0.0, 0.0), 3e-3, 0.005), ((-0.02, 0.001, 0.0), 5e-3, -0.02),
                    ((0.0, 0.0, 0.0), 1.5e-3, -0.0015)):
        assert fibre_kernel_h(x, p, t, z, vc) == pytest.approx(_direct_kernel(x, p, t, z, vc), rel=1e-12)
        assert fibre_kernel_h(x, p, t, z, vc) != 0.0


def test_kernel_rejects_coincident_electrode(vc):
    p = FibreParams(iz=0.0, v=4.0, length=0.1, depth=0.01)
    with pytest.raises(GeometryError):
        fibre_kernel_h((0.002, 0.0, -0.01), p, 1e-3, 0.002, vc)
    with pytest.raises(GeometryError):
        fibre_kernel_h((0.0, 0.0, 0.0), p, 1e-3, 0.2, vc)


# --- single-fibre potential ----------------------------------------------------

def test_potential_matches_adaptive_quadrature(vc, template, shallow_fibre):
    rng = np.random.default_rng(7)
    for p in (template.moved(0.006, 4.2), shallow_fibre):
        peak = np.abs(fibre_matrix(ElectrodeArray.linear(40, 0.195), p, SamplingGrid(5000.0, 195), vc)).max()
        for _ in range(15):
            x = (rng.uniform(-0.09, 0.09), 0.0, 0.0)
            t = rng.uniform(0.0, 0.039)
            ref = quad_fibre_potential(x, p, t, vc)
            assert abs(fibre_potential(x, p, t, vc) - ref) < 1e-9 * peak


def test_quadrature_self_convergence(template, shallow_fibre, array_cfg):
    arr, grid = array_cfg.electrode_array(), array_cfg.sampling_grid()
    base = VolumeConductorConfig()
    for p in (template.moved(0.0, 4.5), template.moved(-0.01, 3.2), shallow_fibre):
        a = fibre_matrix(arr, p, grid, base)
        b = fibre_matrix(arr, p, grid, base.model_copy(update={"quadrature_points": 2 * base.quadrature_points}))
        assert np.abs(a - b).max() < 1e-6 * np.abs(b).max()


def test_halves_contribute_equally_above_midpoint(vc):
    full = FibreParams(iz=0.0, v=4.0, length=0.12, depth=0.01)
    left = FibreParams(iz=0.0, v=4.0, length=0.06, depth=0.01, z_start=-0.06)
    right = FibreParams(iz=0.0, v=4.0, length=0.06, depth=0.01, z_start=0.0)
    t = np.arange(195) / 5000.0
    x = np.array([0.0, 0.0, 0.0])
    a = fibre_potential(x[None], left, t, vc)
    b = fibre_potential(x[None], right, t, vc)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12 * np.abs(a).max())
    np.testing.assert_allclose(a + b, fibre_potential(x[None], full, t, vc), rtol=1e-12,
                               atol=1e-12 * np.abs(a).max())


def test_peak_time_shifts_with_electrode_distance(vc):
    # shallow enough that the travelling wave, not the onset at t = 0, sets the peak
    p = FibreParams(iz=0.0, v=4.0, length=0.19, depth=0.003)
    fs = 5000.0
    t = np.arange(0.0, 0.03, 1e-6)

    def peak_time(d):
        return t[np.argmax(np.abs(fibre_potential(np.array([[d, 0.0, 0.0]]), p, t, vc)[0]))]

    for d, dd in ((0.02, 0.01), (0.03, 0.015), (-0.025, -0.01)):  # moving away from iz
        shift = peak_time(d + dd) - peak_time(d)
        assert abs(shift - abs(dd) / p.v) < 1.0 / fs


def test_causality_before_firing(shallow_fibre, vc):
    x = np.array([[0.0, 0.0, 0.0], [0.03, 0.0, 0.0]])
    assert np.all(fibre_potential(x, shallow_fibre, np.array([-1e-3, -1e-6, 0.0]), vc) == 0.0)


def test_potential_decays_with_depth(vc):
    t = np.arange(195) / 5000.0
    for d in (0.005, 0.01, 0.02):
        near = fibre_potential(np.array([[0.02, 0.0, 0.0]]), FibreParams(0.0, 4.0, 0.15, d), t, vc)[0]
        far = fibre_potential(np.array([[0.02, 0.0, 0.0]]), FibreParams(0.0, 4.0, 0.15, 2 * d), t, vc)[0]
        i = np.argmax(np.abs(near))
        assert abs(far[i]) < abs(near[i])


def test_velocity_time_rescaling_before_extinction(vc):
    p = FibreParams(iz=0.0, v=4.0, length=0.15, depth=0.01)
    c = 1.25
    q = FibreParams(iz=0.0, v=4.0 * c, length=0.15, depth=0.01)
    t = np.linspace(1e-4, 0.074 / 4.0, 60)  # fronts stay inside the 75 mm half-fibres
    x = np.array([[0.0, 0.0, 0.0], [0.03, 0.0, 0.0], [-0.05, 0.002, 0.0]])
    a = fibre_potential(x, p, t, vc)
    b = fibre_potential(x, q, t / c, vc)
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12 * np.abs(a).max())


def test_scalar_and_matrix_forms_agree(shallow_fibre, vc):
    x = np.array([[0.01, 0.0, 0.0], [0.02, 0.0, 0.0]])
    t = np.array([0.002, 0.005])
    m = fibre_potential(x, shallow_fibre, t, vc)
    assert m.shape == (2, 2)
    assert fibre_potential(x[1], shallow_fibre, t[0], vc) == m[1, 0]


# --- motor unit superposition ---------------------------------------------------

def _random_mu(rng, n):
    fibres = []
    for _ in range(n):
        iz = rng.normal(0.0, 0.003)
        fibres.append(FibreParams(iz=iz, v=rng.uniform(3.5, 5.0), length=rng.uniform(0.145, 0.155),
                                  depth=rng.uniform(0.006, 0.03), lateral_offset=rng.uniform(-0.01, 0.01)))
    return MotorUnit(tuple(fibres))


def test_single_fibre_unit_equals_fibre(shallow_fibre, vc, array_cfg):
    arr, grid = array_cfg.electrode_array(), array_cfg.sampling_grid()
    np.testing.assert_array_equal(motor_unit_matrix(arr.positions, MotorUnit((shallow_fibre,)), grid.times, vc),
                                  fibre_matrix(arr, shallow_fibre, grid, vc))


def test_two_identical_fibres_double(shallow_fibre, vc, array_cfg):
    arr, grid = array_cfg.electrode_array(), array_cfg.sampling_grid()
    two = motor_unit_matrix(arr.positions, MotorUnit((shallow_fibre, shallow_fibre)), grid.times, vc)
    np.testing.assert_array_equal(two, 2.0 * fibre_matrix(arr, shallow_fibre, grid, vc))


def test_order_independence(rng, vc, array_cfg):
    arr, grid = array_cfg.electrode_array(), array_cfg.sampling_grid()
    mu = _random_mu(rng, 37)
    ref = motor_unit_matrix(arr.positions, mu, grid.times, vc)
    scale = np.abs(ref).max()
    for _ in range(10):
        perm = rng.permutation(len(mu))
        other = motor_unit_matrix(arr.positions, MotorUnit(tuple(mu.fibres[i] for i in perm)), grid.times, vc)
        assert np.abs(other - ref).max() <= 1e-12 * scale


def test_superposition_of_unions(rng, vc, array_cfg):
    arr, grid = array_cfg.electrode_array(), array_cfg.sampling_grid()
    a, b = _random_mu(rng, 9), _random_mu(rng, 14)
    whole = motor_unit_matrix(arr.positions, a | b, grid.times, vc)
    parts = motor_unit_matrix(arr.positions, a, grid.times, vc) + motor_unit_matrix(arr.positions, b, grid.times, vc)
    assert np.abs(whole - parts).max() <= 1e-12 * np.abs(whole).max()


def test_motor_unit_potential_scalar(shallow_fibre, vc):
    mu = MotorUnit((shallow_fibre,))
    assert motor_unit_potential((0.01, 0.0, 0.0), mu, 0.004, vc) == fibre_potential((0.01, 0.0, 0.0), shallow_fibre, 0.004, vc)


# --- mean-fibre gradient ----------------------------------------------------------

def test_mean_fibre_value_equals_translated_fibre(template, vc):
    t = np.arange(195) / 5000.0
    x = ElectrodeArray.linear(40, 0.195).positions
    val, grad = mean_fibre_potential_with_gradient(x, EstimatedParams(0.0071, 3.9), template, t, vc)
    np.testing.assert_allclose(val, fibre_potential(x, template.moved(0.0071, 3.9), t, vc), rtol=1e-13, atol=0)
    assert grad.shape == (40, 195, 2)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_finite_differences(seed, template, vc):
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.002, 0.039)
    x = np.array([rng.uniform(-0.09, 0.09), 0.0, 0.0])
    p = EstimatedParams(rng.uniform(-0.02, 0.02), rng.uniform(3.0, 6.0))
    _, g = mean_fibre_potential_with_gradient(x, p, template, t, vc)
    assert scaled_rel_err(g, fd_mean_fibre_grad(x, p, template, t, vc)) < 1e-4


def test_gradient_vanishes_at_interior_extremum(template, vc):
    x, t, v = np.array([0.03, 0.0, 0.0]), 0.008, 4.0

    def value(iz):
        return mean_fibre_potential_with_gradient(x, EstimatedParams(iz, v), template, t, vc)[0]

    izs = np.linspace(-0.03, 0.03, 601)
    vals = np.array([value(iz) for iz in izs])
    # strongest interior local extremum on the grid
    interior = [i for i in range(1, 600) if (vals[i] - vals[i - 1]) * (vals[i + 1] - vals[i]) < 0]
    i = max(interior, key=lambda j: abs(vals[j]))
    sign = 1.0 if vals[i] > vals[i - 1] else -1.0
    res = minimize_scalar(lambda iz: -sign * value(iz), bracket=(izs[i - 1], izs[i], izs[i + 1]), tol=1e-12)
    g_opt = mean_fibre_potential_with_gradient(x, EstimatedParams(res.x, v), template, t, vc)[1][0]
    g_scale = max(abs(mean_fibre_potential_with_gradient(x, EstimatedParams(iz, v), template, t, vc)[1][0])
                  for iz in izs[::20])
    assert abs(g_opt) < 1e-4 * g_scale


# --- geometry types ----------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    dict(iz=0.0, v=0.0, length=0.1, depth=0.01),
    dict(iz=0.0, v=4.0, length=-0.1, depth=0.01),
    dict(iz=0.0, v=4.0, length=0.1, depth=0.0),
    dict(iz=0.2, v=4.0, length=0.1, depth=0.01, z_start=0.0),
])
def test_fibre_invariants(kwargs):
    with pytest.raises(GeometryError):
        FibreParams(**kwargs)


def test_fibre_default_centred_and_moved():
    p = FibreParams(iz=0.01, v=4.0, length=0.15, depth=0.02)
    assert p.z_start == pytest.approx(0.01 - 0.075)
    q = p.moved(-0.005, 5.0)
    assert (q.left_length, q.right_length, q.v) == pytest.approx((p.left_length, p.right_length, 5.0))


def test_array_and_grid_invariants():
    arr = ElectrodeArray.linear(40, 0.195)
    assert arr.count == 40 and arr.is_uniform()
    assert np.diff(arr.axial)[0] == pytest.approx(0.005)
    with pytest.raises(ValueError):
        ElectrodeArray(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ElectrodeArray(np.array([[0, 0, 0], [0.01, 0, 0], [0.005, 0, 0]], dtype=float))
    grid = SamplingGrid(5000.0, 195)
    assert np.allclose(np.diff(grid.times), 1 / 5000.0, atol=1e-12, rtol=0)
    with pytest.raises(ValueError):
        SamplingGrid(5000.0, 1)


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        VolumeConductorConfig(conductivity=0.0)
    with pytest.raises(ValueError):
        VolumeConductorConfig(quadrature_points=7)
    with pytest.raises(ValueError):
        VolumeConductorConfig(unknown=1.0)


@settings(max_examples=30, deadline=None)
@given(d=st.floats(-0.08, 0.08), t=st.floats(0.0, 0.039), shift=st.floats(-0.02, 0.02))
def test_translation_of_fibre_and_electrode(d, t, shift):
    # moving fibre and electrode together leaves the potential unchanged
    p = FibreParams(iz=0.0, v=4.2, length=0.15, depth=0.015)
    a = fibre_potential((d, 0.0, 0.0), p, t)
    b = fibre_potential((d + shift, 0.0, 0.0), p.moved(shift, 4.2), t)
    assert b == pytest.approx(a, rel=1e-9, abs=1e-18)
