from dataclasses import replace

import numpy as np
import pytest

from hotleg.errors import CalibrationError, InvalidArgumentError
from hotleg.flowgen import (
    K_TARGET,
    P_TARGET,
    FluidConfig,
    GeometryConfig,
    SurrogateCoeffs,
    achieved_ranges,
    actual_flow_length,
    calibrate_coefficients,
    centreline,
    generate_centerplane,
    generate_dataset,
    generate_fields,
    inlet_tke,
    reynolds_model,
    reynolds_number,
    scaled_geometry,
    station_grid,
    turbulence_intensity,
    velocity_profile,
    velocity_ratio,
)

GEOM = GeometryConfig()
FLUID = FluidConfig()
COEFFS = SurrogateCoeffs()


def grid_view(values, geom=GEOM):
    return np.asarray(values).reshape(geom.n_s, geom.n_r)


def test_scaled_geometry_examples():
    assert scaled_geometry(0.7874, 31.5).d_m == pytest.approx(0.025, rel=1e-3)
    assert scaled_geometry(0.025, 1.0).d_m == 0.025
    assert scaled_geometry(1.0, 4.0, flow_length=6.0).d_m == 0.25
    with pytest.raises(InvalidArgumentError):
        scaled_geometry(0.0, 31.5)


def test_relations_as_printed():
    assert velocity_ratio(0.15, 4.725) == pytest.approx(0.15 / 4.725)
    assert actual_flow_length(25.0, 150.0) == 3750.0
    assert reynolds_model(1e6, 31.5, 25.0) == pytest.approx(1.26e6)


def test_reynolds_number():
    assert reynolds_number(1.0, 1.0, 1.0) == 1.0
    assert reynolds_number(2.0, 0.025, 1e-6) == pytest.approx(2 * reynolds_number(1.0, 0.025, 1e-6))
    with pytest.raises(InvalidArgumentError):
        reynolds_number(-1.0, 1.0, 1.0)


def test_turbulence_intensity():
    assert turbulence_intensity(1e5) == pytest.approx(0.03794, abs=5e-6)
    assert turbulence_intensity(1.0) == pytest.approx(0.16)
    assert turbulence_intensity(1e4) > turbulence_intensity(1e5)
    with pytest.raises(InvalidArgumentError):
        turbulence_intensity(0.0)


def test_grid_sizes():
    assert GeometryConfig.paper().n_points == 11340
    assert GEOM.n_points == 1260
    assert generate_centerplane(GEOM).shape == (1260, 3)


def test_grid_within_pipe_bounds():
    coords = generate_centerplane(GEOM)
    s, _ = station_grid(GEOM)
    centre, _ = centreline(s, GEOM)
    lo, hi = centre.min(axis=0) - GEOM.d_m / 2, centre.max(axis=0) + GEOM.d_m / 2
    assert np.all(coords[:, :2] >= lo - 1e-12) and np.all(coords[:, :2] <= hi + 1e-12)
    assert np.all(coords[:, 2] == 0.0)
    # every node sits at most half a diameter from its station's centreline point
    dist = np.linalg.norm(coords[:, :2].reshape(GEOM.n_s, GEOM.n_r, 2) - centre[:, None], axis=-1)
    assert dist.max() <= GEOM.d_m / 2


def test_profile_normalisation():
    _, r = station_grid(GEOM)
    eta = 2 * r / GEOM.d_m
    assert np.mean(velocity_profile(eta)) == pytest.approx(1.0, rel=5e-3)


def test_fields_monotone_between_range_ends():
    lo = generate_fields(0.63, GEOM, FLUID, COEFFS)
    hi = generate_fields(0.83, GEOM, FLUID, COEFFS)
    assert np.all(np.abs(hi) > np.abs(lo))


def test_fields_monotone_across_range():
    vs = np.linspace(0.63, 0.83, 21)
    f = np.stack([generate_fields(v, GEOM, FLUID, COEFFS) for v in vs])
    assert np.all(np.diff(np.abs(f), axis=0) > 0)


def test_pressure_outer_wall_high_in_bend():
    s, _ = station_grid(GEOM)
    in_bend = (s >= GEOM.bend_start) & (s <= GEOM.bend_end)
    for v in (0.63, 0.73, 0.83):
        p = grid_view(generate_fields(v, GEOM, FLUID, COEFFS)[0])
        # column 0 is the outer wall (r < 0), the last column the inner wall
        assert np.all(p[in_bend, 0] - p[in_bend, -1] > 0)


def test_tke_positive_and_rises_downstream():
    s, _ = station_grid(GEOM)
    for v in (0.63, 0.83):
        k = grid_view(generate_fields(v, GEOM, FLUID, COEFFS)[2])
        assert np.all(k > 0)
        assert k[s > GEOM.bend_end].mean() > k[s < GEOM.bend_start].mean()


def test_inlet_tke_matches_intensity():
    for v in (0.63, 0.7, 0.83):
        k = grid_view(generate_fields(v, GEOM, FLUID, COEFFS)[2])
        re = reynolds_number(v, GEOM.d_m, FLUID.viscosity)
        assert np.allclose(np.sqrt(2 * k[0] / 3) / v, turbulence_intensity(re), rtol=0, atol=1e-10)
        assert np.allclose(k[0], inlet_tke(v, GEOM, FLUID), rtol=1e-12)


def test_velocity_skews_towards_inner_wall_in_bend():
    s, _ = station_grid(GEOM)
    i = np.argmin(np.abs(s - GEOM.bend_centre))
    v = grid_view(generate_fields(0.73, GEOM, FLUID, COEFFS)[1])
    assert v[i, -1] > v[i, 0]


def test_skew_recovers_further_downstream_at_higher_velocity():
    s, _ = station_grid(GEOM)
    j = np.argmin(np.abs(s - (GEOM.bend_centre + 4 * GEOM.d_m)))

    def relative_skew(v_in):
        v = grid_view(generate_fields(v_in, GEOM, FLUID, COEFFS)[1])
        return (v[j, -1] - v[j, 0]) / v_in

    flat = replace(COEFFS, skew_shift_exponent=0.0, skew_exponent=0.0)
    lo = grid_view(generate_fields(0.63, GEOM, FLUID, flat)[1])[j] / 0.63
    hi = grid_view(generate_fields(0.83, GEOM, FLUID, flat)[1])[j] / 0.83
    assert np.allclose(lo, hi)
    assert relative_skew(0.83) > 2 * relative_skew(0.63)


def test_dataset_determinism_and_shape():
    a = generate_dataset(20, GEOM, seed=5)
    b = generate_dataset(20, GEOM, seed=5)
    assert a.fingerprint() == b.fingerprint()
    assert a.fields.shape == (20, 3, 1260)
    assert np.all((a.inputs >= 0.63) & (a.inputs <= 0.83))
    assert a.meta["generator"]["seed"] == 5
    assert generate_dataset(20, GEOM, seed=6).fingerprint() != a.fingerprint()


def test_dataset_guards():
    with pytest.raises(InvalidArgumentError):
        generate_dataset(0)
    with pytest.raises(InvalidArgumentError):
        generate_dataset(5, v_range=(0.8, 0.8))


def test_noise_is_opt_in_and_seeded():
    clean = generate_dataset(5, GEOM, seed=1)
    noisy = generate_dataset(5, GEOM, coeffs=replace(COEFFS, noise=0.01), seed=1)
    again = generate_dataset(5, GEOM, coeffs=replace(COEFFS, noise=0.01), seed=1)
    assert not np.array_equal(clean.fields, noisy.fields)
    assert np.array_equal(noisy.fields, again.fields)
    assert np.all(np.sign(noisy.fields) == np.sign(clean.fields))
    with pytest.raises(InvalidArgumentError):
        SurrogateCoeffs(noise=-0.1)


def test_default_coefficients_meet_target_ranges():
    ach = achieved_ranges(GEOM, FLUID, COEFFS)
    for name, (lo, hi) in (("P", P_TARGET), ("k", K_TARGET)):
        span = hi - lo
        assert abs(ach[name][0] - lo) <= 0.05 * span
        assert abs(ach[name][1] - hi) <= 0.05 * span
    assert -242.8 <= ach["P"][0] <= -219.7


def test_achieved_ranges_match_exhaustive_scan():
    ds = generate_dataset(200, GEOM, seed=0)
    ach = achieved_ranges(GEOM, FLUID, COEFFS)
    for i, name in enumerate(("P", "V_o", "k")):
        lo, hi = ach[name]
        assert ds.fields[:, i].min() >= lo - 1e-12 and ds.fields[:, i].max() <= hi + 1e-12


def test_calibration_fixed_point():
    res = calibrate_coefficients()
    assert not res.changed and res.coeffs == COEFFS


def test_calibration_recovers_from_detuned_coefficients():
    detuned = replace(COEFFS, friction=0.3, bend_pressure=1.2, bend_suction=2.4, tke_amplification=5.0)
    res = calibrate_coefficients(coeffs=detuned)
    assert res.changed
    for name, (lo, hi) in (("P", P_TARGET), ("k", K_TARGET)):
        span = hi - lo
        assert abs(res.achieved[name][0] - lo) <= 0.05 * span
        assert abs(res.achieved[name][1] - hi) <= 0.05 * span


def test_calibration_rejects_inverted_and_unreachable_targets():
    with pytest.raises(InvalidArgumentError):
        calibrate_coefficients({"P": (132.7, -231.25)})
    # the TKE floor is fixed by the inlet correlation; a far lower floor is unreachable
    with pytest.raises(CalibrationError) as info:
        calibrate_coefficients({"k": (1e-6, 0.019015)}, tol=0.01)
    assert info.value.achieved is not None
