"""Analytic centre-plane fields for a scaled hot-leg elbow.

Replaces a RANS solve with closed-form fields that keep the qualitative
structure of the real flow: a 1/7 power-law velocity profile skewed through
the bend, streamwise friction loss with a cross-stream bend gradient (outer
wall high, inner wall low), and inlet turbulence from the intensity
correlation amplified downstream of the elbow.

Node coordinates ``(s, r)`` are arc length along the pipe centreline and the
signed transverse offset, with ``r > 0`` towards the centre of curvature
(the inner wall of the bend).
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dataset import ScenarioDataset
from .errors import CalibrationError, InvalidArgumentError

log = logging.getLogger(__name__)

V_RANGE = (0.63, 0.83)
P_TARGET = (-231.25, 132.7)
K_TARGET = (0.000875, 0.019015)


@dataclass
class GeometryConfig:
    d_m: float = 0.025              # model pipe diameter, m
    flow_length: float = 0.150      # centreline length, m
    elbow_angle: float = 120.0      # degrees swept by the bend
    n_s: int = 63
    n_r: int = 20
    bend_radius: float = 1.5        # centreline bend radius, in diameters
    inlet_share: float = 1.0 / 3.0  # share of the straight length placed upstream

    def __post_init__(self):
        if self.d_m <= 0 or self.flow_length <= 0:
            raise InvalidArgumentError("d_m and flow_length must be positive")
        if not 0.0 < self.elbow_angle < 180.0:
            raise InvalidArgumentError("elbow_angle must be in (0, 180)")
        if self.n_s < 2 or self.n_r < 2:
            raise InvalidArgumentError("need at least 2 x 2 stations")
        if self.bend_radius <= 0.5:
            raise InvalidArgumentError("bend_radius must exceed half a diameter")
        if self.arc_length >= self.flow_length:
            raise InvalidArgumentError("bend does not fit in flow_length")

    @property
    def n_points(self):
        return self.n_s * self.n_r

    @property
    def radius(self):
        return self.bend_radius * self.d_m

    @property
    def arc_length(self):
        return self.radius * np.deg2rad(self.elbow_angle)

    @property
    def bend_start(self):
        return (self.flow_length - self.arc_length) * self.inlet_share

    @property
    def bend_end(self):
        return self.bend_start + self.arc_length

    @property
    def bend_centre(self):
        return self.bend_start + 0.5 * self.arc_length

    @classmethod
    def paper(cls):
        return cls(n_s=189, n_r=60)


@dataclass
class ScalingRelation:
    lam: float = 31.5       # geometric scale factor d_a / d_m
    d_a: float = 0.7874     # actual hot-leg inner diameter, m


@dataclass
class FluidConfig:
    # representative pressurised water near 594 K; not values taken from CFD
    density: float = 705.0          # kg/m^3
    viscosity: float = 1.2e-7       # kinematic, m^2/s
    inlet_temperature: float = 594.3

    def __post_init__(self):
        if self.density <= 0 or self.viscosity <= 0:
            raise InvalidArgumentError("density and viscosity must be positive")


@dataclass
class SurrogateCoeffs:
    # defaults calibrated to the target P and k ranges over v in [0.63, 0.83]
    friction: float = 0.0941851      # C_f
    bend_pressure: float = 0.429038  # K_b, cross-stream bend gradient
    bend_suction: float = 0.858077   # K_s, centreline pressure dip through the bend
    velocity_skew: float = 0.25      # alpha
    tke_amplification: float = 15.7691   # A_k
    bend_width: float = 1.0          # sigma, Gaussian width of the bend bump in diameters
    skew_exponent: float = 2.0       # alpha grows as (v / v_ref)**skew_exponent
    skew_shift_exponent: float = 2.0  # skew recovery length grows as (v / v_ref)**exponent
    tke_shift_exponent: float = 1.0  # TKE peak distance grows as (v / v_ref)**exponent
    tke_length: float = 0.5          # TKE development length, fraction of the arc (+ one diameter)
    tke_wall_power: float = 6.0      # concentration of the TKE rise at the inner wall
    tke_wall_floor: float = 0.05     # share of the rise reaching the outer wall
    v_ref: float = 0.73
    noise: float = 0.0               # multiplicative noise amplitude
    seed: int = 0

    def __post_init__(self):
        vals = [v for k, v in asdict(self).items() if k != "seed"]
        if not np.all(np.isfinite(vals)):
            raise InvalidArgumentError("coefficients must be finite")
        if self.noise < 0:
            raise InvalidArgumentError("noise amplitude must be >= 0")
        if self.v_ref <= 0:
            raise InvalidArgumentError("v_ref must be positive")
        if self.tke_length <= 0 or self.tke_wall_power <= 0 or not 0.0 <= self.tke_wall_floor <= 1.0:
            raise InvalidArgumentError("tke_length and tke_wall_power must be > 0, tke_wall_floor in [0, 1]")
        if not 0.0 <= self.velocity_skew < 1.0:
            raise InvalidArgumentError("velocity_skew must be in [0, 1)")


# --- scaling relations ----------------------------------------------------


def scaled_geometry(d_a, lam, **kw):
    if d_a <= 0 or lam <= 0:
        raise InvalidArgumentError("d_a and lambda must be positive")
    return GeometryConfig(d_m=d_a / lam, **kw)


def velocity_ratio(l_m, l_a):
    """v_m / v_a from equal flow rate per unit volume."""
    if l_m <= 0 or l_a <= 0:
        raise InvalidArgumentError("lengths must be positive")
    return l_m / l_a


def actual_flow_length(d_m, l_m):
    """``l_a = d_m * l_m`` exactly as printed; dimensionally inconsistent (see README)."""
    return d_m * l_m


def reynolds_number(v, d, nu):
    if np.any(np.asarray(v) <= 0) or d <= 0 or nu <= 0:
        raise InvalidArgumentError("v, d and nu must be positive")
    return np.asarray(v) * d / nu


def reynolds_model(re_a, lam, d_m):
    """``Re_m = Re_a * lam / d_m`` as printed; ``d_m`` in whatever unit the caller records."""
    if re_a <= 0 or lam <= 0 or d_m <= 0:
        raise InvalidArgumentError("inputs must be positive")
    return re_a * lam / d_m


def turbulence_intensity(re):
    re = np.asarray(re, dtype=np.float64)
    if np.any(re <= 0):
        raise InvalidArgumentError("Reynolds number must be positive")
    return 0.16 * re ** (-1.0 / 8.0)


def inlet_tke(v_in, geom, fluid):
    """k from I = sqrt(2k/3) / U, i.e. k = 1.5 (I U)^2."""
    v_in = np.asarray(v_in, dtype=np.float64)
    i = turbulence_intensity(reynolds_number(v_in, geom.d_m, fluid.viscosity))
    return 1.5 * (i * v_in) ** 2


# --- geometry ----------------------------------------------------------------


def station_grid(geom):
    """Arc-length stations ``s`` (n_s,) and cell-centred offsets ``r`` (n_r,)."""
    s = np.linspace(0.0, geom.flow_length, geom.n_s)
    eta = -1.0 + (2.0 * np.arange(geom.n_r) + 1.0) / geom.n_r
    return s, 0.5 * geom.d_m * eta


def centreline(s, geom):
    """Centreline points and unit normals (towards the centre of curvature)."""
    s = np.asarray(s, dtype=np.float64)
    s0, s1, rad = geom.bend_start, geom.bend_end, geom.radius
    theta = np.deg2rad(geom.elbow_angle)
    phi = np.clip((s - s0) / rad, 0.0, theta)       # heading angle
    x = np.where(s <= s0, s, s0 + rad * np.sin(phi))
    y = np.where(s <= s0, 0.0, rad * (1.0 - np.cos(phi)))
    after = s > s1
    x = np.where(after, s0 + rad * np.sin(theta) + (s - s1) * np.cos(theta), x)
    y = np.where(after, rad * (1.0 - np.cos(theta)) + (s - s1) * np.sin(theta), y)
    normal = np.stack([-np.sin(phi), np.cos(phi)], axis=-1)
    return np.stack([x, y], axis=-1), normal


def generate_centerplane(geom):
    """(N, 3) node coordinates on the symmetry plane, s-major ordering."""
    s, r = station_grid(geom)
    pts, nrm = centreline(s, geom)
    xy = pts[:, None, :] + r[None, :, None] * nrm[:, None, :]
    coords = np.zeros((geom.n_s, geom.n_r, 3))
    coords[..., :2] = xy
    return coords.reshape(-1, 3)


# --- fields ---------------------------------------------------------------


def bend_bump(s, geom, coeffs, stretch=1.0):
    """Gaussian centred on the arc; twice as wide downstream as upstream,
    with the downstream side scaled by ``stretch``."""
    w = coeffs.bend_width * geom.d_m
    ds = np.asarray(s) - geom.bend_centre
    width = np.where(ds <= 0, w, 2.0 * w * stretch)
    return np.exp(-0.5 * (ds / width) ** 2)


def tke_shape(s, r, geom, stretch=1.0, length=0.5, power=6.0, floor=0.05):
    """Non-negative amplification weight: zero up to the bend entry, peaking
    ``stretch * (length * arc + d)`` past it, concentrated in the shear layer
    along the inner wall."""
    ell = (geom.arc_length * length + geom.d_m) * stretch
    x = np.clip((np.asarray(s) - geom.bend_start) / ell, 0.0, None)
    along = x * x * np.exp(1.0 - x * x)
    across = floor + (1.0 - floor) * ((1.0 + 2.0 * np.asarray(r) / geom.d_m) / 2.0) ** power
    return along * across


def velocity_profile(eta):
    """Unskewed 1/7 power-law profile normalised to unit chord average."""
    return (8.0 / 7.0) * (1.0 - np.abs(eta)) ** (1.0 / 7.0)


def _field_kernels(geom, coeffs):
    """Per-node factors that are independent of the inlet velocity."""
    s, r = station_grid(geom)
    S, R = np.meshgrid(s, r, indexing="ij")
    eta = 2.0 * R / geom.d_m
    g = bend_bump(S, geom, coeffs)
    prof = velocity_profile(eta)
    pres = (coeffs.friction * (geom.flow_length - S) / geom.d_m
            - coeffs.bend_pressure * g * eta
            - coeffs.bend_suction * g)
    return {"vel": prof.reshape(-1), "skew": (prof * eta).reshape(-1),
            "pres": pres.reshape(-1), "s": S.reshape(-1), "r": R.reshape(-1)}


def skew_amplitude(v_in, coeffs):
    """Bend skew of the velocity profile; secondary flow strengthens with Re."""
    return coeffs.velocity_skew * (v_in / coeffs.v_ref) ** coeffs.skew_exponent


def generate_fields(v_in, geom, fluid, coeffs, _kernels=None):
    """(3, N) fields P [Pa], V_o [m/s], k [m^2/s^2] for one inlet velocity."""
    if not V_RANGE[0] <= v_in <= V_RANGE[1]:
        log.warning("inlet velocity %.4f outside the nominal range %s", v_in, V_RANGE)
    kern = _kernels or _field_kernels(geom, coeffs)
    q = 0.5 * fluid.density * v_in ** 2
    recovery = (v_in / coeffs.v_ref) ** coeffs.skew_shift_exponent
    vel = kern["vel"] + skew_amplitude(v_in, coeffs) * bend_bump(kern["s"], geom, coeffs, recovery) * kern["skew"]
    stretch = (v_in / coeffs.v_ref) ** coeffs.tke_shift_exponent
    tke = 1.0 + coeffs.tke_amplification * tke_shape(kern["s"], kern["r"], geom, stretch, coeffs.tke_length,
                                                     coeffs.tke_wall_power, coeffs.tke_wall_floor)
    return np.stack([q * kern["pres"], v_in * vel, inlet_tke(v_in, geom, fluid) * tke])


def generate_dataset(m, geom=None, fluid=None, coeffs=None, seed=0, v_range=V_RANGE):
    geom = geom or GeometryConfig()
    fluid = fluid or FluidConfig()
    coeffs = coeffs or SurrogateCoeffs()
    if m < 1:
        raise InvalidArgumentError("need at least one scenario")
    lo, hi = v_range
    if not hi > lo:
        raise InvalidArgumentError(f"empty velocity range {v_range}")
    rng = np.random.default_rng(seed)
    v = rng.uniform(lo, hi, size=m)
    kernels = _field_kernels(geom, coeffs)
    fields = np.stack([generate_fields(vi, geom, fluid, coeffs, kernels) for vi in v])
    if coeffs.noise > 0:
        noise_rng = np.random.default_rng(coeffs.seed)
        # log-normal factor keeps the sign of P and the positivity of k
        fields *= np.exp(coeffs.noise * noise_rng.standard_normal(fields.shape))
    meta = {
        "generator": {
            "kind": "analytic-elbow",
            "seed": seed,
            "v_range": list(v_range),
            "geometry": asdict(geom),
            "fluid": asdict(fluid),
            "coeffs": asdict(coeffs),
        },
        "grid": {"n_s": geom.n_s, "n_r": geom.n_r},
    }
    return ScenarioDataset(generate_centerplane(geom), v[:, None], fields, meta)


# --- calibration -------------------------------------------------------------


def achieved_ranges(geom, fluid, coeffs, v_range=V_RANGE):
    """Exhaustive min/max per field over the plane at the range endpoints.

    Every node value is monotone in the inlet velocity, so the extremes over
    the whole range occur at its endpoints.
    """
    kernels = _field_kernels(geom, coeffs)
    both = np.stack([generate_fields(v, geom, fluid, coeffs, kernels) for v in v_range])
    return {name: (float(both[:, i].min()), float(both[:, i].max()))
            for i, name in enumerate(("P", "V_o", "k"))}


def _within(achieved, target, tol):
    span = target[1] - target[0]
    return (abs(achieved[0] - target[0]) <= tol * span
            and abs(achieved[1] - target[1]) <= tol * span)


def _bisect(f, lo, hi, iters=80):
    """Root of an increasing function on [lo, hi]."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class CalibrationResult:
    coeffs: SurrogateCoeffs
    achieved: dict
    targets: dict
    changed: bool = field(default=True)


def calibrate_coefficients(targets=None, geom=None, fluid=None, coeffs=None,
                           v_range=V_RANGE, tol=0.05):
    """Fit C_f, K_b (with K_s in fixed ratio) and A_k to target field ranges.

    Coefficients already meeting every target within ``tol`` of the span are
    returned unchanged. The TKE minimum is set by the inlet correlation and
    the fluid, not by any coefficient; an unreachable minimum is reported as a
    calibration failure rather than forced.
    """
    targets = dict(targets or {"P": P_TARGET, "k": K_TARGET})
    geom = geom or GeometryConfig()
    fluid = fluid or FluidConfig()
    coeffs = coeffs or SurrogateCoeffs()
    for name, (lo, hi) in targets.items():
        if name not in ("P", "k"):
            raise InvalidArgumentError(f"no calibration handle for {name!r}")
        if not hi > lo:
            raise InvalidArgumentError(f"target range for {name} has min >= max")

    achieved = achieved_ranges(geom, fluid, coeffs, v_range)
    if all(_within(achieved[n], t, tol) for n, t in targets.items()):
        return CalibrationResult(coeffs, achieved, targets, changed=False)

    q_hi = 0.5 * fluid.density * max(abs(v) for v in v_range) ** 2
    out = coeffs
    if "P" in targets:
        p_lo, p_hi = (t / q_hi for t in targets["P"])
        ratio = coeffs.bend_suction / coeffs.bend_pressure if coeffs.bend_pressure else 1.0

        def with_p(cf, kb):
            return replace(out, friction=cf, bend_pressure=kb, bend_suction=ratio * kb)

        def bracket(cf, kb):
            pres = _field_kernels(geom, with_p(cf, kb))["pres"]
            return pres.min(), pres.max()

        # coarse grid, then alternating bisection on the two monotone handles
        grid = [(cf, kb) for cf in np.linspace(0.0, 1.0, 11) for kb in np.linspace(0.0, 3.0, 13)]
        cf, kb = min(grid, key=lambda c: sum((a - b) ** 2 for a, b in zip(bracket(*c), (p_lo, p_hi))))
        for _ in range(60):
            cf = _bisect(lambda c: bracket(c, kb)[1] - p_hi, 0.0, 10.0)
            kb = _bisect(lambda k: p_lo - bracket(cf, k)[0], 0.0, 30.0)
        out = with_p(cf, kb)
    if "k" in targets:
        k_hi = targets["k"][1]
        out = replace(out, tke_amplification=_bisect(
            lambda a: achieved_ranges(geom, fluid, replace(out, tke_amplification=a), v_range)["k"][1] - k_hi,
            0.0, 1e3))

    achieved = achieved_ranges(geom, fluid, out, v_range)
    failed = {n: achieved[n] for n, t in targets.items() if not _within(achieved[n], t, tol)}
    if failed:
        raise CalibrationError(
            f"targets not reachable within {tol:.0%} of span: {failed}", achieved=achieved)
    return CalibrationResult(out, achieved, targets)
