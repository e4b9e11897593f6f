"""Active magnetic bearing rotor: physical model, weighting filters and scenarios."""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Callable

import numpy as np

from .lpv import AffineMatrices, DomainError, LpvPlant, Partition, PlantMatrices, build_grids


@dataclass(frozen=True)
class AmbParameters:
    """Rotor/bearing data in SI units."""

    pole_area: float = 1531.79e-6  # m^2
    pole_height: float = 40e-3  # m
    gap: float = 0.55e-3  # m
    inertia_radial: float = 0.333  # kg m^2
    inertia_axial: float = 0.0136  # kg m^2
    bearing_offset: float = 0.13  # m
    k: float = 4.6755576e8
    turns: int = 400
    resistance: float = 14.6  # ohm
    bias_flux: float = 2.09e-4  # Wb
    permeability: float = 4e-7 * np.pi
    effective_mass: float | None = None  # defaults to Jr / l^2

    @classmethod
    def from_mm(cls, pole_area_mm2: float = 1531.79, pole_height_mm: float = 40.0,
                gap_mm: float = 0.55, **rest) -> "AmbParameters":
        """Table-style inputs with lengths in mm (areas in mm^2); the rest in SI."""
        return cls(pole_area=pole_area_mm2 * 1e-6, pole_height=pole_height_mm * 1e-3,
                   gap=gap_mm * 1e-3, **rest)

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v is not None and not (np.isfinite(v) and v > 0):
                raise ValueError(f"AMB parameter {name} must be positive and finite")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AmbConstants:
    c1: float
    c2: float
    d1: float
    d2: float
    m: float


def derive_constants(p: AmbParameters) -> AmbConstants:
    c1 = 2 * p.k * p.bias_flux * (1 + 2 * p.gap / (np.pi * p.pole_height))
    c2 = 2 * p.k * p.bias_flux ** 2 / (np.pi * p.pole_height)
    denom = p.permeability * p.pole_area * p.turns
    d1 = 2 * p.resistance * p.gap / denom
    d2 = 2 * p.resistance * p.bias_flux / denom
    m = p.effective_mass if p.effective_mass is not None else p.inertia_radial / p.bearing_offset ** 2
    return AmbConstants(c1, c2, d1, d2, m)


STATE_NAMES = ("l_theta", "l_psi", "l_theta_dot", "l_psi_dot", "phi_theta", "phi_psi", "xd1", "xd2")


def amb_coefficients(p: AmbParameters, disturbance_damping: float = 0.0) -> dict[str, list[np.ndarray]]:
    """Open-loop matrices as ``M0 + rho * M1`` (8 states, 1 disturbance, 2 inputs, 2 outputs)."""
    c = derive_constants(p)
    N = p.turns
    A0 = np.zeros((8, 8))
    A1 = np.zeros((8, 8))
    A0[0, 2] = A0[1, 3] = 1.0
    A0[2, 0] = A0[3, 1] = -4 * c.c2 / c.m
    A0[2, 4] = A0[3, 5] = 2 * c.c1 / c.m
    A1[2, 3] = -p.inertia_axial / p.inertia_radial
    A1[3, 2] = p.inertia_axial / p.inertia_radial
    A0[4, 0] = A0[5, 1] = 2 * c.d2 / N
    A0[4, 4] = A0[5, 5] = -c.d1 / N
    # harmonic imbalance generator: exact skew block
    A1[6, 7] = -1.0
    A1[7, 6] = 1.0
    A0[6, 6] = A0[7, 7] = -disturbance_damping
    B1 = np.zeros((8, 1))
    B1[6, 0] = 1.0
    B2 = np.zeros((8, 2))
    B2[4, 0] = B2[5, 1] = 1.0 / N
    C1 = np.zeros((4, 8))
    C1[0, 0] = C1[1, 1] = 1.0
    D12 = np.zeros((4, 2))
    D12[2, 0] = D12[3, 1] = 1.0
    C2 = np.zeros((2, 8))
    C2[0, 0] = C2[1, 1] = 1.0
    C2[0, 6] = C2[1, 7] = 1.0
    Z = np.zeros
    return {"A": [A0, A1], "B1": [B1, Z((8, 1))], "B2": [B2, Z((8, 2))],
            "C1": [C1, Z((4, 8))], "D11": [Z((4, 1)), Z((4, 1))], "D12": [D12, Z((4, 2))],
            "C2": [C2, Z((2, 8))], "D21": [Z((2, 1)), Z((2, 1))], "D22": [Z((2, 2)), Z((2, 2))]}


def amb_plant(rho, p: AmbParameters | None = None) -> PlantMatrices:
    """Unweighted plant at rotor speed ``rho`` (rad/s)."""
    return AffineMatrices(amb_coefficients(p or AmbParameters()))(rho)


@dataclass(frozen=True)
class FirstOrderWeight:
    """Diagonal first-order weight ``d + c b / (s - a)`` on every channel.

    ``b`` is the input gain of the filter state; the ``b``/``c`` split is a
    realization choice that leaves the transfer function unchanged.
    """

    a: float
    bc: float
    d: float
    b: float = 1.0

    @classmethod
    def from_zero_pole(cls, gain: float, zero: float, pole: float, b: float = 1.0) -> "FirstOrderWeight":
        """``gain (s + zero) / (s + pole)``."""
        return cls(-pole, gain * (zero - pole), gain, b)

    @property
    def c(self) -> float:
        return self.bc / self.b

    def response(self, s: complex) -> complex:
        return self.d + self.bc / (s - self.a)


@dataclass(frozen=True)
class WeightFilters:
    error: FirstOrderWeight = FirstOrderWeight.from_zero_pole(30.0, 8.0, 0.001)
    control: FirstOrderWeight = FirstOrderWeight.from_zero_pole(0.01, 100.0, 1e5)
    noise: float = 0.001


def weight_filters() -> WeightFilters:
    return WeightFilters()


def weighted_coefficients(p: AmbParameters | None = None, filters: WeightFilters | None = None,
                          disturbance_damping: float = 0.0) -> dict[str, list[np.ndarray]]:
    """Generalized plant with the weights in the loop.

    States: 8 plant + 2 error-weight + 2 control-weight.  Exogenous input
    ``w = [d, n1, n2]``; performance output ``z = [We e, Wu u]``; measured
    ``y = C2 x + Wn n``.
    """
    p = p or AmbParameters()
    f = filters or WeightFilters()
    base = amb_coefficients(p, disturbance_damping)
    we, wu = f.error, f.control
    n = 12
    out: dict[str, list[np.ndarray]] = {}
    for k in range(2):
        A = np.zeros((n, n))
        A[:8, :8] = base["A"][k]
        B1 = np.zeros((n, 3))
        B2 = np.zeros((n, 2))
        C1 = np.zeros((4, n))
        D12 = np.zeros((4, 2))
        C2 = np.zeros((2, n))
        D21 = np.zeros((2, 3))
        if k == 0:
            B1[:8, :1] = base["B1"][0]
            B2[:8] = base["B2"][0]
            C2[:, :8] = base["C2"][0]
            # error weight driven by the displacements (rows 0, 1 of C1)
            A[8, 8] = A[9, 9] = we.a
            A[8, 0] = A[9, 1] = we.b
            C1[0, 0] = C1[1, 1] = we.d
            C1[0, 8] = C1[1, 9] = we.c
            # control weight driven by u
            A[10, 10] = A[11, 11] = wu.a
            B2[10, 0] = B2[11, 1] = wu.b
            C1[2, 10] = C1[3, 11] = wu.c
            D12[2, 0] = D12[3, 1] = wu.d
            D21[0, 1] = D21[1, 2] = f.noise
        out["A"] = out.get("A", []) + [A]
        out["B1"] = out.get("B1", []) + [B1]
        out["B2"] = out.get("B2", []) + [B2]
        out["C1"] = out.get("C1", []) + [C1]
        out["D11"] = out.get("D11", []) + [np.zeros((4, 3))]
        out["D12"] = out.get("D12", []) + [D12]
        out["C2"] = out.get("C2", []) + [C2]
        out["D21"] = out.get("D21", []) + [D21]
        out["D22"] = out.get("D22", []) + [np.zeros((2, 2))]
    return out


def weighted_interconnection(p: AmbParameters | None = None, filters: WeightFilters | None = None,
                             disturbance_damping: float = 0.0) -> AffineMatrices:
    """Affine matrix function of the weighted generalized plant."""
    return AffineMatrices(weighted_coefficients(p, filters, disturbance_damping))


TWO_REGIONS = ((300.0, 1200.0), (1100.0, 2000.0))
FOUR_REGIONS = ((300.0, 800.0), (700.0, 1200.0), (1100.0, 1600.0), (1500.0, 2000.0))


def amb_lpv(intervals=TWO_REGIONS, points_per_subset: int | None = None,
            p: AmbParameters | None = None, filters: WeightFilters | None = None,
            disturbance_damping: float = 0.0) -> LpvPlant:
    """Switched LPV generalized plant over the given overlapped intervals."""
    if points_per_subset is None:
        points_per_subset = 10 if len(intervals) <= 2 else 6
    part = build_grids(Partition.from_intervals(intervals), points_per_subset)
    fn = weighted_interconnection(p, filters, disturbance_damping)
    return LpvPlant(part, [fn], name=f"amb-{len(intervals)}")


@dataclass(frozen=True)
class ProfileSegment:
    t_start: float
    t_end: float
    kind: str  # hold | ramp
    value: float  # start value
    slope: float = 0.0


@dataclass(frozen=True)
class SpeedProfile:
    """Continuous piecewise-linear speed signal; the last segment extends to infinity."""

    segments: tuple[ProfileSegment, ...]

    def __post_init__(self):
        if not self.segments:
            raise ValueError("profile needs at least one segment")
        prev = None
        for seg in self.segments:
            if seg.kind not in ("hold", "ramp"):
                raise ValueError(f"unknown segment kind {seg.kind!r}")
            if seg.kind == "hold" and seg.slope != 0:
                raise ValueError("hold segments have zero slope")
            if prev is not None:
                if abs(seg.t_start - prev.t_end) > 1e-12:
                    raise ValueError("segments must be contiguous")
                end_val = prev.value + prev.slope * (prev.t_end - prev.t_start)
                if abs(end_val - seg.value) > 1e-9 * max(1.0, abs(end_val)):
                    raise ValueError(f"profile jumps at t={seg.t_start}")
            prev = seg

    @classmethod
    def from_breakpoints(cls, times, values) -> "SpeedProfile":
        """Linear interpolation through ``(times[k], values[k])``; held after the last point."""
        segs = []
        for (t0, v0), (t1, v1) in zip(zip(times, values), zip(times[1:], values[1:])):
            slope = (v1 - v0) / (t1 - t0)
            segs.append(ProfileSegment(float(t0), float(t1), "hold" if slope == 0 else "ramp",
                                       float(v0), float(slope)))
        segs.append(ProfileSegment(float(times[-1]), np.inf, "hold", float(values[-1])))
        return cls(tuple(segs))

    def _segment(self, t: float) -> ProfileSegment:
        if t < self.segments[0].t_start:
            raise DomainError(f"profile undefined at t={t}")
        for seg in self.segments:
            if t < seg.t_end:
                return seg
        return self.segments[-1]

    def __call__(self, t: float) -> float:
        seg = self._segment(t)
        return seg.value + seg.slope * (t - seg.t_start)

    evaluate = __call__

    def rate(self, t: float) -> float:
        return self._segment(t).slope

    def _index(self, ts) -> tuple[np.ndarray, np.ndarray]:
        ts = np.asarray(ts, float)
        if np.any(ts < self.segments[0].t_start):
            raise DomainError(f"profile undefined before t={self.segments[0].t_start}")
        starts = np.array([seg.t_start for seg in self.segments])
        return ts, np.searchsorted(starts, ts, side="right") - 1

    def sample(self, ts) -> np.ndarray:
        """Vectorized evaluation."""
        ts, k = self._index(ts)
        segs = self.segments
        start = np.array([seg.t_start for seg in segs])[k]
        value = np.array([seg.value for seg in segs])[k]
        slope = np.array([seg.slope for seg in segs])[k]
        return value + slope * (ts - start)

    def sample_rate(self, ts) -> np.ndarray:
        ts, k = self._index(ts)
        return np.array([seg.slope for seg in self.segments])[k]

    def breakpoints(self) -> list[float]:
        return [s.t_start for s in self.segments[1:]]

    def to_dict(self) -> dict:
        return {"segments": [[s.t_start, s.t_end if np.isfinite(s.t_end) else None, s.kind, s.value, s.slope]
                             for s in self.segments]}


def speed_profile_paper() -> SpeedProfile:
    """Ramp 650 -> 1300 rad/s at 50 rad/s^2, hold, ramp down to 1000 rad/s, hold."""
    return SpeedProfile.from_breakpoints([0.0, 0.5, 13.5, 16.0, 22.0],
                                         [650.0, 650.0, 1300.0, 1300.0, 1000.0])


IMBALANCE_AMPLITUDE = 1.3e-4


def imbalance_disturbance(amplitude: float = IMBALANCE_AMPLITUDE) -> Callable[[float], np.ndarray]:
    """Exogenous input ``w = [d, n1, n2]`` of the generalized plant: constant ``d``, no noise.

    The sinusoidal runout comes from the generator states, which rotate at
    the rotor speed.
    """
    w = np.array([amplitude, 0.0, 0.0])

    def source(t: float) -> np.ndarray:
        return w.copy()
    return source


def imbalance_response(x0, rho: float, amplitude: float, t: float) -> np.ndarray:
    """Closed form of the generator ``x' = [[0,-rho],[rho,0]] x + [d, 0]`` at constant ``rho``."""
    x0 = np.asarray(x0, float)
    if rho == 0:
        return x0 + np.array([amplitude * t, 0.0])
    xe = np.array([0.0, amplitude / rho])  # equilibrium: -Omega^{-1} [d, 0]
    c, s = np.cos(rho * t), np.sin(rho * t)
    rot = np.array([[c, -s], [s, c]])
    return xe + rot @ (x0 - xe)
