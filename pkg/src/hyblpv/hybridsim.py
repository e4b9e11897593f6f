"""Hybrid closed-loop simulation: RK4 flow, hysteresis supervisor, controller resets."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .lpv import AffineMatrices, DomainError, LpvPlant, ParameterDomain, Partition
from .synthesis import GainScheduledController, SynthesisSolution, storage_matrix

log = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5  # RK4 stability needs step * 1e5 < 2.78 for the AMB W_u pole
BLOWUP = 1e8
_CHUNK = 1024


class SimulationError(RuntimeError):
    pass


class DivergenceError(SimulationError):
    def __init__(self, t: float, norm: float):
        super().__init__(f"state norm {norm:.3e} exceeds the blow-up bound at t={t:.6g}")
        self.t = t
        self.norm = norm


class StepTooLargeError(SimulationError):
    pass


# --------------------------------------------------------------------------
# signals
# --------------------------------------------------------------------------

class SignalSource:
    """Vector signal of time: constant, sinusoid, sampled data or a speed profile."""

    KINDS = ("constant", "sinusoid", "samples", "profile")

    def __init__(self, kind: str, params: dict):
        if kind not in self.KINDS:
            raise ValueError(f"unknown signal kind {kind!r}")
        self.kind = kind
        self.params = params
        self.dim = len(self(0.0 if kind != "samples" else params["times"][0]))

    @classmethod
    def constant(cls, value) -> "SignalSource":
        return cls("constant", {"value": np.atleast_1d(np.asarray(value, float))})

    @classmethod
    def sinusoid(cls, amplitude, omega, phase=0.0, offset=0.0) -> "SignalSource":
        """``offset + amplitude * sin(omega t + phase)``, elementwise over broadcast vectors."""
        a, w, ph, off = np.broadcast_arrays(*(np.atleast_1d(np.asarray(v, float))
                                              for v in (amplitude, omega, phase, offset)))
        return cls("sinusoid", {"amplitude": a, "omega": w, "phase": ph, "offset": off})

    @classmethod
    def samples(cls, times, values) -> "SignalSource":
        """Linear interpolation through samples, held constant outside their span."""
        t = np.asarray(times, float)
        v = np.asarray(values, float)
        if v.ndim == 1:
            v = v[:, None]
        if t.ndim != 1 or t.size < 2 or v.shape[0] != t.size or np.any(np.diff(t) <= 0):
            raise ValueError("samples need >= 2 strictly increasing times with one row each")
        if not np.all(np.isfinite(v)):
            raise ValueError("sample values must be finite")
        return cls("samples", {"times": t, "values": v})

    @classmethod
    def from_csv(cls, path) -> "SignalSource":
        """Time in the first column, one column per channel; a header row is skipped."""
        rows = []
        with open(path, newline="") as fh:
            for k, row in enumerate(csv.reader(fh)):
                if not row:
                    continue
                try:
                    rows.append([float(x) for x in row])
                except ValueError:
                    if k == 0:
                        continue
                    raise ValueError(f"{path}:{k + 1}: non-numeric sample row") from None
        data = np.array(rows)
        return cls.samples(data[:, 0], data[:, 1:])

    @classmethod
    def profile(cls, profile) -> "SignalSource":
        return cls("profile", {"profile": profile})

    def sample(self, ts) -> np.ndarray:
        """Values at each time, shape (m, dim)."""
        ts = np.asarray(ts, float)
        p = self.params
        if self.kind == "constant":
            return np.broadcast_to(p["value"], (ts.size, p["value"].size)).copy()
        if self.kind == "sinusoid":
            return p["offset"] + p["amplitude"] * np.sin(np.outer(ts, p["omega"]) + p["phase"])
        if self.kind == "samples":
            return np.column_stack([np.interp(ts, p["times"], col) for col in p["values"].T])
        return p["profile"].sample(ts)[:, None]

    def sample_rate(self, ts) -> np.ndarray:
        """Time derivative at each time (right derivative at kinks)."""
        ts = np.asarray(ts, float)
        p = self.params
        if self.kind == "constant":
            return np.zeros((ts.size, p["value"].size))
        if self.kind == "sinusoid":
            return p["amplitude"] * p["omega"] * np.cos(np.outer(ts, p["omega"]) + p["phase"])
        if self.kind == "samples":
            t, v = p["times"], p["values"]
            k = np.clip(np.searchsorted(t, ts, side="right") - 1, 0, t.size - 2)
            slope = np.diff(v, axis=0) / np.diff(t)[:, None]
            out = slope[k]
            out[(ts < t[0]) | (ts >= t[-1])] = 0.0
            return out
        return p["profile"].sample_rate(ts)[:, None]

    def __call__(self, t: float) -> np.ndarray:
        return self.sample(np.array([t]))[0]

    def rate(self, t: float) -> np.ndarray:
        return self.sample_rate(np.array([t]))[0]

    def to_dict(self) -> dict:
        if self.kind == "profile":
            return {"kind": "profile", **self.params["profile"].to_dict()}
        return {"kind": self.kind, **{k: np.asarray(v).tolist() for k, v in self.params.items()}}


# --------------------------------------------------------------------------
# supervisor
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SwitchEvent:
    t: float
    src: int
    dst: int
    rho: tuple[float, ...]


@dataclass(frozen=True)
class SupervisorState:
    sigma: int
    events: tuple[SwitchEvent, ...] = ()


def _domain_tol(partition: Partition) -> float:
    box = partition.hull()
    return 1e-9 * max(1.0, float(np.max(np.asarray(box.hi) - np.asarray(box.lo))))


def supervisor_step(state: SupervisorState, rho_prev, rho_now, partition: Partition,
                    t_prev: float = 0.0, t_now: float = 1.0) -> SupervisorState:
    """Advance the hysteresis logic over the segment ``rho_prev -> rho_now``.

    Switches to ``j`` when the segment leaves subset ``sigma`` through the
    surface from ``sigma`` to ``j``; the event time is linearly interpolated.
    """
    a = np.atleast_1d(np.asarray(rho_prev, float))
    b = np.atleast_1d(np.asarray(rho_now, float))
    tol = _domain_tol(partition)
    if not partition.contains(state.sigma, a, tol):
        raise DomainError(f"parameter {a.tolist()} is not in the active subset {state.sigma + 1}")
    if not partition.regions_containing(b, tol):
        raise DomainError(f"parameter {b.tolist()} lies outside every subset")
    hits = [(s, srf) for srf in partition.surfaces() if srf.src == state.sigma
            for s in [srf.crossed(a, b)] if s is not None]
    if not hits:
        return state
    if len(hits) > 1:
        raise StepTooLargeError(f"step {a.tolist()} -> {b.tolist()} crosses {len(hits)} surfaces")
    s, srf = hits[0]
    p = a + s * (b - a)
    for nxt in partition.surfaces():
        if nxt.src == srf.dst and nxt.crossed(p, b) is not None:
            raise StepTooLargeError(f"step {a.tolist()} -> {b.tolist()} crosses two surfaces")
    ev = SwitchEvent(t_prev + s * (t_now - t_prev), srf.src, srf.dst, tuple(float(x) for x in p))
    return SupervisorState(srf.dst, state.events + (ev,))


def _refine_crossing(rho_src: SignalSource, srf, t0: float, t1: float, width: float) -> float:
    """First time in (t0, t1] at which rho reaches the facet, to within ``width``."""
    sign = 1.0 if srf.is_upper else -1.0

    def past(t):
        return sign * (rho_src(t)[srf.coord] - srf.value) >= 0

    lo, hi = t0, t1
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        if past(mid):
            hi = mid
        else:
            lo = mid
    return hi


def switching_schedule(partition: Partition, rho_src: SignalSource, ts: np.ndarray,
                       sigma0: int | None = None) -> tuple[int, list[tuple[int, SwitchEvent]]]:
    """Supervisor run over the time grid ``ts``; returns ``(sigma0, [(step index, event)])``.

    Vectorized equivalent of repeated :func:`supervisor_step` calls, with
    each event time refined by bisection to ``step * 1e-3``.
    """
    R = rho_src.sample(ts)
    tol = _domain_tol(partition)
    inside = np.zeros(len(ts), bool)
    for box in partition.boxes:
        inside |= np.all((R >= np.asarray(box.lo) - tol) & (R <= np.asarray(box.hi) + tol), axis=1)
    if not inside.all():
        k = int(np.argmin(inside))
        raise DomainError(f"parameter {R[k].tolist()} at t={ts[k]:.6g} lies outside every subset")
    sigma = partition.first_region(R[0]) if sigma0 is None else sigma0
    if not partition.contains(sigma, R[0], tol):
        raise DomainError(f"initial parameter {R[0].tolist()} is not in subset {sigma + 1}")
    start = sigma
    surfaces = partition.surfaces()
    out = []
    n0 = 0
    steps = np.diff(ts)
    while n0 < len(ts) - 1:
        first, found = None, []
        a, b = R[n0:-1], R[n0 + 1:]
        for srf in surfaces:
            if srf.src != sigma:
                continue
            k = srf.coord
            sign = 1.0 if srf.is_upper else -1.0
            da, db = a[:, k] - srf.value, b[:, k] - srf.value
            hit = (sign * da < 0) & (sign * db >= 0)
            if a.shape[1] > 1:
                s = np.where(hit, da / np.where(hit, da - db, 1.0), 0.0)
                p = a + s[:, None] * (b - a)
                for j in range(a.shape[1]):
                    if j != k:
                        hit &= (p[:, j] >= srf.lo[j]) & (p[:, j] <= srf.hi[j])
            idx = np.flatnonzero(hit)
            if idx.size:
                found.append((int(idx[0]) + n0, srf))
        if not found:
            break
        first = min(n for n, _ in found)
        here = [srf for n, srf in found if n == first]
        if len(here) > 1:
            raise StepTooLargeError(f"step at t={ts[first]:.6g} crosses {len(here)} surfaces")
        srf = here[0]
        te = _refine_crossing(rho_src, srf, ts[first], ts[first + 1], 1e-3 * steps[first])
        p = rho_src(te)
        for nxt in surfaces:
            if nxt.src == srf.dst and nxt.crossed(p, R[first + 1]) is not None:
                raise StepTooLargeError(f"step at t={ts[first]:.6g} crosses two surfaces")
        out.append((first, SwitchEvent(float(te), srf.src, srf.dst, tuple(float(x) for x in p))))
        sigma = srf.dst
        n0 = first + 1
    return start, out


# --------------------------------------------------------------------------
# generic RK4
# --------------------------------------------------------------------------

def rk4_step(f: Callable[[float, np.ndarray], np.ndarray], t: float, x: np.ndarray, h: float) -> np.ndarray:
    k1 = f(t, x)
    k2 = f(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = f(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_ode(f, x0, t0: float, t1: float, step: float) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-step RK4 from ``t0`` to ``t1``; the last step is shortened to land on ``t1``."""
    if step <= 0:
        raise ValueError("step must be positive")
    ts = [t0]
    xs = [np.asarray(x0, float)]
    t = t0
    n = int(np.floor((t1 - t0) / step + 1e-9))
    for k in range(n):
        xs.append(rk4_step(f, t, xs[-1], step))
        t = t0 + (k + 1) * step
        ts.append(t)
    if t1 - t > 1e-12 * max(1.0, abs(t1)):
        xs.append(rk4_step(f, t, xs[-1], t1 - t))
        ts.append(t1)
    return np.array(ts), np.array(xs)


# --------------------------------------------------------------------------
# closed loop evaluation
# --------------------------------------------------------------------------

class _LoopModel:
    """Batched closed-loop matrices of plant + controller in one region."""

    def __init__(self, plant: LpvPlant, controller: GainScheduledController):
        d = plant.dims
        self.plant = plant
        self.controller = controller
        self.n = d["n"]
        self.nk = controller.tables[0][0].Ak0.shape[0]
        self.nw, self.nu, self.nz, self.ny = d["nw"], d["nu"], d["nz"], d["ny"]
        self.tables = []
        for tab in controller.tables:
            xs = np.array([float(np.ravel(pt.rho)[0]) for pt in tab])
            Akr = np.array([np.array(pt.Ak_rate) if len(pt.Ak_rate) else np.zeros((1, self.nk, self.nk))
                            for pt in tab])
            self.tables.append((xs, np.array([pt.Ak0 for pt in tab]), Akr,
                                np.array([pt.Bk for pt in tab]), np.array([pt.Ck for pt in tab]),
                                np.array([pt.Dk for pt in tab])))

    def _plant(self, i, rhos):
        fn = self.plant.funcs[i]
        if isinstance(fn, AffineMatrices):
            return fn.batch(rhos)
        mats = [fn(r) for r in rhos]
        return {name: np.array([getattr(P, name) for P in mats]) for name in mats[0]._fields}

    def _gains(self, i, rhos, rates):
        xs, Ak0, Akr, Bk, Ck, Dk = self.tables[i]
        r = rhos[:, 0]
        k = np.clip(np.searchsorted(xs, r, side="right") - 1, 0, len(xs) - 2)
        a = np.clip((r - xs[k]) / (xs[k + 1] - xs[k]), 0.0, 1.0)[:, None, None]

        def lerp(T):
            return (1 - a) * T[k] + a * T[k + 1]
        Ak = lerp(Ak0)
        for j in range(min(Akr.shape[1], rates.shape[1])):
            Ak = Ak + rates[:, j, None, None] * ((1 - a) * Akr[k, j] + a * Akr[k + 1, j])
        return Ak, lerp(Bk), lerp(Ck), lerp(Dk)

    def matrices(self, i, rhos, rates):
        """(A, B, Cz, Dz, Cy, Dy, Cu, Du) stacked over the rows of ``rhos``."""
        P = self._plant(i, rhos)
        Ak, Bk, Ck, Dk = self._gains(i, rhos, rates)
        m = len(rhos)
        n, nk = self.n, self.nk
        DkC2 = Dk @ P["C2"]
        DkD21 = Dk @ P["D21"]
        A = np.empty((m, n + nk, n + nk))
        A[:, :n, :n] = P["A"] + P["B2"] @ DkC2
        A[:, :n, n:] = P["B2"] @ Ck
        A[:, n:, :n] = Bk @ P["C2"]
        A[:, n:, n:] = Ak
        B = np.concatenate([P["B1"] + P["B2"] @ DkD21, Bk @ P["D21"]], axis=1)
        Cz = np.concatenate([P["C1"] + P["D12"] @ DkC2, P["D12"] @ Ck], axis=2)
        Dz = P["D11"] + P["D12"] @ DkD21
        Cy = np.concatenate([P["C2"], np.zeros((m, self.ny, nk))], axis=2)
        Cu = np.concatenate([DkC2, Ck], axis=2)
        return A, B, Cz, Dz, Cy, P["D21"], Cu, DkD21


def _mv(M, v):
    return np.einsum("mij,mj->mi", M, v)


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------

@dataclass
class ResetRecord:
    t: float
    src: int
    dst: int
    rho: tuple[float, ...]
    xk_before: np.ndarray
    xk_after: np.ndarray
    x: np.ndarray


@dataclass
class HybridTrajectory:
    t: np.ndarray
    x: np.ndarray
    xk: np.ndarray
    u: np.ndarray
    y: np.ndarray
    z: np.ndarray
    w: np.ndarray
    rho: np.ndarray
    sigma: np.ndarray
    events: list[SwitchEvent]
    resets: list[ResetRecord]
    z_energy: float
    w_energy: float
    step: float
    sigma0: int = 0

    def columns(self) -> list[str]:
        def names(prefix, k):
            return [f"{prefix}{j + 1}" for j in range(k)]
        return (["t"] + names("x", self.x.shape[1]) + names("xk", self.xk.shape[1])
                + names("u", self.u.shape[1]) + names("z", self.z.shape[1])
                + names("w", self.w.shape[1]) + ["sigma"] + names("rho", self.rho.shape[1]))

    def to_csv(self, path) -> None:
        """One row per recorded sample; regions numbered from 1."""
        data = np.column_stack([self.t, self.x, self.xk, self.u, self.z, self.w,
                                self.sigma + 1, self.rho])
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.columns())
            isig = 1 + self.x.shape[1] + self.xk.shape[1] + self.u.shape[1] + self.z.shape[1] + self.w.shape[1]
            for row in data:
                wr.writerow([int(v) if k == isig else repr(float(v)) for k, v in enumerate(row)])


def integrate(plant: LpvPlant, controller: GainScheduledController, rho: SignalSource,
              w: SignalSource, horizon: float, step: float = DEFAULT_STEP, x0=None, xk0=None,
              sigma0: int | None = None, record_every: int = 1, blowup: float = BLOWUP,
              rates: ParameterDomain | None = None) -> HybridTrajectory:
    """Simulate plant + gain-scheduled controller under the hysteresis supervisor.

    Flow is fixed-step RK4 on the uniform grid ``k * step``; a step that
    contains a switch is split at the refined event time, where the
    controller state is reset.  Gains are interpolated at the current rho in
    the active region, whatever region rho geometrically lies in.  Energies
    of z and w are integrated by RK4 on the same stages.
    """
    if step <= 0 or horizon <= 0:
        raise ValueError("step and horizon must be positive")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    part = plant.partition
    model = _LoopModel(plant, controller)
    n, nk = model.n, model.nk
    N = int(round(horizon / step))
    if abs(N * step - horizon) > 1e-9 * horizon:
        raise ValueError("horizon must be a whole number of steps")
    ts = step * np.arange(N + 1)
    if rho.dim != part.dim or w.dim != model.nw:
        raise ValueError(f"signal sizes rho={rho.dim}, w={w.dim}; expected {part.dim}, {model.nw}")
    if rates is not None:
        nu = rho.sample_rate(ts)
        lo, hi = np.asarray(rates.rate_lo), np.asarray(rates.rate_hi)
        if np.any(nu < lo - 1e-9) or np.any(nu > hi + 1e-9):
            warnings.warn(f"parameter rate leaves the design bounds [{lo.tolist()}, {hi.tolist()}]",
                          stacklevel=2)
    start, sched = switching_schedule(part, rho, ts, sigma0)

    # step list: (t0, h, region, grid index or -1); event steps are split
    t0s, hs, regs, gidx = [], [], [], []
    sigma = start
    n_prev = 0
    resets_at = {}
    for k, ev in sched:
        t0s.append(ts[n_prev:k])
        hs.append(np.full(k - n_prev, step))
        regs.append(np.full(k - n_prev, sigma))
        gidx.append(np.arange(n_prev, k))
        # [t_k, t_e] in the old region, reset, then [t_e, t_k+1] in the new one
        t0s.append(np.array([ts[k], ev.t]))
        hs.append(np.array([ev.t - ts[k], ts[k + 1] - ev.t]))
        regs.append(np.array([sigma, ev.dst]))
        gidx.append(np.array([k, -1]))
        resets_at[sum(len(a) for a in t0s) - 1] = ev
        sigma = ev.dst
        n_prev = k + 1
    t0s.append(ts[n_prev:N])
    hs.append(np.full(N - n_prev, step))
    regs.append(np.full(N - n_prev, sigma))
    gidx.append(np.arange(n_prev, N))
    T0, H, REG, GI = (np.concatenate(a) for a in (t0s, hs, regs, gidx))

    xi = np.zeros(n + nk)
    if x0 is not None:
        xi[:n] = x0
    if xk0 is not None:
        xi[n:] = xk0
    rec = {key: [] for key in ("t", "xi", "u", "y", "z", "w", "rho", "sigma")}
    resets: list[ResetRecord] = []
    ez = ew = 0.0
    I = np.eye(n + nk)
    pos = 0
    total = len(T0)
    while pos < total:
        # chunk of consecutive steps in one region, not crossing a reset
        reg = REG[pos]
        end = min(total, pos + _CHUNK)
        same = np.flatnonzero(REG[pos:end] != reg)
        if same.size:
            end = pos + int(same[0])
        nxt_reset = [r for r in resets_at if pos <= r < end]
        if nxt_reset:
            end = min(nxt_reset)
        if pos in resets_at:
            ev = resets_at[pos]
            before = xi[n:].copy()
            xi[n:] = controller.reset(ev.src, ev.dst) @ before
            resets.append(ResetRecord(ev.t, ev.src, ev.dst, ev.rho, before, xi[n:].copy(), xi[:n].copy()))
            end = max(end, pos + 1)
            nxt = [r for r in resets_at if pos < r < end]
            if nxt:
                end = min(nxt)
        sl = slice(pos, end)
        t0, h = T0[sl], H[sl]
        m = end - pos
        # steps are contiguous, so each end stage is the next start stage
        stage_t = np.concatenate([t0, [t0[-1] + h[-1]], t0 + 0.5 * h])
        R = rho.sample(stage_t)
        Rd = rho.sample_rate(stage_t)
        W = w.sample(stage_t)
        A, B, Cz, Dz, Cy, Dy, Cu, Du = model.matrices(reg, R, Rd)
        b = _mv(B, W)
        i1, i2, i3 = slice(0, m), slice(m + 1, 2 * m + 1), slice(1, m + 1)
        A1, A2, A3 = A[i1], A[i2], A[i3]
        b1, b2, b3 = b[i1], b[i2], b[i3]
        hb = h[:, None, None]
        hv = h[:, None]
        K1, c1 = A1, b1
        K2, c2 = A2 + 0.5 * hb * (A2 @ K1), 0.5 * hv * _mv(A2, c1) + b2
        K3, c3 = A2 + 0.5 * hb * (A2 @ K2), 0.5 * hv * _mv(A2, c2) + b2
        K4, c4 = A3 + hb * (A3 @ K3), hv * _mv(A3, c3) + b3
        Phi = I + (hb / 6.0) * (K1 + 2 * K2 + 2 * K3 + K4)
        psi = (hv / 6.0) * (c1 + 2 * c2 + 2 * c3 + c4)
        X = np.empty((m + 1, n + nk))
        X[0] = xi
        for j in range(m):
            X[j + 1] = Phi[j] @ X[j] + psi[j]
        big = np.abs(X).max(axis=1)
        if not np.all(np.isfinite(big)) or big.max() > blowup:
            j = int(np.argmax(~np.isfinite(big) | (big > blowup)))
            tj = float(t0[j - 1] + h[j - 1]) if j > 0 else float(t0[0])
            raise DivergenceError(tj, float(np.linalg.norm(X[j])))
        # energy by RK4 on e' = |z|^2 using the stage states
        Xs = X[:-1]
        k1 = _mv(K1, Xs) + c1
        k2 = _mv(K2, Xs) + c2
        k3 = _mv(K3, Xs) + c3
        S = np.concatenate([Xs, Xs + 0.5 * hv * k1, Xs + 0.5 * hv * k2, Xs + hv * k3])
        Wst = np.concatenate([W[i1], W[i2], W[i2], W[i3]])
        Czs = np.concatenate([Cz[i1], Cz[i2], Cz[i2], Cz[i3]])
        Dzs = np.concatenate([Dz[i1], Dz[i2], Dz[i2], Dz[i3]])
        zs = _mv(Czs, S) + _mv(Dzs, Wst)
        wts = np.concatenate([h, 2 * h, 2 * h, h]) / 6.0
        ez += float(wts @ np.sum(zs * zs, axis=1))
        ew += float(wts @ np.sum(Wst * Wst, axis=1))
        # samples at grid step starts
        keep = np.flatnonzero((GI[sl] >= 0) & (GI[sl] % record_every == 0))
        if keep.size:
            xs_ = Xs[keep]
            wk = W[keep]
            rec["t"].append(t0[keep])
            rec["xi"].append(xs_)
            rec["u"].append(_mv(Cu[keep], xs_) + _mv(Du[keep], wk))
            rec["y"].append(_mv(Cy[keep], xs_) + _mv(Dy[keep], wk))
            rec["z"].append(zs[keep])
            rec["w"].append(wk)
            rec["rho"].append(R[keep])
            rec["sigma"].append(np.full(keep.size, reg))
        xi = X[-1]
        pos = end

    # final sample
    tf = ts[-1]
    Rf, Rdf, Wf = rho.sample([tf]), rho.sample_rate([tf]), w.sample([tf])
    A, B, Cz, Dz, Cy, Dy, Cu, Du = model.matrices(sigma, Rf, Rdf)
    xf = xi[None]
    rec["t"].append(np.array([tf]))
    rec["xi"].append(xf)
    rec["u"].append(_mv(Cu, xf) + _mv(Du, Wf))
    rec["y"].append(_mv(Cy, xf) + _mv(Dy, Wf))
    rec["z"].append(_mv(Cz, xf) + _mv(Dz, Wf))
    rec["w"].append(Wf)
    rec["rho"].append(Rf)
    rec["sigma"].append(np.array([sigma]))
    cat = {k: np.concatenate(v) for k, v in rec.items()}
    return HybridTrajectory(cat["t"], cat["xi"][:, :n], cat["xi"][:, n:], cat["u"], cat["y"], cat["z"],
                            cat["w"], cat["rho"], cat["sigma"].astype(int), [ev for _, ev in sched],
                            resets, ez, ew, step, start)


def empirical_l2_gain(traj: HybridTrajectory) -> float:
    """``||z||_2 / ||w||_2`` from the integrated energies."""
    if not traj.w_energy > 0:
        raise ValueError("disturbance has zero energy; the gain ratio is undefined")
    return float(np.sqrt(traj.z_energy / traj.w_energy))


# --------------------------------------------------------------------------
# Lyapunov monitor
# --------------------------------------------------------------------------

@dataclass
class EventCheck:
    t: float
    src: int
    dst: int
    rho: tuple[float, ...]
    v_before: float
    v_after: float

    @property
    def ok(self) -> bool:
        return self.v_after <= self.v_before * (1 + 1e-9)


@dataclass
class LyapunovTrace:
    t: np.ndarray
    sigma: np.ndarray
    V: np.ndarray
    events: list[EventCheck] = field(default_factory=list)

    def increases(self, slack: float = 1e-8) -> list[int]:
        """Sample indices where V grows within a flow interval beyond ``slack`` (relative)."""
        out = []
        ev_times = [e.t for e in self.events]
        for k in range(1, len(self.V)):
            if any(self.t[k - 1] <= te <= self.t[k] for te in ev_times):
                continue
            if self.V[k] > self.V[k - 1] + slack * max(self.V[k - 1], 1e-300):
                out.append(k)
        return out

    @property
    def events_ok(self) -> bool:
        return all(e.ok for e in self.events)


def lyapunov_monitor(traj: HybridTrajectory, sol: SynthesisSolution,
                     controller: GainScheduledController) -> LyapunovTrace:
    """``V_sigma(x_cl, rho)`` at every sample and before/after every reset."""
    T = controller.state_transform
    cert_sol = sol.state_transformed(T) if T is not None else sol
    cert = cert_sol.certificate
    Ti = np.linalg.inv(T) if T is not None else None
    conv = controller.convention

    def V(i, rho, x, xk):
        X, _ = storage_matrix(cert, i, np.atleast_1d(rho), conv)
        xt = Ti @ x if Ti is not None else x
        v = np.concatenate([xt, xk])
        return float(v @ X @ v)

    vals = np.array([V(int(s), r, x, xk) for s, r, x, xk in zip(traj.sigma, traj.rho, traj.x, traj.xk)])
    checks = [EventCheck(r.t, r.src, r.dst, r.rho, V(r.src, r.rho, r.x, r.xk_before),
                         V(r.dst, r.rho, r.x, r.xk_after)) for r in traj.resets]
    return LyapunovTrace(traj.t, traj.sigma, vals, checks)


def write_events_jsonl(path, traj: HybridTrajectory, monitor: LyapunovTrace | None = None) -> None:
    """One JSON object per switch; regions numbered from 1; V fields null without a monitor."""
    checks = {(round(c.t, 15), c.src, c.dst): c for c in (monitor.events if monitor else [])}
    with open(path, "w") as fh:
        for ev in traj.events:
            c = checks.get((round(ev.t, 15), ev.src, ev.dst))
            fh.write(json.dumps({"t": ev.t, "from": ev.src + 1, "to": ev.dst + 1, "rho": list(ev.rho),
                                 "V_before": c.v_before if c else None,
                                 "V_after": c.v_after if c else None}) + "\n")
