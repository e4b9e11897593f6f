"""Hysteresis-switched LPV synthesis: LMI assembly, controller reconstruction, validation."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .lpv import (BasisSet, LpvPlant, LyapunovCertificate, ParameterDomain, PlantMatrices,
                  check_assumptions, evaluate_plant, surface_points)
from .matkernel import chol, min_eig, null_space_basis, sym, sym_eig
from .sdp import AffineLmi, SdpProblem, SolveOptions, solve


class SynthesisError(RuntimeError):
    """Synthesis LMIs are infeasible or the solver failed."""


class ReconstructionError(ValueError):
    """A factor needed for controller reconstruction is singular."""


# --------------------------------------------------------------------------
# problem
# --------------------------------------------------------------------------

@dataclass
class SynthesisProblem:
    plant: LpvPlant
    rates: ParameterDomain
    bases: list[BasisSet]
    weights: list[float] | None = None
    margin: float = 1e-6
    boundary: bool = True
    fixed_gamma: list[float] | None = None
    dedupe: bool = True
    facet_points: int = 3
    # optional bound R_i(rho), S_i(rho) <= bound * I keeps the optimum attained
    variable_bound: float | None = None
    # cap for the centering phase: maximize t in [[R, tI], [tI, S]] >= 0,
    # 1 <= t <= cap, with gamma fixed; keeps I - RS away from singular
    coupling_cap: float | None = None
    # constant R in two regions joined by surfaces in both directions is forced
    # equal by the jump LMIs; share one variable and use the reduced jump LMI
    share_constant_r: bool = True

    def __post_init__(self):
        nreg = self.plant.partition.size
        if isinstance(self.bases, BasisSet):
            self.bases = [self.bases] * nreg
        if len(self.bases) != nreg:
            raise ValueError("need one basis set per region")
        if self.weights is None:
            self.weights = [1.0] * nreg
        if len(self.weights) != nreg or any(not np.isfinite(a) or a <= 0 for a in self.weights):
            raise ValueError("region weights must be finite and positive, one per region")
        if self.fixed_gamma is not None and len(self.fixed_gamma) != nreg:
            raise ValueError("fixed_gamma needs one value per region")
        if self.coupling_cap is not None and (self.fixed_gamma is None or self.coupling_cap < 1):
            raise ValueError("coupling_cap needs fixed_gamma and a cap >= 1")
        if not self.plant.partition.grids:
            raise ValueError("plant partition has no grids")


@dataclass(frozen=True)
class ConstraintInfo:
    family: str  # R | S | coupling | boundary
    region: int
    rho: tuple[float, ...]
    rate: tuple[float, ...] | None = None
    target: int | None = None  # destination region for boundary LMIs

    def describe(self) -> str:
        s = f"{self.family} region {self.region + 1} rho={list(self.rho)}"
        if self.rate is not None:
            s += f" rate={list(self.rate)}"
        if self.target is not None:
            s += f" -> region {self.target + 1}"
        return s


@dataclass
class AssembledSynthesis:
    problem: SdpProblem
    info: list[ConstraintInfo]
    source: SynthesisProblem

    def count(self, family: str | None = None) -> int:
        return sum(1 for c in self.info if family is None or c.family == family)


COUPLING_GAIN = "tcouple"


def _rname(i, j):
    return f"R{i + 1}_{j + 1}"


def _sname(i, j):
    return f"S{i + 1}_{j + 1}"


def _gname(i):
    return f"gamma{i + 1}"


def _dname(i, j):
    return f"Dhat{i + 1}_{j + 1}"


def _kernels(P: PlantMatrices):
    nw = P.B1.shape[1]
    nz = P.C1.shape[0]
    NR = null_space_basis(np.hstack([P.B2.T, P.D12.T, np.zeros((P.B2.shape[1], nw))]))
    NS = null_space_basis(np.hstack([P.C2, P.D21, np.zeros((P.C2.shape[0], nz))]))
    return NR, NS


def _same_terms(a: AffineLmi, b: AffineLmi) -> bool:
    if len(a.terms) != len(b.terms) or not np.array_equal(a.constant, b.constant):
        return False
    for s, t in zip(a.terms, b.terms):
        if s.var != t.var:
            return False
        for x, y in ((s.coef, t.coef), (s.left, t.left), (s.right, t.right)):
            if (x is None) != (y is None) or (x is not None and not np.array_equal(x, y)):
                return False
    return True


def _r_lmi(P, NR, bases, ri, rho, rate, gamma_term, margin):
    """Projected R-inequality (sense <=)."""
    n, nw, nz = P.A.shape[0], P.B1.shape[1], P.C1.shape[0]
    dim = n + nz + nw
    K = np.zeros((dim, dim))
    K[:n, n + nz:] = P.B1
    K[n:n + nz, n + nz:] = P.D11
    const = NR.T @ (K + K.T) @ NR
    E1 = NR.T[:, :n]  # N_R^T [I;0;0]
    AC = NR.T @ np.vstack([P.A, P.C1, np.zeros((nw, n))])
    lmi = AffineLmi(const, [], "<=", margin)
    for j, fn in enumerate(bases.f):
        val = fn(rho)
        if val != 0:
            lmi.add(_rname(ri, j), left=val * AC, right=E1)
        dr = float(np.dot(fn.grad(rho), rate))
        if dr != 0:
            lmi.add(_rname(ri, j), left=-0.5 * dr * E1, right=E1)
    G = np.zeros((dim, dim))
    G[n:, n:] = -np.eye(nz + nw)
    gamma_term(lmi, NR.T @ G @ NR)
    return lmi


def _s_lmi(P, NS, bases, i, rho, rate, gamma_term, margin):
    """Projected S-inequality (sense <=)."""
    n, nw, nz = P.A.shape[0], P.B1.shape[1], P.C1.shape[0]
    dim = n + nw + nz
    K = np.zeros((dim, dim))
    K[n + nw:, :n] = P.C1
    K[n + nw:, n:n + nw] = P.D11
    const = NS.T @ (K + K.T) @ NS
    E1 = NS.T[:, :n]
    AB = NS.T @ np.vstack([P.A.T, P.B1.T, np.zeros((nz, n))])
    lmi = AffineLmi(const, [], "<=", margin)
    for j, fn in enumerate(bases.g):
        val = fn(rho)
        if val != 0:
            lmi.add(_sname(i, j), left=val * E1, right=AB)
        ds = float(np.dot(fn.grad(rho), rate))
        if ds != 0:
            lmi.add(_sname(i, j), left=0.5 * ds * E1, right=E1)
    G = np.zeros((dim, dim))
    G[n:, n:] = -np.eye(nz + nw)
    gamma_term(lmi, NS.T @ G @ NS)
    return lmi


def _coupling_lmi(n, bases, i, rho, margin, gain=None, ri=None):
    ri = i if ri is None else ri
    I = np.eye(n)
    Z = np.zeros((n, n))
    off = np.block([[Z, I], [I, Z]])
    E1 = np.vstack([I, Z])
    E2 = np.vstack([Z, I])
    if gain is None:
        lmi = AffineLmi(off, [], ">=", margin)
    else:
        # gain = (name, cap): the off-diagonal blocks are (cap - w) I
        lmi = AffineLmi(gain[1] * off, [], ">=", margin)
        lmi.add(gain[0], coef=-off)
    for j, fn in enumerate(bases.f):
        v = fn(rho)
        if v != 0:
            lmi.add(_rname(ri, j), left=0.5 * v * E1, right=E1)
    for j, fn in enumerate(bases.g):
        v = fn(rho)
        if v != 0:
            lmi.add(_sname(i, j), left=0.5 * v * E2, right=E2)
    return lmi


def _bound_lmi(n, bases, i, rho, bound, ri=None):
    """``bound*I - blkdiag(R_i(rho), S_i(rho)) >= 0``."""
    ri = i if ri is None else ri
    I = np.eye(n)
    Z = np.zeros((n, n))
    E1 = np.vstack([I, Z])
    E2 = np.vstack([Z, I])
    lmi = AffineLmi(bound * np.eye(2 * n), [], ">=", 0.0)
    for j, fn in enumerate(bases.f):
        v = fn(rho)
        if v != 0:
            lmi.add(_rname(ri, j), left=-0.5 * v * E1, right=E1)
    for j, fn in enumerate(bases.g):
        v = fn(rho)
        if v != 0:
            lmi.add(_sname(i, j), left=-0.5 * v * E2, right=E2)
    return lmi


def _boundary_lmi(n, bases, i, j, rho, dname, margin=0.0):
    """4x4 block jump condition in (R_i, S_i, R_j, S_j, Dhat_ij), sense >=.

    Rows: [R_i, *, *, *], [I, S_i, *, *], [R_i, I, R_j, *], [Dhat, S_j, I, S_j].
    """
    I = np.eye(n)
    E = [np.zeros((4 * n, n)) for _ in range(4)]
    for k in range(4):
        E[k][k * n:(k + 1) * n] = I
    const = np.zeros((4 * n, 4 * n))
    for r, c in ((1, 0), (2, 1), (3, 2)):
        const[r * n:(r + 1) * n, c * n:(c + 1) * n] = I
    const = const + const.T
    lmi = AffineLmi(const, [], ">=", margin)
    for k, fn in enumerate(bases[i].f):
        v = fn(rho)
        if v != 0:
            lmi.add(_rname(i, k), left=0.5 * v * E[0], right=E[0])
            lmi.add(_rname(i, k), left=v * E[2], right=E[0])
    for k, fn in enumerate(bases[i].g):
        v = fn(rho)
        if v != 0:
            lmi.add(_sname(i, k), left=0.5 * v * E[1], right=E[1])
    for k, fn in enumerate(bases[j].f):
        v = fn(rho)
        if v != 0:
            lmi.add(_rname(j, k), left=0.5 * v * E[2], right=E[2])
    for k, fn in enumerate(bases[j].g):
        v = fn(rho)
        if v != 0:
            lmi.add(_sname(j, k), left=v * E[3], right=E[1])
            lmi.add(_sname(j, k), left=0.5 * v * E[3], right=E[3])
    lmi.add(dname, left=E[3], right=E[0])
    return lmi


def _shared_boundary_lmi(n, bases, i, j, rho, ri, margin=0.0):
    """Jump condition when R_i = R_j = R is constant: ``[[R, I, I], [I, S_i, S_j], [I, S_j, S_j]] >= 0``.

    On that face the full 4x4 condition holds iff this does, with Dhat = I.
    """
    I = np.eye(n)
    E = [np.zeros((3 * n, n)) for _ in range(3)]
    for k in range(3):
        E[k][k * n:(k + 1) * n] = I
    const = np.zeros((3 * n, 3 * n))
    for r, c in ((1, 0), (2, 0)):
        const[r * n:(r + 1) * n, c * n:(c + 1) * n] = I
    const = const + const.T
    lmi = AffineLmi(const, [], ">=", margin)
    for k, fn in enumerate(bases[ri].f):
        v = fn(rho)
        if v != 0:
            lmi.add(_rname(ri, k), left=0.5 * v * E[0], right=E[0])
    for k, fn in enumerate(bases[i].g):
        v = fn(rho)
        if v != 0:
            lmi.add(_sname(i, k), left=0.5 * v * E[1], right=E[1])
    for k, fn in enumerate(bases[j].g):
        v = fn(rho)
        if v != 0:
            lmi.add(_sname(j, k), left=v * E[2], right=E[1])
            lmi.add(_sname(j, k), left=0.5 * v * E[2], right=E[2])
    return lmi


def r_owners(p: SynthesisProblem) -> list[int]:
    """Region whose R variables each region uses (itself unless shared).

    At a surface from i to j the jump LMI contains ``[[R_i, R_i], [R_i, R_j]] >= 0``,
    i.e. ``R_j >= R_i``; surfaces both ways make constant R_i and R_j equal.
    """
    part = p.plant.partition
    owner = list(range(part.size))
    if not (p.boundary and p.share_constant_r):
        return owner

    def find(k):
        while owner[k] != k:
            k = owner[k]
        return k

    pairs = {(s.src, s.dst) for s in part.surfaces()}
    for i, j in sorted(pairs):
        if i < j and (j, i) in pairs and p.bases[i].r_constant() and p.bases[j].r_constant() \
                and len(p.bases[i].f) == len(p.bases[j].f):
            a, b = find(i), find(j)
            owner[max(a, b)] = min(a, b)
    return [find(k) for k in range(part.size)]


def assemble_synthesis_lmis(p: SynthesisProblem) -> AssembledSynthesis:
    """All grid, rate-vertex, coupling and boundary LMIs plus the weighted objective."""
    plant = p.plant
    part = plant.partition
    check_assumptions(plant)
    d = plant.dims
    n = d["n"]
    prob = SdpProblem()
    info: list[ConstraintInfo] = []
    owner = r_owners(p)
    for i in range(part.size):
        if owner[i] == i:
            for j in range(len(p.bases[i].f)):
                prob.symmetric(_rname(i, j), n)
        for j in range(len(p.bases[i].g)):
            prob.symmetric(_sname(i, j), n)
        if p.fixed_gamma is None:
            prob.scalar(_gname(i))
    vertices = p.rates.rate_vertices()
    gain = None
    if p.coupling_cap is not None:
        # coupling gain t = cap - w with 0 <= w <= cap - 1; minimizing w maximizes t
        gain = (prob.scalar(COUPLING_GAIN).name, float(p.coupling_cap))
        for const, sense in ((0.0, ">="), (1.0 - p.coupling_cap, "<=")):
            lmi = AffineLmi(const * np.eye(1), [], sense, 0.0, f"coupling gain slack {sense}")
            lmi.add(gain[0], coef=np.eye(1))
            prob.add_constraint(lmi)
            info.append(ConstraintInfo("gain", -1, ()))

    for i in range(part.size):
        if p.fixed_gamma is None:
            gname = _gname(i)

            def gamma_term(lmi, G, gname=gname):
                lmi.add(gname, coef=G)
        else:
            gval = float(p.fixed_gamma[i])

            def gamma_term(lmi, G, gval=gval):
                lmi.constant = lmi.constant + gval * G

        for rho in part.grid(i):
            P = evaluate_plant(plant, i, rho)
            NR, NS = _kernels(P)
            rt = tuple(float(x) for x in rho)
            for family, build, N in (("R", _r_lmi, NR), ("S", _s_lmi, NS)):
                made: list[AffineLmi] = []
                for nu in vertices:
                    key = owner[i] if family == "R" else i
                    lmi = build(P, N, p.bases[i], key, rho, nu, gamma_term, p.margin)
                    if p.dedupe and any(_same_terms(lmi, m) for m in made):
                        continue
                    made.append(lmi)
                    lmi.label = f"{family} region {i + 1} rho={list(rt)} rate={nu.tolist()}"
                    prob.add_constraint(lmi)
                    info.append(ConstraintInfo(family, i, rt, tuple(nu.tolist())))
            lmi = _coupling_lmi(n, p.bases[i], i, rho, p.margin, gain, owner[i])
            lmi.label = f"coupling region {i + 1} rho={list(rt)}"
            prob.add_constraint(lmi)
            info.append(ConstraintInfo("coupling", i, rt))
            if p.variable_bound is not None:
                lmi = _bound_lmi(n, p.bases[i], i, rho, p.variable_bound, owner[i])
                lmi.label = f"bound region {i + 1} rho={list(rt)}"
                prob.add_constraint(lmi)
                info.append(ConstraintInfo("bound", i, rt))

    if p.boundary:
        for srf in part.surfaces():
            i, j = srf.src, srf.dst
            shared = owner[i] == owner[j]
            dname = _dname(i, j)
            if not shared and dname not in prob.variables:
                prob.matrix(dname, n, n)
            for rho in surface_points(part, i, j, p.facet_points):
                rt = tuple(float(x) for x in rho)
                if shared:
                    lmi = _shared_boundary_lmi(n, p.bases, i, j, rho, owner[i])
                else:
                    lmi = _boundary_lmi(n, p.bases, i, j, rho, dname)
                lmi.label = f"boundary {i + 1}->{j + 1} rho={list(rt)}"
                prob.add_constraint(lmi)
                info.append(ConstraintInfo("boundary", i, rt, None, j))

    if p.fixed_gamma is None:
        prob.minimize({_gname(i): float(a) for i, a in enumerate(p.weights)})
    elif gain is not None:
        prob.minimize({gain[0]: 1.0})
    return AssembledSynthesis(prob, info, p)


# --------------------------------------------------------------------------
# solution
# --------------------------------------------------------------------------

@dataclass
class SynthesisSolution:
    certificate: LyapunovCertificate
    dhat: dict[tuple[int, int], np.ndarray]
    gammas: list[float]
    plant: LpvPlant
    rates: ParameterDomain
    diagnostics: dict = field(default_factory=dict)

    @property
    def regions(self) -> int:
        return len(self.gammas)

    def state_transformed(self, T: np.ndarray) -> "SynthesisSolution":
        """The same design seen in plant coordinates ``x = T x_new``."""
        Ti = np.linalg.inv(T)
        dhat = {k: T.T @ D @ Ti.T for k, D in self.dhat.items()}
        diag = dict(self.diagnostics, state_transform=np.array(T, float))
        return SynthesisSolution(self.certificate.state_transformed(T), dhat, list(self.gammas),
                                 self.plant.state_transformed(T), self.rates, diag)


def balancing_transform(cert: LyapunovCertificate, grids: Sequence[Sequence[np.ndarray]]) -> np.ndarray:
    """Constant ``T`` with ``T^-1 Rbar T^-T = T' Sbar T`` diagonal.

    ``Rbar``, ``Sbar`` are grid averages over all regions.  Optimal H-infinity
    certificates often spread over many decades (slow weights, lightly damped
    exogenous models); one shared transform keeps the plant state continuous
    across switches while making ``I - R S`` well conditioned.
    """
    pts = [(i, rho) for i, grid in enumerate(grids) for rho in grid]
    Rb = sum(cert.R_at(i, rho) for i, rho in pts) / len(pts)
    Sb = sum(cert.S_at(i, rho) for i, rho in pts) / len(pts)
    L = chol(sym(Rb))
    w, U = sym_eig(L.T @ Sb @ L)
    if w[0] <= 0:
        raise ReconstructionError("averaged S is not positive definite")
    return L @ U @ np.diag(w ** -0.25)


# H-infinity optima are typically approached only as R or S grow without
# bound, so complementarity stalls; the objective gap still certifies gamma.
SYNTHESIS_RELAXED_TOL = 1e-3


def solve_synthesis(p: SynthesisProblem, opts: SolveOptions | None = None,
                    assembled: AssembledSynthesis | None = None,
                    require_optimal: bool = True) -> SynthesisSolution:
    """Minimize the weighted sum of region performance levels.

    With ``require_optimal=False`` a non-optimal solver exit is accepted when
    the returned point satisfies every LMI with its margin (a feasibility
    certificate for fixed levels).
    """
    t0 = time.perf_counter()
    asm = assembled or assemble_synthesis_lmis(p)
    sol = solve(asm.problem, opts or SolveOptions(relaxed_tol=SYNTHESIS_RELAXED_TOL))
    elapsed = time.perf_counter() - t0
    worst = asm.info[sol.worst_index] if sol.worst_index >= 0 else None
    diag = {"status": sol.status, "objective": sol.objective, "bound": sol.bound,
            "worst_margin": sol.worst_margin, "worst_constraint": worst.describe() if worst else None,
            "constraints": len(asm.info), "seconds": elapsed, **sol.info}
    if not sol.ok and (require_optimal or sol.worst_margin < 0):
        where = worst.describe() if worst else "unknown"
        raise SynthesisError(f"synthesis {sol.status}; worst constraint {where} "
                             f"(margin {sol.worst_margin:.3e})")
    part = p.plant.partition
    V = sol.values
    owner = r_owners(p)
    R = [[V[_rname(owner[i], j)] for j in range(len(p.bases[i].f))] for i in range(part.size)]
    S = [[V[_sname(i, j)] for j in range(len(p.bases[i].g))] for i in range(part.size)]
    cert = LyapunovCertificate(list(p.bases), R, S)
    if p.fixed_gamma is None:
        gammas = [float(V[_gname(i)]) for i in range(part.size)]
    else:
        gammas = [float(g) for g in p.fixed_gamma]
    dhat = {}
    if p.boundary:
        for srf in part.surfaces():
            dname = _dname(srf.src, srf.dst)
            # shared constant R pins Dhat to the identity
            dhat[(srf.src, srf.dst)] = V[dname] if dname in V else np.eye(p.plant.dims["n"])
    return SynthesisSolution(cert, dhat, gammas, p.plant, p.rates, diag)


def design(p: SynthesisProblem, backoff: float = 1e-2, coupling_cap: float = 10.0,
           opts: SolveOptions | None = None) -> SynthesisSolution:
    """Optimal levels, then a certificate usable for reconstruction.

    The first solve minimizes the weighted levels.  Its certificate sits on
    the coupling boundary (``I - R S`` numerically singular), so a second
    solve fixes ``gamma_i * (1 + backoff)`` and maximizes ``t`` in
    ``[[R, tI], [tI, S]] >= 0``.  The returned ``gammas`` are the backed-off
    levels the certificate proves; the optimum and its bound are kept in the
    diagnostics.
    """
    if backoff < 0:
        raise ValueError("backoff must be >= 0")
    if p.fixed_gamma is not None:
        return solve_synthesis(p, opts)
    first = solve_synthesis(p, opts)
    levels = [g * (1 + backoff) for g in first.gammas]
    centered = replace(p, fixed_gamma=levels, coupling_cap=coupling_cap)
    sol = solve_synthesis(centered, opts, require_optimal=False)
    d = first.diagnostics
    sol.diagnostics.update(optimal_gammas=list(first.gammas), optimal_bound=d["bound"],
                           optimal_status=d["status"], optimal_accuracy=d.get("accuracy"),
                           backoff=backoff, seconds=d["seconds"] + sol.diagnostics["seconds"])
    return sol


# --------------------------------------------------------------------------
# reconstruction
# --------------------------------------------------------------------------

FACTORIZATIONS = ("m-identity", "n-identity", "svd")


def factorize_MN(R: np.ndarray, S: np.ndarray, convention: str = "m-identity",
                 cond_limit: float = 1e12) -> tuple[np.ndarray, np.ndarray, float]:
    """Factors with ``M N^T = I - R S``; returns ``(M, N, cond(I - RS))``.

    ``m-identity``: M = I, N = I - S R.  ``n-identity``: N = I, M = I - R S.
    ``svd``: balanced split of the singular values.
    """
    n = R.shape[0]
    Q = np.eye(n) - R @ S
    cond = float(np.linalg.cond(Q))
    if not np.isfinite(cond) or cond > cond_limit:
        raise ReconstructionError(f"I - RS is near-singular (cond {cond:.3e}); coupling margin too small")
    if convention == "m-identity":
        return np.eye(n), Q.T.copy(), cond
    if convention == "n-identity":
        return Q, np.eye(n), cond
    if convention == "svd":
        U, s, Vt = np.linalg.svd(Q)
        r = np.sqrt(s)
        return U * r, Vt.T * r, cond
    raise ValueError(f"unknown factorization {convention!r}")


@dataclass
class ControllerPoint:
    """Controller data at one grid point; ``Ak = Ak0 + sum_k rate_k * Ak_rate[k]``."""

    rho: np.ndarray
    Ak0: np.ndarray
    Ak_rate: list[np.ndarray]
    Bk: np.ndarray
    Ck: np.ndarray
    Dk: np.ndarray
    M: np.ndarray
    N: np.ndarray
    F: np.ndarray
    L: np.ndarray

    def Ak(self, rate) -> np.ndarray:
        r = np.atleast_1d(np.asarray(rate, float))
        return self.Ak0 + sum(rk * Ak for rk, Ak in zip(r, self.Ak_rate))


@dataclass
class GainScheduledController:
    """Gridded gains per region plus reset matrices per directed surface."""

    tables: list[list[ControllerPoint]]
    resets: dict[tuple[int, int], np.ndarray]
    convention: str = "m-identity"
    rate_dependent: bool = False
    # plant coordinates x = T x_new the gains were computed in (None: original)
    state_transform: np.ndarray | None = None

    @property
    def regions(self) -> int:
        return len(self.tables)

    def gains(self, i: int, rho, rate=0.0):
        """``(Ak, Bk, Ck, Dk)`` at ``rho`` by piecewise-linear interpolation on the region grid (s = 1)."""
        table = self.tables[i]
        r = float(np.ravel(rho)[0])
        xs = [float(pt.rho[0]) for pt in table]
        if r <= xs[0]:
            k, a = 0, 0.0
        elif r >= xs[-1]:
            k, a = len(xs) - 2, 1.0
        else:
            k = int(np.searchsorted(xs, r, side="right")) - 1
            k = min(k, len(xs) - 2)
            a = (r - xs[k]) / (xs[k + 1] - xs[k])
        p0, p1 = table[k], table[k + 1]
        Ak = (1 - a) * p0.Ak(rate) + a * p1.Ak(rate)
        Bk = (1 - a) * p0.Bk + a * p1.Bk
        Ck = (1 - a) * p0.Ck + a * p1.Ck
        Dk = (1 - a) * p0.Dk + a * p1.Dk
        return Ak, Bk, Ck, Dk

    def reset(self, i: int, j: int) -> np.ndarray:
        return self.resets[(i, j)]


def _inv(M, what, where):
    try:
        c = np.linalg.cond(M)
        if not np.isfinite(c) or c > 1e14:
            raise np.linalg.LinAlgError
        return np.linalg.inv(M)
    except np.linalg.LinAlgError:
        raise ReconstructionError(f"{what} is singular at {where}") from None


def _factor_derivatives(cert, i, rho, convention, R, S, M, N):
    """Per-coordinate derivatives (dR, dS, dM) along rho."""
    dR = cert.dR_at(i, rho)
    dS = cert.dS_at(i, rho)
    s = len(dR)
    if convention == "m-identity":
        dM = [np.zeros_like(M) for _ in range(s)]
    elif convention == "n-identity":
        dM = [-(dR[k] @ S + R @ dS[k]) for k in range(s)]
    else:
        # balanced factors have no closed-form derivative; central differences
        dM = []
        r0 = np.asarray(rho, float)
        for k in range(s):
            h = 1e-6 * max(1.0, abs(r0[k]))
            rp, rm = r0.copy(), r0.copy()
            rp[k] += h
            rm[k] -= h
            Mp = factorize_MN(cert.R_at(i, rp), cert.S_at(i, rp), convention)[0]
            Mm = factorize_MN(cert.R_at(i, rm), cert.S_at(i, rm), convention)[0]
            dM.append((Mp - Mm) / (2 * h))
    return dR, dS, dM


def controller_at(sol: SynthesisSolution, i: int, rho, convention: str = "m-identity") -> ControllerPoint:
    """Full-order controller gains at one parameter value."""
    rho = np.atleast_1d(np.asarray(rho, float))
    P = evaluate_plant(sol.plant, i, rho)
    cert = sol.certificate
    g = sol.gammas[i]
    R, S = cert.R_at(i, rho), cert.S_at(i, rho)
    where = f"region {i + 1} rho={rho.tolist()}"
    Ri = _inv(R, "R", where)
    Si = _inv(S, "S", where)
    M, N, _ = factorize_MN(R, S, convention)
    Ni = _inv(N, "N", where)
    MiT = _inv(M.T, "M", where)
    F = -np.linalg.solve(P.D12.T @ P.D12, g * P.B2.T @ Ri + P.D12.T @ P.C1)
    L = -np.linalg.solve((P.D21 @ P.D21.T).T, (g * Si @ P.C2.T + P.B1 @ P.D21.T).T).T
    core = (P.A.T + S @ (P.A + P.B2 @ F + L @ P.C2) @ R
            + (1.0 / g) * S @ (P.B1 + L @ P.D21) @ P.B1.T
            + (1.0 / g) * P.C1.T @ (P.C1 + P.D12 @ F) @ R)
    Ak0 = -Ni @ core @ MiT
    dR, dS, dM = _factor_derivatives(cert, i, rho, convention, R, S, M, N)
    # d/dt terms: -S dR/dt - N dM^T/dt, linear in the rate
    Ak_rate = [-Ni @ (-S @ dR[k] - N @ dM[k].T) @ MiT for k in range(len(dR))]
    Bk = Ni @ S @ L
    Ck = F @ R @ MiT
    Dk = np.zeros((P.B2.shape[1], P.C2.shape[0]))
    return ControllerPoint(rho, Ak0, Ak_rate, Bk, Ck, Dk, M, N, F, L)


def recover_reset(sol: SynthesisSolution, i: int, j: int, rho, convention: str = "m-identity",
                  dhat: np.ndarray | None = None) -> np.ndarray:
    """Controller reset matrix ``N_j^{-1} (Dhat - S_j R_i) M_i^{-T}`` on the surface from i to j."""
    rho = np.atleast_1d(np.asarray(rho, float))
    cert = sol.certificate
    D = sol.dhat[(i, j)] if dhat is None else dhat
    Ri, Si = cert.R_at(i, rho), cert.S_at(i, rho)
    Rj, Sj = cert.R_at(j, rho), cert.S_at(j, rho)
    Mi, _, _ = factorize_MN(Ri, Si, convention)
    _, Nj, _ = factorize_MN(Rj, Sj, convention)
    where = f"surface {i + 1}->{j + 1} rho={rho.tolist()}"
    Nji = _inv(Nj, f"N_{j + 1}", where)
    MiT = _inv(Mi.T, f"M_{i + 1}", where)
    return Nji @ (D - Sj @ Ri) @ MiT


def reconstruct_controller(sol: SynthesisSolution, convention: str = "m-identity",
                           balance: bool = True) -> GainScheduledController:
    """Gain tables on each region grid plus one reset per directed surface.

    With ``balance`` the gains are computed from the design seen in balanced
    plant coordinates; the controller's input/output map does not depend on
    the plant realization, so the result controls the original plant.
    """
    T = None
    if balance:
        T = balancing_transform(sol.certificate, sol.plant.partition.grids)
        sol = sol.state_transformed(T)
    part = sol.plant.partition
    tables = [[controller_at(sol, i, rho, convention) for rho in part.grid(i)] for i in range(part.size)]
    resets = {}
    for srf in part.surfaces():
        pts = surface_points(part, srf.src, srf.dst)
        resets[(srf.src, srf.dst)] = recover_reset(sol, srf.src, srf.dst, pts[0], convention)
    rate_dep = any(np.any(Ak != 0) for tab in tables for pt in tab for Ak in pt.Ak_rate)
    return GainScheduledController(tables, resets, convention, rate_dep, T)


# --------------------------------------------------------------------------
# closed loop and a-posteriori checks
# --------------------------------------------------------------------------

@dataclass
class ClosedLoopMatrices:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray


def closed_loop(P: PlantMatrices, Ak, Bk, Ck, Dk) -> ClosedLoopMatrices:
    """Plant in feedback with ``u = Ck xk + Dk y``, ``xk' = Ak xk + Bk y`` (D22 = 0)."""
    A = np.block([[P.A + P.B2 @ Dk @ P.C2, P.B2 @ Ck], [Bk @ P.C2, Ak]])
    B = np.vstack([P.B1 + P.B2 @ Dk @ P.D21, Bk @ P.D21])
    C = np.hstack([P.C1 + P.D12 @ Dk @ P.C2, P.D12 @ Ck])
    D = P.D11 + P.D12 @ Dk @ P.D21
    return ClosedLoopMatrices(A, B, C, D)


def jump_map(n: int, reset: np.ndarray) -> np.ndarray:
    Ar = np.zeros((2 * n, 2 * n))
    Ar[:n, :n] = np.eye(n)
    Ar[n:, n:] = reset
    return Ar


def storage_matrix(cert: LyapunovCertificate, i: int, rho, convention: str = "m-identity"):
    """``X_i`` from ``X Z1 = Z2`` and its gradient along rho."""
    R, S = cert.R_at(i, rho), cert.S_at(i, rho)
    M, N, _ = factorize_MN(R, S, convention)
    MiT = np.linalg.inv(M.T)
    X22 = -N.T @ R @ MiT
    X = np.block([[S, N], [N.T, X22]])
    X = 0.5 * (X + X.T)
    dR, dS, dM = _factor_derivatives(cert, i, rho, convention, R, S, M, N)
    dX = []
    for k in range(len(dR)):
        # differentiate M N^T = I - R S for dN given dM
        dQ = -(dR[k] @ S + R @ dS[k])
        dNT = np.linalg.solve(M, dQ - dM[k] @ N.T)
        dN = dNT.T
        dMiT = -MiT @ dM[k].T @ MiT
        dX22 = -(dNT @ R @ MiT + N.T @ dR[k] @ MiT + N.T @ R @ dMiT)
        D = np.block([[dS[k], dN], [dNT, dX22]])
        dX.append(0.5 * (D + D.T))
    return X, dX


def analysis_lmi(cl: ClosedLoopMatrices, X, dX, rate, gamma) -> np.ndarray:
    """Bounded-real matrix; negative definite certifies the bound at this point and rate."""
    nw = cl.B.shape[1]
    nz = cl.C.shape[0]
    Xd = sum(r * d for r, d in zip(np.atleast_1d(rate), dX))
    top = cl.A.T @ X + X @ cl.A + Xd
    return np.block([[top, X @ cl.B, cl.C.T],
                     [cl.B.T @ X, -gamma * np.eye(nw), cl.D.T],
                     [cl.C, cl.D, -gamma * np.eye(nz)]])


@dataclass
class MarginRecord:
    family: str  # X | analysis | jump
    region: int
    rho: tuple[float, ...]
    rate: tuple[float, ...] | None
    margin: float  # sign-adjusted minimum eigenvalue
    scale: float  # block norm used for the relative margin
    target: int | None = None

    @property
    def relative(self) -> float:
        return self.margin / max(self.scale, 1e-300)


@dataclass
class ValidationReport:
    records: list[MarginRecord]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(r.relative >= -self.tolerance for r in self.records)

    def worst(self, family: str | None = None) -> MarginRecord | None:
        recs = [r for r in self.records if family is None or r.family == family]
        return min(recs, key=lambda r: r.relative) if recs else None

    def summary(self) -> dict:
        out = {"passed": self.passed, "tolerance": self.tolerance, "families": {}}
        for fam in ("X", "analysis", "jump"):
            w = self.worst(fam)
            if w is not None:
                out["families"][fam] = {"worst_relative": w.relative, "worst_margin": w.margin,
                                        "region": w.region + 1, "rho": list(w.rho),
                                        "rate": None if w.rate is None else list(w.rate)}
        return out


def validate_certificate(sol: SynthesisSolution, controller: GainScheduledController,
                         grids: Sequence[np.ndarray] | None = None, tolerance: float = 1e-5,
                         interpolate: bool = False) -> ValidationReport:
    """Margins of X_i > 0, the bounded-real LMI at every rate vertex and the jump condition.

    ``interpolate`` evaluates controller gains by table interpolation instead
    of exact reconstruction (relevant off the synthesis grid).
    """
    if controller.state_transform is not None:
        sol = sol.state_transformed(controller.state_transform)
    part = sol.plant.partition
    grids = grids if grids is not None else part.grids
    conv = controller.convention
    cert = sol.certificate
    recs: list[MarginRecord] = []
    vertices = sol.rates.rate_vertices()
    for i in range(part.size):
        for rho in grids[i]:
            rt = tuple(float(x) for x in np.ravel(rho))
            P = evaluate_plant(sol.plant, i, rho)
            X, dX = storage_matrix(cert, i, rho, conv)
            recs.append(MarginRecord("X", i, rt, None, min_eig(X), np.linalg.norm(X, 2)))
            if interpolate:
                pt = None
            else:
                pt = controller_at(sol, i, rho, conv)
            for nu in vertices:
                if pt is None:
                    Ak, Bk, Ck, Dk = controller.gains(i, rho, nu)
                else:
                    Ak, Bk, Ck, Dk = pt.Ak(nu), pt.Bk, pt.Ck, pt.Dk
                cl = closed_loop(P, Ak, Bk, Ck, Dk)
                H = analysis_lmi(cl, X, dX, nu, sol.gammas[i])
                recs.append(MarginRecord("analysis", i, rt, tuple(nu.tolist()), min_eig(-H),
                                         np.linalg.norm(H, 2)))
    for (i, j), reset in controller.resets.items():
        for rho in surface_points(part, i, j):
            rt = tuple(float(x) for x in rho)
            Xi, _ = storage_matrix(cert, i, rho, conv)
            Xj, _ = storage_matrix(cert, j, rho, conv)
            Ar = jump_map(cert.n, reset)
            J = Xi - Ar.T @ Xj @ Ar
            scale = max(np.linalg.norm(Xi, 2), np.linalg.norm(Ar.T @ Xj @ Ar, 2))
            recs.append(MarginRecord("jump", i, rt, None, min_eig(J), scale, j))
    return ValidationReport(recs, tolerance)


def synthesis_margins(asm: AssembledSynthesis, sol: SynthesisSolution) -> np.ndarray:
    """Re-check the synthesis LMIs at the returned certificate."""
    vals = {}
    part = asm.source.plant.partition
    owner = r_owners(asm.source)
    for i in range(part.size):
        for j, R in enumerate(sol.certificate.R[i]):
            vals[_rname(owner[i], j)] = R
        for j, S in enumerate(sol.certificate.S[i]):
            vals[_sname(i, j)] = S
        if asm.source.fixed_gamma is None:
            vals[_gname(i)] = sol.gammas[i]
    for (i, j), D in sol.dhat.items():
        if _dname(i, j) in asm.problem.variables:
            vals[_dname(i, j)] = D
    return asm.problem.check_feasible(vals)
