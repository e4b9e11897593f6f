"""Parameter domain, overlapped covering, basis functions and gridded LPV plants."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np


class ModelError(ValueError):
    """A plant violates a standing assumption (dimensions, A2, A3)."""


class DomainError(ValueError):
    """A parameter value lies outside the set it was evaluated on."""


def _vec(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float))


# --------------------------------------------------------------------------
# domain and covering
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise ValueError("box bounds differ in dimension")
        if any(not (l < h) for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"degenerate box {self.lo} .. {self.hi}")

    @property
    def dim(self) -> int:
        return len(self.lo)

    def contains(self, rho, tol: float = 0.0) -> bool:
        r = _vec(rho)
        return bool(np.all(r >= np.asarray(self.lo) - tol) and np.all(r <= np.asarray(self.hi) + tol))

    def intersect(self, other: "Box") -> tuple[np.ndarray, np.ndarray]:
        return np.maximum(self.lo, other.lo), np.minimum(self.hi, other.hi)

    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))

    def halfwidth(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.hi) - np.asarray(self.lo))


@dataclass(frozen=True)
class ParameterDomain:
    """Box of admissible parameters plus the box of admissible rates."""

    box: Box
    rate_lo: tuple[float, ...]
    rate_hi: tuple[float, ...]

    def __post_init__(self):
        if len(self.rate_lo) != self.box.dim or len(self.rate_hi) != self.box.dim:
            raise ValueError("rate bounds must match the parameter dimension")
        if any(l > 0 or h < 0 for l, h in zip(self.rate_lo, self.rate_hi)):
            raise ValueError("rate box must contain the origin")

    @classmethod
    def interval(cls, lo: float, hi: float, rate: float | tuple[float, float]) -> "ParameterDomain":
        rl, rh = (-abs(rate), abs(rate)) if np.isscalar(rate) else rate
        return cls(Box((float(lo),), (float(hi),)), (float(rl),), (float(rh),))

    @property
    def dim(self) -> int:
        return self.box.dim

    def rate_vertices(self) -> list[np.ndarray]:
        """Vertices of the rate box, 2**s of them (duplicates removed when a bound is 0)."""
        out = []
        for combo in itertools.product(*[sorted({l, h}) for l, h in zip(self.rate_lo, self.rate_hi)]):
            out.append(np.array(combo, dtype=float))
        return out

    def with_rate(self, rate) -> "ParameterDomain":
        rl, rh = (-abs(rate), abs(rate)) if np.isscalar(rate) else rate
        s = self.dim
        return replace(self, rate_lo=(float(rl),) * s, rate_hi=(float(rh),) * s)


@dataclass(frozen=True)
class Surface:
    """Switching surface from region ``src`` to ``dst``.

    It is the facet ``rho[coord] == value`` of box ``src``, restricted to the
    overlap with ``dst`` on the other coordinates.
    """

    src: int
    dst: int
    coord: int
    value: float
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def crossed(self, rho_prev, rho_now) -> float | None:
        """Fraction in [0, 1] along the segment where it reaches the facet, or None."""
        a, b = _vec(rho_prev), _vec(rho_now)
        k = self.coord
        da = a[k] - self.value
        db = b[k] - self.value
        outward = 1.0 if self.is_upper else -1.0
        # leaving through the facet: from inside (outward*d < 0) to on/over it
        if outward * db < 0 or outward * da >= 0:
            return None
        s = da / (da - db)
        p = a + s * (b - a)
        others = [j for j in range(a.size) if j != k]
        if any(p[j] < self.lo[j] or p[j] > self.hi[j] for j in others):
            return None
        return float(s)

    is_upper: bool = True


@dataclass
class Partition:
    """Overlapped covering of the parameter box with directed switching surfaces."""

    boxes: list[Box]
    grids: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.boxes:
            raise ValueError("partition needs at least one subset")
        dims = {b.dim for b in self.boxes}
        if len(dims) != 1:
            raise ValueError("all subsets must share the parameter dimension")

    @classmethod
    def from_intervals(cls, intervals: Sequence[tuple[float, float]]) -> "Partition":
        return cls([Box((float(lo),), (float(hi),)) for lo, hi in intervals])

    @property
    def size(self) -> int:
        return len(self.boxes)

    @property
    def dim(self) -> int:
        return self.boxes[0].dim

    def hull(self) -> Box:
        lo = np.min([b.lo for b in self.boxes], axis=0)
        hi = np.max([b.hi for b in self.boxes], axis=0)
        return Box(tuple(lo), tuple(hi))

    def contains(self, i: int, rho, tol: float = 0.0) -> bool:
        return self.boxes[i].contains(rho, tol)

    def regions_containing(self, rho, tol: float = 0.0) -> list[int]:
        return [i for i, b in enumerate(self.boxes) if b.contains(rho, tol)]

    def first_region(self, rho) -> int:
        regs = self.regions_containing(rho)
        if not regs:
            raise DomainError(f"parameter {rho} lies outside every subset")
        return regs[0]

    def adjacent(self, i: int, j: int) -> bool:
        if i == j:
            return False
        lo, hi = self.boxes[i].intersect(self.boxes[j])
        return bool(np.all(lo < hi))

    def surfaces(self) -> list[Surface]:
        out = []
        for i in range(self.size):
            for j in range(self.size):
                if self.adjacent(i, j):
                    out.extend(self._facets(i, j))
        return out

    def _facets(self, i: int, j: int) -> list[Surface]:
        bi, bj = self.boxes[i], self.boxes[j]
        lo, hi = bi.intersect(bj)
        out = []
        for k in range(self.dim):
            if bj.hi[k] > bi.hi[k]:
                out.append(Surface(i, j, k, bi.hi[k], tuple(lo), tuple(hi), True))
            if bj.lo[k] < bi.lo[k]:
                out.append(Surface(i, j, k, bi.lo[k], tuple(lo), tuple(hi), False))
        return out

    def surface(self, i: int, j: int) -> Surface:
        if not self.adjacent(i, j):
            raise ValueError(f"subsets {i} and {j} are not adjacent")
        facets = self._facets(i, j)
        if len(facets) != 1:
            raise ValueError(f"subsets {i} -> {j} share {len(facets)} facets; use surfaces()")
        return facets[0]

    def grid(self, i: int) -> np.ndarray:
        if not self.grids:
            raise ValueError("partition has no grids; call build_grids first")
        return self.grids[i]


def build_grids(partition: Partition, points_per_subset: int) -> Partition:
    """Uniform inclusive tensor grids, ``points_per_subset`` per coordinate."""
    if points_per_subset < 2:
        raise ValueError("need at least 2 points per subset")
    grids = []
    for b in partition.boxes:
        axes = [np.linspace(l, h, points_per_subset) for l, h in zip(b.lo, b.hi)]
        for ax, l, h in zip(axes, b.lo, b.hi):
            ax[0], ax[-1] = l, h
        pts = np.array(list(itertools.product(*axes)))
        grids.append(pts)
    return Partition(list(partition.boxes), grids)


def surface_points(partition: Partition, i: int, j: int, points_per_facet: int = 3) -> np.ndarray:
    """Sample points on the surface from ``i`` to ``j`` (a single point when s = 1)."""
    srf = partition.surface(i, j)
    if partition.dim == 1:
        return np.array([[srf.value]])
    axes = []
    for k in range(partition.dim):
        if k == srf.coord:
            axes.append(np.array([srf.value]))
        else:
            axes.append(np.linspace(srf.lo[k], srf.hi[k], points_per_facet))
    return np.array(list(itertools.product(*axes)))


def dense_grid(partition: Partition, multiplier: int = 5) -> list[np.ndarray]:
    """Validation grids ``multiplier`` times denser than the synthesis grids."""
    out = []
    for i, b in enumerate(partition.boxes):
        n = len(np.unique(partition.grid(i)[:, 0])) if partition.grids else 10
        m = (n - 1) * multiplier + 1
        axes = [np.linspace(l, h, m) for l, h in zip(b.lo, b.hi)]
        out.append(np.array(list(itertools.product(*axes))))
    return out


# --------------------------------------------------------------------------
# basis functions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Monomial:
    """``prod_k ((rho_k - center_k)/scale_k) ** exponents_k``.

    With ``center = 0`` and ``scale = 1`` this is a plain monomial; the
    affine normalization only improves conditioning, it spans the same space
    together with the constant.
    """

    exponents: tuple[int, ...]
    center: tuple[float, ...] | None = None
    scale: tuple[float, ...] | None = None

    def _t(self, rho):
        r = _vec(rho)
        c = np.zeros_like(r) if self.center is None else np.asarray(self.center)
        s = np.ones_like(r) if self.scale is None else np.asarray(self.scale)
        return (r - c) / s, s

    def __call__(self, rho) -> float:
        t, _ = self._t(rho)
        return float(np.prod(t ** np.asarray(self.exponents)))

    def grad(self, rho) -> np.ndarray:
        t, s = self._t(rho)
        e = np.asarray(self.exponents)
        g = np.zeros(len(e))
        for k in range(len(e)):
            if e[k] == 0:
                continue
            ek = e.copy()
            ek[k] -= 1
            g[k] = e[k] * np.prod(t ** ek) / s[k]
        return g

    @property
    def is_constant(self) -> bool:
        return not any(self.exponents)

    def describe(self) -> str:
        if self.is_constant:
            return "1"
        parts = []
        for k, e in enumerate(self.exponents):
            if e:
                base = f"rho{k + 1}" if self.center is None else f"t{k + 1}"
                parts.append(base if e == 1 else f"{base}^{e}")
        return "*".join(parts)


def constant(s: int = 1) -> Monomial:
    return Monomial((0,) * s)


def coordinate(k: int, s: int = 1, center=None, scale=None) -> Monomial:
    e = [0] * s
    e[k] = 1
    return Monomial(tuple(e), center, scale)


@dataclass(frozen=True)
class BasisSet:
    """Basis functions for R (``f``) and S (``g``)."""

    f: tuple[Monomial, ...]
    g: tuple[Monomial, ...]

    @classmethod
    def paper_default(cls, box: Box | None = None, normalize: bool = True) -> "BasisSet":
        """R constant; S spanned by {1, rho} (affinely normalized over ``box`` when given)."""
        s = 1 if box is None else box.dim
        if box is not None and normalize:
            lin = coordinate(0, s, tuple(box.center()), tuple(box.halfwidth()))
        else:
            lin = coordinate(0, s)
        return cls((constant(s),), (constant(s), lin))

    @classmethod
    def constant_only(cls, s: int = 1) -> "BasisSet":
        return cls((constant(s),), (constant(s),))

    def r_constant(self) -> bool:
        return all(m.is_constant for m in self.f)

    def s_constant(self) -> bool:
        return all(m.is_constant for m in self.g)


def basis_combination(funcs: Sequence[Monomial], coefs: Sequence[np.ndarray], rho) -> np.ndarray:
    return sum(fn(rho) * C for fn, C in zip(funcs, coefs))


def basis_gradient(funcs: Sequence[Monomial], coefs: Sequence[np.ndarray], rho) -> list[np.ndarray]:
    """[dM/drho_k for k in range(s)]."""
    grads = [fn.grad(rho) for fn in funcs]
    s = len(grads[0])
    return [sum(g[k] * C for g, C in zip(grads, coefs)) for k in range(s)]


# --------------------------------------------------------------------------
# plant
# --------------------------------------------------------------------------

class PlantMatrices(NamedTuple):
    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C1: np.ndarray
    D11: np.ndarray
    D12: np.ndarray
    C2: np.ndarray
    D21: np.ndarray
    D22: np.ndarray

    @property
    def dims(self) -> dict[str, int]:
        return {"n": self.A.shape[0], "nw": self.B1.shape[1], "nu": self.B2.shape[1],
                "nz": self.C1.shape[0], "ny": self.C2.shape[0]}

    def state_transformed(self, T: np.ndarray) -> "PlantMatrices":
        """Realization in coordinates ``x = T x_new``."""
        Ti = np.linalg.inv(T)
        return self._replace(A=Ti @ self.A @ T, B1=Ti @ self.B1, B2=Ti @ self.B2,
                             C1=self.C1 @ T, C2=self.C2 @ T)


def check_plant_dims(P: PlantMatrices) -> None:
    n = P.A.shape[0]
    nw, nu = P.B1.shape[1], P.B2.shape[1]
    nz, ny = P.C1.shape[0], P.C2.shape[0]
    expect = {"A": (n, n), "B1": (n, nw), "B2": (n, nu), "C1": (nz, n), "D11": (nz, nw),
              "D12": (nz, nu), "C2": (ny, n), "D21": (ny, nw), "D22": (ny, nu)}
    for name, shape in expect.items():
        M = getattr(P, name)
        if M.shape != shape:
            raise ModelError(f"{name} has shape {M.shape}, expected {shape}")
        if not np.all(np.isfinite(M)):
            raise ModelError(f"{name} has non-finite entries")


@dataclass
class AffineMatrices:
    """``M(rho) = M0 + sum_k rho_k * M_k``; keeps coefficients for Lipschitz bounds."""

    terms: dict[str, list[np.ndarray]]

    def __call__(self, rho) -> PlantMatrices:
        r = _vec(rho)
        vals = {}
        for name, coefs in self.terms.items():
            M = np.array(coefs[0], dtype=float, copy=True)
            for k, Mk in enumerate(coefs[1:]):
                M = M + r[k] * Mk
            vals[name] = M
        return PlantMatrices(**vals)

    def batch(self, rhos) -> dict[str, np.ndarray]:
        """Every matrix at each row of ``rhos`` ((m, s), or (m,) when s = 1): arrays (m, rows, cols)."""
        R = np.asarray(rhos, float)
        if R.ndim == 1:
            R = R[:, None]
        out = {}
        for name, coefs in self.terms.items():
            M = np.broadcast_to(np.asarray(coefs[0], float), (R.shape[0],) + np.shape(coefs[0])).copy()
            for k, Mk in enumerate(coefs[1:]):
                M += R[:, k, None, None] * np.asarray(Mk, float)
            out[name] = M
        return out

    def lipschitz(self, name: str) -> float:
        """Bound on ||M(rho + d) - M(rho)||_2 / ||d||_2 from the coefficient norms."""
        return float(np.sqrt(sum(np.linalg.norm(Mk, 2) ** 2 for Mk in self.terms[name][1:])))


@dataclass
class LpvPlant:
    """Open-loop switched LPV plant: one matrix function per subset of ``partition``."""

    partition: Partition
    funcs: list[Callable[[np.ndarray], PlantMatrices]]
    name: str = "plant"
    tol: float = 1e-9

    def __post_init__(self):
        if len(self.funcs) == 1 and self.partition.size > 1:
            self.funcs = list(self.funcs) * self.partition.size
        if len(self.funcs) != self.partition.size:
            raise ValueError("need one matrix function per subset")
        P = self.funcs[0](np.asarray(self.partition.boxes[0].lo))
        check_plant_dims(P)
        self._dims = P.dims

    @property
    def dims(self) -> dict[str, int]:
        return dict(self._dims)

    def with_partition(self, partition: Partition) -> "LpvPlant":
        funcs = self.funcs if len(set(map(id, self.funcs))) > 1 else [self.funcs[0]]
        return LpvPlant(partition, list(funcs), self.name, self.tol)

    def evaluate(self, i: int, rho) -> PlantMatrices:
        return evaluate_plant(self, i, rho)

    def state_transformed(self, T: np.ndarray) -> "LpvPlant":
        """Same plant with the state coordinates ``x = T x_new`` in every subset."""
        T = np.array(T, float)
        funcs = [lambda rho, f=f: f(rho).state_transformed(T) for f in self.funcs]
        return LpvPlant(self.partition, funcs, self.name, self.tol)


def evaluate_plant(plant: LpvPlant, i: int, rho) -> PlantMatrices:
    """All nine plant matrices of subset ``i`` at ``rho``."""
    if not 0 <= i < plant.partition.size:
        raise DomainError(f"no subset {i}")
    box = plant.partition.boxes[i]
    span = float(np.max(np.asarray(box.hi) - np.asarray(box.lo)))
    if not box.contains(rho, plant.tol * max(1.0, span)):
        raise DomainError(f"parameter {np.asarray(rho).tolist()} outside subset {i} "
                          f"[{box.lo} .. {box.hi}]")
    P = plant.funcs[i](_vec(rho))
    check_plant_dims(P)
    if P.dims != plant._dims:
        raise ModelError(f"dimension change at rho={rho} in subset {i}")
    return P


def check_assumptions(plant: LpvPlant, points_per_region: Sequence[np.ndarray] | None = None,
                      rank_tol: float = 1e-8) -> None:
    """Hard check of A2 (rank) and A3 (zero feedthrough) at every listed point."""
    pts = points_per_region if points_per_region is not None else plant.partition.grids
    for i, grid in enumerate(pts):
        for rho in grid:
            P = evaluate_plant(plant, i, rho)
            if np.any(P.D11 != 0) or np.any(P.D22 != 0):
                raise ModelError(f"D11/D22 nonzero at rho={np.ravel(rho).tolist()} in subset {i}")
            nu, ny = P.D12.shape[1], P.D21.shape[0]
            s12 = np.linalg.svd(P.D12, compute_uv=False)
            s21 = np.linalg.svd(P.D21, compute_uv=False)
            if s12.size < nu or s12[-1] <= rank_tol * max(s12[0], 1e-300):
                raise ModelError(f"D12 lacks full column rank at rho={np.ravel(rho).tolist()} in subset {i}")
            if s21.size < ny or s21[-1] <= rank_tol * max(s21[0], 1e-300):
                raise ModelError(f"D21 lacks full row rank at rho={np.ravel(rho).tolist()} in subset {i}")


# --------------------------------------------------------------------------
# Lyapunov certificate
# --------------------------------------------------------------------------

@dataclass
class LyapunovCertificate:
    """Per-region basis coefficients of R_i and S_i.

    ``R[i][j]`` multiplies ``bases[i].f[j]`` and ``S[i][j]`` multiplies
    ``bases[i].g[j]``.
    """

    bases: list[BasisSet]
    R: list[list[np.ndarray]]
    S: list[list[np.ndarray]]

    @property
    def regions(self) -> int:
        return len(self.bases)

    @property
    def n(self) -> int:
        return self.R[0][0].shape[0]

    def R_at(self, i: int, rho) -> np.ndarray:
        return basis_combination(self.bases[i].f, self.R[i], rho)

    def S_at(self, i: int, rho) -> np.ndarray:
        return basis_combination(self.bases[i].g, self.S[i], rho)

    def dR_at(self, i: int, rho) -> list[np.ndarray]:
        return basis_gradient(self.bases[i].f, self.R[i], rho)

    def dS_at(self, i: int, rho) -> list[np.ndarray]:
        return basis_gradient(self.bases[i].g, self.S[i], rho)

    def state_transformed(self, T: np.ndarray) -> "LyapunovCertificate":
        """Coefficients for the coordinates ``x = T x_new``: ``T^-1 R T^-T`` and ``T' S T``."""
        Ti = np.linalg.inv(T)
        R = [[Ti @ Rj @ Ti.T for Rj in Ri] for Ri in self.R]
        S = [[T.T @ Sj @ T for Sj in Si] for Si in self.S]
        return LyapunovCertificate(self.bases, R, S)

    def coupling(self, i: int, rho) -> np.ndarray:
        n = self.n
        I = np.eye(n)
        return np.block([[self.R_at(i, rho), I], [I, self.S_at(i, rho)]])
