"""Affine LMI problems over scalar, symmetric and rectangular matrix variables."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..matkernel import min_eig, smat, svec, svec_dim, sym_from_lower, SQRT2


class AssemblyError(KeyError):
    """An LMI references a variable missing from the assignment or problem."""


@dataclass(frozen=True)
class Var:
    """A decision variable.  ``kind`` is ``"scalar"``, ``"sym"`` or ``"mat"``."""

    name: str
    kind: str
    shape: tuple[int, int]
    offset: int

    @property
    def size(self) -> int:
        r, c = self.shape
        if self.kind == "scalar":
            return 1
        if self.kind == "sym":
            return svec_dim(r)
        return r * c

    def to_value(self, coords) -> float | np.ndarray:
        coords = np.asarray(coords, dtype=float)
        if self.kind == "scalar":
            return float(coords[0])
        if self.kind == "sym":
            return smat(coords)
        return coords.reshape(self.shape)

    def to_coords(self, value) -> np.ndarray:
        if self.kind == "scalar":
            return np.array([float(value)])
        value = np.asarray(value, dtype=float)
        if value.shape != self.shape:
            raise ValueError(f"{self.name}: expected shape {self.shape}, got {value.shape}")
        if self.kind == "sym":
            return svec(value)
        return value.ravel().copy()


@dataclass(frozen=True)
class Term:
    """Contribution of one variable to an LMI.

    * scalar variable: ``value * coef`` (``coef`` symmetric)
    * matrix variable: ``He{left @ V @ right.T}``
    * ``coord`` set: ``value[coord] * coef`` on a single coordinate (used by
      the text loader)
    """

    var: str
    coef: np.ndarray | None = None
    left: np.ndarray | None = None
    right: np.ndarray | None = None
    coord: int | None = None


@dataclass
class AffineLmi:
    """``constant + sum(terms)`` compared against zero with ``sense``.

    ``sense`` is ``">="`` or ``"<="``; ``margin`` turns the inequality into
    ``>= margin*I`` or ``<= -margin*I``.
    """

    constant: np.ndarray
    terms: list[Term] = field(default_factory=list)
    sense: str = ">="
    margin: float = 0.0
    label: str = ""

    def __post_init__(self):
        self.constant = sym_from_lower(np.atleast_2d(np.asarray(self.constant, dtype=float)))
        if self.sense not in (">=", "<="):
            raise ValueError(f"sense must be '>=' or '<=', got {self.sense!r}")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")

    @property
    def dim(self) -> int:
        return self.constant.shape[0]

    def add(self, var: "Var | str", coef=None, left=None, right=None) -> "AffineLmi":
        name = var.name if isinstance(var, Var) else var
        if coef is not None:
            self.terms.append(Term(name, coef=sym_from_lower(np.atleast_2d(coef))))
        else:
            self.terms.append(Term(name, left=np.atleast_2d(np.asarray(left, float)),
                                   right=np.atleast_2d(np.asarray(right, float))))
        return self


def _term_value(term: Term, var: Var, value) -> np.ndarray:
    if term.coord is not None:
        coords = var.to_coords(value)
        return coords[term.coord] * term.coef
    if var.kind == "scalar":
        return float(value) * term.coef
    V = np.asarray(value, dtype=float)
    if var.kind == "sym":
        V = sym_from_lower(V)
    P = term.left @ V @ term.right.T
    return P + P.T


def assemble(lmi: AffineLmi, assignment: Mapping[str, object], variables: Mapping[str, Var]) -> np.ndarray:
    """Evaluate the affine matrix expression of ``lmi`` (sense not applied)."""
    out = lmi.constant.copy()
    for term in lmi.terms:
        if term.var not in assignment:
            raise AssemblyError(f"variable {term.var!r} has no value")
        if term.var not in variables:
            raise AssemblyError(f"variable {term.var!r} is not declared")
        out = out + _term_value(term, variables[term.var], assignment[term.var])
    return 0.5 * (out + out.T)


def _coord_coefs(term: Term, var: Var, dim: int) -> np.ndarray:
    """Coefficient matrix of every coordinate of ``var`` in ``term``: shape (size, dim, dim)."""
    if term.coord is not None:
        out = np.zeros((var.size, dim, dim))
        out[term.coord] = term.coef
        return out
    if var.kind == "scalar":
        return term.coef[None, :, :].copy()
    L, R = term.left, term.right
    n_r, n_c = var.shape
    if L.shape != (dim, n_r) or R.shape != (dim, n_c):
        raise ValueError(
            f"term on {var.name}: left {L.shape} / right {R.shape} incompatible with "
            f"variable {var.shape} in a {dim}x{dim} LMI")
    T = np.einsum("ai,bj->ijab", L, R)  # L e_i e_j^T R^T
    if var.kind == "mat":
        T = T + T.transpose(0, 1, 3, 2)
        return T.reshape(n_r * n_c, dim, dim)
    P = T + T.transpose(1, 0, 2, 3)
    P = P + P.transpose(0, 1, 3, 2)
    cols, rows = np.triu_indices(n_r)  # lower triangle, column-major
    scale = np.where(rows == cols, 0.5, 1.0 / SQRT2)
    return P[rows, cols] * scale[:, None, None]


@dataclass
class Block:
    """One compiled constraint ``G0 + sum_i y[idx_i] G_i >= 0``."""

    const: np.ndarray
    idx: np.ndarray
    coefs: np.ndarray
    index: int


class SdpProblem:
    """Minimize a non-negative linear objective over scalar variables subject to LMIs."""

    def __init__(self):
        self.variables: dict[str, Var] = {}
        self.constraints: list[AffineLmi] = []
        self.objective: dict[str, float] = {}
        self._n = 0

    # declarations -------------------------------------------------------
    def _declare(self, name: str, kind: str, shape: tuple[int, int]) -> Var:
        if name in self.variables:
            raise ValueError(f"variable {name!r} already declared")
        v = Var(name, kind, shape, self._n)
        self.variables[name] = v
        self._n += v.size
        return v

    def scalar(self, name: str) -> Var:
        return self._declare(name, "scalar", (1, 1))

    def symmetric(self, name: str, n: int) -> Var:
        return self._declare(name, "sym", (n, n))

    def matrix(self, name: str, rows: int, cols: int) -> Var:
        return self._declare(name, "mat", (rows, cols))

    def add_constraint(self, lmi: AffineLmi) -> int:
        for term in lmi.terms:
            if term.var not in self.variables:
                raise AssemblyError(f"constraint references undeclared variable {term.var!r}")
        self.constraints.append(lmi)
        return len(self.constraints) - 1

    def minimize(self, weights: Mapping[str, float]) -> None:
        for name, w in weights.items():
            var = self.variables.get(name)
            if var is None or var.kind != "scalar":
                raise ValueError(f"objective must use declared scalar variables ({name!r})")
            if not np.isfinite(w) or w < 0:
                raise ValueError(f"objective weight for {name!r} must be finite and >= 0")
        self.objective = dict(weights)

    @property
    def num_coords(self) -> int:
        return self._n

    # vector <-> assignment -------------------------------------------------
    def unpack(self, y) -> dict[str, object]:
        y = np.asarray(y, dtype=float)
        return {name: v.to_value(y[v.offset:v.offset + v.size]) for name, v in self.variables.items()}

    def pack(self, assignment: Mapping[str, object]) -> np.ndarray:
        y = np.zeros(self._n)
        for name, v in self.variables.items():
            if name not in assignment:
                raise AssemblyError(f"variable {name!r} has no value")
            y[v.offset:v.offset + v.size] = v.to_coords(assignment[name])
        return y

    def cost_vector(self) -> np.ndarray:
        c = np.zeros(self._n)
        for name, w in self.objective.items():
            c[self.variables[name].offset] = w
        return c

    def objective_value(self, assignment: Mapping[str, object]) -> float:
        return float(sum(w * float(assignment[name]) for name, w in self.objective.items()))

    # compilation -----------------------------------------------------------
    def compile(self) -> list[Block]:
        """Standard form: every constraint as ``G0 + sum y_i G_i >= 0`` with margin folded in."""
        blocks = []
        for k, lmi in enumerate(self.constraints):
            dim = lmi.dim
            sign = 1.0 if lmi.sense == ">=" else -1.0
            acc: dict[str, np.ndarray] = {}
            for term in lmi.terms:
                var = self.variables[term.var]
                coefs = _coord_coefs(term, var, dim)
                acc[term.var] = acc[term.var] + coefs if term.var in acc else coefs
            idx_parts, coef_parts = [], []
            for name in sorted(acc, key=lambda nm: self.variables[nm].offset):
                var = self.variables[name]
                coefs = sign * acc[name]
                keep = np.abs(coefs).reshape(coefs.shape[0], -1).max(axis=1) > 0
                idx_parts.append(var.offset + np.flatnonzero(keep))
                coef_parts.append(coefs[keep])
            idx = np.concatenate(idx_parts) if idx_parts else np.zeros(0, int)
            coefs = np.concatenate(coef_parts) if coef_parts else np.zeros((0, dim, dim))
            const = sign * lmi.constant - lmi.margin * np.eye(dim)
            blocks.append(Block(const, idx.astype(int), coefs, k))
        return blocks

    # evaluation ------------------------------------------------------------
    def assemble(self, k: int, assignment: Mapping[str, object]) -> np.ndarray:
        return assemble(self.constraints[k], assignment, self.variables)

    def check_feasible(self, assignment: Mapping[str, object], margin: float | None = None) -> np.ndarray:
        """Sign-adjusted minimum eigenvalue of every constraint.

        Non-negative entries mean the constraint holds.  With ``margin``
        given it replaces each constraint's own strictness margin.
        """
        out = np.empty(len(self.constraints))
        for k, lmi in enumerate(self.constraints):
            F = assemble(lmi, assignment, self.variables)
            if lmi.sense == "<=":
                F = -F
            m = lmi.margin if margin is None else margin
            out[k] = min_eig(F) - m
        return out
