"""Solve :class:`SdpProblem` instances and package certified solutions."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..matkernel import min_eig
from .ipm import IpmOptions, ipm_solve
from .problem import AffineLmi, SdpProblem, Term

log = logging.getLogger(__name__)

STATUSES = ("optimal", "infeasible", "max-iter", "ill-conditioned")


@dataclass
class SolveOptions:
    max_iter: int = 150
    tol: float = 1e-7
    # stalled runs are accepted (accuracy "reduced") when the gap is below this
    relaxed_tol: float = 1e-6
    margin: float | None = None  # overrides every constraint margin when set
    method: str = "ipm"  # ipm | bisection
    bisection_var: str | None = None
    bisection_bracket: tuple[float, float] | None = None
    verbose: bool = False


@dataclass
class SdpSolution:
    status: str
    values: dict[str, Any]
    objective: float
    worst_margin: float
    margins: np.ndarray
    worst_index: int
    bound: float | None = None
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def _with_margin(p: SdpProblem, margin: float | None) -> SdpProblem:
    if margin is None:
        return p
    q = SdpProblem()
    q.variables = p.variables
    q._n = p._n
    q.objective = dict(p.objective)
    q.constraints = [AffineLmi(c.constant, list(c.terms), c.sense, margin, c.label) for c in p.constraints]
    return q


def solve(p: SdpProblem, opts: SolveOptions | None = None) -> SdpSolution:
    """Minimize the problem objective.

    ``status == "optimal"`` means the interior point iterates met ``tol`` on
    relative duality gap and residuals; ``bound`` is then the dual objective
    (a certified lower bound up to the residuals).
    """
    opts = opts or SolveOptions()
    p = _with_margin(p, opts.margin)
    if opts.method == "bisection":
        return bisect_scalar(p, opts)
    if opts.method != "ipm":
        raise ValueError(f"unknown method {opts.method!r}")

    blocks = p.compile()
    n = p.num_coords
    c = p.cost_vector()

    # constant blocks decide feasibility on their own
    live = []
    for blk in blocks:
        if blk.idx.size == 0:
            if min_eig(blk.const) < 0:
                return _package(p, np.zeros(n), "infeasible", {"reason": "constant constraint violated"})
        else:
            live.append(blk)

    used = np.zeros(n, bool)
    for blk in live:
        used[blk.idx] = True
    if np.any(c[~used] != 0):
        return _package(p, np.zeros(n), "ill-conditioned", {"reason": "objective variable unconstrained"})
    cols = np.flatnonzero(used)
    pos = -np.ones(n, int)
    pos[cols] = np.arange(cols.size)

    # variable scaling: unit column norm across all blocks
    colsq = np.zeros(n)
    for blk in live:
        colsq[blk.idx] += np.sum(blk.coefs.reshape(blk.idx.size, -1) ** 2, axis=1)
    d = np.sqrt(colsq[cols])
    d[d == 0] = 1.0

    consts, idxs, coefs = [], [], []
    for blk in live:
        j = pos[blk.idx]
        G = blk.coefs / d[j][:, None, None]
        s = max(np.abs(G).max(), 1e-300)
        consts.append(blk.const / s)
        idxs.append(j)
        coefs.append(G / s)
    cs = c[cols] / d
    cscale = max(np.abs(cs).max(initial=0.0), 1e-300) if np.any(cs) else 1.0
    cs = cs / cscale

    res = ipm_solve(consts, idxs, coefs, cs, IpmOptions(max_iter=opts.max_iter, tol=opts.tol,
                                                        relaxed_tol=max(opts.relaxed_tol, opts.tol),
                                                        verbose=opts.verbose))
    y = np.zeros(n)
    y[cols] = res.y / d
    status = {"unbounded": "ill-conditioned"}.get(res.status, res.status)
    info = {"iterations": res.iterations, "gap": res.gap, "pinf": res.pinf, "dinf": res.dinf,
            "ipm_status": res.status, "accuracy": res.accuracy}
    # weak duality: c'y >= -<C, X> (scaled back)
    bound = -res.primal_objective * cscale if status == "optimal" else None
    return _package(p, y, status, info, bound)


def _package(p: SdpProblem, y, status, info, bound=None) -> SdpSolution:
    values = p.unpack(y)
    margins = p.check_feasible(values) if p.constraints else np.zeros(0)
    worst = int(np.argmin(margins)) if margins.size else -1
    sol = SdpSolution(status, values, p.objective_value(values),
                      float(margins[worst]) if margins.size else 0.0, margins, worst, bound, info)
    if status == "infeasible":
        sol.info.setdefault("violated", worst)
    return sol


def feasibility_margin(p: SdpProblem, opts: SolveOptions | None = None) -> SdpSolution:
    """Maximize a common slack ``s`` with every constraint ``>= s*I`` (sign-adjusted).

    The problem is feasible (with its margins) iff the optimal ``s`` is >= 0.
    """
    opts = opts or SolveOptions()
    q = SdpProblem()
    q.variables = dict(p.variables)
    q._n = p._n
    t = q.scalar("__t")  # t = -slack, minimized
    for lmi in p.constraints:
        eye = np.eye(lmi.dim)
        q.add_constraint(AffineLmi(lmi.constant, list(lmi.terms) + [_scalar_term(t.name, eye if lmi.sense == ">=" else -eye)],
                                   lmi.sense, lmi.margin, lmi.label))
    # t >= -1 keeps the problem bounded when the constraints are homogeneous
    q.add_constraint(AffineLmi(np.eye(1), [_scalar_term(t.name, np.eye(1))], ">=", 0.0, "slack-bound"))
    q.objective = {t.name: 1.0}
    sol = solve(q, SolveOptions(max_iter=opts.max_iter, tol=opts.tol, relaxed_tol=opts.relaxed_tol,
                                verbose=opts.verbose))
    slack = -float(sol.values[t.name])
    sol.values.pop(t.name)
    sol.info["slack"] = slack
    return sol


def _scalar_term(name, coef):
    return Term(name, coef=np.asarray(coef, float))


def bisect_scalar(p: SdpProblem, opts: SolveOptions) -> SdpSolution:
    """Minimize a single scalar objective variable by bisection on feasibility.

    Valid when feasibility is monotone in that variable (e.g. a performance
    level).  Each step fixes the variable and maximizes the common slack.
    """
    name = opts.bisection_var or (next(iter(p.objective)) if len(p.objective) == 1 else None)
    if name is None:
        raise ValueError("bisection needs exactly one objective variable or bisection_var")
    lo, hi = opts.bisection_bracket or (0.0, 1.0)

    def feasible_at(val):
        q = _fix_scalar(p, name, val)
        sol = feasibility_margin(q, opts)
        return sol.info["slack"] >= 0, sol

    ok, sol_hi = feasible_at(hi)
    grow = 0
    while not ok:
        lo, hi = hi, 2 * hi if hi > 0 else 1.0
        ok, sol_hi = feasible_at(hi)
        grow += 1
        if grow > 60:
            return _package(p, np.zeros(p.num_coords), "infeasible", {"reason": "no feasible bracket"})
    iters = 0
    while hi - lo > opts.tol * (1 + abs(hi)) and iters < 200:
        mid = 0.5 * (lo + hi)
        ok, sol = feasible_at(mid)
        if ok:
            hi, sol_hi = mid, sol
        else:
            lo = mid
        iters += 1
    values = dict(sol_hi.values)
    values[name] = hi
    y = p.pack(values)
    out = _package(p, y, "optimal", {"bisection_steps": iters, "bracket": (lo, hi)}, bound=lo)
    return out


def _fix_scalar(p: SdpProblem, name: str, value: float) -> SdpProblem:
    q = SdpProblem()
    for vname, v in p.variables.items():
        if vname == name:
            continue
        q._declare(vname, v.kind, v.shape)
    for lmi in p.constraints:
        const = lmi.constant.copy()
        terms = []
        for term in lmi.terms:
            if term.var == name:
                const = const + value * term.coef
            else:
                terms.append(term)
        q.add_constraint(AffineLmi(const, terms, lmi.sense, lmi.margin, lmi.label))
    return q
