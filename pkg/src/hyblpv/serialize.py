"""Structured text files for synthesis solutions and gain-scheduled controllers.

Regions and surfaces are numbered from 1 in files.  A solution file stores
the partition, grids, basis functions, certificate coefficients, jump
multipliers and performance levels; the plant itself is rebuilt from the
run configuration and attached on load.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .lpv import (AffineMatrices, BasisSet, Box, LpvPlant, LyapunovCertificate, Monomial,
                  ParameterDomain, Partition, check_plant_dims)
from .synthesis import ControllerPoint, GainScheduledController, SynthesisSolution
from .textio import FormatError, Node, Writer, parse

SOLUTION_KIND = "hyblpv-solution"
CONTROLLER_KIND = "hyblpv-controller"
PLANT_KIND = "hyblpv-plant"
VERSION = 1

# wall-clock times stay out of files so reruns are byte-identical
_DIAG_KEYS = ("status", "accuracy", "objective", "bound", "worst_margin",
              "optimal_status", "optimal_accuracy", "optimal_bound", "backoff")


def _write_monomials(w: Writer, name: str, monos) -> None:
    for m in monos:
        w.begin(name)
        w.field("exponents", *m.exponents)
        if m.center is not None:
            w.field("center", *m.center)
        if m.scale is not None:
            w.field("scale", *m.scale)
        w.end()


def _read_monomials(node: Node, name: str, s: int) -> tuple[Monomial, ...]:
    out = []
    for m in node.sections(name):
        e = m.entry("exponents", s)
        exps = []
        for t in e.args:
            try:
                v = int(t)
            except ValueError:
                raise m.error(e.line, "exponents must be integers") from None
            if v < 0:
                raise m.error(e.line, "exponents must be non-negative")
            exps.append(v)
        center = m.floats("center", s, optional=True)
        scale = m.floats("scale", s, optional=True)
        if scale is not None and any(v <= 0 for v in scale):
            raise m.error(m.entry("scale").line, "scales must be positive")
        out.append(Monomial(tuple(exps), None if center is None else tuple(center),
                            None if scale is None else tuple(scale)))
    if not out:
        raise node.error(node.line, f"basis lacks {name!r} functions")
    return tuple(out)


def _provenance(w: Writer, provenance: dict | None) -> None:
    if provenance:
        w.begin("provenance")
        for k, v in sorted(provenance.items()):
            w.field(k, v)
        w.end()


def _read_provenance(root: Node) -> dict:
    node = root.section("provenance", optional=True)
    if node is None:
        return {}
    out = {}
    for e in node.entries:
        if len(e.args) != 1:
            raise node.error(e.line, f"provenance field {e.key!r} expects one value")
        out[e.key] = e.args[0]
    return out


# --------------------------------------------------------------------------
# solutions
# --------------------------------------------------------------------------

def solution_to_text(sol: SynthesisSolution, provenance: dict | None = None) -> str:
    part = sol.plant.partition
    cert = sol.certificate
    n = cert.n
    s = part.dim
    w = Writer(SOLUTION_KIND, VERSION)
    w.field("regions", part.size)
    w.field("states", n)
    w.field("parameters", s)
    w.field("gammas", *sol.gammas)
    w.field("rate_lo", *sol.rates.rate_lo)
    w.field("rate_hi", *sol.rates.rate_hi)
    w.field("domain_lo", *sol.rates.box.lo)
    w.field("domain_hi", *sol.rates.box.hi)
    _provenance(w, provenance)
    w.begin("diagnostics")
    for k in _DIAG_KEYS:
        v = sol.diagnostics.get(k)
        if isinstance(v, (str, int, float, np.floating)) and not isinstance(v, bool):
            w.field(k, v)
    if "optimal_gammas" in sol.diagnostics:
        w.field("optimal_gammas", *sol.diagnostics["optimal_gammas"])
    w.end()
    for i in range(part.size):
        w.begin("region", i + 1)
        w.field("lo", *part.boxes[i].lo)
        w.field("hi", *part.boxes[i].hi)
        w.matrix("grid", np.asarray(part.grids[i], float).reshape(-1, s))
        _write_monomials(w, "f", cert.bases[i].f)
        _write_monomials(w, "g", cert.bases[i].g)
        for j, R in enumerate(cert.R[i]):
            w.matrix(f"R{j + 1}", R)
        for j, S in enumerate(cert.S[i]):
            w.matrix(f"S{j + 1}", S)
        w.end()
    for (i, j), D in sorted(sol.dhat.items()):
        w.begin("surface", i + 1, j + 1)
        w.matrix("Dhat", D)
        w.end()
    return w.text()


def _region_index(node: Node, count: int, k: int = 0) -> int:
    if len(node.args) <= k:
        raise node.error(node.line, f"section {node.name!r} needs a region number")
    try:
        r = int(node.args[k])
    except ValueError:
        raise node.error(node.line, f"bad region number {node.args[k]!r}") from None
    if not 1 <= r <= count:
        raise node.error(node.line, f"region {r} out of range 1..{count}")
    return r - 1


def solution_from_text(text: str, plant: LpvPlant | None = None, source: str | None = None):
    """Parse a solution; returns ``(SynthesisSolution, provenance)``.

    With ``plant`` given its partition and grids must match the file.
    """
    root = parse(text, SOLUTION_KIND, (VERSION,), source)
    nreg, n, s = root.int("regions"), root.int("states"), root.int("parameters")
    if min(nreg, n, s) < 1:
        raise root.error(root.entry("regions").line, "counts must be positive")
    gammas = root.floats("gammas", nreg)
    if any(g <= 0 for g in gammas):
        raise root.error(root.entry("gammas").line, "performance levels must be positive")
    try:
        rates = ParameterDomain(Box(tuple(root.floats("domain_lo", s)), tuple(root.floats("domain_hi", s))),
                                tuple(root.floats("rate_lo", s)), tuple(root.floats("rate_hi", s)))
    except FormatError:
        raise
    except ValueError as exc:
        raise root.error(root.entry("rate_lo").line, str(exc)) from None
    diag: dict = {}
    dnode = root.section("diagnostics", optional=True)
    if dnode is not None:
        for e in dnode.entries:
            vals = []
            for t in e.args:
                try:
                    vals.append(float(t))
                except ValueError:
                    vals.append(t)
            diag[e.key] = vals if e.key == "optimal_gammas" else (vals[0] if len(vals) == 1 else vals)
    regions = root.sections("region")
    if len(regions) != nreg:
        raise root.error(root.line, f"expected {nreg} region sections, found {len(regions)}")
    boxes, grids, bases, Rs, Ss = [None] * nreg, [None] * nreg, [None] * nreg, [None] * nreg, [None] * nreg
    for node in regions:
        i = _region_index(node, nreg)
        if boxes[i] is not None:
            raise node.error(node.line, f"duplicate region {i + 1}")
        try:
            boxes[i] = Box(tuple(node.floats("lo", s)), tuple(node.floats("hi", s)))
        except ValueError as exc:
            if isinstance(exc, FormatError):
                raise
            raise node.error(node.line, str(exc)) from None
        G = node.matrix("grid")
        if G.shape[1] != s or G.shape[0] < 2:
            raise node.error(node.matrices["grid"][1], "grid needs >= 2 points with one column per parameter")
        grids[i] = np.array([g for g in G])
        basis = BasisSet(_read_monomials(node, "f", s), _read_monomials(node, "g", s))
        bases[i] = basis
        Rs[i] = [node.matrix(f"R{j + 1}", (n, n)) for j in range(len(basis.f))]
        Ss[i] = [node.matrix(f"S{j + 1}", (n, n)) for j in range(len(basis.g))]
        for name, (M, line) in node.matrices.items():
            if name != "grid" and not np.allclose(M, M.T, rtol=1e-12, atol=1e-300):
                raise node.error(line, f"matrix {name!r} is not symmetric")
    partition = Partition(boxes, grids)
    dhat = {}
    for node in root.sections("surface"):
        if len(node.args) != 2:
            raise node.error(node.line, "surface needs source and target regions")
        i, j = _region_index(node, nreg, 0), _region_index(node, nreg, 1)
        dhat[(i, j)] = node.matrix("Dhat", (n, n))
    if plant is not None:
        check_partition(plant.partition, partition, source)
        plant = plant.with_partition(Partition(plant.partition.boxes, grids))
    cert = LyapunovCertificate(bases, Rs, Ss)
    sol = SynthesisSolution(cert, dhat, gammas, plant, rates, diag)
    sol.diagnostics.setdefault("partition", partition)
    return sol, _read_provenance(root)


def check_partition(expected: Partition, found: Partition, source: str | None = None) -> None:
    if expected.size != found.size or any(
            not np.allclose(a.lo, b.lo) or not np.allclose(a.hi, b.hi)
            for a, b in zip(expected.boxes, found.boxes)):
        raise FormatError(1, "partition in file does not match the plant", source)


def write_solution(path, sol: SynthesisSolution, provenance: dict | None = None) -> None:
    Path(path).write_text(solution_to_text(sol, provenance))


def read_solution(path, plant: LpvPlant | None = None):
    return solution_from_text(Path(path).read_text(), plant, str(path))


# --------------------------------------------------------------------------
# controllers
# --------------------------------------------------------------------------

_POINT_MATS = ("Bk", "Ck", "Dk", "M", "N", "F", "L")


def controller_to_text(K: GainScheduledController, provenance: dict | None = None) -> str:
    w = Writer(CONTROLLER_KIND, VERSION)
    w.field("regions", K.regions)
    w.field("convention", K.convention)
    w.field("rate_dependent", K.rate_dependent)
    if K.state_transform is not None:
        w.matrix("state_transform", K.state_transform)
    _provenance(w, provenance)
    for i, table in enumerate(K.tables):
        w.begin("region", i + 1)
        for pt in table:
            w.begin("point")
            w.field("rho", *np.ravel(pt.rho))
            w.matrix("Ak0", pt.Ak0)
            for k, A in enumerate(pt.Ak_rate):
                w.matrix(f"Ak_rate{k + 1}", A)
            for name in _POINT_MATS:
                w.matrix(name, getattr(pt, name))
            w.end()
        w.end()
    for (i, j), D in sorted(K.resets.items()):
        w.begin("reset", i + 1, j + 1)
        w.matrix("Delta", D)
        w.end()
    return w.text()


def controller_from_text(text: str, source: str | None = None):
    """Parse a controller; returns ``(GainScheduledController, provenance)``."""
    root = parse(text, CONTROLLER_KIND, (VERSION,), source)
    nreg = root.int("regions")
    if nreg < 1:
        raise root.error(root.entry("regions").line, "regions must be positive")
    conv = root.str("convention")
    rd = root.int("rate_dependent")
    T = root.matrix("state_transform", optional=True)
    tables: list = [None] * nreg
    nk = None
    for node in root.sections("region"):
        i = _region_index(node, nreg)
        if tables[i] is not None:
            raise node.error(node.line, f"duplicate region {i + 1}")
        pts = []
        for pn in node.sections("point"):
            rho = np.array(pn.floats("rho"))
            Ak0 = pn.matrix("Ak0")
            if nk is None:
                nk = Ak0.shape[0]
            if Ak0.shape != (nk, nk):
                raise pn.error(pn.matrices["Ak0"][1], f"Ak0 must be {nk}x{nk}")
            rates = []
            while f"Ak_rate{len(rates) + 1}" in pn.matrices:
                rates.append(pn.matrix(f"Ak_rate{len(rates) + 1}", (nk, nk)))
            mats = {name: pn.matrix(name) for name in _POINT_MATS}
            if mats["Bk"].shape[0] != nk or mats["Ck"].shape[1] != nk:
                raise pn.error(pn.line, "controller matrix sizes are inconsistent")
            pts.append(ControllerPoint(rho, Ak0, rates, **mats))
        if len(pts) < 2:
            raise node.error(node.line, "a region needs at least two grid points")
        xs = [float(p.rho[0]) for p in pts]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise node.error(node.line, "grid points must be strictly increasing")
        tables[i] = pts
    missing = [i + 1 for i, t in enumerate(tables) if t is None]
    if missing:
        raise root.error(root.line, f"missing region section(s) {missing}")
    resets = {}
    for node in root.sections("reset"):
        if len(node.args) != 2:
            raise node.error(node.line, "reset needs source and target regions")
        i, j = _region_index(node, nreg, 0), _region_index(node, nreg, 1)
        resets[(i, j)] = node.matrix("Delta", (nk, nk))
    K = GainScheduledController(tables, resets, conv, bool(rd), T)
    return K, _read_provenance(root)


def write_controller(path, K: GainScheduledController, provenance: dict | None = None) -> None:
    Path(path).write_text(controller_to_text(K, provenance))


def read_controller(path):
    return controller_from_text(Path(path).read_text(), str(path))


# --------------------------------------------------------------------------
# affine plants
# --------------------------------------------------------------------------

PLANT_BLOCKS = ("A", "B1", "B2", "C1", "C2", "D11", "D12", "D21", "D22")


def plant_to_text(fn: AffineMatrices) -> str:
    """``M(rho) = M0 + sum_k rho_k Mk`` for every plant block."""
    s = len(fn.terms["A"]) - 1
    w = Writer(PLANT_KIND, VERSION)
    w.field("parameters", s)
    for name in PLANT_BLOCKS:
        w.begin("block", name)
        for k, M in enumerate(fn.terms[name]):
            w.matrix(f"M{k}", M)
        w.end()
    return w.text()


def plant_from_text(text: str, source: str | None = None) -> AffineMatrices:
    root = parse(text, PLANT_KIND, (VERSION,), source)
    s = root.int("parameters")
    if s < 1:
        raise root.error(root.entry("parameters").line, "parameters must be positive")
    terms = {}
    for node in root.sections("block"):
        name = node.args[0] if node.args else ""
        if name not in PLANT_BLOCKS:
            raise node.error(node.line, f"unknown block {name!r}")
        if name in terms:
            raise node.error(node.line, f"duplicate block {name!r}")
        mats = [node.matrix(f"M{k}") for k in range(s + 1)]
        if any(M.shape != mats[0].shape for M in mats):
            raise node.error(node.line, f"block {name!r} coefficients differ in shape")
        terms[name] = mats
    missing = [b for b in PLANT_BLOCKS if b not in terms]
    if missing:
        raise root.error(root.line, f"missing block(s) {missing}")
    fn = AffineMatrices(terms)
    try:
        check_plant_dims(fn(np.zeros(s)))
    except ValueError as exc:
        raise root.error(root.line, str(exc)) from None
    return fn


def read_plant(path) -> AffineMatrices:
    return plant_from_text(Path(path).read_text(), str(path))


def write_plant(path, fn: AffineMatrices) -> None:
    Path(path).write_text(plant_to_text(fn))
