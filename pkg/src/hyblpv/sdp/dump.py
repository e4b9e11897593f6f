"""Text dump of an SDP: one block per constraint, svec coefficients per coordinate."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..matkernel import smat, svec, svec_dim
from ..textio import FormatError, Writer, parse, to_floats, to_int
from .problem import AffineLmi, SdpProblem, Term, _coord_coefs

KIND = "hyblpv-sdp"
VERSION = 1


def dumps(problem: SdpProblem) -> str:
    w = Writer(KIND, VERSION)
    w.comment("var <name> scalar | sym <n> | mat <rows> <cols>")
    for v in problem.variables.values():
        if v.kind == "scalar":
            w.field("var", v.name, "scalar")
        elif v.kind == "sym":
            w.field("var", v.name, "sym", v.shape[0])
        else:
            w.field("var", v.name, "mat", *v.shape)
    for name, weight in problem.objective.items():
        w.field("objective", name, float(weight))
    w.comment("coef <var> <coordinate> <svec of the coefficient matrix>")
    for lmi in problem.constraints:
        w.begin("lmi", lmi.label)
        w.field("dim", lmi.dim)
        w.field("sense", lmi.sense)
        w.field("margin", float(lmi.margin))
        w.field("const", *svec(lmi.constant))
        acc: dict[str, np.ndarray] = {}
        for term in lmi.terms:
            var = problem.variables[term.var]
            c = _coord_coefs(term, var, lmi.dim)
            acc[term.var] = acc[term.var] + c if term.var in acc else c
        for name, coefs in acc.items():
            for k, C in enumerate(coefs):
                if np.any(C):
                    w.field("coef", name, k, *svec(C))
        w.end()
    return w.text()


def loads(text: str, source: str | None = None) -> SdpProblem:
    root = parse(text, KIND, (VERSION,), source)
    p = SdpProblem()
    for e in root.entries:
        if e.key == "var":
            if len(e.args) < 2:
                raise FormatError(e.line, "'var' needs a name and a kind", source)
            name, kind, dims = e.args[0], e.args[1], [to_int(a, e.line, root) for a in e.args[2:]]
            try:
                if kind == "scalar" and not dims:
                    p.scalar(name)
                elif kind == "sym" and len(dims) == 1 and dims[0] > 0:
                    p.symmetric(name, dims[0])
                elif kind == "mat" and len(dims) == 2 and min(dims) > 0:
                    p.matrix(name, *dims)
                else:
                    raise FormatError(e.line, f"bad variable declaration for {name!r}", source)
            except ValueError as exc:
                if isinstance(exc, FormatError):
                    raise
                raise FormatError(e.line, str(exc), source) from None
        elif e.key != "objective":
            raise FormatError(e.line, f"unknown key {e.key!r}", source)
    objective = {}
    for e in root.entries_named("objective"):
        if len(e.args) != 2:
            raise FormatError(e.line, "'objective' expects a variable and a weight", source)
        objective[e.args[0]] = to_floats(type(e)(e.key, e.args[1:], e.line), root)[0]
    try:
        p.minimize(objective)
    except ValueError as exc:
        raise FormatError(root.entries_named("objective")[0].line, str(exc), source) from None
    for node in root.children:
        if node.name != "lmi":
            raise FormatError(node.line, f"unknown section {node.name!r}", source)
        label = node.args[0] if node.args else ""
        dim = node.int("dim")
        if dim is None or dim <= 0:
            raise FormatError(node.line, "lmi dimension must be positive", source)
        nv = svec_dim(dim)
        const = node.floats("const", nv)
        sense = node.str("sense")
        try:
            lmi = AffineLmi(smat(np.array(const)), sense=sense, margin=node.float("margin"), label=label)
        except ValueError as exc:
            raise FormatError(node.line, str(exc), source) from None
        for e in node.entries:
            if e.key in ("dim", "sense", "margin", "const"):
                continue
            if e.key != "coef":
                raise FormatError(e.line, f"unknown key {e.key!r}", source)
            if len(e.args) != 2 + nv:
                raise FormatError(e.line, f"'coef' expects a variable, a coordinate and {nv} values", source)
            name = e.args[0]
            var = p.variables.get(name)
            if var is None:
                raise FormatError(e.line, f"undeclared variable {name!r}", source)
            k = to_int(e.args[1], e.line, node)
            if not 0 <= k < var.size:
                raise FormatError(e.line, f"coordinate {k} out of range for {name!r}", source)
            vals = to_floats(type(e)(e.key, e.args[2:], e.line), node)
            lmi.terms.append(Term(name, coef=smat(np.array(vals)), coord=k))
        p.add_constraint(lmi)
    return p


def dump(problem: SdpProblem, path) -> None:
    Path(path).write_text(dumps(problem))


def load(path) -> SdpProblem:
    return loads(Path(path).read_text(), str(path))
