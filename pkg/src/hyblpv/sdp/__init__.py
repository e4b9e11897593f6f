"""Small dense semidefinite programs in LMI form."""
from .dump import dump, dumps, load, loads
from .problem import AffineLmi, AssemblyError, SdpProblem, Term, Var, assemble
from .solve import SdpSolution, SolveOptions, bisect_scalar, feasibility_margin, solve

__all__ = [
    "AffineLmi", "AssemblyError", "SdpProblem", "Term", "Var", "assemble",
    "SdpSolution", "SolveOptions", "bisect_scalar", "feasibility_margin", "solve",
    "dump", "dumps", "load", "loads",
]
