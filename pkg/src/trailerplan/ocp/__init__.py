from .qp import QpResult, solve_qp, solve_qp_elastic
from .sqp import FactoredBfgs, NlpSolution, SqpOptions, solve, solve_subproblem
from .transcribe import Nlp, RhpSubproblem, check_derivatives, transcribe

__all__ = [
    "QpResult", "solve_qp", "solve_qp_elastic",
    "FactoredBfgs", "NlpSolution", "SqpOptions", "solve", "solve_subproblem",
    "Nlp", "RhpSubproblem", "check_derivatives", "transcribe",
]
