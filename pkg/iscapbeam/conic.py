"""
Convex subproblem container and solver contract for iscapbeam.
Hermitian PSD variables are posed over the real symmetric cone and solved with cvxpy.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import cvxpy as cp
import numpy as np

from .errors import PreconditionError

logger = logging.getLogger(__name__)

OPTIMAL = 'optimal'
INFEASIBLE = 'infeasible'
NUMERICAL_FAILURE = 'numerical_failure'

LOG_POLICIES = ('native', 'minorant')


def lift_hermitian(matrix: np.ndarray) -> np.ndarray:
    """Real symmetric embedding [[A, -B], [B, A]] of W = A + jB."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=complex))
    real, imag = matrix.real, matrix.imag
    return np.block([[real, -imag], [imag, real]])


def unlift_hermitian(lifted: np.ndarray) -> np.ndarray:
    """Inverse of lift_hermitian, averaging the duplicated blocks."""
    lifted = np.asarray(lifted, dtype=float)
    n = lifted.shape[0] // 2
    real = 0.5 * (lifted[:n, :n] + lifted[n:, n:])
    imag = 0.5 * (lifted[n:, :n] - lifted[:n, n:])
    return real + 1j * imag


class HermitianVariable:
    """Complex Hermitian PSD matrix variable carried by a 2n x 2n real PSD variable."""

    def __init__(self, name: str, dim: int):
        if dim < 1:
            raise PreconditionError(f"matrix variable {name} needs a positive dimension")
        self.name = name
        self.dim = dim
        self.lifted = cp.Variable((2 * dim, 2 * dim), PSD=True, name=name)

    @property
    def real(self) -> cp.Expression:
        return self.lifted[:self.dim, :self.dim]

    @property
    def imag(self) -> cp.Expression:
        return self.lifted[self.dim:, :self.dim]

    def structure(self) -> List[cp.Constraint]:
        """Block constraints that make the lifted variable an embedding."""
        n = self.dim
        constraints = [self.lifted[n:, n:] == self.lifted[:n, :n]]
        if n > 1:
            constraints.append(self.imag + self.imag.T == 0)
        else:
            constraints.append(self.imag == 0)
        return constraints

    def trace(self) -> cp.Expression:
        return cp.trace(self.real)

    def inner(self, coefficient: np.ndarray) -> cp.Expression:
        """real(tr(C^H W)) as an affine expression."""
        return hermitian_inner([self], np.asarray(coefficient)[None])[0]

    def quad(self, vector: np.ndarray) -> cp.Expression:
        """x^H W x."""
        vector = np.asarray(vector, dtype=complex)
        return self.inner(np.outer(vector, np.conj(vector)))

    @property
    def value(self) -> Optional[np.ndarray]:
        if self.lifted.value is None:
            return None
        return unlift_hermitian(self.lifted.value)


def hermitian_inner(variables: Sequence[HermitianVariable], coefficients: np.ndarray) -> cp.Expression:
    """real(tr(C_m^H sum(W))) for a stack of coefficients C_m, one entry per m."""
    n = variables[0].dim
    coefficients = np.asarray(coefficients, dtype=complex).reshape(-1, n, n)
    real = variables[0].real if len(variables) == 1 else sum(v.real for v in variables)
    imag = variables[0].imag if len(variables) == 1 else sum(v.imag for v in variables)
    count = coefficients.shape[0]
    flat_real = coefficients.real.reshape(count, n * n, order='F')
    flat_imag = coefficients.imag.reshape(count, n * n, order='F')
    return (flat_real @ cp.reshape(real, (n * n,), order='F')
            + flat_imag @ cp.reshape(imag, (n * n,), order='F'))


@dataclass
class ConstraintRecord:
    """One declared constraint family and the cvxpy constraints that realize it."""
    kind: str
    label: str
    constraints: List[cp.Constraint]
    exact_margin: Optional[Callable[[], float]] = None


@dataclass
class SolverSettings:
    """Backend choice and tolerances."""
    backend: str = 'CLARABEL'
    fallback: Optional[str] = 'SCS'
    feasibility_tol: float = 1e-8
    optimality_tol: float = 1e-8
    max_iterations: int = 500
    accept_inaccurate: bool = True
    log_policy: str = 'native'

    def __post_init__(self):
        self.backend = self.backend.upper()
        if self.fallback:
            self.fallback = self.fallback.upper()
        if self.log_policy not in LOG_POLICIES:
            raise PreconditionError(f"log policy must be one of {LOG_POLICIES}, got {self.log_policy}")

    def backend_options(self, backend: str) -> Dict[str, float]:
        if backend == 'CLARABEL':
            return {
                'tol_feas': self.feasibility_tol,
                'tol_gap_abs': self.optimality_tol,
                'tol_gap_rel': self.optimality_tol,
                'max_iter': self.max_iterations,
            }
        if backend == 'SCS':
            return {
                'eps_abs': self.feasibility_tol,
                'eps_rel': self.optimality_tol,
                'max_iters': max(self.max_iterations, 10000),
            }
        return {}


@dataclass
class SolveResult:
    """Outcome of one conic solve."""
    status: str
    values: Dict[str, np.ndarray] = field(default_factory=dict)
    objective_value: Optional[float] = None
    solver_iterations: int = 0
    backend: str = ''
    seconds: float = 0.0

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


class ConicProgram:
    """Sum-of-squares objective plus linear, PSD, second-order cone and log-bound constraints."""

    def __init__(self, name: str = 'program', log_policy: str = 'native'):
        if log_policy not in LOG_POLICIES:
            raise PreconditionError(f"log policy must be one of {LOG_POLICIES}, got {log_policy}")
        self.name = name
        self.log_policy = log_policy
        self.matrix_vars: Dict[str, HermitianVariable] = {}
        self.scalar_vars: Dict[str, cp.Variable] = {}
        self.records: List[ConstraintRecord] = []
        self._squares: List[cp.Expression] = []
        self._linear: List[cp.Expression] = []
        self._problem: Optional[cp.Problem] = None

    def hermitian(self, name: str, dim: int) -> HermitianVariable:
        """Declare a Hermitian PSD matrix variable."""
        self._check_new(name)
        variable = HermitianVariable(name, dim)
        self.matrix_vars[name] = variable
        self.records.append(ConstraintRecord('psd', name, variable.structure()))
        return variable

    def scalar(self, name: str, size: Optional[int] = None, nonneg: bool = False) -> cp.Variable:
        """Declare a real scalar (or a vector of scalars when size is given)."""
        self._check_new(name)
        shape = () if size is None else (size,)
        variable = cp.Variable(shape, nonneg=nonneg, name=name)
        self.scalar_vars[name] = variable
        return variable

    def _check_new(self, name: str):
        if name in self.matrix_vars or name in self.scalar_vars:
            raise PreconditionError(f"variable {name} declared twice in {self.name}")
        self._problem = None

    def add_squares(self, residuals: cp.Expression, weight: float = 1.0):
        """Add weight * sum of squares of an affine residual vector to the objective."""
        if weight < 0:
            raise PreconditionError("sum-of-squares weights must be non-negative")
        self._squares.append(weight * cp.sum_squares(residuals))
        self._problem = None

    def add_linear(self, expression: cp.Expression):
        """Add a linear term (to be minimized) to the objective."""
        self._linear.append(expression)
        self._problem = None

    def equality(self, lhs, rhs, label: str = 'eq'):
        self._add('eq', label, [lhs == rhs])

    def inequality(self, lhs, rhs, label: str = 'ineq'):
        """lhs >= rhs."""
        self._add('ineq', label, [lhs >= rhs])

    def soc(self, bound, vector, label: str = 'soc'):
        """||vector||_2 <= bound."""
        self._add('soc', label, [cp.SOC(bound, vector)])

    def log_bound(self, coefficients: Sequence[float], arguments: Sequence[cp.Expression],
                  rhs: cp.Expression, label: str = 'log', anchors: Optional[Sequence[float]] = None):
        """sum_j c_j * ln(argument_j) >= rhs, with c_j >= 0 and affine arguments.

        Under the minorant policy ln(x) is replaced by ln(x0) + 1 - x0/x around the anchors,
        which never exceeds ln(x) and matches it at x0.
        """
        coefficients = np.asarray(coefficients, dtype=float)
        if np.any(coefficients < 0):
            raise PreconditionError("log-bound coefficients must be non-negative")
        if len(arguments) != coefficients.size:
            raise PreconditionError("one coefficient per log argument is required")
        terms = []
        use_minorant = self.log_policy == 'minorant' and anchors is not None
        for j, (c, argument) in enumerate(zip(coefficients, arguments)):
            if c == 0:
                continue
            if use_minorant:
                x0 = float(anchors[j])
                if x0 <= 0:
                    raise PreconditionError("log anchors must be strictly positive")
                terms.append(c * (np.log(x0) + 1.0 - x0 * cp.inv_pos(argument)))
            else:
                terms.append(c * cp.log(argument))
        lhs = sum(terms) if terms else 0.0

        def exact_margin() -> float:
            values = [np.asarray(getattr(a, 'value', a), dtype=float) for a in arguments]
            total = sum(c * np.log(max(float(v), 1e-300)) for c, v in zip(coefficients, values) if c)
            return float(total - np.asarray(rhs.value if hasattr(rhs, 'value') else rhs, dtype=float))

        self._add('log', label, [lhs >= rhs], exact_margin)

    def _add(self, kind: str, label: str, constraints: List[cp.Constraint],
             exact_margin: Optional[Callable[[], float]] = None):
        self.records.append(ConstraintRecord(kind, label, constraints, exact_margin))
        self._problem = None

    def objective_expression(self) -> cp.Expression:
        terms = self._squares + self._linear
        return sum(terms) if terms else cp.Constant(0.0)

    def problem(self) -> cp.Problem:
        if self._problem is None:
            constraints = [c for record in self.records for c in record.constraints]
            self._problem = cp.Problem(cp.Minimize(self.objective_expression()), constraints)
        return self._problem

    def values(self) -> Dict[str, np.ndarray]:
        values = {name: v.value for name, v in self.matrix_vars.items()}
        for name, variable in self.scalar_vars.items():
            values[name] = None if variable.value is None else np.array(variable.value, dtype=float)
        return values

    def residuals(self) -> Dict[str, float]:
        """Worst violation per constraint kind at the current variable values."""
        worst: Dict[str, float] = {}
        for record in self.records:
            for constraint in record.constraints:
                violation = float(np.max(np.atleast_1d(constraint.violation())))
                worst[record.kind] = max(worst.get(record.kind, 0.0), violation)
            if record.exact_margin is not None:
                worst['log_exact'] = max(worst.get('log_exact', 0.0), -record.exact_margin())
        return worst

    def dump(self, path: Path, backend: str = 'CLARABEL') -> Path:
        """Write the variable table and standard-form triplets as plain text."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data, _, _ = self.problem().get_problem_data(backend)
        with open(path, 'w', encoding='utf-8') as handle:
            handle.write(f"# program {self.name}\n# variables: name kind size\n")
            for name, variable in self.matrix_vars.items():
                handle.write(f"{name} hermitian {variable.dim}\n")
            for name, variable in self.scalar_vars.items():
                handle.write(f"{name} real {int(np.prod(variable.shape)) if variable.shape else 1}\n")
            for key in ('A', 'P'):
                matrix = data.get(key)
                if matrix is None:
                    continue
                coo = matrix.tocoo()
                handle.write(f"# {key} {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
                for row, col, value in zip(coo.row, coo.col, coo.data):
                    handle.write(f"{row} {col} {value:.17g}\n")
            for key in ('b', 'c'):
                vector = data.get(key)
                if vector is None:
                    continue
                handle.write(f"# {key} {len(vector)}\n")
                for index, value in enumerate(vector):
                    if value != 0:
                        handle.write(f"{index} {value:.17g}\n")
        logger.debug("Dumped %s to %s", self.name, path)
        return path


_STATUS_MAP = {
    cp.OPTIMAL: OPTIMAL,
    cp.INFEASIBLE: INFEASIBLE,
    cp.INFEASIBLE_INACCURATE: INFEASIBLE,
}


def _available(backend: str) -> bool:
    return backend in cp.installed_solvers()


def _run_backend(program: ConicProgram, backend: str, settings: SolverSettings) -> SolveResult:
    problem = program.problem()
    started = time.perf_counter()
    try:
        problem.solve(solver=backend, verbose=False, **settings.backend_options(backend))
    except cp.error.SolverError as exc:
        logger.warning("%s failed on %s: %s", backend, program.name, exc)
        return SolveResult(NUMERICAL_FAILURE, backend=backend, seconds=time.perf_counter() - started)
    seconds = time.perf_counter() - started
    raw = problem.status
    if raw == cp.OPTIMAL_INACCURATE and settings.accept_inaccurate:
        logger.warning("%s returned an inaccurate optimum for %s", backend, program.name)
        status = OPTIMAL
    else:
        status = _STATUS_MAP.get(raw, NUMERICAL_FAILURE)
    stats = problem.solver_stats
    iterations = int(stats.num_iters) if stats is not None and stats.num_iters is not None else 0
    if status != OPTIMAL:
        return SolveResult(status, solver_iterations=iterations, backend=backend, seconds=seconds)
    return SolveResult(
        status,
        values=program.values(),
        objective_value=float(problem.value),
        solver_iterations=iterations,
        backend=backend,
        seconds=seconds,
    )


def solve(program: ConicProgram, settings: Optional[SolverSettings] = None) -> SolveResult:
    """Solve a program; a numerical failure is retried once on the fallback backend."""
    settings = settings or SolverSettings()
    backend = settings.backend if _available(settings.backend) else settings.fallback
    if backend is None or not _available(backend):
        raise PreconditionError(f"no conic backend available (tried {settings.backend}, {settings.fallback})")
    result = _run_backend(program, backend, settings)
    if (result.status == NUMERICAL_FAILURE and settings.fallback
            and settings.fallback != backend and _available(settings.fallback)):
        logger.info("Retrying %s with %s", program.name, settings.fallback)
        result = _run_backend(program, settings.fallback, settings)
    logger.debug("%s: %s via %s in %d iterations (%.3fs)", program.name, result.status,
                 result.backend, result.solver_iterations, result.seconds)
    return result
