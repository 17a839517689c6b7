import asyncio
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np
import sympy

from heatctrl.assembly import assemble, l2_error_exact, l2_norm, project_Pkh_boundary
from heatctrl.config import Config, HeatCtrlError
from heatctrl.control import ControlBounds, ControlProblem, OptimalityResult, solve_control
from heatctrl.mesh2d import mesh_hierarchy, prolong_between
from heatctrl.parabolic import BoundaryField, ProblemData, lifted_solve, solve_state
from heatctrl.timegrid import SlabFunction, jump_energy, prolong_slabs, uniform_grid

logger = logging.getLogger(__name__)

FD_TIME_STEP = 1e-5
FD_SPACE_STEP = 1e-3
FD_TOL = 1e-6

STATE_PROBLEMS = ("smooth-inhomogeneous", "rough-boundary", "constant")
CONTROL_PROBLEMS = ("control-active",)
AXES = ("space", "time", "coupled")

_t, _x, _y = sympy.symbols("t x y", real=True, positive=True)


class ManufacturedDataError(HeatCtrlError, ValueError):
    """Identifiant inconnu ou second membre incohérent avec la solution exacte"""


class StudySpecError(HeatCtrlError, ValueError):
    """Description d'étude invalide (niveaux non emboîtés, référence trop grossière)"""


def _vectorize(expr) -> Callable:
    fn = sympy.lambdify((_t, _x, _y), expr, "numpy")

    def evaluate(t, x, y):
        shape = np.broadcast(np.asarray(t), np.asarray(x), np.asarray(y)).shape
        return np.asarray(fn(t, x, y), dtype=float) + np.zeros(shape)

    return evaluate


@dataclass
class ManufacturedProblem:
    """Solution exacte y(t, x, y) et données (f, y0, u) qui en dérivent"""
    id: str
    expr: object
    exact: Callable
    data: ProblemData


_SOLUTIONS = {
    "smooth-inhomogeneous": sympy.exp(-_t) * (_x ** 2 + _y ** 2),
    "rough-boundary": _t ** sympy.Rational(3, 4) * (_x ** 2 - _y ** 2),
    "constant": sympy.Integer(1),
}


def manufactured_state_problem(problem_id: str, check: bool = True, seed: int = 0) -> ManufacturedProblem:
    """Construit le problème manufacturé; f = ∂_t y - Δy par dérivation symbolique"""
    if problem_id not in _SOLUTIONS:
        raise ManufacturedDataError(f"problème inconnu: {problem_id!r} (attendu: {', '.join(STATE_PROBLEMS)})")
    expr = _SOLUTIONS[problem_id]
    source = sympy.simplify(sympy.diff(expr, _t) - sympy.diff(expr, _x, 2) - sympy.diff(expr, _y, 2))

    exact = _vectorize(expr)
    f = _vectorize(source)
    data = ProblemData(f=f, y0=lambda x, y: exact(0.0, x, y), u=exact)
    problem = ManufacturedProblem(problem_id, expr, exact, data)
    if check:
        check_manufactured(problem, np.random.default_rng(seed))
    return problem


def check_manufactured(problem: ManufacturedProblem, rng: np.random.Generator, points: int = 10, T: float = 1.0) -> float:
    """Contrôle par différences finies centrées: |∂_t y - Δy - f| <= FD_TOL"""
    y, f = problem.exact, problem.data.f
    t = rng.uniform(0.1 * T, 0.9 * T, points)
    x, z = rng.uniform(0.05, 0.95, points), rng.uniform(0.05, 0.95, points)
    dt = (y(t + FD_TIME_STEP, x, z) - y(t - FD_TIME_STEP, x, z)) / (2 * FD_TIME_STEP)
    h2 = FD_SPACE_STEP ** 2
    lap = (y(t, x + FD_SPACE_STEP, z) + y(t, x - FD_SPACE_STEP, z) + y(t, x, z + FD_SPACE_STEP)
           + y(t, x, z - FD_SPACE_STEP) - 4.0 * y(t, x, z)) / h2
    worst = float(np.max(np.abs(dt - lap - f(t, x, z))))
    if worst > FD_TOL:
        raise ManufacturedDataError(f"{problem.id}: résidu différences finies {worst:.2e} > {FD_TOL:.0e}")
    logger.debug(f"Problème {problem.id} vérifié: résidu {worst:.2e}")
    return worst


def control_problem(problem_id: str, mesh, grid, ops, alpha: float, bounds: ControlBounds) -> ControlProblem:
    """Problème de contrôle à contraintes actives: f = 0, y0 = 0, y_d oscillant en temps"""
    if problem_id not in CONTROL_PROBLEMS:
        raise ManufacturedDataError(f"problème de contrôle inconnu: {problem_id!r}")
    y_d = _vectorize(4 * sympy.sin(2 * sympy.pi * _t) * (_x - _y))
    return ControlProblem(alpha=alpha, bounds=bounds, data=ProblemData(), y_d=y_d,
                          mesh=mesh, grid=grid, ops=ops)


@dataclass
class StudySpec:
    problem_id: str
    axis: str
    levels: List[int]
    reference: Optional[int] = None
    fixed_n: int = Config.TIME_FIXED_N
    fixed_M: int = Config.SPACE_FIXED_M
    T: float = Config.DEFAULT_T
    alpha: float = Config.DEFAULT_ALPHA
    bounds: ControlBounds = field(default_factory=lambda: ControlBounds(*Config.DEFAULT_BOUNDS))
    tol: Optional[float] = None
    max_iters: int = Config.CONTROL_MAX_ITERS
    output: Optional[str] = None

    def __post_init__(self):
        if self.axis not in AXES:
            raise StudySpecError(f"axe inconnu: {self.axis!r}")
        levels = [int(v) for v in self.levels]
        if not levels or any(b <= a for a, b in zip(levels, levels[1:])):
            raise StudySpecError(f"niveaux non strictement croissants: {levels}")
        chain = levels + ([int(self.reference)] if self.reference is not None else [])
        if self.reference is not None and self.reference <= levels[-1]:
            raise StudySpecError(f"référence {self.reference} pas plus fine que {levels[-1]}")
        for a in chain[1:]:
            ratio = a / chain[0]
            if ratio != int(ratio) or int(ratio) & (int(ratio) - 1):
                raise StudySpecError(f"niveau {a} non emboîté dyadiquement dans {chain[0]}")
        if self.problem_id in CONTROL_PROBLEMS and self.reference is None:
            raise StudySpecError("une étude de contrôle exige un niveau de référence")
        self.levels = levels

    @property
    def is_control(self) -> bool:
        return self.problem_id in CONTROL_PROBLEMS

    def discretization(self, level: int):
        """(n, M) associé à un niveau selon l'axe raffiné"""
        if self.axis == "space":
            return level, self.fixed_M
        if self.axis == "time":
            return self.fixed_n, level
        return level, self.fixed_M * level // self.levels[0]


@dataclass
class LevelResult:
    level: int
    n: int
    M: int
    h: float
    k: float
    error_state: float
    error_control: Optional[float] = None
    cost: Optional[float] = None
    iterations: Optional[int] = None
    eoc_state: Optional[float] = None
    eoc_control: Optional[float] = None
    unreliable: bool = False


@dataclass
class StudyReport:
    spec: StudySpec
    rows: List[LevelResult]
    fitted_state: float
    fitted_control: Optional[float] = None
    wall_time: float = 0.0

    @property
    def kind(self) -> str:
        return "control" if self.spec.is_control else "state"

    def csv_rows(self) -> List[dict]:
        if self.kind == "state":
            columns = ["level", "n", "M", "h", "k", "error_state", "eoc_state"]
            return [{("eoc" if c == "eoc_state" else c): _cell(getattr(r, c)) for c in columns} for r in self.rows]
        columns = ["level", "n", "M", "h", "k", "error_control", "error_state", "cost", "iterations",
                   "eoc_control", "eoc_state"]
        return [{c: _cell(getattr(r, c)) for c in columns} for r in self.rows]

    def summary(self) -> dict:
        spec = asdict(self.spec)
        spec["bounds"] = [self.spec.bounds.lower, self.spec.bounds.upper]
        return {
            "kind": self.kind,
            "spec": spec,
            "rows": [asdict(r) for r in self.rows],
            "fitted_state": self.fitted_state,
            "fitted_control": self.fitted_control,
            "wall_time": self.wall_time,
        }


def _cell(value):
    if value is None:
        return ""
    return value


def eoc(errors, sizes) -> List[Optional[float]]:
    """EOC_j = log(e_{j-1}/e_j) / log(s_{j-1}/s_j), None pour le premier niveau"""
    rates = [None]
    for j in range(1, len(errors)):
        if errors[j - 1] <= 0.0 or errors[j] <= 0.0:
            rates.append(math.nan)
        else:
            rates.append(math.log(errors[j - 1] / errors[j]) / math.log(sizes[j - 1] / sizes[j]))
    return rates


def fitted_order(errors, sizes) -> float:
    """Pente des moindres carrés de log e en fonction de log s"""
    errors, sizes = np.asarray(errors, dtype=float), np.asarray(sizes, dtype=float)
    if errors.shape[0] < 2 or np.any(errors <= 0.0):
        return math.nan
    return float(np.polyfit(np.log(sizes), np.log(errors), 1)[0])


class _Discretizations:
    """Maillages emboîtés, grilles et opérateurs partagés par les niveaux d'une étude"""

    def __init__(self, spec: StudySpec):
        self.spec = spec
        pairs = [spec.discretization(level) for level in spec.levels]
        if spec.reference is not None:
            pairs.append(spec.discretization(spec.reference))
        ns = sorted({n for n, _ in pairs})
        self.meshes = mesh_hierarchy(ns[0], ns)
        self.ops = {n: assemble(self.meshes[n]) for n in ns}
        self.grids = {M: uniform_grid(M, spec.T) for _, M in pairs}

    def __call__(self, level: int):
        n, M = self.spec.discretization(level)
        return n, M, self.meshes[n], self.grids[M], self.ops[n]

    def to_reference(self, coeffs: np.ndarray, level: int, boundary: bool = False) -> np.ndarray:
        n, M = self.spec.discretization(level)
        n_ref, M_ref = self.spec.discretization(self.spec.reference)
        coeffs = prolong_between(coeffs, self.meshes, n, n_ref, boundary=boundary)
        return prolong_slabs(coeffs, self.grids[M], self.grids[M_ref])


def _size(spec: StudySpec, row: LevelResult) -> float:
    return row.k if spec.axis == "time" else row.h


def _is_unreliable(spec: StudySpec, level: int) -> bool:
    return spec.reference is not None and spec.reference / level <= Config.UNRELIABLE_FACTOR


def _solve_state_level(problem: ManufacturedProblem, disc: _Discretizations, level: int):
    n, M, mesh, grid, ops = disc(level)
    logger.info(f"🔄 Niveau {level}: n={n}, M={M}")
    y = solve_state(problem.data, mesh, grid, ops)
    return y


async def run_state_convergence(spec: StudySpec) -> StudyReport:
    """Étude de convergence pour l'équation d'état.

    Sans référence, l'erreur est mesurée contre la solution exacte; avec une
    référence, contre la solution discrète du niveau de référence.
    """
    if spec.is_control:
        raise StudySpecError(f"{spec.problem_id} est un problème de contrôle")
    started = time.perf_counter()
    problem = manufactured_state_problem(spec.problem_id)
    disc = _Discretizations(spec)

    targets = list(spec.levels) + ([spec.reference] if spec.reference is not None else [])
    solutions = await asyncio.gather(*(asyncio.to_thread(_solve_state_level, problem, disc, lvl) for lvl in targets))
    by_level = dict(zip(targets, solutions))

    rows = []
    for level in spec.levels:
        n, M, mesh, grid, ops = disc(level)
        y = by_level[level]
        if spec.reference is None:
            error = l2_error_exact(problem.exact, y.coeffs, ops, grid)
        else:
            _, M_ref, _, grid_ref, ops_ref = disc(spec.reference)
            diff = by_level[spec.reference].coeffs - disc.to_reference(y.coeffs, level)
            error = l2_norm(diff, ops_ref, grid_ref)
        rows.append(LevelResult(level, n, M, mesh.h, grid.k_max, error, unreliable=_is_unreliable(spec, level)))

    return _finish(spec, rows, started)


def _solve_control_level(spec: StudySpec, disc: _Discretizations, level: int) -> OptimalityResult:
    n, M, mesh, grid, ops = disc(level)
    logger.info(f"🔄 Niveau {level}: n={n}, M={M}")
    prob = control_problem(spec.problem_id, mesh, grid, ops, spec.alpha, spec.bounds)
    return solve_control(prob, tol=spec.tol, max_iters=spec.max_iters)


def control_level_errors(disc: _Discretizations, level: int, result: OptimalityResult,
                         reference: OptimalityResult):
    """Erreurs (contrôle, état) d'un niveau contre la référence, après prolongement"""
    _, _, _, grid_ref, ops_ref = disc(disc.spec.reference)
    du = reference.u.coeffs - disc.to_reference(result.u.coeffs, level, boundary=True)
    dy = reference.y.coeffs - disc.to_reference(result.y.coeffs, level)
    return l2_norm(du, ops_ref, grid_ref, boundary=True), l2_norm(dy, ops_ref, grid_ref)


async def run_control_convergence(spec: StudySpec) -> StudyReport:
    """Étude de convergence du contrôle optimal contre une solution de référence"""
    if not spec.is_control:
        raise StudySpecError(f"{spec.problem_id} n'est pas un problème de contrôle")
    started = time.perf_counter()
    disc = _Discretizations(spec)
    targets = list(spec.levels) + [spec.reference]
    results = await asyncio.gather(*(asyncio.to_thread(_solve_control_level, spec, disc, lvl) for lvl in targets))
    by_level = dict(zip(targets, results))

    rows = []
    for level in spec.levels:
        n, M, mesh, grid, _ = disc(level)
        result = by_level[level]
        error_u, error_y = control_level_errors(disc, level, result, by_level[spec.reference])
        rows.append(LevelResult(level, n, M, mesh.h, grid.k_max, error_y, error_control=error_u,
                                cost=result.cost, iterations=result.iterations,
                                unreliable=_is_unreliable(spec, level)))

    return _finish(spec, rows, started)


def _finish(spec: StudySpec, rows: List[LevelResult], started: float) -> StudyReport:
    sizes = [_size(spec, r) for r in rows]
    for row, rate in zip(rows, eoc([r.error_state for r in rows], sizes)):
        row.eoc_state = rate
    fitted_control = None
    if spec.is_control:
        for row, rate in zip(rows, eoc([r.error_control for r in rows], sizes)):
            row.eoc_control = rate
        fitted_control = fitted_order([r.error_control for r in rows], sizes)

    flagged = [r.level for r in rows if r.unreliable]
    if flagged:
        logger.warning(f"⚠️ Niveaux à moins de {Config.UNRELIABLE_FACTOR}x de la référence: {flagged}")

    report = StudyReport(spec, rows, fitted_order([r.error_state for r in rows], sizes), fitted_control,
                         time.perf_counter() - started)
    logger.info(f"📊 Étude {spec.problem_id} ({spec.axis}): ordre état {report.fitted_state:.3f}"
                + (f", ordre contrôle {fitted_control:.3f}" if fitted_control is not None else ""))
    return report


def stability_diagnostics(problem: ManufacturedProblem, n: int, M: int, T: float = 1.0) -> dict:
    """Rapport de stabilité ‖p_kh(u)‖_I / ‖u‖_Σ et énergie des sauts (s = 1/2)
    sur (n, M), (2n, M) et (n, 2M)."""
    meshes = mesh_hierarchy(n, [n, 2 * n])
    out = {"discretizations": [], "stability_ratio": [], "jump_energy": []}
    for nn, MM in [(n, M), (2 * n, M), (n, 2 * M)]:
        mesh, grid = meshes[nn], uniform_grid(MM, T)
        ops = assemble(mesh)
        u = BoundaryField(grid, mesh, project_Pkh_boundary(problem.data.u, ops, grid))
        lifted = lifted_solve(u, ops, grid)
        ratio = l2_norm(lifted.coeffs, ops, grid) / l2_norm(u.coeffs, ops, grid, boundary=True)
        y = solve_state(problem.data, mesh, grid, ops)
        energy = jump_energy(SlabFunction(grid, y.coeffs), 0.5, ops.mass, initial=y.initial)
        out["discretizations"].append((nn, MM))
        out["stability_ratio"].append(ratio)
        out["jump_energy"].append(energy)
    logger.info(f"📊 Diagnostics: rapports {out['stability_ratio']}, sauts {out['jump_energy']}")
    return out
