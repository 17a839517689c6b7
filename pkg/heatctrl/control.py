import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from heatctrl.assembly import FemOperators, project_Pkh
from heatctrl.config import Config, HeatCtrlError
from heatctrl.mesh2d import Mesh
from heatctrl.parabolic import (
    BoundaryField,
    ProblemData,
    SpaceTimeField,
    inner_I,
    inner_Sigma,
    lifted_solve,
    normal_derivative_variational,
    solve_adjoint,
    solve_state,
)
from heatctrl.sparsela import estimate_opnorm
from heatctrl.timegrid import TimeGrid

logger = logging.getLogger(__name__)


class InvalidControlData(HeatCtrlError, ValueError):
    """Bornes ou paramètre de régularisation incohérents"""


@dataclass(frozen=True)
class ControlBounds:
    """Contraintes de boîte u_a <= u <= u_b (bornes infinies autorisées)"""
    lower: float = -math.inf
    upper: float = math.inf

    def __post_init__(self):
        if not self.lower < self.upper:
            raise InvalidControlData(f"bornes invalides: u_a={self.lower} >= u_b={self.upper}")


@dataclass
class ControlProblem:
    """Problème de contrôle frontière de Dirichlet discrétisé.

    `y_d` est soit une fonction y_d(t, x, y), projetée une seule fois par
    P_kh, soit directement un tableau (M, N) de coefficients discrets.
    """
    alpha: float
    bounds: ControlBounds
    data: ProblemData
    y_d: Union[Callable, np.ndarray, None]
    mesh: Mesh
    grid: TimeGrid
    ops: FemOperators
    tol: float = Config.CG_TOL
    _target: Optional[np.ndarray] = field(init=False, default=None, repr=False)

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidControlData(f"alpha doit être > 0 (reçu {self.alpha})")

    @property
    def target(self) -> np.ndarray:
        """P_kh y_d, calculé une fois"""
        if self._target is None:
            if self.y_d is None:
                self._target = np.zeros((self.grid.M, self.mesh.num_nodes))
            elif isinstance(self.y_d, np.ndarray):
                self._target = np.array(self.y_d, dtype=float)
            else:
                self._target = project_Pkh(self.y_d, self.ops, self.grid, tol=self.tol)
        return self._target

    def zero_control(self) -> BoundaryField:
        return BoundaryField(self.grid, self.mesh, np.zeros((self.grid.M, self.ops.num_boundary)))


@dataclass
class OptimalityResult:
    u: BoundaryField
    y: SpaceTimeField
    z: SpaceTimeField
    normal_derivative: BoundaryField
    cost: float
    residual: float
    iterations: int
    converged: bool = True
    history: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {
            "cost": self.cost,
            "residual": self.residual,
            "iterations": self.iterations,
            "converged": self.converged,
        }


class ControlNotConverged(HeatCtrlError, RuntimeError):
    """Tolérance non atteinte; `result` contient le meilleur itéré"""

    def __init__(self, message: str, result: OptimalityResult):
        super().__init__(message)
        self.result = result


@dataclass
class _Evaluation:
    u: BoundaryField
    y: SpaceTimeField
    z: SpaceTimeField
    dz: BoundaryField
    cost: float


def _state(u: BoundaryField, prob: ControlProblem) -> SpaceTimeField:
    data = ProblemData(f=prob.data.f, y0=prob.data.y0, u=u)
    return solve_state(data, prob.mesh, prob.grid, prob.ops, tol=prob.tol)


def _cost(u: BoundaryField, y: SpaceTimeField, prob: ControlProblem) -> float:
    misfit = y.with_coeffs(y.coeffs - prob.target)
    return 0.5 * inner_I(misfit, misfit, prob.ops) + 0.5 * prob.alpha * inner_Sigma(u, u, prob.ops)


def _evaluate(u: BoundaryField, prob: ControlProblem) -> _Evaluation:
    y = _state(u, prob)
    g = y.with_coeffs(y.coeffs - prob.target)
    z = solve_adjoint(g, prob.mesh, prob.grid, prob.ops, tol=prob.tol)
    dz = normal_derivative_variational(z, g, prob.ops, prob.grid, tol=prob.tol)
    return _Evaluation(u, y, z, dz, _cost(u, y, prob))


def evaluate_cost(u: BoundaryField, prob: ControlProblem):
    """Ĵ(u) = ½‖y(u) - P_kh y_d‖²_I + (α/2)‖u‖²_Σ, retourne (coût, état)"""
    y = _state(u, prob)
    return _cost(u, y, prob), y


def reduced_gradient(u: BoundaryField, prob: ControlProblem) -> BoundaryField:
    """Représentant de Riesz dans L²(Σ) de Ĵ'(u): α u - ∂ₙᵸ z"""
    ev = _evaluate(u, prob)
    return u.with_coeffs(prob.alpha * u.coeffs - ev.dz.coeffs)


def hessian_apply(v: BoundaryField, prob: ControlProblem) -> BoundaryField:
    """Hessien réduit: α v - ∂ₙᵸ z(p_kh(v))"""
    return v.with_coeffs(prob.alpha * v.coeffs + _lifted_hessian(v.coeffs, prob))


def _lifted_hessian(coeffs: np.ndarray, prob: ControlProblem) -> np.ndarray:
    """v ↦ -∂ₙᵸ z(p_kh(v)), partie autoadjointe positive du hessien"""
    lifted = lifted_solve(BoundaryField(prob.grid, prob.mesh, coeffs), prob.ops, prob.grid, tol=prob.tol)
    z = solve_adjoint(lifted, prob.mesh, prob.grid, prob.ops, tol=prob.tol)
    return -normal_derivative_variational(z, lifted, prob.ops, prob.grid, tol=prob.tol).coeffs


def project_box(v, bounds: ControlBounds):
    """Projection coefficient par coefficient sur [u_a, u_b]"""
    if isinstance(v, BoundaryField):
        return v.with_coeffs(np.clip(v.coeffs, bounds.lower, bounds.upper))
    return np.clip(np.asarray(v, dtype=float), bounds.lower, bounds.upper)


def lumped_riesz(coeffs: np.ndarray, prob: ControlProblem) -> np.ndarray:
    """D_Γ⁻¹ M_Γ v par tranche: représentant dans la métrique de bord condensée"""
    coeffs = np.asarray(coeffs, dtype=float)
    return (prob.ops.boundary_mass @ coeffs.T).T / prob.ops.boundary_mass.row_sums()


def optimality_residual(u: BoundaryField, dz: BoundaryField, prob: ControlProblem) -> float:
    """‖u - Π(u - D_Γ⁻¹M_Γ(αu - ∂ₙᵸz)/α)‖_{L²(Σ)}, nul exactement à l'optimum discret.

    Avec une masse de bord diagonale l'expression se réduit à u - Π(∂ₙᵸz/α).
    """
    step = u.coeffs - lumped_riesz(prob.alpha * u.coeffs - dz.coeffs, prob) / prob.alpha
    gap = u.with_coeffs(u.coeffs - project_box(step, prob.bounds))
    return math.sqrt(max(inner_Sigma(gap, gap, prob.ops), 0.0))


def lipschitz_estimate(prob: ControlProblem) -> float:
    """Plus grande valeur propre du hessien réduit dans le produit scalaire de bord condensé"""
    shape = (prob.grid.M, prob.ops.num_boundary)
    weights = prob.grid.k[:, None] * prob.ops.boundary_mass.row_sums()[None, :]

    def inner(a, b):
        return float(np.sum(weights * a.reshape(shape) * b.reshape(shape)))

    def apply(v):
        v = v.reshape(shape)
        return lumped_riesz(prob.alpha * v + _lifted_hessian(v, prob), prob).ravel()

    largest = estimate_opnorm(apply, int(np.prod(shape)), Config.POWER_ITERATIONS, inner=inner)
    return Config.POWER_SLACK * largest


def solve_control(prob: ControlProblem, tol: Optional[float] = None,
                  max_iters: int = Config.CONTROL_MAX_ITERS) -> OptimalityResult:
    """Gradient projeté accéléré avec redémarrage sur hausse du coût.

    Le pas est pris dans la métrique de bord condensée, où la troncature
    coefficient par coefficient est la projection exacte sur la boîte.
    L'application contrôle -> (état, dérivée normale) est affine: le gradient
    au point extrapolé se déduit des deux derniers itérés sans nouvelle
    résolution.
    """
    alpha, bounds = prob.alpha, prob.bounds
    L = lipschitz_estimate(prob)
    logger.info(f"🔄 Contrôle optimal: α={alpha}, bornes=({bounds.lower}, {bounds.upper}), L≈{L:.4g}")

    current = _evaluate(project_box(prob.zero_control(), bounds), prob)
    if tol is None:
        scale = math.sqrt(max(inner_Sigma(current.dz, current.dz, prob.ops), 0.0))
        tol = Config.CONTROL_TOL_FACTOR * max(1.0, scale)

    previous = current
    momentum = 1.0
    residual = optimality_residual(current.u, current.dz, prob)
    best = (residual, current)
    history = [current.cost]

    for iteration in range(1, max_iters + 1):
        if residual <= tol:
            logger.info(f"✅ Contrôle convergé en {iteration - 1} itérations, résidu {residual:.3e}, coût {current.cost:.6e}")
            return _result(current, residual, iteration - 1, True, history)

        next_momentum = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * momentum ** 2))
        beta = (momentum - 1.0) / next_momentum
        w = current.u.coeffs + beta * (current.u.coeffs - previous.u.coeffs)
        dz_w = current.dz.coeffs + beta * (current.dz.coeffs - previous.dz.coeffs)
        step = w - lumped_riesz(alpha * w - dz_w, prob) / L
        candidate = _evaluate(current.u.with_coeffs(project_box(step, bounds)), prob)

        scale = max(1.0, abs(current.cost))
        if candidate.cost > current.cost + 1e-12 * scale:
            if beta > 0.0:
                logger.debug(f"Itération {iteration}: hausse du coût, redémarrage du moment")
            else:
                L *= 2.0
                logger.debug(f"Itération {iteration}: pas trop long, L={L:.4g}")
            previous, momentum = current, 1.0
            continue

        previous, current, momentum = current, candidate, next_momentum
        history.append(current.cost)
        residual = optimality_residual(current.u, current.dz, prob)
        if residual < best[0]:
            best = (residual, current)
        logger.debug(f"Itération {iteration}: coût {current.cost:.10e}, résidu {residual:.3e}")

    if residual <= tol:
        return _result(current, residual, max_iters, True, history)

    result = _result(best[1], best[0], max_iters, False, history)
    logger.error(f"❌ Contrôle non convergé après {max_iters} itérations (meilleur résidu {best[0]:.3e} > {tol:.3e})")
    raise ControlNotConverged(f"résidu {best[0]:.3e} > tolérance {tol:.3e} après {max_iters} itérations", result)


def _result(ev: _Evaluation, residual: float, iterations: int, converged: bool, history: list) -> OptimalityResult:
    return OptimalityResult(ev.u, ev.y, ev.z, ev.dz, ev.cost, residual, iterations, converged, history)
