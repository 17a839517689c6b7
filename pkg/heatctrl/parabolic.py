import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from heatctrl.assembly import DimensionMismatch, FemOperators, load_vector, project_Ph, project_Pkh_boundary
from heatctrl.config import Config
from heatctrl.mesh2d import Mesh
from heatctrl.sparsela import SparseSym, spd_solve
from heatctrl.timegrid import TimeGrid, _gauss

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SpaceTimeField:
    """Champ DG(0)-CG(1): coeffs[m] est le champ nodal sur la tranche I_m"""
    grid: TimeGrid
    mesh: Mesh
    coeffs: np.ndarray
    initial: Optional[np.ndarray] = None
    on_boundary = False

    def __post_init__(self):
        if self.coeffs.shape != (self.grid.M, self.mesh.num_nodes):
            raise DimensionMismatch(f"coefficients {self.coeffs.shape}, attendu {(self.grid.M, self.mesh.num_nodes)}")
        if self.initial is None:
            object.__setattr__(self, "initial", np.zeros(self.mesh.num_nodes))

    def with_coeffs(self, coeffs: np.ndarray) -> "SpaceTimeField":
        return SpaceTimeField(self.grid, self.mesh, np.asarray(coeffs, dtype=float), self.initial)


@dataclass(frozen=True, eq=False)
class BoundaryField:
    """Champ DG(0) en temps à valeurs dans V_h(Γ), numéroté selon mesh.boundary_nodes"""
    grid: TimeGrid
    mesh: Mesh
    coeffs: np.ndarray
    on_boundary = True

    def __post_init__(self):
        expected = (self.grid.M, self.mesh.boundary_nodes.shape[0])
        if self.coeffs.shape != expected:
            raise DimensionMismatch(f"coefficients de bord {self.coeffs.shape}, attendu {expected}")

    def with_coeffs(self, coeffs: np.ndarray) -> "BoundaryField":
        return BoundaryField(self.grid, self.mesh, np.asarray(coeffs, dtype=float))


@dataclass
class ProblemData:
    """Données de l'équation d'état: f(t, x, y), y0(x, y), u(t, x, y) ou BoundaryField.

    Une donnée absente vaut zéro.
    """
    f: Optional[Callable] = None
    y0: Optional[Union[Callable, np.ndarray]] = None
    u: Optional[Union[Callable, BoundaryField]] = None


@dataclass
class _StepCache:
    """Matrices M_ii/k + K_ii par valeur de pas"""
    ops: FemOperators
    systems: dict = field(default_factory=dict)

    def system(self, k: float) -> SparseSym:
        key = float(k)
        if key not in self.systems:
            self.systems[key] = SparseSym(self.ops.block("M_ii") / key + self.ops.block("K_ii"), check=False)
        return self.systems[key]


def _check_same(ops: FemOperators, grid: TimeGrid, *fields):
    for f in fields:
        if f.mesh is not ops.mesh or f.grid.M != grid.M or not np.allclose(f.grid.t, grid.t):
            raise DimensionMismatch("champ défini sur une autre discrétisation")


def slab_loads(f: Optional[Callable], ops: FemOperators, grid: TimeGrid) -> np.ndarray:
    """Vecteurs de charge moyennés par tranche: (1/k_m) ∫_{I_m} (f, φ_i)"""
    if f is None:
        return np.zeros((grid.M, ops.num_nodes))
    times, weights = _gauss(grid, Config.TIME_GAUSS_POINTS)
    return np.array([
        sum(wq * load_vector(lambda x, y, s=s: f(s, x, y), ops) for wq, s in zip(weights, row))
        for row in times
    ])


def _boundary_coefficients(u, ops: FemOperators, grid: TimeGrid, tol: float) -> np.ndarray:
    if u is None:
        return np.zeros((grid.M, ops.num_boundary))
    if isinstance(u, BoundaryField):
        _check_same(ops, grid, u)
        return np.asarray(u.coeffs, dtype=float)
    return project_Pkh_boundary(u, ops, grid, tol=tol)


def _step_forward(ops: FemOperators, grid: TimeGrid, loads: np.ndarray, boundary: np.ndarray,
                  initial: np.ndarray, tol: float) -> np.ndarray:
    interior, bnd = ops.interior, ops.boundary
    M_ii, M_ib, K_ib = ops.block("M_ii"), ops.block("M_ib"), ops.block("K_ib")
    cache = _StepCache(ops)
    coeffs = np.zeros((grid.M, ops.num_nodes))
    previous = initial
    for m, k in enumerate(grid.k):
        u_m = boundary[m]
        rhs = (M_ii @ previous[interior] + M_ib @ previous[bnd]) / k + loads[m][interior] - (M_ib / k + K_ib) @ u_m
        coeffs[m, interior] = spd_solve(cache.system(k), rhs, tol=tol)
        coeffs[m, bnd] = u_m
        previous = coeffs[m]
    return coeffs


def solve_state(data: ProblemData, mesh: Mesh, grid: TimeGrid, ops: FemOperators,
                tol: float = Config.CG_TOL) -> SpaceTimeField:
    """Schéma DG(0)-CG(1) avec données de Dirichlet non homogènes.

    Les coefficients de bord sont P̃_kh u (ou u tel quel si c'est déjà un
    BoundaryField), l'intérieur est obtenu par pas d'Euler implicite relevés
    par les blocs de couplage intérieur/bord.
    """
    if ops.mesh is not mesh:
        raise DimensionMismatch("opérateurs assemblés sur un autre maillage")
    initial = np.zeros(mesh.num_nodes) if data.y0 is None else project_Ph(data.y0, ops, tol=tol)
    if initial.shape != (mesh.num_nodes,):
        raise DimensionMismatch(f"donnée initiale de taille {initial.shape}")
    boundary = _boundary_coefficients(data.u, ops, grid, tol)
    if data.u is not None and not isinstance(data.u, BoundaryField) and data.y0 is not None:
        mismatch = np.max(np.abs(boundary[0] - initial[ops.boundary]), initial=0.0)
        if mismatch > 1e-8:
            logger.debug(f"Données incompatibles en t=0: écart de trace {mismatch:.2e}")
    loads = slab_loads(data.f, ops, grid)
    coeffs = _step_forward(ops, grid, loads, boundary, initial, tol)
    return SpaceTimeField(grid, mesh, coeffs, initial)


def lifted_solve(u: BoundaryField, ops: FemOperators, grid: TimeGrid, tol: float = Config.CG_TOL) -> SpaceTimeField:
    """Relèvement discret p_kh(u): f = 0, y0 = 0, bord = u sans projection"""
    _check_same(ops, grid, u)
    coeffs = _step_forward(ops, grid, np.zeros((grid.M, ops.num_nodes)), np.asarray(u.coeffs, dtype=float),
                           np.zeros(ops.num_nodes), tol)
    return SpaceTimeField(grid, ops.mesh, coeffs)


def solve_adjoint(rhs: SpaceTimeField, mesh: Mesh, grid: TimeGrid, ops: FemOperators,
                  tol: float = Config.CG_TOL) -> SpaceTimeField:
    """Problème adjoint rétrograde à bord homogène: B(φ, z) = (g, φ)_I pour tout φ ∈ X⁰_kh"""
    _check_same(ops, grid, rhs)
    interior = ops.interior
    M_ii = ops.block("M_ii")
    cache = _StepCache(ops)
    loads = (ops.mass @ rhs.coeffs.T).T[:, interior]
    coeffs = np.zeros((grid.M, mesh.num_nodes))
    following = np.zeros(interior.shape[0])
    for m in range(grid.M - 1, -1, -1):
        k = grid.k[m]
        coeffs[m, interior] = spd_solve(cache.system(k), M_ii @ following / k + loads[m], tol=tol)
        following = coeffs[m, interior]
    return SpaceTimeField(grid, mesh, coeffs)


def normal_derivative_variational(z: SpaceTimeField, g: SpaceTimeField, ops: FemOperators, grid: TimeGrid,
                                  tol: float = Config.CG_TOL) -> BoundaryField:
    """Dérivée normale discrète par l'identité de Green discrète.

    Pour chaque tranche, M_Γ (∂ₙz)_m = K_bi z_m + M_bi (z_m - z_{m+1}) / k_m - (M g_m)_b.
    """
    _check_same(ops, grid, z, g)
    interior, bnd = ops.interior, ops.boundary
    K_bi, M_bi = ops.block("K_bi"), ops.block("M_bi")
    z_int = z.coeffs[:, interior]
    following = np.vstack([z_int[1:], np.zeros((1, interior.shape[0]))])
    g_loads = (ops.mass @ g.coeffs.T).T[:, bnd]
    coeffs = np.zeros((grid.M, ops.num_boundary))
    for m, k in enumerate(grid.k):
        residual = K_bi @ z_int[m] + M_bi @ (z_int[m] - following[m]) / k - g_loads[m]
        coeffs[m] = spd_solve(ops.boundary_mass, residual, tol=tol)
    return BoundaryField(grid, ops.mesh, coeffs)


def normal_derivative_by_lifting(g: SpaceTimeField, ops: FemOperators, grid: TimeGrid,
                                 tol: float = Config.CG_TOL) -> BoundaryField:
    """Construction par relèvements: ∫_Σ ∂ₙz φ = -(g, p_kh(φ))_I pour chaque φ de base.

    Un relèvement par fonction de base de bord et par tranche: réservé aux
    petits problèmes de vérification.
    """
    _check_same(ops, grid, g)
    n_b = ops.num_boundary
    weighted_g = grid.k[:, None] * (ops.mass @ g.coeffs.T).T
    rhs = np.zeros((grid.M, n_b))
    for m in range(grid.M):
        for j in range(n_b):
            basis = np.zeros((grid.M, n_b))
            basis[m, j] = 1.0
            lifted = lifted_solve(BoundaryField(grid, ops.mesh, basis), ops, grid, tol=tol)
            rhs[m, j] = -np.sum(weighted_g * lifted.coeffs)
    coeffs = np.array([spd_solve(ops.boundary_mass, rhs[m] / grid.k[m], tol=tol) for m in range(grid.M)])
    return BoundaryField(grid, ops.mesh, coeffs)


def bilinear_B(v: SpaceTimeField, w: SpaceTimeField, ops: FemOperators) -> float:
    """Forme B sous sa représentation primale (termes de saut vers l'avant)"""
    _check_same(ops, v.grid, v, w)
    k = v.grid.k
    stiff = np.einsum("mi,mi->m", v.coeffs, (ops.stiffness @ w.coeffs.T).T)
    previous = np.vstack([np.zeros((1, v.coeffs.shape[1])), v.coeffs[:-1]])
    jumps = v.coeffs - previous
    jump_terms = np.einsum("mi,mi->m", jumps, (ops.mass @ w.coeffs.T).T)
    return float(np.sum(k * stiff) + np.sum(jump_terms))


def bilinear_B_dual(v: SpaceTimeField, w: SpaceTimeField, ops: FemOperators) -> float:
    """Forme B sous sa représentation duale (sauts de w, valeur finale)"""
    _check_same(ops, v.grid, v, w)
    k = v.grid.k
    stiff = np.einsum("mi,mi->m", v.coeffs, (ops.stiffness @ w.coeffs.T).T)
    following = np.vstack([w.coeffs[1:], np.zeros((1, w.coeffs.shape[1]))])
    jump_terms = np.einsum("mi,mi->m", v.coeffs, (ops.mass @ (w.coeffs - following).T).T)
    return float(np.sum(k * stiff) + np.sum(jump_terms))


def inner_I(a: SpaceTimeField, b: SpaceTimeField, ops: FemOperators) -> float:
    """(a, b)_{L²(I;L²(Ω))}"""
    return float(np.sum(a.grid.k * np.einsum("mi,mi->m", a.coeffs, (ops.mass @ b.coeffs.T).T)))


def inner_Sigma(a: BoundaryField, b: BoundaryField, ops: FemOperators) -> float:
    """(a, b)_{L²(I;L²(Γ))}"""
    return float(np.sum(a.grid.k * np.einsum("mi,mi->m", a.coeffs, (ops.boundary_mass @ b.coeffs.T).T)))


def galerkin_residual(y: SpaceTimeField, data: ProblemData, phi: SpaceTimeField, ops: FemOperators) -> float:
    """B(y, φ) - (f, φ)_I - (y0, φ⁺_0) pour un champ test φ ∈ X⁰_kh"""
    loads = slab_loads(data.f, ops, y.grid)
    source = float(np.sum(y.grid.k * np.einsum("mi,mi->m", loads, phi.coeffs)))
    initial = float(y.initial @ (ops.mass @ phi.coeffs[0]))
    return bilinear_B(y, phi, ops) - source - initial
