import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from heatctrl.config import Config, HeatCtrlError
from heatctrl.mesh2d import DegenerateMeshError, Mesh, restrict
from heatctrl.sparsela import SparseSym, spd_solve
from heatctrl.timegrid import TimeGrid, _gauss

logger = logging.getLogger(__name__)

AREA_EPS = 1e-14


class DimensionMismatch(HeatCtrlError, ValueError):
    """Champs construits sur des discrétisations différentes"""


# Règles de quadrature sur le triangle: (coordonnées barycentriques, poids relatifs à l'aire)
MID_EDGE_RULE = (
    np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]),
    np.full(3, 1.0 / 3.0),
)

_A1, _B1 = 0.059715871789770, 0.470142064105115
_A2, _B2 = 0.797426985353087, 0.101286507323456
DUNAVANT7_RULE = (
    np.array([
        [1 / 3, 1 / 3, 1 / 3],
        [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
        [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2],
    ]),
    np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3),
)

# Gauss à deux points sur une arête, paramètre s dans [0, 1]
EDGE_GAUSS = (
    np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)]),
    np.array([0.5, 0.5]),
)


@dataclass(frozen=True, eq=False)
class FemOperators:
    """Formes P1 assemblées et vues par blocs intérieur/bord"""
    mesh: Mesh
    mass: SparseSym
    stiffness: SparseSym
    boundary_mass: SparseSym
    interior: np.ndarray
    boundary: np.ndarray
    areas: np.ndarray
    gradients: np.ndarray
    _blocks: dict = field(default_factory=dict, repr=False)

    def block(self, name: str) -> sp.csr_matrix:
        """Blocs 'M_ii', 'M_ib', 'M_bi', 'K_ii', 'K_ib', 'K_bi' (mis en cache)"""
        if name not in self._blocks:
            matrix = {"M": self.mass, "K": self.stiffness}[name[0]]
            rows = self.interior if name[2] == "i" else self.boundary
            cols = self.interior if name[3] == "i" else self.boundary
            self._blocks[name] = matrix.block(rows, cols)
        return self._blocks[name]

    @property
    def num_nodes(self) -> int:
        return self.mesh.num_nodes

    @property
    def num_boundary(self) -> int:
        return self.boundary.shape[0]


def _scatter(triangles: np.ndarray, local: np.ndarray, size: int) -> sp.csr_matrix:
    rows = np.repeat(triangles, triangles.shape[1], axis=1).ravel()
    cols = np.tile(triangles, (1, triangles.shape[1])).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(size, size)).tocsr()


def assemble(mesh: Mesh) -> FemOperators:
    """Matrices de masse, de rigidité et de masse de bord (intégrales exactes)"""
    nodes, tri = mesh.nodes, mesh.triangles
    p0, p1, p2 = nodes[tri[:, 0]], nodes[tri[:, 1]], nodes[tri[:, 2]]
    d1, d2 = p1 - p0, p2 - p0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    areas = 0.5 * det
    if np.any(areas <= AREA_EPS):
        raise DegenerateMeshError(f"{int(np.sum(areas <= AREA_EPS))} triangle(s) dégénéré(s)")

    # gradients des fonctions barycentriques: rot(p_{i+2} - p_{i+1}) / (2 aire)
    opposite = np.stack([p2 - p1, p0 - p2, p1 - p0], axis=1)
    gradients = np.stack([-opposite[..., 1], opposite[..., 0]], axis=-1) / det[:, None, None]

    local_k = areas[:, None, None] * np.einsum("tid,tjd->tij", gradients, gradients)
    reference = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local_m = areas[:, None, None] * reference[None, :, :]

    size = mesh.num_nodes
    mass = SparseSym(_scatter(tri, local_m, size))
    stiffness = SparseSym(_scatter(tri, local_k, size))

    # masse de bord numérotée selon mesh.boundary_nodes
    position = np.full(size, -1)
    position[mesh.boundary_nodes] = np.arange(mesh.boundary_nodes.shape[0])
    edges = position[mesh.boundary_edges]
    lengths = np.linalg.norm(nodes[mesh.boundary_edges[:, 1]] - nodes[mesh.boundary_edges[:, 0]], axis=1)
    local_b = lengths[:, None, None] * ((np.ones((2, 2)) + np.eye(2)) / 6.0)[None, :, :]
    boundary_mass = SparseSym(_scatter(edges, local_b, mesh.boundary_nodes.shape[0]))

    logger.debug(f"Assemblage: {size} noeuds, {mesh.num_triangles} triangles")
    return FemOperators(mesh, mass, stiffness, boundary_mass, mesh.interior_nodes, mesh.boundary_nodes, areas, gradients)


def quadrature_points(ops: FemOperators, rule=MID_EDGE_RULE):
    """Points physiques (T, Q, 2), poids absolus (T, Q) et valeurs des fonctions de base (Q, 3)"""
    bary, weights = rule
    corners = ops.mesh.nodes[ops.mesh.triangles]
    points = np.einsum("qi,tid->tqd", bary, corners)
    return points, ops.areas[:, None] * weights[None, :], bary


def load_vector(w: Callable, ops: FemOperators, rule=DUNAVANT7_RULE) -> np.ndarray:
    """b_i = ∫_Ω w φ_i"""
    points, weights, basis = quadrature_points(ops, rule)
    values = np.broadcast_to(w(points[..., 0], points[..., 1]), weights.shape)
    local = np.einsum("tq,qi->ti", weights * values, basis)
    return np.bincount(ops.mesh.triangles.ravel(), weights=local.ravel(), minlength=ops.num_nodes)


def boundary_load_vector(w: Callable, ops: FemOperators) -> np.ndarray:
    """b_j = ∫_Γ w φ_j, numéroté selon les noeuds de bord"""
    mesh = ops.mesh
    a, b = mesh.nodes[mesh.boundary_edges[:, 0]], mesh.nodes[mesh.boundary_edges[:, 1]]
    lengths = np.linalg.norm(b - a, axis=1)
    s, ws = EDGE_GAUSS
    points = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
    values = np.broadcast_to(w(points[..., 0], points[..., 1]), points.shape[:2])
    weighted = lengths[:, None] * ws[None, :] * values
    local = np.column_stack([weighted @ (1.0 - s), weighted @ s])

    position = np.full(mesh.num_nodes, -1)
    position[mesh.boundary_nodes] = np.arange(ops.num_boundary)
    return np.bincount(position[mesh.boundary_edges].ravel(), weights=local.ravel(), minlength=ops.num_boundary)


def _restricted_load(fine_load: np.ndarray, source: Sequence[Mesh]) -> np.ndarray:
    for child, parent in zip(source[:0:-1], source[-2::-1]):
        fine_load = restrict(fine_load, parent, child)
    return fine_load


def _nodal_source(w: np.ndarray, ops: FemOperators, source, size: int, fine_size: Callable[[Mesh], int]):
    w = np.asarray(w, dtype=float)
    if source is None:
        if w.shape != (size,):
            raise DimensionMismatch(f"champ nodal de taille {w.shape}, ({size},) attendu")
        return w, None
    source = list(source)
    if not source or source[0] is not ops.mesh:
        raise DimensionMismatch("la chaîne de maillages doit commencer par le maillage des opérateurs")
    if w.shape != (fine_size(source[-1]),):
        raise DimensionMismatch(f"champ nodal de taille {w.shape}, ({fine_size(source[-1])},) attendu")
    return w, source


def project_Ph(w, ops: FemOperators, tol: float = Config.CG_TOL, source: Optional[Sequence[Mesh]] = None) -> np.ndarray:
    """Projection L²(Ω) sur V_h d'une fonction w(x, y) ou d'un champ nodal.

    Un champ nodal d'un maillage plus fin est accepté avec `source`, la chaîne
    de maillages emboîtés [ops.mesh, ..., maillage de w].
    """
    if not isinstance(w, np.ndarray):
        return spd_solve(ops.mass, load_vector(w, ops), tol=tol)
    w, source = _nodal_source(w, ops, source, ops.num_nodes, lambda m: m.num_nodes)
    if source is None or len(source) == 1:
        return w.copy()
    load = _restricted_load(assemble(source[-1]).mass @ w, source)
    return spd_solve(ops.mass, load, tol=tol)


def project_Ph_boundary(w, ops: FemOperators, tol: float = Config.CG_TOL,
                        source: Optional[Sequence[Mesh]] = None) -> np.ndarray:
    """Projection L²(Γ) sur V_h(Γ), même convention que `project_Ph` pour `source`"""
    if not isinstance(w, np.ndarray):
        return spd_solve(ops.boundary_mass, boundary_load_vector(w, ops), tol=tol)
    w, source = _nodal_source(w, ops, source, ops.num_boundary, lambda m: m.boundary_nodes.shape[0])
    if source is None or len(source) == 1:
        return w.copy()
    fine = source[-1]
    full = np.zeros(fine.num_nodes)
    full[fine.boundary_nodes] = assemble(fine).boundary_mass @ w
    load = _restricted_load(full, source)[ops.boundary]
    return spd_solve(ops.boundary_mass, load, tol=tol)


def _slab_averaged(loader, w, grid: TimeGrid, points: int):
    times, weights = _gauss(grid, points)
    return np.array([
        sum(wq * loader(lambda x, y, s=s: w(s, x, y)) for wq, s in zip(weights, row))
        for row in times
    ])


def project_Pkh(w: Callable, ops: FemOperators, grid: TimeGrid, tol: float = Config.CG_TOL) -> np.ndarray:
    """Projection L² espace-temps sur X_kh: moyenne par tranche puis projection spatiale"""
    loads = _slab_averaged(lambda g: load_vector(g, ops), w, grid, Config.TIME_GAUSS_POINTS)
    return np.array([spd_solve(ops.mass, b, tol=tol) for b in loads])


def project_Pkh_boundary(w: Callable, ops: FemOperators, grid: TimeGrid, tol: float = Config.CG_TOL) -> np.ndarray:
    loads = _slab_averaged(lambda g: boundary_load_vector(g, ops), w, grid, Config.TIME_GAUSS_POINTS)
    return np.array([spd_solve(ops.boundary_mass, b, tol=tol) for b in loads])


def ritz_projection(v, ops: FemOperators, grad: Optional[Callable] = None, tol: float = Config.CG_TOL) -> np.ndarray:
    """Projection de Ritz sur V_h^0, retournée comme champ nodal complet (zéro au bord).

    `v` est soit un champ nodal, soit une fonction dont le gradient
    `grad(x, y) -> (gx, gy)` est fourni.
    """
    interior = ops.interior
    if isinstance(v, np.ndarray):
        rhs = (ops.stiffness @ v)[interior]
    else:
        if grad is None:
            raise ValueError("le gradient est requis pour projeter une fonction")
        points, weights, _ = quadrature_points(ops, DUNAVANT7_RULE)
        gx, gy = grad(points[..., 0], points[..., 1])
        mean_grad = np.stack([np.sum(weights * gx, axis=1), np.sum(weights * gy, axis=1)], axis=-1)
        local = np.einsum("tid,td->ti", ops.gradients, mean_grad)
        rhs = np.bincount(ops.mesh.triangles.ravel(), weights=local.ravel(), minlength=ops.num_nodes)[interior]

    out = np.zeros(ops.num_nodes)
    out[interior] = spd_solve(ops.stiffness.sub(interior), rhs, tol=tol)
    return out


def modified_projection_Hhat(w: Callable, ops: FemOperators, tol: float = Config.CG_TOL) -> np.ndarray:
    """Intérieur pris dans P_h w, bord remplacé par la projection L²(Γ) de la trace de w"""
    out = project_Ph(w, ops, tol=tol)
    out[ops.boundary] = project_Ph_boundary(w, ops, tol=tol)
    return out


def l2_norm(coeffs: np.ndarray, ops: FemOperators, grid: TimeGrid, boundary: bool = False) -> float:
    """Norme L²(I; L²(Ω)) ou L²(I; L²(Γ)) d'un champ constant par tranche"""
    weight = ops.boundary_mass if boundary else ops.mass
    coeffs = np.asarray(coeffs, dtype=float)
    squares = np.einsum("mi,mi->m", coeffs, (weight @ coeffs.T).T)
    return float(np.sqrt(max(np.sum(grid.k * squares), 0.0)))


def l2_error_exact(exact: Callable, coeffs: np.ndarray, ops: FemOperators, grid: TimeGrid,
                   time_points: int = Config.ERROR_TIME_GAUSS_POINTS) -> float:
    """‖y - y_kh‖_{L²(I;L²(Ω))} pour une solution exacte y(t, x, y)"""
    points, weights, basis = quadrature_points(ops, DUNAVANT7_RULE)
    tri = ops.mesh.triangles
    times, time_weights = _gauss(grid, time_points)
    total = 0.0
    for m in range(grid.M):
        discrete = np.einsum("qi,ti->tq", basis, coeffs[m][tri])
        for wq, s in zip(time_weights, times[m]):
            diff = exact(s, points[..., 0], points[..., 1]) - discrete
            total += grid.k[m] * wq * np.sum(weights * diff ** 2)
    return float(np.sqrt(total))


def l2_difference_by_quadrature(a: np.ndarray, b: np.ndarray, ops: FemOperators, grid: TimeGrid) -> float:
    """‖a - b‖ pour deux champs P1 du même maillage, par la règle des milieux (exacte ici)"""
    _, weights, basis = quadrature_points(ops, MID_EDGE_RULE)
    tri = ops.mesh.triangles
    total = 0.0
    for m in range(grid.M):
        diff = np.einsum("qi,ti->tq", basis, (a[m] - b[m])[tri])
        total += grid.k[m] * np.sum(weights * diff ** 2)
    return float(np.sqrt(total))


def h1_seminorm_error(grad: Callable, nodal: np.ndarray, ops: FemOperators) -> float:
    """‖∇(v - v_h)‖_{L²(Ω)} avec v donné par son gradient"""
    points, weights, _ = quadrature_points(ops, DUNAVANT7_RULE)
    discrete = np.einsum("tid,ti->td", ops.gradients, nodal[ops.mesh.triangles])
    gx, gy = grad(points[..., 0], points[..., 1])
    err = (gx - discrete[:, None, 0]) ** 2 + (gy - discrete[:, None, 1]) ** 2
    return float(np.sqrt(np.sum(weights * err)))
