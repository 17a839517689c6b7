import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from heatctrl.config import HeatCtrlError

logger = logging.getLogger(__name__)


class DegenerateMeshError(HeatCtrlError, ValueError):
    """Maillage dégénéré (n = 0, triangle d'aire nulle)"""


class NonNestedError(HeatCtrlError, ValueError):
    """Deux maillages qui ne sont pas emboîtés"""


def _frozen(array, dtype):
    out = np.ascontiguousarray(array, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangulation P1 conforme d'un polygone convexe.

    `parent_count` et `midpoint_parents` ne sont renseignés que pour un
    maillage issu de `refine` : les `parent_count` premiers noeuds sont ceux
    du parent, chaque noeud suivant est le milieu de l'arête
    `midpoint_parents[i]` du parent.
    """
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_nodes: np.ndarray
    interior_nodes: np.ndarray
    h: float
    parent_count: Optional[int] = None
    midpoint_parents: Optional[np.ndarray] = None

    @property
    def num_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def edges(self) -> np.ndarray:
        """Arêtes non orientées, triées lexicographiquement"""
        return _unique_edges(self.triangles)[0]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def areas(self) -> np.ndarray:
        return signed_areas(self.nodes, self.triangles)


def signed_areas(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p0, p1, p2 = (nodes[triangles[:, i]] for i in range(3))
    d1, d2 = p1 - p0, p2 - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _unique_edges(triangles: np.ndarray):
    all_edges = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    return np.unique(np.sort(all_edges, axis=1), axis=0, return_inverse=True)


def _mesh_size(nodes: np.ndarray, triangles: np.ndarray) -> float:
    edges, _ = _unique_edges(triangles)
    return float(np.max(np.linalg.norm(nodes[edges[:, 0]] - nodes[edges[:, 1]], axis=1)))


def _build(nodes, triangles, boundary_edges, parent_count=None, midpoint_parents=None) -> Mesh:
    areas = signed_areas(nodes, triangles)
    if np.any(areas <= 0.0):
        raise DegenerateMeshError(f"{int(np.sum(areas <= 0.0))} triangle(s) d'aire non positive")

    boundary = boundary_edges[:, 0]
    interior = np.setdiff1d(np.arange(nodes.shape[0]), boundary)
    return Mesh(
        nodes=_frozen(nodes, float),
        triangles=_frozen(triangles, np.int64),
        boundary_edges=_frozen(boundary_edges, np.int64),
        boundary_nodes=_frozen(boundary, np.int64),
        interior_nodes=_frozen(interior, np.int64),
        h=_mesh_size(nodes, triangles),
        parent_count=parent_count,
        midpoint_parents=None if midpoint_parents is None else _frozen(midpoint_parents, np.int64),
    )


def unit_square_mesh(n: int) -> Mesh:
    """Maillage structuré du carré unité, n subdivisions par côté.

    Noeuds numérotés lexicographiquement en (y, x), diagonale uniforme de
    (i, j) vers (i+1, j+1), bord parcouru dans le sens trigonométrique depuis
    l'origine.
    """
    if n < 1:
        raise DegenerateMeshError(f"n doit être >= 1 (reçu {n})")

    coords = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(coords, coords)
    nodes = np.column_stack([xx.ravel(), yy.ravel()])

    def idx(i, j):
        return j * (n + 1) + i

    i, j = np.meshgrid(np.arange(n), np.arange(n))
    i, j = i.ravel(), j.ravel()
    v00, v10, v01, v11 = idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1)
    triangles = np.concatenate([
        np.column_stack([v00, v10, v11]),
        np.column_stack([v00, v11, v01]),
    ])
    # ordre par cellule, stable d'un appel à l'autre
    order = np.argsort(np.concatenate([np.arange(n * n), np.arange(n * n)]), kind="stable")
    triangles = triangles[order]

    ring = (
        [idx(k, 0) for k in range(n + 1)]
        + [idx(n, k) for k in range(1, n + 1)]
        + [idx(k, n) for k in range(n - 1, -1, -1)]
        + [idx(0, k) for k in range(n - 1, 0, -1)]
    )
    ring = np.array(ring)
    boundary_edges = np.column_stack([ring, np.roll(ring, -1)])

    return _build(nodes, triangles, boundary_edges)


def refine(mesh: Mesh) -> Mesh:
    """Découpe chaque triangle en 4 par les milieux d'arêtes (maillage emboîté)"""
    t = mesh.triangles
    num_t = t.shape[0]
    edges, j_map = _unique_edges(t)
    j_map = j_map.ravel()
    te = np.column_stack([j_map[:num_t], j_map[num_t:2 * num_t], j_map[2 * num_t:]])

    n_old = mesh.num_nodes
    midpoints = 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])
    nodes = np.vstack([mesh.nodes, midpoints])

    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    m_ab, m_bc, m_ca = te[:, 0] + n_old, te[:, 1] + n_old, te[:, 2] + n_old
    children = np.stack([
        np.column_stack([a, m_ab, m_ca]),
        np.column_stack([m_ab, b, m_bc]),
        np.column_stack([m_ca, m_bc, c]),
        np.column_stack([m_ab, m_bc, m_ca]),
    ], axis=1).reshape(-1, 3)

    edge_ids = {tuple(e): k for k, e in enumerate(edges.tolist())}
    boundary_edges = []
    for p, q in mesh.boundary_edges.tolist():
        mid = edge_ids[(min(p, q), max(p, q))] + n_old
        boundary_edges.append((p, mid))
        boundary_edges.append((mid, q))

    child = _build(nodes, children, np.array(boundary_edges), parent_count=n_old, midpoint_parents=edges)
    logger.debug(f"Raffinement: {n_old} -> {child.num_nodes} noeuds, h={child.h:.4g}")
    return child


def _check_nested(parent: Mesh, child: Mesh):
    if child.parent_count != parent.num_nodes or child.midpoint_parents is None:
        raise NonNestedError("le maillage fin n'est pas issu d'un raffinement du maillage grossier")
    if not np.array_equal(child.nodes[:parent.num_nodes], parent.nodes):
        raise NonNestedError("les coordonnées des noeuds parents ne coïncident pas")


def prolong(field: np.ndarray, parent: Mesh, child: Mesh) -> np.ndarray:
    """Interpolation P1 exacte d'un champ nodal vers le maillage raffiné.

    Agit sur le dernier axe, ce qui permet de prolonger d'un coup toutes les
    tranches d'un champ espace-temps.
    """
    _check_nested(parent, child)
    field = np.asarray(field, dtype=float)
    if field.shape[-1] != parent.num_nodes:
        raise NonNestedError(f"champ de taille {field.shape[-1]}, {parent.num_nodes} noeuds attendus")
    mids = 0.5 * (field[..., child.midpoint_parents[:, 0]] + field[..., child.midpoint_parents[:, 1]])
    return np.concatenate([field, mids], axis=-1)


def prolongation_matrix(parent: Mesh, child: Mesh) -> sp.csr_matrix:
    """Matrice creuse (noeuds fils x noeuds parents) de `prolong`"""
    _check_nested(parent, child)
    n_p, n_mid = parent.num_nodes, child.num_nodes - parent.num_nodes
    rows = np.concatenate([np.arange(n_p), np.repeat(np.arange(n_p, child.num_nodes), 2)])
    cols = np.concatenate([np.arange(n_p), child.midpoint_parents.ravel()])
    vals = np.concatenate([np.ones(n_p), np.full(2 * n_mid, 0.5)])
    return sp.coo_matrix((vals, (rows, cols)), shape=(child.num_nodes, n_p)).tocsr()


def restrict(residual: np.ndarray, parent: Mesh, child: Mesh) -> np.ndarray:
    """Transposée de `prolong`: ramène un vecteur de charge fin sur le maillage parent"""
    residual = np.asarray(residual, dtype=float)
    if residual.shape[-1] != child.num_nodes:
        raise NonNestedError(f"vecteur de taille {residual.shape[-1]}, {child.num_nodes} noeuds attendus")
    return (prolongation_matrix(parent, child).T @ residual.T).T


def prolong_boundary(values: np.ndarray, parent: Mesh, child: Mesh) -> np.ndarray:
    """Prolongement d'un champ défini sur les noeuds de bord"""
    values = np.asarray(values, dtype=float)
    full = np.zeros(values.shape[:-1] + (parent.num_nodes,))
    full[..., parent.boundary_nodes] = values
    return prolong(full, parent, child)[..., child.boundary_nodes]


def mesh_hierarchy(n0: int, levels) -> dict:
    """Chaîne de maillages emboîtés {n: Mesh} obtenue par raffinements successifs"""
    targets = sorted(set(int(n) for n in levels))
    meshes = {n0: unit_square_mesh(n0)}
    n, mesh = n0, meshes[n0]
    while n < targets[-1]:
        mesh = refine(mesh)
        n *= 2
        meshes[n] = mesh
    missing = [n for n in targets if n not in meshes]
    if missing:
        raise NonNestedError(f"niveaux {missing} non atteignables depuis n={n0} par raffinements dyadiques")
    return meshes


def prolong_between(field: np.ndarray, meshes: dict, n_from: int, n_to: int, boundary: bool = False) -> np.ndarray:
    """Compose les prolongements d'un niveau de la hiérarchie vers un niveau plus fin"""
    step = prolong_boundary if boundary else prolong
    n = n_from
    while n < n_to:
        field = step(field, meshes[n], meshes[2 * n])
        n *= 2
    if n != n_to:
        raise NonNestedError(f"n={n_to} n'est pas un raffinement dyadique de n={n_from}")
    return field


def dump_mesh(mesh: Mesh, path) -> None:
    """Export texte pour visualisation externe"""
    lines = [f"nodes {mesh.num_nodes} triangles {mesh.num_triangles}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.nodes.tolist()]
    lines += [f"{a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path) -> Mesh:
    lines = Path(path).read_text().split("\n")
    header = lines[0].split()
    if len(header) != 4 or header[0] != "nodes" or header[2] != "triangles":
        raise ValueError(f"en-tête de maillage invalide: {lines[0]!r}")
    num_nodes, num_triangles = int(header[1]), int(header[3])
    nodes = np.array([[float(v) for v in line.split()] for line in lines[1:1 + num_nodes]])
    triangles = np.array([[int(v) for v in line.split()] for line in lines[1 + num_nodes:1 + num_nodes + num_triangles]])

    # bord reconstruit: arêtes portées par un seul triangle, chaînées depuis le noeud le plus proche de l'origine
    directed = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    keys = np.sort(directed, axis=1)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    outer = directed[counts[inverse.ravel()] == 1]
    successor = {int(p): int(q) for p, q in outer}
    start = int(min(successor, key=lambda v: (np.hypot(*nodes[v]), v)))
    ring, v = [start], successor[start]
    while v != start:
        ring.append(v)
        v = successor[v]
    ring = np.array(ring)
    return _build(nodes, triangles, np.column_stack([ring, np.roll(ring, -1)]))
