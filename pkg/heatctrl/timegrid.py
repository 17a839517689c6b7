import json
import logging
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from heatctrl.config import Config, HeatCtrlError

logger = logging.getLogger(__name__)

STEP_RTOL = 1e-12


class NonMonotone(HeatCtrlError, ValueError):
    """Noeuds temporels non strictement croissants ou ne partant pas de 0"""


class IncreasingStep(HeatCtrlError, ValueError):
    """Pas de temps croissant, la condition k_m <= k_{m-1} est violée"""


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Partition 0 = t_0 < ... < t_M = T de l'intervalle de temps"""
    t: np.ndarray

    @property
    def k(self) -> np.ndarray:
        return np.diff(self.t)

    @property
    def M(self) -> int:
        return self.t.shape[0] - 1

    @property
    def T(self) -> float:
        return float(self.t[-1])

    @property
    def k_max(self) -> float:
        return float(np.max(self.k))

    @property
    def k_min(self) -> float:
        return float(np.min(self.k))

    @property
    def quasi_uniformity(self) -> float:
        """Rapport k/k_min, la constante C de la quasi-uniformité"""
        return self.k_max / self.k_min

    @property
    def non_increasing(self) -> bool:
        k = self.k
        return bool(np.all(k[1:] <= k[:-1] * (1.0 + STEP_RTOL)))

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.t[1:] + self.t[:-1])

    def slab_of(self, t) -> np.ndarray:
        """Indice de la tranche (t_{m-1}, t_m] contenant t, t = 0 rattaché à la première"""
        idx = np.searchsorted(self.t, np.asarray(t, dtype=float), side="left") - 1
        return np.clip(idx, 0, self.M - 1)


@dataclass(frozen=True, eq=False)
class SlabFunction:
    """Fonction constante par tranche: values[m] est la valeur sur I_m"""
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape[0] != self.grid.M:
            raise ValueError(f"{self.values.shape[0]} valeurs pour {self.grid.M} tranches")

    def __call__(self, t):
        return self.values[self.grid.slab_of(t)]


def _freeze(t) -> np.ndarray:
    out = np.array(t, dtype=float)
    out.setflags(write=False)
    return out


def uniform_grid(M: int, T: float) -> TimeGrid:
    if M < 1 or T <= 0:
        raise NonMonotone(f"grille uniforme invalide: M={M}, T={T}")
    return TimeGrid(_freeze(np.linspace(0.0, T, M + 1)))


def validate_grid(t, strict: bool = False) -> TimeGrid:
    """Construit une grille à partir de ses noeuds et vérifie les hypothèses.

    En mode strict, un pas croissant lève IncreasingStep; sinon la grille est
    acceptée et seul le drapeau `non_increasing` le signale.
    """
    t = np.asarray(t, dtype=float)
    if t.ndim != 1 or t.shape[0] < 2 or t[0] != 0.0 or np.any(np.diff(t) <= 0.0):
        raise NonMonotone(f"noeuds temporels invalides: {t.tolist()}")

    grid = TimeGrid(_freeze(t))
    if not grid.non_increasing:
        if strict:
            raise IncreasingStep(f"pas croissant: k={grid.k.tolist()}")
        logger.warning(f"⚠️ Grille avec pas croissant, les taux théoriques ne sont pas garantis (k={grid.k.tolist()})")
    return grid


def refine_grid(grid: TimeGrid, factor: int = 2) -> TimeGrid:
    """Subdivise chaque tranche en `factor` sous-tranches égales"""
    fractions = np.arange(factor) / factor
    t = (grid.t[:-1, None] + grid.k[:, None] * fractions[None, :]).ravel()
    return TimeGrid(_freeze(np.append(t, grid.t[-1])))


def prolong_slabs(values: np.ndarray, coarse: TimeGrid, fine: TimeGrid) -> np.ndarray:
    """Recopie chaque valeur grossière sur les tranches fines qu'elle contient"""
    if not np.all(np.isin(np.round(coarse.t, 12), np.round(fine.t, 12))) or coarse.T != fine.T:
        raise NonMonotone("les grilles temporelles ne sont pas emboîtées")
    return np.asarray(values)[coarse.slab_of(fine.midpoints)]


def _gauss(grid: TimeGrid, points: int):
    """Points et poids de Gauss-Legendre sur chaque tranche, normalisés par k_m"""
    xi, wi = np.polynomial.legendre.leggauss(points)
    times = grid.midpoints[:, None] + 0.5 * grid.k[:, None] * xi[None, :]
    return times, 0.5 * wi


def project_Pk(w: Union[Callable, SlabFunction], grid: TimeGrid, points: int = Config.TIME_GAUSS_POINTS) -> SlabFunction:
    """Projection L² sur les constantes par tranche: moyenne (1/k_m) ∫_{I_m} w"""
    times, weights = _gauss(grid, points)
    samples = [[np.asarray(w(s), dtype=float) for s in row] for row in times]
    values = np.array([sum(wq * v for wq, v in zip(weights, row)) for row in samples])
    return SlabFunction(grid, values)


def interp_right(w: Callable, grid: TimeGrid) -> SlabFunction:
    return SlabFunction(grid, np.array([np.asarray(w(t), dtype=float) for t in grid.t[1:]]))


def interp_left(w: Callable, grid: TimeGrid) -> SlabFunction:
    return SlabFunction(grid, np.array([np.asarray(w(t), dtype=float) for t in grid.t[:-1]]))


def jump_energy(v: SlabFunction, s: float, mass, initial=None) -> float:
    """Σ_m k_m^{-(2s-1)} ‖[v]_{m-1}‖², la norme des sauts pondérée par la masse"""
    if not 0.5 <= s <= 1.0:
        raise ValueError(f"exposant s={s} hors de [1/2, 1]")
    values = np.asarray(v.values, dtype=float)
    v0 = np.zeros(values.shape[1:]) if initial is None else np.asarray(initial, dtype=float)
    jumps = np.diff(np.concatenate([v0[None, ...], values]), axis=0)
    energies = np.array([j @ (mass @ j) for j in jumps])
    return float(np.sum(v.grid.k ** (-(2.0 * s - 1.0)) * energies))


def grid_to_json(grid: TimeGrid) -> str:
    return json.dumps(grid.t.tolist())


def grid_from_json(payload: str, strict: bool = False) -> TimeGrid:
    return validate_grid(json.loads(payload), strict=strict)
