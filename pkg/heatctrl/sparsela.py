import logging
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from heatctrl.config import Config, HeatCtrlError

logger = logging.getLogger(__name__)

SYMMETRY_RTOL = 1e-12


class Breakdown(HeatCtrlError, RuntimeError):
    """Courbure négative ou nulle détectée: la matrice n'est pas SPD"""


class MaxIterations(HeatCtrlError, RuntimeError):
    """Le gradient conjugué n'a pas atteint la tolérance"""


class SparseSym:
    """Matrice creuse symétrique stockée en CSR"""

    def __init__(self, matrix, check: bool = True):
        self.matrix = sp.csr_matrix(matrix, dtype=float)
        self.matrix.sum_duplicates()
        if self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError(f"matrice non carrée: {self.matrix.shape}")
        self.symmetric = self._is_symmetric() if check else True
        if check and not self.symmetric:
            raise ValueError("matrice non symétrique")

    def _is_symmetric(self) -> bool:
        if self.n == 0:
            return True
        scale = abs(self.matrix).max()
        return scale == 0.0 or abs(self.matrix - self.matrix.T).max() <= SYMMETRY_RTOL * scale

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def indptr(self) -> np.ndarray:
        return self.matrix.indptr

    @property
    def indices(self) -> np.ndarray:
        return self.matrix.indices

    @property
    def data(self) -> np.ndarray:
        return self.matrix.data

    def diagonal(self) -> np.ndarray:
        return self.matrix.diagonal()

    def row_sums(self) -> np.ndarray:
        """Sommes par ligne (masse condensée pour une matrice de masse)"""
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def block(self, rows, cols) -> sp.csr_matrix:
        return self.matrix[rows][:, cols]

    def sub(self, idx) -> "SparseSym":
        """Bloc diagonal principal, reste symétrique"""
        return SparseSym(self.block(idx, idx), check=False)

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def __matmul__(self, other):
        return self.matrix @ other

    def __add__(self, other: "SparseSym") -> "SparseSym":
        return SparseSym(self.matrix + other.matrix, check=False)

    def __mul__(self, scalar: float) -> "SparseSym":
        return SparseSym(self.matrix * float(scalar), check=False)

    __rmul__ = __mul__

    def __repr__(self):
        return f"SparseSym(n={self.n}, nnz={self.matrix.nnz})"


def conjugate_gradient(A: SparseSym, b: np.ndarray, tol: float = 1e-10, max_iter: Optional[int] = None,
                       x0: Optional[np.ndarray] = None):
    """Gradient conjugué préconditionné par la diagonale (Jacobi).

    Retourne (x, itérations). Le critère est le résidu relatif vrai
    ‖Ax - b‖/‖b‖ <= tol.
    """
    if not 0.0 < tol < 1.0:
        raise ValueError(f"tolérance {tol} hors de (0, 1)")
    b = np.asarray(b, dtype=float)
    n = A.n
    if b.shape != (n,):
        raise ValueError(f"second membre de taille {b.shape}, ({n},) attendu")
    if max_iter is None:
        max_iter = Config.CG_MAX_ITER_FACTOR * max(n, 1)

    b_norm = np.linalg.norm(b)
    if n == 0 or b_norm == 0.0:
        return np.zeros(n), 0

    diag = A.diagonal()
    if np.any(diag <= 0.0):
        raise Breakdown("diagonale non strictement positive")
    inv_diag = 1.0 / diag

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    z = inv_diag * r
    d = z.copy()
    rz = r @ z
    threshold = tol * b_norm

    for it in range(max_iter + 1):
        if np.linalg.norm(r) <= threshold:
            true_res = np.linalg.norm(b - A @ x)
            if true_res <= threshold:
                return x, it
            # dérive du résidu récursif: on repart du résidu vrai
            r = b - A @ x
            z = inv_diag * r
            d = z.copy()
            rz = r @ z
        if it == max_iter:
            break

        Ad = A @ d
        curvature = d @ Ad
        if curvature <= 0.0:
            raise Breakdown(f"courbure {curvature:.3e} à l'itération {it}")
        step = rz / curvature
        x += step * d
        r -= step * Ad
        z = inv_diag * r
        rz_new = r @ z
        d = z + (rz_new / rz) * d
        rz = rz_new

    residual = np.linalg.norm(b - A @ x) / b_norm
    raise MaxIterations(f"{max_iter} itérations, résidu relatif {residual:.3e} > {tol:.1e}")


def spd_solve(A: SparseSym, b: np.ndarray, tol: float = 1e-10, max_iter: Optional[int] = None) -> np.ndarray:
    x, iterations = conjugate_gradient(A, b, tol=tol, max_iter=max_iter)
    logger.debug(f"CG: n={A.n}, {iterations} itérations")
    return x


def estimate_opnorm(apply: Callable[[np.ndarray], np.ndarray], n: int, iters: int = Config.POWER_ITERATIONS,
                    inner: Optional[Callable[[np.ndarray, np.ndarray], float]] = None,
                    seed: int = Config.POWER_SEED) -> float:
    """Plus grande valeur propre d'un opérateur autoadjoint positif (puissance itérée).

    Le quotient de Rayleigh est calculé dans le produit scalaire `inner`
    (euclidien par défaut); il croît avec `iters`.
    """
    if inner is None:
        inner = np.dot
    v = np.random.default_rng(seed).uniform(0.5, 1.5, size=n)
    v /= np.sqrt(inner(v, v))
    estimate = 0.0
    for _ in range(max(iters, 1)):
        Av = np.asarray(apply(v), dtype=float)
        estimate = float(inner(Av, v))
        norm = np.sqrt(inner(Av, Av))
        if norm == 0.0:
            return 0.0
        v = Av / norm
    return estimate
