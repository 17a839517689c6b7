import numpy as np
import pytest

from heatctrl.assembly import assemble, load_vector
from heatctrl.mesh2d import unit_square_mesh
from heatctrl.parabolic import (
    BoundaryField,
    DimensionMismatch,
    ProblemData,
    SpaceTimeField,
    bilinear_B,
    bilinear_B_dual,
    galerkin_residual,
    inner_I,
    inner_Sigma,
    lifted_solve,
    normal_derivative_by_lifting,
    normal_derivative_variational,
    slab_loads,
    solve_adjoint,
    solve_state,
)
from heatctrl.timegrid import uniform_grid, validate_grid

TIGHT = 1e-13


def _setup(n, M, T=1.0):
    mesh = unit_square_mesh(n)
    return mesh, uniform_grid(M, T), assemble(mesh)


def _random_field(rng, mesh, grid, interior_only=False):
    coeffs = rng.normal(size=(grid.M, mesh.num_nodes))
    if interior_only:
        coeffs[:, mesh.boundary_nodes] = 0.0
    return SpaceTimeField(grid, mesh, coeffs)


def _random_control(rng, mesh, grid):
    return BoundaryField(grid, mesh, rng.normal(size=(grid.M, mesh.boundary_nodes.size)))


def _dense_operators(mesh):
    """Masse et rigidité denses, triangle par triangle"""
    size = mesh.num_nodes
    mass, stiffness = np.zeros((size, size)), np.zeros((size, size))
    for tri in mesh.triangles:
        p = mesh.nodes[tri]
        edges = np.array([p[1] - p[0], p[2] - p[0]])
        area = 0.5 * abs(np.linalg.det(edges))
        grads = np.linalg.solve(edges, np.array([[-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]]))
        mass[np.ix_(tri, tri)] += area / 12.0 * (np.ones((3, 3)) + np.eye(3))
        stiffness[np.ix_(tri, tri)] += area * grads.T @ grads
    return mass, stiffness


class TestSolveState:
    """Tests pour le schéma DG(0)-CG(1) de l'équation d'état"""

    def test_constant_solution_reproduced(self):
        """Test que y ≡ 1 est reproduit exactement (f = 0, y0 = 1, u = 1)"""
        mesh, grid, ops = _setup(4, 3)
        data = ProblemData(y0=lambda x, y: 1.0, u=lambda t, x, y: 1.0)
        y = solve_state(data, mesh, grid, ops)
        np.testing.assert_allclose(y.coeffs, 1.0, atol=1e-10)

    def test_boundary_coefficients_prescribed(self):
        """Test que les coefficients de bord sont exactement ceux du contrôle"""
        rng = np.random.default_rng(0)
        mesh, grid, ops = _setup(3, 4)
        u = _random_control(rng, mesh, grid)
        y = solve_state(ProblemData(u=u), mesh, grid, ops)
        np.testing.assert_array_equal(y.coeffs[:, mesh.boundary_nodes], u.coeffs)

    def test_galerkin_orthogonality(self):
        """Test B(y, φ) = (f, φ)_I + (y0, φ⁺_0) pour tout φ à bord nul"""
        rng = np.random.default_rng(1)
        mesh, grid, ops = _setup(4, 5)
        data = ProblemData(f=lambda t, x, y: np.sin(3 * t) + x * y,
                           y0=lambda x, y: x * (1 - y),
                           u=lambda t, x, y: t * x + y)
        y = solve_state(data, mesh, grid, ops, tol=TIGHT)
        for _ in range(5):
            phi = _random_field(rng, mesh, grid, interior_only=True)
            assert abs(galerkin_residual(y, data, phi, ops)) < 1e-9

    def test_graded_grid(self):
        """Test le schéma sur une grille à pas décroissants"""
        mesh = unit_square_mesh(2)
        ops = assemble(mesh)
        grid = validate_grid([0.0, 0.5, 0.8, 1.0])
        y = solve_state(ProblemData(y0=lambda x, y: 1.0, u=lambda t, x, y: 1.0), mesh, grid, ops)
        np.testing.assert_allclose(y.coeffs, 1.0, atol=1e-10)

    def test_zero_data(self):
        """Test que des données nulles donnent une solution nulle"""
        mesh, grid, ops = _setup(3, 2)
        assert np.all(solve_state(ProblemData(), mesh, grid, ops).coeffs == 0.0)

    def test_operators_from_another_mesh(self):
        """Test que des opérateurs d'un autre maillage sont refusés"""
        mesh, grid, _ = _setup(2, 2)
        with pytest.raises(DimensionMismatch):
            solve_state(ProblemData(), mesh, grid, assemble(unit_square_mesh(2)))

    def test_slab_loads_of_constant(self):
        """Test la charge moyennée d'une source constante"""
        mesh, grid, ops = _setup(2, 3)
        loads = slab_loads(lambda t, x, y: 2.0, ops, grid)
        np.testing.assert_allclose(loads, np.tile(load_vector(lambda x, y: 2.0, ops), (3, 1)))


class TestFields:
    """Tests pour les champs espace-temps"""

    def test_wrong_shape(self):
        """Test qu'un tableau de mauvaise taille est refusé"""
        mesh, grid, _ = _setup(2, 2)
        with pytest.raises(DimensionMismatch):
            SpaceTimeField(grid, mesh, np.zeros((2, 4)))
        with pytest.raises(DimensionMismatch):
            BoundaryField(grid, mesh, np.zeros((3, 8)))

    def test_field_from_another_mesh(self):
        """Test qu'un champ d'un autre maillage est refusé par l'adjoint"""
        mesh, grid, ops = _setup(2, 2)
        other = unit_square_mesh(2)
        with pytest.raises(DimensionMismatch):
            solve_adjoint(SpaceTimeField(grid, other, np.zeros((2, 9))), mesh, grid, ops)


class TestBilinearForm:
    """Tests pour la forme B"""

    def test_primal_equals_dual(self):
        """Test que les deux représentations de B coïncident"""
        rng = np.random.default_rng(2)
        mesh, grid, ops = _setup(3, 4)
        for _ in range(5):
            v, w = _random_field(rng, mesh, grid), _random_field(rng, mesh, grid)
            primal, dual = bilinear_B(v, w, ops), bilinear_B_dual(v, w, ops)
            assert primal == pytest.approx(dual, rel=1e-12, abs=1e-12)

    def test_positive_on_diagonal(self):
        """Test B(v, v) >= ½‖v_M‖² > 0"""
        rng = np.random.default_rng(3)
        mesh, grid, ops = _setup(3, 4)
        v = _random_field(rng, mesh, grid, interior_only=True)
        last = v.coeffs[-1]
        assert bilinear_B(v, v, ops) >= 0.5 * last @ (ops.mass @ last) > 0


class TestNormalDerivative:
    """Tests pour la dérivée normale discrète"""

    @pytest.mark.parametrize("n", [1, 2, 4])
    @pytest.mark.parametrize("M", [1, 2, 4])
    def test_variational_equals_lifting(self, n, M):
        """Test l'équivalence des deux constructions de ∂ₙᵸz sur 5 champs g aléatoires"""
        rng = np.random.default_rng(100 * n + M)
        mesh, grid, ops = _setup(n, M)
        for _ in range(5):
            g = _random_field(rng, mesh, grid)
            z = solve_adjoint(g, mesh, grid, ops, tol=TIGHT)
            variational = normal_derivative_variational(z, g, ops, grid, tol=TIGHT).coeffs
            lifting = normal_derivative_by_lifting(g, ops, grid, tol=TIGHT).coeffs
            assert np.linalg.norm(variational - lifting) <= 1e-10 * np.linalg.norm(lifting)

    def test_discrete_duality(self):
        """Test (p_kh(u), g)_I = -(∂ₙᵸz(g), u)_Σ sur 20 couples aléatoires"""
        rng = np.random.default_rng(5)
        mesh, grid, ops = _setup(4, 4)
        for _ in range(20):
            u, g = _random_control(rng, mesh, grid), _random_field(rng, mesh, grid)
            lifted = lifted_solve(u, ops, grid, tol=TIGHT)
            z = solve_adjoint(g, mesh, grid, ops, tol=TIGHT)
            dz = normal_derivative_variational(z, g, ops, grid, tol=TIGHT)
            scale = (np.sqrt(inner_I(lifted, lifted, ops) * inner_I(g, g, ops))
                     + np.sqrt(inner_Sigma(dz, dz, ops) * inner_Sigma(u, u, ops)))
            assert abs(inner_I(lifted, g, ops) + inner_Sigma(dz, u, ops)) <= 1e-10 * scale

    def test_adjoint_vanishes_on_boundary(self):
        """Test que l'adjoint est nul au bord et nul pour g = 0"""
        rng = np.random.default_rng(7)
        mesh, grid, ops = _setup(3, 3)
        z = solve_adjoint(_random_field(rng, mesh, grid), mesh, grid, ops)
        assert np.all(z.coeffs[:, mesh.boundary_nodes] == 0.0)
        zero = solve_adjoint(SpaceTimeField(grid, mesh, np.zeros((3, 16))), mesh, grid, ops)
        assert np.all(zero.coeffs == 0.0)

    def test_lifting_is_linear(self):
        """Test p_kh(a u + v) = a p_kh(u) + p_kh(v)"""
        rng = np.random.default_rng(8)
        mesh, grid, ops = _setup(3, 3)
        u, v = _random_control(rng, mesh, grid), _random_control(rng, mesh, grid)
        combined = lifted_solve(u.with_coeffs(2.0 * u.coeffs + v.coeffs), ops, grid, tol=TIGHT).coeffs
        separate = 2.0 * lifted_solve(u, ops, grid, tol=TIGHT).coeffs + lifted_solve(v, ops, grid, tol=TIGHT).coeffs
        np.testing.assert_allclose(combined, separate, atol=1e-10)


class TestDenseOracles:
    """Tests contre des résolutions denses pas à pas"""

    def test_single_step_one_interior_node(self):
        """Test n=2, M=1, f=1, u=0, y0=0: (M₁₁/k + K₁₁) y = f̄₁"""
        mesh, grid, ops = _setup(2, 1)
        mass, stiffness = _dense_operators(mesh)
        centre = mesh.interior_nodes[0]
        load = mass[centre].sum()
        expected = load / (mass[centre, centre] / grid.k[0] + stiffness[centre, centre])
        y = solve_state(ProblemData(f=lambda t, x, y: 1.0), mesh, grid, ops, tol=TIGHT)
        assert y.coeffs[0, centre] == pytest.approx(expected, rel=1e-12)
        assert np.all(y.coeffs[0, mesh.boundary_nodes] == 0.0)

    def test_adjoint_single_step(self):
        """Test M=1: (M/k + K) z₀ = M g sur les noeuds intérieurs"""
        rng = np.random.default_rng(11)
        mesh, grid, ops = _setup(3, 1, T=0.5)
        mass, stiffness = _dense_operators(mesh)
        g = _random_field(rng, mesh, grid)
        inner = mesh.interior_nodes
        system = mass[np.ix_(inner, inner)] / grid.k[0] + stiffness[np.ix_(inner, inner)]
        expected = np.linalg.solve(system, (mass @ g.coeffs[0])[inner])
        z = solve_adjoint(g, mesh, grid, ops, tol=TIGHT)
        np.testing.assert_allclose(z.coeffs[0, inner], expected, atol=1e-10)

    def test_lifting_of_constant_two_steps(self):
        """Test p_kh(c) sur n=2, M=2: la première tranche diffère de c, dense pas à pas"""
        mesh, grid, ops = _setup(2, 2)
        mass, stiffness = _dense_operators(mesh)
        inner, bnd = mesh.interior_nodes, mesh.boundary_nodes
        c, k = 0.7, grid.k[0]
        system = mass[np.ix_(inner, inner)] / k + stiffness[np.ix_(inner, inner)]
        coupling = (mass[np.ix_(inner, bnd)] / k + stiffness[np.ix_(inner, bnd)]) @ np.full(bnd.size, c)
        first = np.linalg.solve(system, -coupling)
        previous = np.zeros(mesh.num_nodes)
        previous[inner], previous[bnd] = first, c
        second = np.linalg.solve(system, (mass @ previous)[inner] / k - coupling)

        lifted = lifted_solve(BoundaryField(grid, mesh, np.full((2, bnd.size), c)), ops, grid, tol=TIGHT)
        np.testing.assert_allclose(lifted.coeffs[0, inner], first, atol=1e-12)
        np.testing.assert_allclose(lifted.coeffs[1, inner], second, atol=1e-12)
        assert np.all(np.abs(lifted.coeffs[0, inner] - c) > 1e-2)

    def test_steady_flux_residual(self):
        """Test z stationnaire (K z = b à l'intérieur): ∂ₙᵸz = M_Γ⁻¹(K_bi z - b_Γ)"""
        mesh, grid, ops = _setup(3, 1)
        mass, stiffness = _dense_operators(mesh)
        inner, bnd = mesh.interior_nodes, mesh.boundary_nodes
        load = mass @ np.ones(mesh.num_nodes)
        steady = np.zeros(mesh.num_nodes)
        steady[inner] = np.linalg.solve(stiffness[np.ix_(inner, inner)], load[inner])
        # g tel que l'adjoint à un pas redonne z: M g = M z / k + b
        g = SpaceTimeField(grid, mesh, (steady / grid.k[0] + 1.0)[None, :])

        z = solve_adjoint(g, mesh, grid, ops, tol=TIGHT)
        np.testing.assert_allclose(z.coeffs[0], steady, atol=1e-10)
        expected = np.linalg.solve(ops.boundary_mass.toarray(), stiffness[np.ix_(bnd, inner)] @ steady[inner] - load[bnd])
        dz = normal_derivative_variational(z, g, ops, grid, tol=TIGHT)
        np.testing.assert_allclose(dz.coeffs[0], expected, atol=1e-9 * np.max(np.abs(expected)))
