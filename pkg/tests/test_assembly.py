import numpy as np
import pytest

from heatctrl.assembly import (
    DimensionMismatch,
    assemble,
    boundary_load_vector,
    h1_seminorm_error,
    l2_difference_by_quadrature,
    l2_error_exact,
    l2_norm,
    load_vector,
    modified_projection_Hhat,
    project_Ph,
    project_Ph_boundary,
    project_Pkh,
    project_Pkh_boundary,
    ritz_projection,
)
from heatctrl.mesh2d import _build, prolong, refine, restrict, unit_square_mesh
from heatctrl.timegrid import project_Pk, uniform_grid

TIGHT = 1e-13


class TestAssemble:
    """Tests pour les matrices de masse, de rigidité et de masse de bord"""

    def test_mass_integrates_constants(self):
        """Test 1ᵀ M 1 = |Ω| et xᵀ M x = ∫ x²"""
        ops = assemble(unit_square_mesh(3))
        ones = np.ones(ops.num_nodes)
        x = ops.mesh.nodes[:, 0]
        assert ones @ (ops.mass @ ones) == pytest.approx(1.0, abs=1e-14)
        assert x @ (ops.mass @ x) == pytest.approx(1.0 / 3.0, abs=1e-14)

    def test_stiffness_kernel(self):
        """Test K 1 = 0 et xᵀ K x = ∫ |∇x|² = 1"""
        ops = assemble(unit_square_mesh(4))
        x = ops.mesh.nodes[:, 0]
        np.testing.assert_allclose(ops.stiffness @ np.ones(ops.num_nodes), 0.0, atol=1e-13)
        assert x @ (ops.stiffness @ x) == pytest.approx(1.0, abs=1e-13)

    def test_boundary_mass_perimeter(self):
        """Test que la masse de bord intègre la longueur du bord"""
        ops = assemble(unit_square_mesh(2))
        ones = np.ones(ops.num_boundary)
        assert ones @ (ops.boundary_mass @ ones) == pytest.approx(4.0, abs=1e-14)

    def test_blocks_shapes(self):
        """Test les blocs intérieur/bord"""
        ops = assemble(unit_square_mesh(3))
        assert ops.block("M_ii").shape == (4, 4)
        assert ops.block("K_ib").shape == (4, 12)
        assert ops.block("M_bi").shape == (12, 4)
        np.testing.assert_allclose(ops.block("K_ib").toarray(), ops.block("K_bi").toarray().T)

    def test_matrices_symmetric_positive(self):
        """Test la symétrie et la positivité de la masse"""
        ops = assemble(unit_square_mesh(2))
        mass = ops.mass.toarray()
        np.testing.assert_allclose(mass, mass.T)
        assert np.all(np.linalg.eigvalsh(mass) > 0)


class TestProjections:
    """Tests pour les projections L² et de Ritz"""

    def test_affine_reproduced(self):
        """Test que P_h et P_h(Γ) reproduisent les fonctions affines"""
        ops = assemble(unit_square_mesh(3))
        w = lambda x, y: 1.0 + 2.0 * x - y
        nodes = ops.mesh.nodes
        np.testing.assert_allclose(project_Ph(w, ops, tol=TIGHT), w(nodes[:, 0], nodes[:, 1]), atol=1e-11)
        b = nodes[ops.boundary]
        np.testing.assert_allclose(project_Ph_boundary(w, ops, tol=TIGHT), w(b[:, 0], b[:, 1]), atol=1e-11)

    def test_nodal_field_passes_through(self):
        """Test qu'un champ nodal est déjà dans V_h"""
        ops = assemble(unit_square_mesh(2))
        field = np.arange(9.0)
        np.testing.assert_array_equal(project_Ph(field, ops), field)

    def test_space_time_commutation(self):
        """Test P_kh = P_k P_h = P_h P_k, et de même au bord, sur 10 fonctions aléatoires"""
        rng = np.random.default_rng(6)
        ops = assemble(unit_square_mesh(3))
        grid = uniform_grid(3, 1.0)
        for _ in range(10):
            a, b, c = rng.uniform(0.5, 2.0, 3)
            w = lambda t, x, y, a=a, b=b, c=c: np.sin(a * t + b * x) * np.cos(c * y) + t * x * y

            full = project_Pkh(w, ops, grid, tol=TIGHT)
            k_then_h = project_Pk(lambda s: project_Ph(lambda x, y: w(s, x, y), ops, tol=TIGHT), grid).values
            h_then_k = np.array([
                project_Ph(lambda x, y, m=m: project_Pk(lambda s: w(s, x, y), grid).values[m], ops, tol=TIGHT)
                for m in range(grid.M)
            ])
            scale = np.max(np.abs(full))
            np.testing.assert_allclose(k_then_h, full, atol=1e-10 * scale)
            np.testing.assert_allclose(h_then_k, full, atol=1e-10 * scale)

            boundary = project_Pkh_boundary(w, ops, grid, tol=TIGHT)
            composed = project_Pk(lambda s: project_Ph_boundary(lambda x, y: w(s, x, y), ops, tol=TIGHT), grid).values
            np.testing.assert_allclose(composed, boundary, atol=1e-10 * np.max(np.abs(boundary)))

    def test_modified_projection(self):
        """Test que Ĥ_h garde l'intérieur de P_h et prend la projection de bord"""
        ops = assemble(unit_square_mesh(3))
        w = lambda x, y: np.exp(x) * np.sin(3 * y)
        out = modified_projection_Hhat(w, ops)
        np.testing.assert_allclose(out[ops.interior], project_Ph(w, ops)[ops.interior])
        np.testing.assert_allclose(out[ops.boundary], project_Ph_boundary(w, ops))

    def test_ritz_of_discrete_field(self):
        """Test que la projection de Ritz d'un champ de V_h^0 le laisse inchangé"""
        ops = assemble(unit_square_mesh(4))
        field = np.zeros(ops.num_nodes)
        field[ops.interior] = np.random.default_rng(3).normal(size=ops.interior.size)
        np.testing.assert_allclose(ritz_projection(field, ops, tol=TIGHT), field, atol=1e-10)

    def test_ritz_first_order_in_energy(self):
        """Test l'ordre 1 en semi-norme H¹ de la projection de Ritz"""
        v_grad = lambda x, y: (np.pi * np.cos(np.pi * x) * np.sin(np.pi * y),
                               np.pi * np.sin(np.pi * x) * np.cos(np.pi * y))
        errors = []
        for n in (8, 16):
            ops = assemble(unit_square_mesh(n))
            errors.append(h1_seminorm_error(v_grad, ritz_projection(None, ops, grad=v_grad), ops))
        assert 1.7 < errors[0] / errors[1] < 2.5

    def test_ritz_needs_gradient(self):
        """Test qu'une fonction sans gradient est refusée"""
        ops = assemble(unit_square_mesh(2))
        with pytest.raises(ValueError):
            ritz_projection(lambda x, y: x, ops)


class TestNorms:
    """Tests pour les normes et erreurs espace-temps"""

    def test_exact_error_of_interpolant(self):
        """Test une erreur nulle pour une solution affine en espace, constante en temps"""
        ops = assemble(unit_square_mesh(2))
        grid = uniform_grid(2, 1.0)
        nodes = ops.mesh.nodes
        coeffs = np.tile(1.0 + nodes[:, 0] + nodes[:, 1], (2, 1))
        assert l2_error_exact(lambda t, x, y: 1.0 + x + y, coeffs, ops, grid) < 1e-13

    def test_norm_of_constant(self):
        """Test ‖1‖ = √(T |Ω|) et ‖1‖_Σ = √(T |Γ|)"""
        ops = assemble(unit_square_mesh(2))
        grid = uniform_grid(4, 2.0)
        assert l2_norm(np.ones((4, ops.num_nodes)), ops, grid) == pytest.approx(np.sqrt(2.0))
        assert l2_norm(np.ones((4, ops.num_boundary)), ops, grid, boundary=True) == pytest.approx(np.sqrt(8.0))

    def test_norm_matches_quadrature(self):
        """Test que la norme par matrice de masse coïncide avec la quadrature des milieux"""
        rng = np.random.default_rng(4)
        ops = assemble(unit_square_mesh(3))
        grid = uniform_grid(3, 1.0)
        a, b = rng.normal(size=(2, 3, ops.num_nodes))
        assert l2_norm(a - b, ops, grid) == pytest.approx(l2_difference_by_quadrature(a, b, ops, grid), rel=1e-12)


class TestElementMatrices:
    """Tests pour les matrices élémentaires exactes"""

    def test_reference_triangle_mass(self):
        """Test la masse du triangle (0,0), (1,0), (0,1): (aire/12)[[2,1,1],[1,2,1],[1,1,2]]"""
        mesh = _build(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]),
                      np.array([[0, 1], [1, 2], [2, 0]]))
        ops = assemble(mesh)
        expected = (0.5 / 12.0) * (np.ones((3, 3)) + np.eye(3))
        np.testing.assert_allclose(ops.mass.toarray(), expected, atol=1e-15)

    def test_energy_matches_gradient_quadrature(self):
        """Test vᵀKv = Σ_T |T| |∇v_h|² avec gradients recalculés triangle par triangle"""
        mesh = unit_square_mesh(3)
        ops = assemble(mesh)
        v = np.random.default_rng(9).normal(size=mesh.num_nodes)
        total = 0.0
        for tri in mesh.triangles:
            p = mesh.nodes[tri]
            grad = np.linalg.solve(np.array([p[1] - p[0], p[2] - p[0]]), v[tri[1:]] - v[tri[0]])
            total += 0.5 * abs(np.linalg.det(np.array([p[1] - p[0], p[2] - p[0]]))) * grad @ grad
        assert v @ (ops.stiffness @ v) == pytest.approx(total, rel=1e-12)


class TestProjectionOrthogonality:
    """Tests pour l'orthogonalité des projections L²"""

    def test_quadratic_on_two_cells(self):
        """Test w = x² sur n=2: |(w - P_h w, φ_i)| <= 1e-10 pour tout i"""
        ops = assemble(unit_square_mesh(2))
        w = lambda x, y: x ** 2
        residual = load_vector(w, ops) - ops.mass @ project_Ph(w, ops, tol=TIGHT)
        assert np.max(np.abs(residual)) <= 1e-10

    def test_boundary_hat(self):
        """Test la projection de bord d'une fonction chapeau d'un noeud de bord"""
        ops = assemble(unit_square_mesh(2))
        w = lambda x, y: np.where(np.isclose(y, 0.0), np.maximum(0.0, 1.0 - 2.0 * np.abs(x - 0.5)), 0.0)
        out = project_Ph_boundary(w, ops, tol=TIGHT)
        residual = boundary_load_vector(w, ops) - ops.boundary_mass @ out
        assert np.max(np.abs(residual)) <= 1e-10
        expected = np.zeros(ops.num_boundary)
        expected[np.flatnonzero(np.all(np.isclose(ops.mesh.nodes[ops.boundary], [0.5, 0.0]), axis=1))] = 1.0
        np.testing.assert_allclose(out, expected, atol=1e-10)

    def test_modified_projection_boundary_orthogonal(self):
        """Test (w - Ĥ_h w, ψ)_Γ = 0 pour toute fonction de base de bord"""
        ops = assemble(unit_square_mesh(4))
        w = lambda x, y: np.exp(x) * np.sin(3 * y)
        out = modified_projection_Hhat(w, ops, tol=TIGHT)
        residual = boundary_load_vector(w, ops) - ops.boundary_mass @ out[ops.boundary]
        assert np.max(np.abs(residual)) <= 1e-10

    def test_modified_projection_second_order(self):
        """Test ‖w - Ĥ_h w‖_{L²(Ω)} d'ordre >= 1.8"""
        w = lambda x, y: np.exp(x) * np.sin(3 * y)
        grid = uniform_grid(1, 1.0)
        errors = []
        for n in (4, 8, 16):
            ops = assemble(unit_square_mesh(n))
            coeffs = modified_projection_Hhat(w, ops, tol=TIGHT)[None, :]
            errors.append(l2_error_exact(lambda t, x, y: w(x, y), coeffs, ops, grid))
        rates = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
        assert np.all(rates >= 1.8)


class TestProjectionFromFineMesh:
    """Tests pour la projection d'un champ nodal défini sur un maillage plus fin"""

    def test_mismatched_length_rejected(self):
        """Test qu'un champ du maillage raffiné sans chaîne de maillages est refusé"""
        coarse = unit_square_mesh(2)
        fine = refine(coarse)
        ops = assemble(coarse)
        with pytest.raises(DimensionMismatch):
            project_Ph(fine.nodes[:, 0] ** 2, ops)
        with pytest.raises(DimensionMismatch):
            project_Ph_boundary(np.zeros(fine.boundary_nodes.size), ops)

    def test_prolonged_field_recovered(self):
        """Test P_h(prolong(v)) = v à travers deux raffinements"""
        coarse = unit_square_mesh(2)
        middle = refine(coarse)
        fine = refine(middle)
        ops = assemble(coarse)
        v = np.random.default_rng(10).normal(size=coarse.num_nodes)
        prolonged = prolong(prolong(v, coarse, middle), middle, fine)
        out = project_Ph(prolonged, ops, tol=TIGHT, source=[coarse, middle, fine])
        np.testing.assert_allclose(out, v, atol=1e-10)
        boundary = project_Ph_boundary(prolonged[fine.boundary_nodes], ops, tol=TIGHT, source=[coarse, middle, fine])
        np.testing.assert_allclose(boundary, v[coarse.boundary_nodes], atol=1e-10)

    def test_fine_field_orthogonal_residual(self):
        """Test (w_fin - P_h w_fin, φ_i) = 0 pour x² échantillonné sur le maillage fin"""
        coarse = unit_square_mesh(2)
        fine = refine(coarse)
        ops, fine_ops = assemble(coarse), assemble(fine)
        w_fine = fine.nodes[:, 0] ** 2
        out = project_Ph(w_fine, ops, tol=TIGHT, source=[coarse, fine])
        assert out.shape == (coarse.num_nodes,)
        residual = fine_ops.mass @ (w_fine - prolong(out, coarse, fine))
        assert np.max(np.abs(restrict(residual, coarse, fine))) <= 1e-10
