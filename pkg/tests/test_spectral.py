"""Spectral field layer: transforms, operators, norms, serialization.

Oracles are independent of the FFT path: direct DFT summation for the
round trip, closed-form trig identities for derivatives and the
nonlinearity, physical quadrature for Parseval.
"""

import numpy as np
import pytest

from growth_spde.spectral import (
    GridSpec,
    SpectralField,
    analyze,
    apply_linear_semigroup,
    derivative,
    inner_product,
    inner_product_physical,
    load_field,
    nonlinearity,
    norm,
    phi1,
    phi2,
    random_field,
    save_field,
    synthesize,
)


def direct_synthesis(field):
    """Sum the defining series mode by mode (no FFT)."""
    grid = field.grid
    x = grid.nodes()
    u = np.zeros(grid.N)
    for k in range(1, grid.K + 1):
        u += 2.0 * np.real(field.coeff[k - 1] * np.exp(1j * grid.q[k - 1] * x))
    return u


class TestGridSpec:
    def test_basic(self):
        grid = GridSpec.create(N=64)
        assert grid.K == 31
        assert np.isclose(grid.q[0], 1.0)
        assert np.isclose(grid.poincare_lambda, 1.0)

    def test_eigenvalue_scaling(self):
        # lam_k / (-k^4) equals (2 pi / L)^4 for every retained mode
        grid = GridSpec.create(N=32, L=4.0)
        k = np.arange(1, grid.K + 1)
        ratio = grid.lam / (-(k.astype(float) ** 4))
        assert np.allclose(ratio, (2 * np.pi / 4.0) ** 4)
        assert np.all(grid.lam < 0)
        assert np.isclose(grid.poincare_lambda, np.min(np.abs(grid.lam)))

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            GridSpec.create(N=15)
        with pytest.raises(ValueError):
            GridSpec.create(N=8)
        with pytest.raises(ValueError):
            GridSpec.create(N=32, L=-1.0)


class TestTransforms:
    def test_single_mode_is_cosine(self):
        grid = GridSpec.create(N=32)
        f = SpectralField.from_modes(grid, {1: 0.5})
        x = grid.nodes()
        assert np.allclose(synthesize(f), np.cos(x), atol=1e-13)

    def test_zero_field(self):
        grid = GridSpec.create(N=32)
        assert np.allclose(synthesize(SpectralField.zero(grid)), 0.0)

    def test_round_trip_against_direct_dft(self):
        grid = GridSpec.create(N=64)
        rng = np.random.default_rng(7)
        for _ in range(5):
            f = random_field(grid, rng)
            u = synthesize(f)
            assert np.allclose(u, direct_synthesis(f), atol=1e-11)
            g = analyze(grid, u)
            err = np.max(np.abs(g.coeff - f.coeff)) / np.max(np.abs(f.coeff))
            assert err <= 1e-12

    def test_mean_zero(self):
        grid = GridSpec.create(N=32)
        f = random_field(grid, np.random.default_rng(1))
        assert abs(np.mean(synthesize(f))) < 1e-14

    def test_parseval_against_quadrature(self):
        grid = GridSpec.create(N=64)
        rng = np.random.default_rng(3)
        for _ in range(5):
            f = random_field(grid, rng)
            u = synthesize(f)
            quad = np.sqrt(np.sum(u**2) * grid.L / grid.N)
            assert abs(norm(f, "L2") - quad) <= 1e-10 * quad


class TestDerivative:
    def test_cos_to_minus_sin(self):
        grid = GridSpec.create(N=32)
        f = SpectralField.from_modes(grid, {1: 0.5})
        x = grid.nodes()
        assert np.allclose(synthesize(derivative(f, 1)), -np.sin(x), atol=1e-13)

    def test_fourth_derivative_of_cos(self):
        grid = GridSpec.create(N=32)
        f = SpectralField.from_modes(grid, {1: 0.5})
        assert np.allclose(synthesize(derivative(f, 4)), synthesize(f), atol=1e-13)

    def test_composition(self):
        grid = GridSpec.create(N=32)
        f = random_field(grid, np.random.default_rng(5))
        twice = derivative(derivative(f, 1), 1)
        assert np.allclose(twice.coeff, derivative(f, 2).coeff)

    def test_order_bounds(self):
        grid = GridSpec.create(N=32)
        f = random_field(grid, np.random.default_rng(5))
        with pytest.raises(ValueError):
            derivative(f, 5)


class TestSemigroup:
    def test_identity_at_t0(self):
        grid = GridSpec.create(N=32)
        f = random_field(grid, np.random.default_rng(2))
        g = apply_linear_semigroup(f, 0.0)
        assert np.allclose(g.coeff, f.coeff)

    def test_single_mode_decay(self):
        grid = GridSpec.create(N=32)
        f = SpectralField.from_modes(grid, {1: 1.0})
        g = apply_linear_semigroup(f, 1.0)
        assert np.isclose(abs(g.coeff[0]), np.exp(-1.0))

    def test_marginal_mode_with_instability(self):
        # at L = 2 pi the k = 1 rate is -q^4 + q^2 = 0
        grid = GridSpec.create(N=32)
        f = SpectralField.from_modes(grid, {1: 1.0})
        g = apply_linear_semigroup(f, 5.0, include_instability=True)
        assert np.isclose(abs(g.coeff[0]), 1.0)

    def test_semigroup_property(self):
        grid = GridSpec.create(N=32)
        f = random_field(grid, np.random.default_rng(8))
        a = apply_linear_semigroup(apply_linear_semigroup(f, 0.3), 0.2)
        b = apply_linear_semigroup(f, 0.5)
        assert np.allclose(a.coeff, b.coeff, atol=1e-12)


class TestNonlinearity:
    def test_cos_identity(self):
        # u_x^2 = sin^2 x = (1 - cos 2x)/2; second derivative of the
        # mean-zero part is 2 cos 2x
        grid = GridSpec.create(N=32)
        f = SpectralField.from_modes(grid, {1: 0.5})
        b = nonlinearity(f, f)
        x = grid.nodes()
        assert np.allclose(synthesize(b), 2.0 * np.cos(2 * x), atol=1e-12)

    def test_zero_input(self):
        grid = GridSpec.create(N=32)
        z = SpectralField.zero(grid)
        assert np.allclose(nonlinearity(z, z).coeff, 0.0)

    @pytest.mark.parametrize("N", [32, 64, 128])
    def test_cancellation(self, N):
        # <h, (h_x^2)_xx> = (1/3) int (h_x^3)_x dx = 0 for periodic fields
        grid = GridSpec.create(N=N)
        rng = np.random.default_rng(100 + N)
        for _ in range(100):
            f = random_field(grid, rng, decay=0.5)
            b = nonlinearity(f, f)
            denom = norm(f, "L2") * norm(b, "L2")
            assert abs(inner_product(f, b)) <= 1e-10 * denom

    def test_grid_mismatch(self):
        f = random_field(GridSpec.create(N=32), np.random.default_rng(0))
        g = random_field(GridSpec.create(N=64), np.random.default_rng(0))
        with pytest.raises(ValueError):
            nonlinearity(f, g)


class TestNorms:
    def test_cos_l2(self):
        grid = GridSpec.create(N=32)
        f = SpectralField.from_modes(grid, {1: 0.5})
        assert np.isclose(norm(f, "L2"), np.sqrt(np.pi))

    def test_cos_h2(self):
        grid = GridSpec.create(N=32)
        f = SpectralField.from_modes(grid, {1: 0.5})
        assert np.isclose(norm(f, "H", s=2.0), 2.0 * np.sqrt(np.pi))

    def test_h0_equals_l2(self):
        grid = GridSpec.create(N=64)
        f = random_field(grid, np.random.default_rng(4))
        assert abs(norm(f, "H", s=0.0) - norm(f, "L2")) <= 1e-12 * norm(f, "L2")

    def test_unsupported_s(self):
        grid = GridSpec.create(N=32)
        f = random_field(grid, np.random.default_rng(4))
        with pytest.raises(ValueError):
            norm(f, "H", s=3.0)

    def test_w14_quadrature_refinement(self):
        # refined-vs-refined quadrature study: the W^{1,4} norm computed on
        # the 2x grid must agree with a 4x grid to 1e-3 relative
        from growth_spde.spectral import lp_norm_modes, deriv_factor
        grid = GridSpec.create(N=64)
        rng = np.random.default_rng(11)
        for _ in range(5):
            f = random_field(grid, rng)
            v2 = norm(f, "W14")
            u4 = lp_norm_modes(grid, f.coeff, 4.0, refine=4) ** 4
            du4 = lp_norm_modes(grid, f.coeff * deriv_factor(grid, 1), 4.0, refine=4) ** 4
            v4 = (u4 + du4) ** 0.25
            assert abs(v2 - v4) <= 1e-3 * v4
            # L^4-type norms dominate a multiple of H^1 on a fixed grid
            assert v2 >= 0.1 * norm(f, "H", s=1.0) / grid.K

    def test_linf_of_cos(self):
        grid = GridSpec.create(N=32)
        f = SpectralField.from_modes(grid, {1: 0.5})
        assert abs(norm(f, "Linf") - 1.0) <= 1e-3


class TestInnerProduct:
    def test_cos_cos(self):
        grid = GridSpec.create(N=32)
        f = SpectralField.from_modes(grid, {1: 0.5})
        assert np.isclose(inner_product(f, f), np.pi)

    def test_cos_sin_orthogonal(self):
        grid = GridSpec.create(N=32)
        c = SpectralField.from_modes(grid, {1: 0.5})
        s = SpectralField.from_modes(grid, {1: 0.5j})  # -sin component
        assert abs(inner_product(c, s)) < 1e-14

    def test_integration_by_parts(self):
        grid = GridSpec.create(N=64)
        rng = np.random.default_rng(6)
        u = random_field(grid, rng)
        z = random_field(grid, rng)
        lhs = inner_product(u, z, orders=(1, 1))
        rhs = -inner_product(u, z, orders=(0, 2))
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))

    def test_triple_product_matches_quadrature(self):
        grid = GridSpec.create(N=32)
        rng = np.random.default_rng(9)
        u, v, w = (random_field(grid, rng) for _ in range(3))
        val = inner_product_physical(u, v, w)
        # oracle: very fine direct quadrature
        m = 16 * grid.N
        uu = synthesize(u, refine=16)
        vv = synthesize(v, refine=16)
        ww = synthesize(w, refine=16)
        oracle = np.sum(uu * vv * ww) * grid.L / m
        assert abs(val - oracle) <= 1e-10 * max(1.0, abs(oracle))


class TestPhiFunctions:
    def test_phi1_series_matches_direct(self):
        z = np.array([-1e-5, -1e-4, -1e-2, -1.0, -50.0, 1e-6])
        direct = np.where(z != 0, np.expm1(z) / np.where(z == 0, 1, z), 1.0)
        assert np.allclose(phi1(z), direct, rtol=1e-10)

    def test_phi2_limit(self):
        assert np.isclose(phi2(np.array([0.0]))[0], 0.5)


class TestSerialization:
    def test_binary_round_trip(self, tmp_path):
        grid = GridSpec.create(N=32)
        f = random_field(grid, np.random.default_rng(12))
        p = tmp_path / "field.bin"
        save_field(f, str(p))
        g = load_field(str(p))
        assert g.grid.N == grid.N and g.grid.L == grid.L
        assert np.array_equal(g.coeff, f.coeff)

    def test_csv_round_trip(self, tmp_path):
        grid = GridSpec.create(N=32)
        f = random_field(grid, np.random.default_rng(13))
        p = tmp_path / "field.csv"
        save_field(f, str(p), fmt="csv")
        g = load_field(str(p))
        assert np.array_equal(g.coeff, f.coeff)

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "junk"
        p.write_bytes(b"not a field")
        with pytest.raises(ValueError):
            load_field(str(p))
