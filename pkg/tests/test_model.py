import math

import numpy as np
import pytest
from scipy.integrate import quad

from ssav.model import (
    ModelSpec,
    Potential,
    bimodal_density,
    builtin_bimodal,
    builtin_double_well,
    builtin_gaussian_mixture,
    default_floor_probes,
    grad_check,
    hamiltonian,
    model_from_dict,
    modified_energy,
    sav_floor_check,
    trace_norm,
)
from ssav.sav_core import AugmentedState, rho_init


class TestGaussianMixture:
    def test_gradient_at_zero(self):
        # (0-1)/0.25 + (4/0.25)/(e^0+2) = -4 + 16/3 = 4/3
        pot, _ = builtin_gaussian_mixture(iota=1.0, sigma=0.5)
        g = pot.gradient(np.array([0.0]))
        assert g[0] == pytest.approx(4.0 / 3.0, rel=1e-14)

    def test_zero_iota_is_single_gaussian(self):
        pot, _ = builtin_gaussian_mixture(iota=0.0, sigma=0.5)
        u = np.array([0.7])
        assert pot.value(u) == pytest.approx(0.49 / (2 * 0.25), rel=1e-14)
        assert pot.gradient(np.array([0.0]))[0] == 0.0

    def test_marginal_value(self):
        # high-precision evaluation of the mixture density at u=1, kappa=2
        _, dens = builtin_gaussian_mixture(iota=1.0, sigma=0.5, kappa=2.0)
        assert dens.marginal_u(np.array([1.0])) == pytest.approx(
            0.2661399605686416, rel=1e-12
        )
        assert dens.normalizer_u == 1.0

    def test_marginal_u_integrates_to_one(self):
        _, dens = builtin_gaussian_mixture(iota=1.0, sigma=0.5)
        mass, err = quad(
            lambda x: float(dens.marginal_u(np.array([x]))), -10, 10,
            epsabs=1e-12, epsrel=1e-12,
        )
        assert mass == pytest.approx(1.0, abs=1e-8)

    def test_marginal_v_is_normal(self):
        _, dens = builtin_gaussian_mixture(iota=1.0, sigma=0.5, kappa=2.0)
        assert dens.marginal_v(np.array([0.0])) == pytest.approx(
            1 / math.sqrt(2 * math.pi * 2.0), rel=1e-14
        )

    def test_sigma_validation(self):
        with pytest.raises(ValueError):
            builtin_gaussian_mixture(iota=1.0, sigma=0.0)


class TestDoubleWell:
    def test_origin(self):
        pot, _ = builtin_double_well(3)
        z = np.zeros(3)
        assert pot.value(z) == 0.0
        assert np.all(pot.gradient(z) == 0.0)

    def test_well_minimum_1d(self):
        pot, _ = builtin_double_well(1)
        assert pot.value(np.array([1.0])) == pytest.approx(-0.25, rel=1e-15)
        assert pot.gradient(np.array([1.0]))[0] == 0.0

    def test_gradient_2d(self):
        pot, _ = builtin_double_well(2)
        g = pot.gradient(np.array([1.0, 1.0]))
        assert np.allclose(g, [1.0, 1.0], rtol=1e-15)

    def test_normalizer_1d_matches_quadrature(self):
        _, dens = builtin_double_well(1)
        ref, _ = quad(lambda x: math.exp(-(x**4 / 4 - x**2 / 2)), -8, 8,
                      epsabs=1e-13, epsrel=1e-13)
        assert dens.normalizer_u == pytest.approx(ref, rel=1e-8)

    def test_normalizer_2d_matches_polar_oracle(self):
        # independent route: 2*pi * int_0^inf r exp(-(r^4/4 - r^2/2)) dr
        _, dens = builtin_double_well(2)
        radial, _ = quad(lambda r: r * math.exp(-(r**4 / 4 - r**2 / 2)), 0, 10,
                         epsabs=1e-13, epsrel=1e-13)
        assert dens.normalizer_u == pytest.approx(2 * math.pi * radial, rel=1e-8)

    def test_no_normalizer_beyond_2d(self):
        _, dens = builtin_double_well(20)
        assert dens.normalizer_u is None


class TestBimodal:
    def test_hand_values(self):
        pot = builtin_bimodal()
        assert pot.value(np.array([0.0, 0.0])) == 0.0
        assert np.allclose(pot.gradient(np.array([0.0, 0.0])), [-4.0, -4.0])
        assert np.allclose(pot.gradient(np.array([2.0, 2.0])), [6.0, 6.0])

    def test_symmetry(self):
        pot = builtin_bimodal()
        rng = np.random.default_rng(1)
        pts = rng.uniform(-3, 3, size=(50, 2))
        swapped = pts[:, ::-1].copy()
        assert np.allclose(pot.gradient(pts), pot.gradient(swapped)[:, ::-1])

    def test_density_marginal_against_closed_form(self):
        # integrating out u2 analytically: the conditional in u2 is Gaussian
        # with precision (1 + u1^2) and mean 4/(1 + u1^2), so
        # m(u1) = sqrt(2 pi/(1+u1^2)) exp(8/(1+u1^2) - (u1^2 - 8 u1)/2).
        dens = bimodal_density()

        def closed_marginal(x):
            return math.sqrt(2 * math.pi / (1 + x * x)) * math.exp(
                8.0 / (1 + x * x) - (x * x - 8 * x) / 2.0
            )

        z_closed, _ = quad(closed_marginal, -8, 16, epsabs=1e-10, epsrel=1e-12)
        assert dens.normalizer_u == pytest.approx(z_closed, rel=1e-10)

        from ssav.quadrature import gl_nodes

        nodes, wts = gl_nodes(*dens.u_box, 400)
        for x in (0.0, 1.5, 4.0):
            pts = np.stack([np.full_like(nodes, x), nodes], axis=-1)
            marg = float(dens.marginal_u(pts) @ wts) / dens.normalizer_u
            assert marg == pytest.approx(closed_marginal(x) / z_closed, rel=1e-9)


class TestGradCheck:
    @pytest.mark.parametrize("builder,dim", [
        (lambda: builtin_gaussian_mixture(1.0, 0.5)[0], 1),
        (lambda: builtin_double_well(1)[0], 1),
        (lambda: builtin_double_well(2)[0], 2),
        (lambda: builtin_double_well(20)[0], 20),
        (builtin_bimodal, 2),
    ])
    def test_builtins_pass(self, builder, dim):
        pot = builder()
        rng = np.random.default_rng(7)
        pts = rng.uniform(-3, 3, size=(100, dim))
        assert grad_check(pot, pts, eps=1e-5) <= 1e-6

    def test_linear_potential_exact(self):
        # central differences are exact for affine functions; binary-fraction
        # probes and a power-of-two eps keep the float evaluation exact too
        c = np.array([1.0, -2.0])
        pot = Potential(
            value=lambda u: np.sum(c * u, axis=-1),
            gradient=lambda u: np.broadcast_to(c, np.asarray(u).shape).copy(),
            label="linear",
        )
        rng = np.random.default_rng(3)
        pts = rng.integers(-32, 32, size=(20, 2)) / 16.0
        assert grad_check(pot, pts, eps=2.0**-17) <= 1e-12

    def test_eps_validation(self):
        pot, _ = builtin_double_well(1)
        with pytest.raises(ValueError):
            grad_check(pot, np.zeros((1, 1)), eps=0.1)

    def test_nonfinite_reports_point(self):
        def log_value(u):
            with np.errstate(invalid="ignore"):
                return np.log(u[..., 0])

        pot = Potential(value=log_value, gradient=lambda u: 1.0 / u, label="log")
        with pytest.raises(ValueError, match="-1"):
            grad_check(pot, np.array([[-1.0]]), eps=1e-5)


class TestFloorCheck:
    def test_benchmark_settings_pass(self, model_gm, model_dw1, model_dw2,
                                      model_dw20, model_bimodal):
        for model in (model_gm, model_dw1, model_dw2, model_dw20, model_bimodal):
            ok, min_val = sav_floor_check(model, default_floor_probes(model.dim))
            assert ok, f"{model.label}: min {min_val}"
            assert min_val >= 1.0

    def test_origin_probe(self, model_dw1):
        ok, val = sav_floor_check(model_dw1, np.zeros((1, 1)))
        assert ok and val == pytest.approx(1000.0)

    def test_zero_offset_fails(self):
        pot, dens = builtin_double_well(1)
        model = ModelSpec(dim=1, kappa=1.0, gamma=1.0, noise_matrix=np.eye(1),
                          alpha=1.0, c_h=1e-9, potential=pot, density=dens)
        # x=1: Phi = -1/4, so kappa*Phi - |x|^2 = -5/4 < 1
        ok, val = sav_floor_check(model, np.array([[1.0]]))
        assert not ok
        assert val == pytest.approx(-1.25, abs=1e-8)

    def test_empty_probes_rejected(self, model_dw1):
        with pytest.raises(ValueError):
            sav_floor_check(model_dw1, np.zeros((0, 1)))


class TestEnergies:
    def test_hamiltonian_trivials(self, model_dw1):
        assert hamiltonian(model_dw1, np.zeros(1), np.zeros(1)) == pytest.approx(1000.0)
        v = np.array([math.sqrt(2.0)])
        assert hamiltonian(model_dw1, v, np.zeros(1)) == pytest.approx(1001.0)

    def test_hamiltonian_mixture_value(self, model_gm):
        # Phi(1) = -log(1/3 + (2/3) e^{-8}); H = 1000 + 2 Phi(1)
        got = hamiltonian(model_gm, np.zeros(1), np.ones(1))
        assert got == pytest.approx(1002.195883176764, rel=1e-12)

    def test_modified_energy_trivials(self, model_dw1):
        st = AugmentedState(v=np.zeros(1), u=np.zeros(1), rho=np.sqrt(1000.0))
        assert modified_energy(model_dw1, st) == pytest.approx(1000.0)
        st2 = AugmentedState(v=np.array([1.0, 1.0]), u=np.array([1.0, 0.0]), rho=2.0)
        model2 = ModelSpec(dim=2, kappa=1.0, gamma=1.0, noise_matrix=np.eye(2),
                           alpha=1.0, c_h=1000.0, potential=builtin_double_well(2)[0])
        assert modified_energy(model2, st2) == pytest.approx(6.0)

    @pytest.mark.parametrize("fixture", ["model_gm", "model_dw1", "model_dw2"])
    def test_identity_with_rho_init(self, fixture, request):
        model = request.getfixturevalue(fixture)
        rng = np.random.default_rng(11)
        v = rng.normal(size=(500, model.dim))
        u = rng.uniform(-3, 3, size=(500, model.dim))
        st = AugmentedState(v=v, u=u, rho=rho_init(model, u))
        h_mod = modified_energy(model, st)
        h_tot = hamiltonian(model, v, u)
        assert np.all(np.abs(h_mod - h_tot) <= 1e-12 * np.abs(h_tot))


class TestModelSpec:
    def test_scalar_noise_shorthand(self):
        model = model_from_dict({
            "dim": 2, "kappa": 1.0, "gamma": 1.0, "noise_matrix": 3.0,
            "alpha": 1.0, "c_h": 1000.0,
            "potential": {"name": "double_well", "params": {}},
        })
        assert np.allclose(model.noise_matrix, 3.0 * np.eye(2))

    def test_matrix_noise(self):
        mat = [[1.0, 0.5], [0.0, 2.0]]
        model = model_from_dict({
            "dim": 2, "kappa": 1.0, "gamma": 1.0, "noise_matrix": mat,
            "alpha": 1.0, "c_h": 1000.0,
            "potential": {"name": "double_well", "params": {}},
        })
        assert np.allclose(model.noise_matrix, mat)
        assert not model.matches_canonical_noise()
        xi = np.array([[1.0, 1.0]])
        assert np.allclose(model.apply_noise_matrix(xi), xi @ np.asarray(mat).T)

    def test_missing_key(self):
        with pytest.raises(ValueError, match="noise_matrix"):
            model_from_dict({
                "dim": 1, "kappa": 1.0, "gamma": 1.0, "alpha": 1.0, "c_h": 1.0,
                "potential": {"name": "double_well"},
            })

    def test_positivity_validation(self):
        pot, _ = builtin_double_well(1)
        with pytest.raises(ValueError, match="kappa"):
            ModelSpec(dim=1, kappa=-1.0, gamma=1.0, noise_matrix=np.eye(1),
                      alpha=1.0, c_h=1.0, potential=pot)

    def test_noise_shape_validation(self):
        pot, _ = builtin_double_well(2)
        with pytest.raises(ValueError, match="noise_matrix"):
            ModelSpec(dim=2, kappa=1.0, gamma=1.0, noise_matrix=np.eye(3),
                      alpha=1.0, c_h=1.0, potential=pot)

    def test_unknown_potential(self):
        with pytest.raises(ValueError, match="unknown potential"):
            model_from_dict({
                "dim": 1, "kappa": 1.0, "gamma": 1.0, "noise_matrix": 1.0,
                "alpha": 1.0, "c_h": 1.0, "potential": {"name": "quartic"},
            })

    def test_trace_norm(self):
        assert trace_norm(math.sqrt(2) * np.eye(2)) == pytest.approx(2.0)
        assert trace_norm(np.array([[2.0]])) == pytest.approx(2.0)

    def test_presets_canonical(self, model_gm, model_dw1, model_bimodal):
        for model in (model_gm, model_dw1, model_bimodal):
            assert model.matches_canonical_noise()
