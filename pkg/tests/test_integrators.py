import math

import numpy as np
import pytest

from ssav.integrators import (
    NoConvergence,
    StepNoise,
    _picard_with_iterations,
    direct_noise_stream,
    em_step,
    ou_decay,
    ou_integral_std,
    ou_substep,
    run_trajectory,
    ssav_deterministic_substep,
    ssav_implicit_oracle,
    ssav_step,
)
from ssav.model import ModelSpec, builtin_double_well, modified_energy
from ssav.sav_core import AugmentedState, initial_state, rho_init


def _random_states(model, n, seed, u_range=2.5):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, model.dim))
    u = rng.uniform(-u_range, u_range, size=(n, model.dim))
    return AugmentedState(v=v, u=u, rho=rho_init(model, u))


class TestDeterministicSubstep:
    def test_vanishing_step_is_identity(self, model_dw1):
        st = initial_state(model_dw1, np.array([0.8]), np.array([-0.6]))
        out = ssav_deterministic_substep(model_dw1, st, 1e-12)
        assert np.allclose(out.v, st.v, rtol=1e-10)
        assert np.allclose(out.u, st.u, rtol=1e-10)
        assert out.rho == pytest.approx(float(st.rho), rel=1e-10)

    def test_closed_form_q_zero(self, model_dw1):
        # u=0 kills Q; with alpha=1, h=1/2: v' = (7/9) v, u' = (4/9) v
        v = np.array([1.7])
        st = initial_state(model_dw1, v, np.zeros(1))
        out = ssav_deterministic_substep(model_dw1, st, 0.5)
        assert out.v[0] == pytest.approx(7.0 / 9.0 * v[0], rel=1e-14)
        assert out.u[0] == pytest.approx(4.0 / 9.0 * v[0], rel=1e-14)
        assert out.rho == pytest.approx(float(st.rho), rel=1e-14)

    @pytest.mark.parametrize("fixture", ["model_gm", "model_dw1", "model_dw2", "model_bimodal"])
    @pytest.mark.parametrize("h", [1.0, 0.25, 2.0**-6, -0.5])
    def test_energy_identity(self, fixture, h, request):
        # the modified energy is conserved for any h, including negative
        # (the identity is algebraic in h)
        model = request.getfixturevalue(fixture)
        state = _random_states(model, 10_000, seed=2)
        before = modified_energy(model, state)
        after = modified_energy(model, ssav_deterministic_substep(model, state, h))
        assert np.max(np.abs(after - before) / (1.0 + before)) <= 1e-10


class TestImplicitOracle:
    @pytest.mark.parametrize("fixture", ["model_gm", "model_dw1", "model_dw2", "model_bimodal"])
    def test_matches_explicit(self, fixture, request):
        model = request.getfixturevalue(fixture)
        state = _random_states(model, 2000, seed=3)
        for h in (1e-3, 2.0**-6):
            explicit = ssav_deterministic_substep(model, state, h)
            implicit = ssav_implicit_oracle(model, state, h, tol=1e-13)
            assert np.max(np.abs(explicit.v - implicit.v)) <= 1e-11
            assert np.max(np.abs(explicit.u - implicit.u)) <= 1e-11
            assert np.max(np.abs(explicit.rho - implicit.rho)) <= 1e-11

    def test_fixed_point_of_zero_step(self, model_dw1):
        st = initial_state(model_dw1, np.array([1.0]), np.array([0.5]))
        out = ssav_implicit_oracle(model_dw1, st, 1e-14)
        assert np.allclose(out.v, st.v, rtol=1e-12)
        assert np.allclose(out.u, st.u, rtol=1e-12)

    def test_linear_case_converges_in_three_iterations(self, model_dw1):
        # Q=0 leaves a linear contraction whose residual decays by a factor
        # alpha h^2 per sweep: 1e-3, 1e-6, 5e-13 for h=1e-3
        st = initial_state(model_dw1, np.array([1.0]), np.zeros(1))
        out, iters = _picard_with_iterations(model_dw1, st, 1e-3, tol=1e-12, max_iter=50)
        assert iters <= 3
        closed = ssav_deterministic_substep(model_dw1, st, 1e-3)
        assert np.allclose(out.v, closed.v, atol=1e-12)

    def test_no_convergence_raises(self, model_dw1):
        st = initial_state(model_dw1, np.array([2.0]), np.array([3.0]))
        with pytest.raises(NoConvergence):
            ssav_implicit_oracle(model_dw1, st, h=8.0, tol=1e-13, max_iter=30)


class TestOUSubstep:
    def test_half_life(self, model_dw1):
        v = np.array([2.4])
        noise = StepNoise(ou_integral=np.zeros(1))
        out = ou_substep(model_dw1, v, math.log(2.0), noise)
        assert out[0] == pytest.approx(1.2, rel=1e-14)

    def test_zero_step_identity(self, model_dw1):
        v = np.array([0.3])
        assert ou_substep(model_dw1, v, 1e-300, StepNoise(np.zeros(1)))[0] == pytest.approx(
            0.3, rel=1e-12
        )

    def test_stationary_variance(self, model_dw1):
        # repeated exact OU steps from v=0 approach variance |Gamma|^2/(2 gamma) = 1
        rng = np.random.default_rng(12)
        n = 1_000_000
        h = 0.5
        v = np.zeros((n, 1))
        sd = ou_integral_std(model_dw1.gamma, h)
        for _ in range(40):
            noise = StepNoise(
                ou_integral=model_dw1.apply_noise_matrix(sd * rng.standard_normal((n, 1)))
            )
            v = ou_substep(model_dw1, v, h, noise)
        assert np.var(v) == pytest.approx(1.0, abs=0.01)

    def test_conditional_moments(self, model_gm):
        # one step from a fixed v: mean e^{-gamma h} v, var (1-e^{-2gamma h})/(2gamma)*Gamma^2
        rng = np.random.default_rng(4)
        n = 200_000
        h = 0.3
        v0 = 1.2 * np.ones((n, 1))
        sd = ou_integral_std(model_gm.gamma, h)
        noise = StepNoise(
            ou_integral=model_gm.apply_noise_matrix(sd * rng.standard_normal((n, 1)))
        )
        out = ou_substep(model_gm, v0, h, noise)
        target_mean = ou_decay(model_gm.gamma, h) * 1.2
        target_var = sd * sd * 4.0  # Gamma = 2
        se_mean = math.sqrt(target_var / n)
        se_var = target_var * math.sqrt(2.0 / (n - 1))
        assert abs(np.mean(out) - target_mean) <= 4 * se_mean
        assert abs(np.var(out, ddof=1) - target_var) <= 4 * se_var

    def test_expm1_form_for_tiny_rates(self):
        # naive 1 - exp(-x) would lose precision near x ~ 1e-12
        got = ou_integral_std(1e-6, 1e-6)
        expected = math.sqrt(1e-6 * (1 - 1e-12 + 2e-24 / 3))  # series of the exact form
        assert got == pytest.approx(expected, rel=1e-12)


class TestSSAVStep:
    def test_zero_noise_composition(self, model_dw1):
        st = initial_state(model_dw1, np.array([1.0]), np.array([0.0]))
        h = 0.5
        tri = ssav_deterministic_substep(model_dw1, st, h)
        out = ssav_step(model_dw1, st, h, StepNoise(ou_integral=np.zeros(1)))
        assert out.v[0] == pytest.approx(math.exp(-h) * tri.v[0], rel=1e-14)
        assert np.array_equal(out.u, tri.u)
        assert out.rho == tri.rho

    def test_strong_damping_kills_momentum(self, model_dw1):
        model = ModelSpec(
            dim=1, kappa=1.0, gamma=500.0, noise_matrix=np.eye(1),
            alpha=1.0, c_h=1000.0, potential=model_dw1.potential,
        )
        st = initial_state(model, np.array([3.0]), np.array([1.0]))
        out = ssav_step(model, st, 1.0, StepNoise(ou_integral=np.zeros(1)))
        assert abs(out.v[0]) < 1e-100

    def test_energy_identity_persists_with_ou_noise_off(self, model_dw2):
        state = _random_states(model_dw2, 1000, seed=6)
        out = ssav_deterministic_substep(model_dw2, state, 0.125)
        before = modified_energy(model_dw2, state)
        after = modified_energy(model_dw2, out)
        assert np.max(np.abs(after - before) / (1 + before)) < 1e-12


class TestEMStep:
    def test_zero_step_identity(self, model_dw1):
        v, u = em_step(model_dw1, np.array([1.0]), np.array([2.0]), 0.0, np.zeros(1))
        assert v[0] == 1.0 and u[0] == 2.0

    def test_hand_value(self, model_dw1):
        # v' = -(grad Phi(2))*h = -(8-2)/4 = -3/2, u' = 2
        v, u = em_step(model_dw1, np.zeros(1), np.array([2.0]), 0.25, np.zeros(1))
        assert v[0] == pytest.approx(-1.5, rel=1e-14)
        assert u[0] == pytest.approx(2.0, rel=1e-15)

    def test_deterministic_explosion_witness(self, model_dw1):
        # from u=10 at h=1/4 the deterministic EM map blows up without raising
        v, u = np.zeros(1), np.array([10.0])
        mags = []
        for _ in range(40):
            v, u = em_step(model_dw1, v, u, 0.25, np.zeros(1))
            mags.append(abs(float(u[0])))
            if not np.isfinite(u[0]):
                break
        assert mags[1] > 2 * 10.0
        assert not np.isfinite(u[0]) or mags[-1] > 1e100


class TestRunTrajectory:
    def test_single_step_record(self, model_dw1):
        st = initial_state(model_dw1, np.array([1.0]), np.array([1.0]))
        noise = [StepNoise(ou_integral=np.array([0.123]))]
        rec = run_trajectory(model_dw1, st, 0.25, 1, noise)
        assert len(rec.states) == 2
        direct = ssav_step(model_dw1, st, 0.25, noise[0])
        assert np.array_equal(rec.states[1].v, direct.v)
        assert np.array_equal(rec.states[1].u, direct.u)
        assert rec.times[-1] == 0.25

    def test_same_seed_bitwise_identical(self, model_dw1):
        st = initial_state(model_dw1, np.array([1.0]), np.array([1.0]))

        def run():
            stream = direct_noise_stream(model_dw1, 2.0**-5, 64, rng=42)
            return run_trajectory(model_dw1, st, 2.0**-5, 64, stream, record_every=8)

        a, b = run(), run()
        assert np.array_equal(a.times, b.times)
        for sa, sb in zip(a.states, b.states):
            assert np.array_equal(sa.v, sb.v)
            assert np.array_equal(sa.u, sb.u)
            assert np.array_equal(sa.rho, sb.rho)
        assert np.array_equal(a.energies, b.energies)

    def test_em_requires_increments(self, model_dw1):
        st = initial_state(model_dw1, np.ones(1), np.ones(1))
        stream = direct_noise_stream(model_dw1, 0.1, 4, rng=0)  # no increments
        with pytest.raises(ValueError, match="increments"):
            run_trajectory(model_dw1, st, 0.1, 4, stream, method="em")

    def test_em_divergence_recorded_not_raised(self, model_dw1):
        st = initial_state(model_dw1, np.zeros(1), np.array([10.0]))
        stream = direct_noise_stream(model_dw1, 0.25, 200, rng=1, with_increments=True)
        rec = run_trajectory(model_dw1, st, 0.25, 200, stream, method="em",
                             record_every=50, with_energy=False)
        assert rec.diverged_at is not None

    def test_validation(self, model_dw1):
        st = initial_state(model_dw1, np.ones(1), np.ones(1))
        with pytest.raises(ValueError):
            run_trajectory(model_dw1, st, 0.1, 0, [])
        with pytest.raises(ValueError):
            run_trajectory(model_dw1, st, 0.1, 1, [], method="heun")


class TestDirectNoiseStream:
    def test_joint_law_of_pairs(self, model_dw1):
        # corr(dW, J_raw) must match the OU cross-covariance
        h = 0.7
        gamma = model_dw1.gamma
        n = 200_000
        stream = direct_noise_stream(model_dw1, h, 1, rng=8, batch_shape=(n,),
                                     with_increments=True)
        noise = next(stream)
        j_raw = noise.ou_integral / model_dw1.noise_matrix[0, 0]
        dw = noise.wiener_increment
        var_j = -math.expm1(-2 * gamma * h) / (2 * gamma)
        cov = -math.expm1(-gamma * h) / gamma
        rho_target = cov / math.sqrt(h * var_j)
        got = np.corrcoef(dw[:, 0], j_raw[:, 0])[0, 1]
        assert got == pytest.approx(rho_target, abs=4.0 / math.sqrt(n))
        assert np.var(dw[:, 0], ddof=1) == pytest.approx(h, rel=0.02)
