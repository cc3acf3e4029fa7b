"""DDIM sampling, guidance call accounting and the three inpainting regimes."""

import numpy as np
import pytest
from scipy import stats

from trackdiff.bench import known_latent, moment_error, run_cell
from trackdiff.data import make_gaussian_world
from trackdiff.denoiser import ConditionSet, GaussianWorld, OracleDenoiser, oracle_conditional_moments
from trackdiff.inpaint import TrackMask, adaptive_inpaint, canonical_inpaint, repaint
from trackdiff.sampler import CountingDenoiser, SamplingError, ddim_step, guided_v, sample
from trackdiff.schedule import make_time_grid
from trackdiff.vcalc import perturb, recover_z0, velocity_target


class ConstantDenoiser:
    latent_shape = (1, 2)

    def __init__(self, value=0.0):
        self.value = value

    def __call__(self, z, taus, cond=None):
        bump = 0.0 if cond is None or cond.is_null else 1.0
        return np.full_like(z, self.value + bump)


class TestDDIMStep:
    def test_to_zero_is_recovery(self, rng):
        z, v = rng.standard_normal((2, 3, 1, 4))
        np.testing.assert_array_equal(ddim_step(z, v, 0.4, 0.0), recover_z0(z, v, [0.4] * 3))

    @pytest.mark.parametrize("tau, tau_next", [(0.9, 0.5), (1.0, 0.3), (0.3, 0.02)])
    def test_exact_transport(self, rng, tau, tau_next):
        z0, eps = rng.standard_normal((2, 3, 1, 4))
        z = perturb(z0, eps, [tau] * 3)
        out = ddim_step(z, velocity_target(z0, eps, [tau] * 3), tau, tau_next)
        np.testing.assert_allclose(out, perturb(z0, eps, [tau_next] * 3), atol=1e-12)

    @pytest.mark.parametrize("tau_next", [0.5, 0.6])
    def test_rejects_non_decreasing(self, tau_next):
        with pytest.raises(ValueError):
            ddim_step(np.zeros((3, 1, 1)), np.zeros((3, 1, 1)), 0.5, tau_next)


class TestGuidance:
    def test_call_counts(self, rng):
        den = CountingDenoiser(ConstantDenoiser())
        z = rng.standard_normal((3, 1, 2))
        cond = ConditionSet.of(src=np.ones(2))
        guided_v(den, z, [0.5] * 3, cond, 1.0)
        assert den.calls == 1
        guided_v(den, z, [0.5] * 3, ConditionSet.null(2), 3.0)
        assert den.calls == 2
        out = guided_v(den, z, [0.5] * 3, cond, 3.0)
        assert den.calls == 4
        np.testing.assert_allclose(out, 3.0)  # 0 + 3 * (1 - 0)

    def test_scale_one_matches_conditional_trajectory(self):
        den = ConstantDenoiser(0.1)
        cond = ConditionSet.of(src=np.ones(2))
        grid = make_time_grid(10)
        a = sample(den, cond, grid, 1.0, np.random.default_rng(5), n=3)
        z = np.random.default_rng(5).standard_normal((3, 3, 1, 2))
        for tau, tau_next in zip(grid[:-1], grid[1:]):
            z = ddim_step(z, den(z, [tau] * 3, cond), tau, tau_next)
        np.testing.assert_array_equal(a, z)


class TestSample:
    def test_shapes_and_determinism(self, world6):
        den = OracleDenoiser(world6)
        grid = make_time_grid(20)
        a = sample(den, None, grid, 1.0, np.random.default_rng(1), n=4)
        b = sample(den, None, grid, 1.0, np.random.default_rng(1), n=4)
        assert a.shape == (4, 3, 1, 2)
        assert np.array_equal(a, b)
        assert sample(den, None, grid, 1.0, np.random.default_rng(1)).shape == (3, 1, 2)

    def test_batch_from_condition(self):
        cond = ConditionSet.of(src=np.ones((5, 2)))
        out = sample(ConstantDenoiser(), cond, make_time_grid(3), 2.0, np.random.default_rng(0))
        assert out.shape == (5, 3, 1, 2)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_reports_step(self):
        class Exploding(ConstantDenoiser):
            def __call__(self, z, taus, cond=None):
                return np.full_like(z, np.inf if taus[0] < 0.7 else 0.0)

        with pytest.raises(SamplingError) as info:
            sample(Exploding(), None, make_time_grid(10), 1.0, np.random.default_rng(0))
        assert info.value.step == 4  # first level below 0.7 is 0.6

    def test_moments_of_six_dim_world(self, world6):
        z = sample(OracleDenoiser(world6), None, make_time_grid(250), 1.0, np.random.default_rng(2), n=10_000)
        x = z.reshape(-1, 6)
        sd = np.sqrt(np.diag(world6.cov))
        assert np.max(np.abs((x.mean(0) - world6.mean) / sd)) < 0.05
        assert np.max(np.abs(np.cov(x.T) - world6.cov)) < 0.1

    def test_halving_steps_within_noise_floor(self):
        w = GaussianWorld(np.array([0.7, 0.0, 0.0]), np.diag([4.0, 1.0, 1.0]), (1, 1))
        qs = [0.1, 0.25, 0.5, 0.75, 0.9]
        out = {}
        for T in (125, 250):
            z = sample(OracleDenoiser(w), None, make_time_grid(T), 1.0, np.random.default_rng(3), n=10_000)
            out[T] = np.quantile(z[:, 0, 0, 0], qs)
        floor = 2.0 / np.sqrt(10_000)  # sd of a sample quantile is about sd/sqrt(n), sd = 2
        assert np.max(np.abs(out[125] - out[250])) < floor


MASKS = [(True, False, False), (False, True, False), (True, True, False)]


class TestInpaintContracts:
    @pytest.mark.parametrize("mask", MASKS)
    @pytest.mark.parametrize("algo", ["canonical", "repaint", "adaptive"])
    def test_known_planes_bit_exact(self, world6, rng, mask, algo):
        z_known = world6.sample(rng, 16)
        den = OracleDenoiser(world6)
        grid = make_time_grid(12)
        if algo == "canonical":
            out = canonical_inpaint(den, mask, z_known, None, grid, 1.0, rng)
        elif algo == "repaint":
            out = repaint(den, mask, z_known, None, grid, 3, 1.0, rng)
        else:
            out = adaptive_inpaint(den, mask, z_known, None, grid, 1.0, rng)
        known = np.asarray(mask)
        assert np.array_equal(out[:, known], z_known[:, known])
        assert np.all(np.isfinite(out))

    @pytest.mark.parametrize("cfg_scale, factor", [(1.0, 1), (2.0, 2)])
    def test_call_accounting(self, world6, rng, cfg_scale, factor):
        z_known = world6.sample(rng, 4)
        cond = ConditionSet.of(src=np.ones(3))
        grid = make_time_grid(10)
        for algo, U, expected in (("canonical", 1, 10), ("repaint", 4, 40), ("adaptive", 1, 10)):
            den = CountingDenoiser(OracleDenoiser(world6))
            if algo == "canonical":
                canonical_inpaint(den, MASKS[0], z_known, cond, grid, cfg_scale, rng)
            elif algo == "repaint":
                repaint(den, MASKS[0], z_known, cond, grid, U, cfg_scale, rng)
            else:
                adaptive_inpaint(den, MASKS[0], z_known, cond, grid, cfg_scale, rng)
            assert den.calls == expected * factor, algo

    def test_repaint_u1_equals_canonical(self, world6, rng):
        z_known = world6.sample(rng, 8)
        den = OracleDenoiser(world6)
        grid = make_time_grid(15)
        a = repaint(den, MASKS[0], z_known, None, grid, 1, 1.0, np.random.default_rng(9))
        b = canonical_inpaint(den, MASKS[0], z_known, None, grid, 1.0, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("algo", ["canonical", "repaint", "adaptive"])
    def test_seeded_determinism(self, world6, algo):
        z_known = world6.sample(np.random.default_rng(0), 5)
        den = OracleDenoiser(world6)
        runs = []
        for _ in range(2):
            r = np.random.default_rng(4)
            if algo == "canonical":
                runs.append(canonical_inpaint(den, MASKS[1], z_known, None, make_time_grid(8), 1.0, r))
            elif algo == "repaint":
                runs.append(repaint(den, MASKS[1], z_known, None, make_time_grid(8), 2, 1.0, r))
            else:
                runs.append(adaptive_inpaint(den, MASKS[1], z_known, None, make_time_grid(8), 1.0, r))
        assert np.array_equal(*runs)

    @pytest.mark.parametrize("mask", [(True, True, True), (False, False, False), (True, False)])
    def test_degenerate_masks(self, world6, mask):
        den = OracleDenoiser(world6)
        with pytest.raises(ValueError):
            canonical_inpaint(den, mask, np.zeros((3, 1, 2)), None, make_time_grid(4), 1.0, np.random.default_rng())
        with pytest.raises(ValueError):
            adaptive_inpaint(den, mask, np.zeros((3, 1, 2)), None, make_time_grid(4), 1.0, np.random.default_rng())

    def test_repaint_rejects_bad_u(self, world6):
        with pytest.raises(ValueError):
            repaint(OracleDenoiser(world6), MASKS[0], np.zeros((3, 1, 2)), None, make_time_grid(4), 0, 1.0,
                    np.random.default_rng())

    def test_adaptive_all_known_is_identity(self, world6, rng):
        z = world6.sample(rng, 3)
        out = adaptive_inpaint(OracleDenoiser(world6), (True, True, True), z, None, make_time_grid(5), 1.0, rng,
                               check_mask=False)
        assert np.array_equal(out, z) and out is not z

    def test_track_mask(self):
        m = TrackMask([1, 0, 0])
        assert m == (True, False, False)
        assert m.planes.shape == (3, 1, 1)
        with pytest.raises(ValueError):
            TrackMask([True, False])


class TestInpaintStatistics:
    def test_canonical_weakly_coupled_world(self):
        w = make_gaussian_world(1, 0.1, mean=0.0)
        z_known = known_latent(w, MASKS[0], 1.0, 5000)
        out = canonical_inpaint(OracleDenoiser(w), MASKS[0], z_known, None, make_time_grid(250), 1.0,
                                np.random.default_rng(0))
        mean, cov = oracle_conditional_moments(w, MASKS[0], z_known[0])
        err = (out[:, 1:, 0, 0].mean(0) - mean) / np.sqrt(np.diag(cov))
        assert np.max(np.abs(err)) < 0.1

    def test_canonical_independent_world_matches_marginal(self):
        w = make_gaussian_world(1, 0.0, mean=0.0)
        z_known = known_latent(w, MASKS[0], 2.0, 5000)
        out = canonical_inpaint(OracleDenoiser(w), MASKS[0], z_known, None, make_time_grid(250), 1.0,
                                np.random.default_rng(1))
        for k in (1, 2):
            assert stats.kstest(out[:, k, 0, 0], "norm").pvalue > 0.01

    def test_adaptive_beats_canonical(self, world_rho8):
        errs = {a: run_cell(world_rho8, a, 250, 1, 5000, np.random.default_rng(3))["moment_error"]
                for a in ("adaptive", "canonical")}
        assert errs["adaptive"] <= errs["canonical"]

    def test_moment_error_of_exact_draws(self, rng):
        cov = np.array([[0.36, 0.16], [0.16, 0.36]])
        x = rng.multivariate_normal([1.2, 1.2], cov, size=200_000)
        assert moment_error(x, [1.2, 1.2], cov) < 1e-3
        assert moment_error(x + 0.6, [1.2, 1.2], cov) == pytest.approx(1.0, abs=0.01)
