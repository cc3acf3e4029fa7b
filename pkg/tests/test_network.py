import numpy as np
import pytest

from trackdiff.data import make_gaussian_world
from trackdiff.denoiser import ConditionSet, oracle_v
from trackdiff.denoiser.network import PARAM_NAMES, NetConfig, TrackDenoiser, forward, init_params
from trackdiff.denoiser.training import (
    Hyper,
    Trainer,
    TrainingBatch,
    TrainingError,
    evaluation_batch,
    grad_check,
    line_search_step,
    loss_and_grad,
    masked_loss,
    predictor_loss,
    sample_batch,
    train_step,
)

CFG = NetConfig((2, 3), hidden=16, cond_dim=4)


@pytest.fixture
def params(rng):
    p = init_params(CFG, rng)
    # move away from the zero-initialised null embedding and small heads
    return {k: v + 0.05 * rng.standard_normal(v.shape) for k, v in p.items()}


def random_inputs(rng, B=5):
    z = rng.standard_normal((B, 3, 2, 3))
    taus = rng.uniform(0.1, 1.0, (B, 3))
    cond = ConditionSet(rng.standard_normal((B, 3, 4)), rng.random((B, 3)) < 0.6)
    return z, taus, cond


class TestForward:
    def test_shape_and_determinism(self, params, rng):
        z, taus, cond = random_inputs(rng)
        a = forward(params, CFG, z, taus, cond)
        b = forward(params, CFG, z, taus, cond)
        assert a.shape == z.shape
        assert np.array_equal(a, b)

    def test_unbatched_input(self, params, rng):
        z, taus, cond = random_inputs(rng, B=1)
        single = forward(params, CFG, z[0], taus[0], ConditionSet(cond.values[0], cond.present[0]))
        np.testing.assert_allclose(single, forward(params, CFG, z, taus, cond)[0], atol=1e-14)

    def test_null_slots_ignore_values(self, params, rng):
        z, taus, cond = random_inputs(rng)
        other = ConditionSet(np.where(cond.present[..., None], cond.values, 123.0), cond.present)
        np.testing.assert_array_equal(forward(params, CFG, z, taus, cond), forward(params, CFG, z, taus, other))

    def test_no_direct_condition_leak(self, params, rng):
        z, taus, cond = random_inputs(rng)
        changed = ConditionSet(cond.values.copy(), cond.present.copy())
        changed.values[:, 2] += 1.0
        changed.present[:, 2] = True
        ablated = dict(params)
        for name in ("mix1_w", "mix1_b", "mix2_w", "mix2_b"):
            ablated[name] = np.zeros_like(params[name])  # silu(0) = 0: mixing becomes identity
        a = forward(ablated, CFG, z, taus, cond)
        b = forward(ablated, CFG, z, taus, changed)
        np.testing.assert_array_equal(a[:, :2], b[:, :2])
        assert not np.allclose(a[:, 2], b[:, 2])
        # with mixing active the source prompt reaches the other tracks
        full_a = forward(params, CFG, z, taus, cond)
        full_b = forward(params, CFG, z, taus, changed)
        assert not np.allclose(full_a[:, 0], full_b[:, 0])

    @pytest.mark.parametrize(
        "kwargs", [dict(hidden=0), dict(cond_dim=0), dict(num_freqs=0), dict(latent_shape=(0, 3))]
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            NetConfig(**{"latent_shape": (2, 3), **kwargs})

    def test_shape_mismatch(self, params, rng):
        with pytest.raises(ValueError):
            forward(params, CFG, rng.standard_normal((3, 2, 4)), [0.5] * 3)
        with pytest.raises(ValueError):
            forward(params, CFG, rng.standard_normal((3, 2, 3)), [0.5] * 3, ConditionSet.null(5))

    def test_wrapper_validates(self, params):
        bad = dict(params)
        bad["in_b"] = np.full_like(bad["in_b"], np.nan)
        with pytest.raises(ValueError, match="in_b"):
            TrackDenoiser(CFG, bad)
        with pytest.raises(ValueError, match="missing"):
            TrackDenoiser(CFG, {k: v for k, v in params.items() if k != "out_w"})

    def test_fourier_frequencies(self):
        f = CFG.freqs
        assert len(f) == 8 and f[0] == pytest.approx(0.25) and f[-1] == pytest.approx(16.0)
        np.testing.assert_allclose(f[1:] / f[:-1], f[1] / f[0])


class TestGradients:
    def test_grad_check_passes(self, params, rng):
        z, _, cond = random_inputs(rng, B=1)
        probe = sample_batch(z, cond, rng, Hyper(dropout=0.0), 4)
        assert grad_check(params, CFG, probe, rng, n_params=300) < 1e-4

    def test_grad_check_catches_sign_flip(self, params, rng):
        z, _, cond = random_inputs(rng, B=1)
        probe = sample_batch(z, cond, rng, Hyper(dropout=0.0), 4)

        def corrupted(p, c, b):
            loss, g = loss_and_grad(p, c, b)
            g["mix1_w"] = -g["mix1_w"]
            return loss, g

        # enough draws to land on mix1_w entries
        assert grad_check(params, CFG, probe, rng, n_params=2000, grad_fn=corrupted) > 1e-1

    def test_zero_parameter_probe(self, params, rng):
        z, _, cond = random_inputs(rng, B=1)
        probe = sample_batch(z, cond, rng, Hyper(), 4)
        assert grad_check(params, CFG, probe, rng, n_params=0) == 0.0


class TestTraining:
    def test_initial_loss_on_unit_gaussian(self, rng):
        cfg = NetConfig((1, 4), hidden=32, cond_dim=2)
        p = init_params(cfg, rng)
        losses = [
            loss_and_grad(p, cfg, sample_batch(rng.standard_normal((512, 3, 1, 4)), None, rng, Hyper(), 2))[0]
            for _ in range(10)
        ]
        assert np.mean(losses) == pytest.approx(1.0, abs=0.1)

    def test_zero_learning_rate(self, params, rng):
        z, _, cond = random_inputs(rng)
        new, loss, _ = train_step(params, CFG, z, cond, rng, Hyper(lr=0.0))
        assert np.isfinite(loss)
        for k in PARAM_NAMES:
            np.testing.assert_array_equal(new[k], params[k])

    def test_inputs_not_mutated(self, params, rng):
        z, _, cond = random_inputs(rng)
        snapshot = {k: v.copy() for k, v in params.items()}
        train_step(params, CFG, z, cond, rng, Hyper())
        for k in PARAM_NAMES:
            np.testing.assert_array_equal(params[k], snapshot[k])

    def test_line_search_monotone(self, params, rng):
        z, _, cond = random_inputs(rng, B=16)
        batch = sample_batch(z, cond, rng, Hyper(), 4)
        p = params
        losses = [masked_loss(forward(p, CFG, batch.z_tau, batch.taus, batch.cond), batch)]
        for _ in range(15):
            p, loss = line_search_step(p, CFG, batch)
            losses.append(loss)
        assert all(b <= a for a, b in zip(losses, losses[1:]))
        assert losses[-1] < losses[0]

    def test_masked_loss_ignores_clamped_tracks(self, rng):
        z0 = rng.standard_normal((4, 3, 2, 3))
        eps = rng.standard_normal(z0.shape)
        batch = TrainingBatch(z0, eps, np.array([[0.0, 0.5, 0.5]] * 4), ConditionSet.null(4, (4,)))
        pred = batch.v.copy()
        assert masked_loss(pred, batch) == 0.0
        pred[:, 0] += 100.0
        assert masked_loss(pred, batch) == 0.0

    def test_non_finite_loss_raises(self, params, rng):
        z, _, cond = random_inputs(rng)
        z[0, 1, 0, 0] = np.nan
        with pytest.raises(TrainingError, match="non-finite"):
            train_step(params, CFG, z, cond, rng, Hyper())

    def test_empty_batch_rejected(self, params, rng):
        with pytest.raises(ValueError):
            train_step(params, CFG, np.zeros((0, 3, 2, 3)), None, rng, Hyper())

    def test_learns_gaussian_world(self, world6):
        # 2 000 steps reach the oracle's irreducible loss within 10 %
        rng = np.random.default_rng(0)
        cfg = NetConfig((1, 2), hidden=32, cond_dim=2)
        trainer = Trainer(init_params(cfg, rng), cfg, Hyper(lr=0.01))
        for _ in range(2000):
            trainer.step(world6.sample(rng, 256), None, rng)
        eval_rng = np.random.default_rng(1)
        batch = evaluation_batch(world6.sample(eval_rng, 50_000), None, eval_rng, Hyper(), 2)
        learned = predictor_loss(TrackDenoiser(cfg, trainer.params), batch)
        irreducible = predictor_loss(lambda z, t, c: oracle_v(world6, z, t), batch)
        assert learned <= 1.1 * irreducible
