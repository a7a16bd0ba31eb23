import time

import numpy as np
import pytest

from _reference import denoiser_ref, finite_difference_errors
from voxwalk.denoiser import (
    AdamW,
    DenoiserConfig,
    DenoiserParams,
    TrainConfig,
    TrainState,
    WeightsFormatError,
    as_score_model,
    config_from_params,
    forward,
    init_params,
    load_params,
    load_state,
    loss_and_grad,
    param_shapes,
    save_params,
    save_tensors,
    train,
)
from voxwalk.denoiser.train import ema_update
from voxwalk.synthetic import random_complex
from voxwalk.voxelizer import ligand_spec, pocket_spec, voxelize

SMALL = DenoiserConfig(grid_length=8, embed_channels=3, depth=2, widths=(3, 4, 4), res_blocks=2)


def random_params(cfg, rng, dtype=np.float32):
    params = init_params(cfg, rng, zero_head=False)
    for k in params:
        if k.endswith(".b"):
            params[k] = rng.normal(scale=0.1, size=params[k].shape)
    return {k: v.astype(dtype) for k, v in params.items()}


def toy_batch(cfg, rng, n=2):
    L = cfg.grid_length
    x = (rng.random((n, cfg.ligand_channels, L, L, L)) < 0.1).astype(np.float32)
    xi = rng.random((n, cfg.pocket_channels, L, L, L)).astype(np.float32)
    return x, xi


class TestForward:
    def test_zero_params_give_zero(self, rng):
        params = {k: np.zeros(s, np.float32) for k, s in param_shapes(SMALL).items()}
        y, xi = toy_batch(SMALL, rng)
        np.testing.assert_array_equal(forward(params, y * 5, xi, SMALL), 0.0)

    def test_zero_head_init_outputs_zero(self, rng):
        params = init_params(SMALL, rng)
        y, xi = toy_batch(SMALL, rng)
        np.testing.assert_array_equal(forward(params, y, xi, SMALL), 0.0)

    def test_golden_against_scalar_reference(self, rng):
        params = random_params(SMALL, rng)
        y, xi = toy_batch(SMALL, rng, n=1)
        y = y + rng.normal(size=y.shape).astype(np.float32)
        got = forward(params, y, xi, SMALL)
        ref = denoiser_ref(params, y, xi, SMALL.depth, SMALL.res_blocks)
        assert got.shape == y.shape
        assert np.max(np.abs(got - ref)) < 1e-5

    def test_swapped_inputs_rejected(self, rng):
        params = random_params(SMALL, rng)
        y, xi = toy_batch(SMALL, rng)
        with pytest.raises(ValueError):
            forward(params, xi, y, SMALL)

    def test_unbatched_and_broadcast_pocket(self, rng):
        params = random_params(SMALL, rng)
        y, xi = toy_batch(SMALL, rng, n=3)
        full = forward(params, y, np.repeat(xi[:1], 3, axis=0), SMALL)
        np.testing.assert_allclose(forward(params, y, xi[:1], SMALL), full, atol=1e-6)
        np.testing.assert_allclose(forward(params, y[1], xi[0], SMALL), full[1], atol=1e-6)

    def test_deterministic(self, rng):
        params = random_params(SMALL, rng)
        y, xi = toy_batch(SMALL, rng)
        np.testing.assert_array_equal(forward(params, y, xi, SMALL), forward(params, y, xi, SMALL))

    def test_finite_on_bounded_inputs(self, rng):
        params = random_params(SMALL, rng)
        for _ in range(5):
            y = rng.uniform(-10, 10, size=(2, 7, 8, 8, 8))
            xi = rng.uniform(-10, 10, size=(2, 4, 8, 8, 8))
            assert np.all(np.isfinite(forward(params, y, xi, SMALL)))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DenoiserConfig(embed_channels=0)
        with pytest.raises(ValueError):
            DenoiserConfig(grid_length=10, depth=2)
        with pytest.raises(ValueError):
            DenoiserConfig(depth=2, widths=(8, 16))
        assert DenoiserConfig.paper().embed_channels == 16


class TestLoss:
    def test_zero_params_zero_target(self, rng):
        params = init_params(SMALL, rng)
        x = np.zeros((2, 7, 8, 8, 8), np.float32)
        xi = np.zeros((2, 4, 8, 8, 8), np.float32)
        loss, _ = loss_and_grad(params, x, xi, 1.0, SMALL, rng=rng)
        assert loss == 0.0

    def test_zero_params_loss_is_mean_square(self, rng):
        params = init_params(SMALL, rng)
        x, xi = toy_batch(SMALL, rng)
        loss, _ = loss_and_grad(params, x, xi, 1.0, SMALL, rng=rng)
        assert loss == pytest.approx(float(np.mean(x.astype(np.float64) ** 2)), rel=1e-12)

    def test_gradients_match_finite_differences(self, rng):
        params = random_params(SMALL, rng, np.float64)
        x, xi = toy_batch(SMALL, rng)
        noise = rng.standard_normal(x.shape)
        worst = finite_difference_errors(params, x, xi, noise, 1.0, SMALL, rng)
        assert set(worst) == set(param_shapes(SMALL))
        bad = {k: v for k, v in worst.items() if v >= 1e-4}
        assert not bad

    def test_empty_batch(self, rng):
        with pytest.raises(ValueError):
            loss_and_grad(init_params(SMALL, rng), np.zeros((0, 7, 8, 8, 8)), np.zeros((0, 4, 8, 8, 8)), 1.0, SMALL, rng=rng)

    def test_non_negative(self, rng):
        params = random_params(SMALL, rng)
        x, xi = toy_batch(SMALL, rng)
        loss, _ = loss_and_grad(params, x, xi, 0.5, SMALL, rng=rng)
        assert loss >= 0


class TestOptimizer:
    def test_zero_lr_leaves_params_bitwise(self, rng):
        params = random_params(SMALL, rng)
        before = {k: v.copy() for k, v in params.items()}
        x, xi = toy_batch(SMALL, rng)
        _, grads = loss_and_grad(params, x, xi, 1.0, SMALL, rng=rng)
        AdamW(params, TrainConfig(lr=0.0)).step(params, grads)
        for k in params:
            np.testing.assert_array_equal(params[k], before[k])

    def test_decoupled_weight_decay(self):
        p = {"w": np.array([2.0])}
        opt = AdamW(p, TrainConfig(lr=0.1, weight_decay=0.5))
        opt.step(p, {"w": np.array([0.0])})
        # zero gradient: only the decay term moves the weight
        np.testing.assert_allclose(p["w"], [2.0 - 0.1 * 0.5 * 2.0])

    def test_first_step_magnitude_is_lr(self):
        p = {"w": np.array([0.0, 0.0])}
        AdamW(p, TrainConfig(lr=0.01, weight_decay=0.0)).step(p, {"w": np.array([3.0, -0.2])})
        np.testing.assert_allclose(p["w"], [-0.01, 0.01], rtol=1e-6)

    def test_ema_decay_zero_copies(self, rng):
        params = random_params(SMALL, rng)
        shadow = {k: np.zeros_like(v) for k, v in params.items()}
        ema_update(shadow, params, 0.0)
        for k in params:
            np.testing.assert_array_equal(shadow[k], params[k])

    def test_paper_preset(self):
        c = TrainConfig.paper()
        assert (c.batch_size, c.lr, c.weight_decay, c.beta1, c.beta2, c.ema_decay) == (
            64, 1e-5, 1e-2, 0.9, 0.999, 0.999,
        )


def tiny_dataset(rng, n=1, L=8):
    x, xi = toy_batch(DenoiserConfig(grid_length=L), rng, n=n)
    return list(zip(x, xi))


class TestTrain:
    def test_overfit_single_pair(self):
        cfg = DenoiserConfig.desk()
        rng = np.random.default_rng(4)
        pair = random_complex(rng)
        x = voxelize(pair.ligand, ligand_spec(16)).data
        xi = voxelize(pair.pocket, pocket_spec(16)).data
        state = train([(x, xi)], TrainConfig.desk(max_steps=200, seed=0), cfg)
        assert len(state.losses) == 200
        # compare on a fixed noise batch so the ratio is not a single-draw fluke
        noise = np.random.default_rng(99).standard_normal((16,) + x.shape).astype(np.float32)
        X, XI = np.repeat(x[None], 16, 0), np.repeat(xi[None], 16, 0)
        before, _ = loss_and_grad(init_params(cfg, rng), X, XI, 1.0, cfg, noise=noise)
        after, _ = loss_and_grad(state.weights.params, X, XI, 1.0, cfg, noise=noise)
        assert before / after >= 10

    def test_bitwise_reproducible(self, rng):
        data = tiny_dataset(rng, n=3)
        tc = TrainConfig(batch_size=2, max_steps=4, seed=5)
        a = train(data, tc, SMALL)
        b = train(data, tc, SMALL)
        for k in a.weights.params:
            np.testing.assert_array_equal(a.weights.params[k], b.weights.params[k])
            np.testing.assert_array_equal(a.weights.ema[k], b.weights.ema[k])

    def test_resume_matches_uninterrupted(self, rng, tmp_path):
        data = tiny_dataset(rng, n=3)
        tc = TrainConfig(batch_size=2, max_steps=6, seed=2)
        full = train(data, tc, SMALL)
        part = train(data, tc, SMALL, steps=3)
        save_params(part, tmp_path / "ck.vxwt")
        resumed = train(data, tc, SMALL, state=load_state(tmp_path / "ck.vxwt", tc, SMALL))
        assert resumed.step == 6
        for k in full.weights.params:
            np.testing.assert_array_equal(full.weights.params[k], resumed.weights.params[k])

    def test_metrics_csv(self, rng, tmp_path):
        data = tiny_dataset(rng, n=2)
        path = tmp_path / "loss.csv"
        train(data, TrainConfig(batch_size=1, epochs=3, seed=0), SMALL, metrics_path=path)
        rows = path.read_text().splitlines()
        assert rows[0] == "epoch,step,loss"
        assert len(rows) == 1 + 6
        assert rows[-1].startswith("2,6,")

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train([], TrainConfig(), SMALL)

    def test_ema_and_raw_differ(self, rng):
        data = tiny_dataset(rng)
        state = train(data, TrainConfig(batch_size=1, max_steps=5, seed=0), SMALL)
        raw = as_score_model(state.weights, SMALL, use_ema=False)
        ema = as_score_model(state.weights, SMALL, use_ema=True)
        y = data[0][0] + rng.standard_normal(data[0][0].shape).astype(np.float32)
        assert not np.array_equal(raw.estimate(y, data[0][1]), ema.estimate(y, data[0][1]))

    def test_score_model_tweedie(self, rng):
        params = random_params(SMALL, rng)
        model = as_score_model(DenoiserParams(params), SMALL)
        y, xi = toy_batch(SMALL, rng, n=1)
        y, xi = y[0], xi[0]
        np.testing.assert_allclose(model.estimate(y, xi), y + model.score(y, xi), atol=1e-6)


class TestWeightsFile:
    def test_round_trip_bitwise(self, rng, tmp_path):
        weights = DenoiserParams(random_params(SMALL, rng))
        weights.ema["trunk.head.w"] = weights.ema["trunk.head.w"] * 0.5
        save_params(weights, tmp_path / "w.vxwt")
        back = load_params(tmp_path / "w.vxwt", SMALL)
        for k in weights.params:
            np.testing.assert_array_equal(back.params[k], weights.params[k])
            np.testing.assert_array_equal(back.ema[k], weights.ema[k])
        assert config_from_params(back.params, 8, 1.0) == SMALL

    def test_corrupt_magic(self, rng, tmp_path):
        path = tmp_path / "w.vxwt"
        save_params(DenoiserParams(random_params(SMALL, rng)), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(WeightsFormatError):
            load_params(path)

    def test_truncated(self, rng, tmp_path):
        path = tmp_path / "w.vxwt"
        save_params(DenoiserParams(random_params(SMALL, rng)), path)
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(WeightsFormatError):
            load_params(path)

    def test_missing_tensor_named(self, rng, tmp_path):
        params = random_params(SMALL, rng)
        del params["poc.res1.b.w"]
        save_tensors(params, tmp_path / "w.vxwt")
        with pytest.raises(KeyError, match="poc.res1.b.w"):
            load_params(tmp_path / "w.vxwt", SMALL)


def test_walk_step_forward_budget(rng):
    cfg = DenoiserConfig()
    model = as_score_model(DenoiserParams(init_params(cfg, rng, zero_head=False)), cfg)
    y = rng.standard_normal((7, 16, 16, 16)).astype(np.float32)
    xi = rng.random((4, 16, 16, 16)).astype(np.float32)
    model.score(y, xi)
    best = min(_timed(model.score, y, xi) for _ in range(3))
    assert best < 0.05


def _timed(fn, *args):
    t0 = time.perf_counter()
    fn(*args)
    return time.perf_counter() - t0
