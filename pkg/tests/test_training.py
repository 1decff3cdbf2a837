"""Objective arithmetic, schedule shape, optimizer behaviour, and a tiny
end-to-end training run."""

import numpy as np
import pytest

from xmae import masking, model, nn, synthgen, training


class TestMaskedMse:
    def test_hand_example(self):
        pred = np.array([1.0, 0.0, 3.0])
        target = np.array([1.0, 2.0, 3.0])
        mask = np.array([False, True, False])
        loss = training.masked_mse(pred, target, mask)
        assert float(loss.data) == 4.0

    def test_averages_over_masked_only(self):
        pred = np.array([0.0, 0.0, 0.0, 0.0])
        target = np.array([2.0, 2.0, 100.0, 100.0])
        mask = np.array([True, True, False, False])
        assert float(training.masked_mse(pred, target, mask).data) == 4.0

    def test_empty_mask_raises(self):
        with pytest.raises(training.EmptyMask):
            training.masked_mse(np.zeros(3), np.zeros(3),
                                np.zeros(3, dtype=bool))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            training.masked_mse(np.zeros(3), np.zeros(4),
                                np.ones(3, dtype=bool))

    def test_gradient_flows_to_pred(self):
        pred = nn.Tensor(np.array([1.0, 0.0, 3.0]))
        loss = training.masked_mse(pred, np.array([1.0, 2.0, 3.0]),
                                   np.array([False, True, False]))
        loss.backward()
        np.testing.assert_allclose(pred.grad, [0.0, -4.0, 0.0])


class TestSchedule:
    cfg = training.TrainConfig()

    def test_warmup_endpoint_exact(self):
        # step 9 of a 100-step run is the last warmup step
        assert training.lr_at_step(9, 100, self.cfg) == self.cfg.base_lr

    def test_warmup_is_linear(self):
        lrs = [training.lr_at_step(s, 100, self.cfg) for s in range(10)]
        diffs = np.diff(lrs)
        np.testing.assert_allclose(diffs, diffs[0], rtol=1e-12)

    def test_cosine_midpoint(self):
        # halfway through decay: 10 warmup + 45 of 90 decay steps
        lr = training.lr_at_step(55, 100, self.cfg)
        assert abs(lr - self.cfg.base_lr / 2) < 1e-12

    def test_no_jump_at_warmup_boundary(self):
        before = training.lr_at_step(9, 100, self.cfg)
        after = training.lr_at_step(10, 100, self.cfg)
        assert abs(after - before) < 1e-12
        assert after == self.cfg.base_lr

    def test_final_step_near_zero(self):
        lr = training.lr_at_step(999, 1000, self.cfg)
        assert 0.0 <= lr < 1e-9 * 3e4 + self.cfg.base_lr * 1e-4

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            training.lr_at_step(100, 100, self.cfg)


def scalar_param(name, value):
    return {name: nn.Tensor(np.array([value], dtype=np.float64))}


class TestOptimizer:
    def test_zero_grad_no_decay_is_noop(self):
        cfg = training.TrainConfig(weight_decay=0.0)
        params = scalar_param("head.w", 1.0)
        state = training.OptimState(params)
        training.optimizer_step(params, {"head.w": np.zeros(1)}, state,
                                0.1, cfg)
        assert params["head.w"].data[0] == 1.0

    def test_decoupled_decay_hand_value(self):
        # zero gradient, lr 0.1, decay 1e-2: w <- w - lr*wd*w = 0.999
        cfg = training.TrainConfig(weight_decay=1e-2)
        params = scalar_param("head.w", 1.0)
        state = training.OptimState(params)
        training.optimizer_step(params, {"head.w": np.zeros(1)}, state,
                                0.1, cfg)
        np.testing.assert_allclose(params["head.w"].data[0], 0.999,
                                   rtol=1e-12)

    def test_unit_gradient_first_step(self):
        # bias-corrected moments are both 1, so the step is ~lr
        cfg = training.TrainConfig(weight_decay=0.0)
        params = scalar_param("head.w", 5.0)
        state = training.OptimState(params)
        training.optimizer_step(params, {"head.w": np.ones(1)}, state,
                                1e-3, cfg)
        np.testing.assert_allclose(5.0 - params["head.w"].data[0], 1e-3,
                                   rtol=1e-6)

    def test_decay_spares_non_matrix_params(self):
        for name in ("head.b", "pos.ecg", "mask_token", "norm.gamma"):
            assert not training._decayed(name)
        for name in ("head.w", "enc.ecg.0.attn.wq", "dec.0.ff.w2"):
            assert training._decayed(name)

    def test_non_finite_gradient_aborts_with_name(self):
        cfg = training.TrainConfig()
        params = scalar_param("head.w", 1.0)
        state = training.OptimState(params)
        with pytest.raises(training.NonFiniteGradient) as exc:
            training.optimizer_step(params, {"head.w": np.array([np.nan])},
                                    state, 0.1, cfg)
        assert "head.w" in str(exc.value)
        assert params["head.w"].data[0] == 1.0
        assert state.t == 0

    def test_clip_global_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        total = training.clip_global_norm(grads, 1.0)
        assert abs(total - 5.0) < 1e-12
        assert abs(grads["a"][0] - 0.6) < 1e-12
        assert abs(grads["b"][0] - 0.8) < 1e-12

    def test_clip_leaves_small_grads_alone(self):
        grads = {"a": np.array([0.1])}
        training.clip_global_norm(grads, 1.0)
        assert grads["a"][0] == 0.1


class TestConfigValidation:
    def test_patience_cannot_exceed_epochs(self):
        with pytest.raises(ValueError):
            training.TrainConfig(epochs=3, patience=4)

    def test_warmup_frac_bounds(self):
        with pytest.raises(ValueError):
            training.TrainConfig(warmup_frac=0.0)


SMOKE_MODEL = model.ModelConfig(seq_len=1000, patch_len=40,
                                conv_widths=(4, 4, 8), conv_out=4,
                                embed_dim=8, ff_dim=12, heads=2,
                                depth_ppg=1, dropout=0.0)


@pytest.fixture(scope="module")
def smoke_corpus(tmp_path_factory):
    data_dir = tmp_path_factory.mktemp("corpus")
    cfg = synthgen.DatasetConfig(noise_sd=0.02)
    manifest = synthgen.gen_dataset(6, 2, cfg, seed=11, out_dir=data_dir)
    return data_dir, manifest


class TestTrainLoop:
    def test_smoke_run_and_reload(self, smoke_corpus, tmp_path):
        data_dir, manifest = smoke_corpus
        tcfg = training.TrainConfig(epochs=2, patience=2, batch_size=6)
        summary = training.train(manifest, data_dir, tcfg, SMOKE_MODEL,
                                 tmp_path / "run")
        assert summary["epochs_run"] == 2
        assert np.isfinite(summary["best_val_loss"])
        meta, mcfg, params = training.load_model(summary["checkpoint"])
        assert meta["objective"] == "xmae"
        assert mcfg == SMOKE_MODEL
        rng = np.random.default_rng(0)
        out, _, _ = model.forward_xmae(
            params, mcfg, rng.normal(size=1000), rng.normal(size=1000),
            masking.contiguous_mask(25, 0.8, 0))
        assert np.all(np.isfinite(out.data))

    def test_log_format_and_monotone_ratio(self, smoke_corpus, tmp_path):
        data_dir, manifest = smoke_corpus
        tcfg = training.TrainConfig(epochs=3, patience=3, batch_size=6)
        summary = training.train(manifest, data_dir, tcfg, SMOKE_MODEL,
                                 tmp_path / "run")
        lines = open(summary["log"]).read().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,mask_ratio,lr,seconds"
        ratios = [float(ln.split(",")[3]) for ln in lines[1:]]
        assert all(b >= a for a, b in zip(ratios, ratios[1:]))
        assert all(0.80 <= r <= 0.90 for r in ratios)

    def test_same_seed_same_log(self, smoke_corpus, tmp_path):
        data_dir, manifest = smoke_corpus
        tcfg = training.TrainConfig(epochs=2, patience=2, batch_size=6)
        logs = []
        for tag in ("a", "b"):
            s = training.train(manifest, data_dir, tcfg, SMOKE_MODEL,
                               tmp_path / tag)
            rows = [ln.rsplit(",", 1)[0]
                    for ln in open(s["log"]).read().splitlines()]
            logs.append(rows)
        assert logs[0] == logs[1]

    def test_same_seed_same_checkpoint(self, smoke_corpus, tmp_path):
        data_dir, manifest = smoke_corpus
        tcfg = training.TrainConfig(epochs=2, patience=2, batch_size=6,
                                    objective="mm_baseline",
                                    curriculum=False)
        blobs = []
        for tag in ("a", "b"):
            s = training.train(manifest, data_dir, tcfg, SMOKE_MODEL,
                               tmp_path / tag)
            blobs.append(open(s["checkpoint"], "rb").read())
        assert blobs[0] == blobs[1]
