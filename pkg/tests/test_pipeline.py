"""Model assembly, checkpoint format, accounting, training loop."""

import numpy as np
import pytest

from duosal.config import ModelConfig, TrainConfig
from duosal.pipeline import (CheckpointConfigError, CheckpointFormatError,
                             CheckpointKeyError, CheckpointVersionError,
                             Model, TrainDivergenceError, count_params_flops,
                             default_toy_config, load_checkpoint,
                             read_checkpoint, save_checkpoint, train_loop)
from duosal.synth import SyntheticSceneSpec, generate_dataset
from duosal.tensor import ShapeError, Tensor


def tiny_cfg(**kw):
    base = dict(input_hw=(32, 32), branch_channels=(8, 8, 16, 16),
                blocks_per_stage=(1, 1, 1, 1), attention_heads=2,
                window_size=4, token_dim=8, triple_it_depth=1, ffn_ratio=2)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def tiny_model():
    return Model(tiny_cfg(), seed=0)


class TestModel:
    def test_forward_shape_and_prob_range(self, tiny_model):
        g = np.random.default_rng(0)
        im = Tensor(g.random((2, 3, 32, 32)))
        sp = Tensor(g.random((2, 1, 32, 32)))
        logits = tiny_model(im, sp)
        assert logits.shape == (2, 1, 32, 32)
        probs = tiny_model.predict_prob(im, sp)
        assert probs.shape == (2, 1, 32, 32)
        assert probs.min() >= 0.0 and probs.max() <= 1.0

    def test_same_seed_same_parameters(self):
        a = Model(tiny_cfg(), seed=7)
        b = Model(tiny_cfg(), seed=7)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data), na

    def test_different_seed_different_parameters(self):
        a = Model(tiny_cfg(), seed=0)
        b = Model(tiny_cfg(), seed=1)
        diffs = sum(not np.array_equal(pa.data, pb.data)
                    for (_, pa), (_, pb) in zip(a.named_parameters(),
                                                b.named_parameters()))
        assert diffs > 10

    def test_parameter_names_unique(self, tiny_model):
        names = [n for n, _ in tiny_model.named_parameters()]
        assert len(names) == len(set(names))

    def test_batch_mismatch_rejected(self, tiny_model):
        with pytest.raises(ShapeError, match="batch"):
            tiny_model(Tensor(np.zeros((2, 3, 32, 32))),
                       Tensor(np.zeros((1, 1, 32, 32))))

    def test_spatial_mismatch_rejected(self, tiny_model):
        with pytest.raises(ShapeError, match="spatial"):
            tiny_model(Tensor(np.zeros((1, 3, 32, 32))),
                       Tensor(np.zeros((1, 1, 64, 64))))


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tiny_model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, tiny_model, step=123)
        fresh = Model(tiny_cfg(), seed=99)
        step = load_checkpoint(path, fresh)
        assert step == 123
        saved = dict(tiny_model.named_parameters())
        for name, p in fresh.named_parameters():
            assert np.array_equal(p.data, saved[name].data), name
        g = np.random.default_rng(1)
        im = Tensor(g.random((1, 3, 32, 32)))
        sp = Tensor(g.random((1, 1, 32, 32)))
        assert np.array_equal(tiny_model(im, sp).data, fresh(im, sp).data)

    def test_config_text_stored(self, tiny_model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, tiny_model, step=5)
        cfg_text, step, arrays = read_checkpoint(path)
        assert cfg_text == tiny_model.config.canonical_text()
        assert step == 5
        assert len(arrays) == len(tiny_model.named_parameters())

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointFormatError, match="magic"):
            read_checkpoint(path)

    def test_truncation(self, tiny_model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, tiny_model)
        blob = path.read_bytes()
        for cut in (2, 9, len(blob) // 2, len(blob) - 3):
            short = tmp_path / f"cut{cut}.ckpt"
            short.write_bytes(blob[:cut])
            with pytest.raises(CheckpointFormatError):
                read_checkpoint(short)

    def test_trailing_bytes_rejected(self, tiny_model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, tiny_model)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(CheckpointFormatError, match="trailing"):
            read_checkpoint(path)

    def test_unknown_version(self, tiny_model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, tiny_model)
        blob = bytearray(path.read_bytes())
        blob[4] = 9                                  # version field
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointVersionError):
            read_checkpoint(path)

    def test_config_mismatch(self, tiny_model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, tiny_model)
        other = Model(tiny_cfg(token_dim=16), seed=0)
        with pytest.raises(CheckpointConfigError):
            load_checkpoint(path, other)

    def test_key_mismatch_without_config_guard(self, tiny_model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, tiny_model)
        other = Model(tiny_cfg(blocks_per_stage=(2, 1, 1, 1)), seed=0)
        with pytest.raises(CheckpointKeyError):
            load_checkpoint(path, other, expect_config=False)

    def test_shape_mismatch_without_config_guard(self, tiny_model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, tiny_model)
        other = Model(tiny_cfg(branch_channels=(16, 16, 16, 16)), seed=0)
        with pytest.raises(CheckpointKeyError, match="shape"):
            load_checkpoint(path, other, expect_config=False)


class TestAccounting:
    def test_param_count_is_sum_of_named(self, tiny_model):
        n, _ = count_params_flops(tiny_model)
        assert n == sum(p.size for _, p in tiny_model.named_parameters())

    def test_flops_positive_and_repeatable(self, tiny_model):
        _, f1 = count_params_flops(tiny_model)
        _, f2 = count_params_flops(tiny_model)
        assert f1 > 0 and f1 == f2

    def test_flops_scale_with_batch(self, tiny_model):
        _, f1 = count_params_flops(tiny_model, batch=1)
        _, f2 = count_params_flops(tiny_model, batch=2)
        assert f2 == 2 * f1


class TestTrainLoop:
    def make_data(self, n=6):
        spec = SyntheticSceneSpec(seed=0, image_hw=(32, 32), n_objects=2,
                                  noise_level=0.02)
        im, sp, gt = generate_dataset(spec, n)
        return im.astype(np.float32), sp.astype(np.float32), gt

    def test_smoke_run_records_history(self):
        im, sp, gt = self.make_data()
        model = Model(tiny_cfg(), seed=0)
        cfg = TrainConfig(seed=0, steps=4, lr=1e-4, batch_size=3,
                          eval_every=2, target_mae=0.0)
        hist = train_loop(model, im, sp, gt, cfg)
        assert hist["steps"] == [1, 2, 3, 4]
        assert all(np.isfinite(v) for v in hist["loss"])
        assert hist["eval_steps"] == [2, 4]
        assert len(hist["mae"]) == 2 and len(hist["fmeasure"]) == 2

    def test_loss_moves_downhill(self):
        im, sp, gt = self.make_data()
        model = Model(tiny_cfg(), seed=0)
        cfg = TrainConfig(seed=0, steps=30, lr=3e-4, batch_size=6,
                          eval_every=0, target_mae=0.0)
        hist = train_loop(model, im, sp, gt, cfg)
        assert np.mean(hist["loss"][-5:]) < np.mean(hist["loss"][:5])

    def test_divergence_is_reported(self):
        im, sp, gt = self.make_data()
        im[0, 0, 0, 0] = np.inf
        model = Model(tiny_cfg(), seed=0)
        cfg = TrainConfig(seed=0, steps=2, lr=1e-4, batch_size=6,
                          eval_every=0, target_mae=0.0)
        with pytest.raises(TrainDivergenceError):
            train_loop(model, im, sp, gt, cfg)

    def test_early_stop_on_targets(self):
        im, sp, gt = self.make_data()
        model = Model(tiny_cfg(), seed=0)
        # impossible-to-miss targets: stops at the first eval point
        cfg = TrainConfig(seed=0, steps=50, lr=1e-4, batch_size=6,
                          eval_every=2, target_mae=1.0, target_fmeasure=0.0)
        hist = train_loop(model, im, sp, gt, cfg)
        assert hist["steps"][-1] == 2


class TestToyConfig:
    def test_defaults(self):
        cfg = default_toy_config()
        assert cfg.input_hw == (64, 64)
        assert cfg.branch_channels == (16, 32, 64, 128)
        assert cfg.token_dim == 64

    def test_overrides(self):
        cfg = default_toy_config(token_dim=32)
        assert cfg.token_dim == 32
