"""Scene generator, image I/O, config files, and the CLI end to end."""

import dataclasses

import numpy as np
import pytest

from duosal import imgio
from duosal.cli import main
from duosal.config import ConfigError, load_config
from duosal.synth import (PACKED_FOCAL_CHANNELS, SyntheticSceneSpec,
                          _n_corrupted, generate_dataset, generate_scene)

TINY_INI = """\
[model]
input_hw = 32
branch_channels = 8,8,16,16
blocks_per_stage = 1,1,1,1
attention_heads = 2
window_size = 4
token_dim = 8
triple_it_depth = 1
ffn_ratio = 2

[train]
steps = 2
eval_every = 2
lr = 1e-4

[data]
n_samples = 4
n_objects = 2
noise_level = 0.02
"""


@pytest.fixture
def tiny_ini(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY_INI)
    return str(p)


class TestScenes:
    def test_same_spec_bit_identical(self):
        spec = SyntheticSceneSpec(seed=11, image_hw=(32, 32))
        a, b = generate_scene(spec), generate_scene(spec)
        for key in ("image", "supp", "gt"):
            assert np.array_equal(a[key], b[key]), key

    def test_different_seeds_differ(self):
        a = generate_scene(SyntheticSceneSpec(seed=0, image_hw=(32, 32)))
        b = generate_scene(SyntheticSceneSpec(seed=1, image_hw=(32, 32)))
        assert not np.array_equal(a["image"], b["image"])

    def test_no_objects_means_empty_mask(self):
        for modality in ("depth", "thermal", "focal_stack"):
            spec = SyntheticSceneSpec(seed=3, image_hw=(32, 32), n_objects=0,
                                      modality=modality)
            scene = generate_scene(spec)
            assert not scene["gt"].any(), modality

    def test_value_ranges_and_shapes(self):
        spec = SyntheticSceneSpec(seed=4, image_hw=(32, 48), n_objects=3)
        scene = generate_scene(spec)
        assert scene["image"].shape == (3, 32, 48)
        assert scene["supp"].shape == (1, 32, 48)
        assert scene["gt"].shape == (32, 48)
        for key in ("image", "supp"):
            assert scene[key].min() >= 0.0 and scene[key].max() <= 1.0
        assert set(np.unique(scene["gt"])) <= {0.0, 1.0}
        assert scene["gt"].any()

    def test_corrupted_count_rule(self):
        assert _n_corrupted(0.0, 3) == 0
        assert _n_corrupted(0.3, 3) == 1
        assert _n_corrupted(0.5, 2) == 1
        assert _n_corrupted(1.0, 5) == 5

    def test_full_supp_corruption_leaves_bare_floor(self):
        spec = SyntheticSceneSpec(seed=5, image_hw=(64, 64), n_objects=3,
                                  noise_level=0.0, supp_corruption=1.0)
        scene = generate_scene(spec)
        assert scene["gt"].any()
        assert scene["supp"].max() <= 0.25 + 1e-9   # floor ramp only

    def test_primary_corruption_keeps_gt_and_supp(self):
        spec = SyntheticSceneSpec(seed=6, image_hw=(64, 64), n_objects=3,
                                  noise_level=0.0, primary_corruption=1.0)
        scene = generate_scene(spec)
        assert scene["gt"].any()
        # objects absent from RGB but still raised in depth
        assert scene["supp"][0][scene["gt"] > 0].max() > 0.25

    def test_hidden_sets_drawn_independently(self):
        spec = SyntheticSceneSpec(seed=7, image_hw=(64, 64), n_objects=3,
                                  noise_level=0.0, primary_corruption=0.3,
                                  supp_corruption=0.3)
        base = dataclasses.replace(spec, primary_corruption=0.0,
                                   supp_corruption=0.0)
        # corruption knobs must not shift the rest of the stream: the
        # background and masks come out the same with and without hiding
        a, b = generate_scene(spec), generate_scene(base)
        assert np.array_equal(a["gt"], b["gt"])

    def test_focal_pack_and_dead_tail(self):
        spec = SyntheticSceneSpec(seed=8, image_hw=(32, 32),
                                  modality="focal_stack")
        scene = generate_scene(spec)
        assert scene["supp"].shape == (PACKED_FOCAL_CHANNELS, 32, 32)
        assert scene["supp"][:12].any()
        assert not scene["supp"][12:].any()

    def test_dataset_uses_consecutive_seeds(self):
        spec = SyntheticSceneSpec(seed=20, image_hw=(32, 32))
        images, supps, gts = generate_dataset(spec, 3)
        assert images.shape == (3, 3, 32, 32)
        assert supps.shape == (3, 1, 32, 32)
        assert gts.shape == (3, 1, 32, 32)
        third = generate_scene(dataclasses.replace(spec, seed=22))
        assert np.array_equal(images[2], third["image"])

    def test_bad_specs_rejected(self):
        with pytest.raises(ValueError, match="modality"):
            SyntheticSceneSpec(modality="sonar")
        with pytest.raises(ValueError):
            SyntheticSceneSpec(n_objects=-1)
        with pytest.raises(ValueError):
            SyntheticSceneSpec(supp_corruption=1.5)


class TestImageIO:
    def test_gray_roundtrip_quantizes(self, tmp_path):
        g = np.random.default_rng(0)
        x = g.random((9, 7))
        p = tmp_path / "x.png"
        imgio.save_gray(p, x)
        back = imgio.load_gray(p)
        assert back.shape == (9, 7)
        assert np.abs(back - x).max() <= 0.5 / 255 + 1e-12
        imgio.save_gray(p, back)           # second pass is lossless
        assert np.array_equal(imgio.load_gray(p), back)

    def test_rounds_half_up(self, tmp_path):
        p = tmp_path / "h.png"
        imgio.save_gray(p, np.array([[0.5 / 255, 0.49 / 255]]))
        assert np.array_equal(imgio.load_gray(p) * 255, [[1.0, 0.0]])

    def test_mask_threshold(self, tmp_path):
        p = tmp_path / "m.png"
        imgio.save_gray(p, np.array([[127 / 255, 128 / 255]]))
        assert np.array_equal(imgio.load_mask(p), [[0.0, 1.0]])

    def test_rgb_roundtrip(self, tmp_path):
        g = np.random.default_rng(1)
        x = g.random((3, 6, 5))
        p = tmp_path / "c.png"
        imgio.save_rgb(p, x)
        back = imgio.load_rgb(p)
        assert back.shape == (3, 6, 5)
        assert np.abs(back - x).max() <= 0.5 / 255 + 1e-12

    def test_pgm_accepted(self, tmp_path):
        p = tmp_path / "m.pgm"
        imgio.save_gray(p, np.array([[0.0, 1.0]]))
        assert np.array_equal(imgio.load_gray(p), [[0.0, 1.0]])


class TestConfigFiles:
    def test_minimal_file_uses_defaults(self, tmp_path):
        p = tmp_path / "min.ini"
        p.write_text("[train]\nsteps = 3\n")
        model, train = load_config(str(p))
        assert model.input_hw == (224, 224)
        assert train.steps == 3
        assert train.lr == 5e-5

    def test_unknown_section_rejected(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("[bogus]\nx = 1\n")
        with pytest.raises(ConfigError, match="bogus"):
            load_config(str(p))

    def test_tiny_preset_parses(self, tiny_ini):
        model, train = load_config(tiny_ini)
        assert model.input_hw == (32, 32)
        assert model.branch_channels == (8, 8, 16, 16)
        assert train.n_samples == 4


class TestCli:
    def test_gen_writes_deterministic_scenes(self, tmp_path, tiny_ini):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        args = ["gen", "--config", tiny_ini, "--seed", "5", "--count", "2"]
        assert main(args + ["--out", str(d1)]) == 0
        assert main(args + ["--out", str(d2)]) == 0
        names = sorted(p.name for p in d1.iterdir())
        assert names == ["gt_0000.png", "gt_0001.png", "image_0000.png",
                         "image_0001.png", "supp_0000.png", "supp_0001.png"]
        for name in names:
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes(), name

    def test_gen_seed_changes_output(self, tmp_path, tiny_ini):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        main(["gen", "--config", tiny_ini, "--seed", "5", "--count", "1",
              "--out", str(d1)])
        main(["gen", "--config", tiny_ini, "--seed", "6", "--count", "1",
              "--out", str(d2)])
        assert (d1 / "image_0000.png").read_bytes() != \
            (d2 / "image_0000.png").read_bytes()

    def test_gen_focal_stack_emits_npy(self, tmp_path, tiny_ini):
        d = tmp_path / "f"
        assert main(["gen", "--config", tiny_ini, "--modality", "focal_stack",
                     "--count", "1", "--out", str(d)]) == 0
        supp = np.load(d / "supp_0000.npy")
        assert supp.shape == (PACKED_FOCAL_CHANNELS, 32, 32)

    def test_train_eval_infer_chain(self, tmp_path, tiny_ini, capsys):
        run = tmp_path / "run"
        assert main(["train", "--config", tiny_ini, "--seed", "1",
                     "--out", str(run)]) == 0
        assert (run / "model.ckpt").exists()
        loss_rows = (run / "loss.csv").read_text().strip().splitlines()
        assert loss_rows[0] == "step,loss"
        assert len(loss_rows) == 3                  # header + 2 steps
        assert (run / "train_eval.csv").exists()

        ev = tmp_path / "ev"
        assert main(["eval", "--config", tiny_ini, "--ckpt",
                     str(run / "model.ckpt"), "--count", "2",
                     "--out", str(ev)]) == 0
        lines = (ev / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == "metric,value"
        got = dict(line.split(",") for line in lines[1:])
        assert set(got) == {"mae", "fmeasure", "smeasure", "emeasure"}
        for v in got.values():
            float(v)
        pr_rows = (ev / "pr.csv").read_text().strip().splitlines()
        assert len(pr_rows) == 257                  # header + 256 thresholds

        gen = tmp_path / "gen"
        main(["gen", "--config", tiny_ini, "--count", "1", "--out", str(gen)])
        out_png = tmp_path / "pred.png"
        assert main(["infer", "--ckpt", str(run / "model.ckpt"),
                     "--image", str(gen / "image_0000.png"),
                     "--supp", str(gen / "supp_0000.png"),
                     "--out", str(out_png)]) == 0
        pred = imgio.load_gray(out_png)
        assert pred.shape == (32, 32)
        assert pred.min() >= 0.0 and pred.max() <= 1.0

        svg = tmp_path / "pr.svg"
        assert main(["plot-pr", "--csv", str(ev / "pr.csv"),
                     "--out", str(svg)]) == 0
        text = svg.read_text()
        assert text.lstrip().startswith("<svg") and "polyline" in text

    def test_eval_perfect_prediction_dir(self, tmp_path):
        preds, gts_dir, out = tmp_path / "p", tmp_path / "g", tmp_path / "o"
        preds.mkdir(), gts_dir.mkdir()
        g = np.random.default_rng(2)
        for i in range(3):
            mask = (g.random((16, 16)) > 0.6).astype(float)
            imgio.save_gray(preds / f"{i}.png", mask)
            imgio.save_gray(gts_dir / f"{i}.png", mask)
        assert main(["eval", "--pred-dir", str(preds), "--gt-dir", str(gts_dir),
                     "--out", str(out)]) == 0
        got = dict(line.split(",") for line in
                   (out / "metrics.csv").read_text().strip().splitlines()[1:])
        assert got["mae"] == "0.000000"
        assert got["fmeasure"] == "1.000000"
        assert got["smeasure"] == "1.000000"
        assert got["emeasure"] == "1.000000"

    def test_eval_missing_ground_truth_is_config_error(self, tmp_path):
        preds, gts_dir = tmp_path / "p", tmp_path / "g"
        preds.mkdir(), gts_dir.mkdir()
        imgio.save_gray(preds / "a.png", np.zeros((8, 8)))
        assert main(["eval", "--pred-dir", str(preds), "--gt-dir", str(gts_dir),
                     "--out", str(tmp_path / "o")]) == 2

    def test_eval_without_inputs_is_config_error(self, tmp_path):
        assert main(["eval", "--out", str(tmp_path / "o")]) == 2

    def test_missing_checkpoint_is_exit_2(self, tmp_path):
        assert main(["eval", "--ckpt", str(tmp_path / "nope.ckpt"),
                     "--out", str(tmp_path / "o")]) == 2

    def test_non_checkpoint_file_is_exit_2(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"not a checkpoint at all")
        assert main(["eval", "--ckpt", str(p),
                     "--out", str(tmp_path / "o")]) == 2

    def test_bad_config_file_is_exit_2(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("[nonsense]\na = b\n")
        assert main(["gen", "--config", str(p),
                     "--out", str(tmp_path / "o")]) == 2

    def test_infer_wrong_image_size_is_exit_2(self, tmp_path, tiny_ini):
        run = tmp_path / "run"
        main(["train", "--config", tiny_ini, "--out", str(run)])
        big = tmp_path / "big.png"
        imgio.save_rgb(big, np.zeros((3, 64, 64)))
        supp = tmp_path / "supp.png"
        imgio.save_gray(supp, np.zeros((64, 64)))
        assert main(["infer", "--ckpt", str(run / "model.ckpt"),
                     "--image", str(big), "--supp", str(supp),
                     "--out", str(tmp_path / "x.png")]) == 2

    def test_divergence_maps_to_exit_3(self, tmp_path, tiny_ini, monkeypatch):
        from duosal.pipeline import TrainDivergenceError

        def blow_up(*a, **kw):
            raise TrainDivergenceError("synthetic failure")

        monkeypatch.setattr("duosal.cli.train_loop", blow_up)
        assert main(["train", "--config", tiny_ini,
                     "--out", str(tmp_path / "o")]) == 3
