"""Synthetic data generation, raster I/O, run configs, and the CLI surface."""

import json
from pathlib import Path

import numpy as np
import pytest

from magup.cli import main
from magup.config import (ABLATION_NAMES, apply_ablations, default_run_config,
                          load_run_config, model_config_from_run,
                          save_run_config)
from magup.checkpoint import load_checkpoint
from magup.data import (SynthConfig, augment, fit_to_size, gen_synthetic,
                        list_dataset, load_image, load_mask, load_pair,
                        save_mask)
from magup.errors import ConfigError, ContractError, DataError
from magup.rng import Rng


TINY_RUN = {
    "train": {"lr": 1e-3, "batch": 2, "epochs": 1, "seed": 0,
              "scale_factors": [1.0]},
    "encoder": {"image_size": 16, "patch_size": 8, "d_model": 8, "depth": 1,
                "heads": 2, "adapter": {"reduction": 2}},
    "bdc": {"attn_width": 4},
    "synth": {"count": 2, "image_size": 16, "seed": 1, "blob_count": [1, 1],
              "area_range": [0.02, 0.6]},
}


def write_tiny_config(tmp_path) -> str:
    path = tmp_path / "run.json"
    path.write_text(json.dumps(TINY_RUN))
    return str(path)


# -- synthetic data ---------------------------------------------------------------


class TestGeneration:
    def test_fixed_seed_reproduces_every_byte(self, tmp_path):
        cfg = SynthConfig(count=3, image_size=32, seed=5)
        ra = gen_synthetic(cfg, tmp_path / "a")
        rb = gen_synthetic(cfg, tmp_path / "b")
        for a, b in zip(ra, rb):
            assert Path(a.image_path).read_bytes() == \
                Path(b.image_path).read_bytes()
            assert Path(a.mask_path).read_bytes() == \
                Path(b.mask_path).read_bytes()

    def test_different_seeds_differ(self, tmp_path):
        a = gen_synthetic(SynthConfig(count=1, image_size=32, seed=0),
                          tmp_path / "a")
        b = gen_synthetic(SynthConfig(count=1, image_size=32, seed=1),
                          tmp_path / "b")
        assert Path(a[0].mask_path).read_bytes() != \
            Path(b[0].mask_path).read_bytes()

    def test_mask_areas_stay_in_configured_range(self, tmp_path):
        cfg = SynthConfig(count=30, image_size=48, seed=2,
                          area_range=(0.05, 0.35))
        for record in gen_synthetic(cfg, tmp_path / "d"):
            frac = load_mask(record.mask_path).mean()
            assert 0.05 <= frac <= 0.35

    def test_masks_are_binary_images_rgb(self, tmp_path):
        cfg = SynthConfig(count=2, image_size=32, seed=3)
        for record in gen_synthetic(cfg, tmp_path / "d"):
            image = load_image(record.image_path)
            mask = load_mask(record.mask_path)
            assert image.shape == (32, 32, 3)
            assert 0.0 <= image.min() and image.max() <= 1.0
            assert set(np.unique(mask)) <= {0.0, 1.0}

    def test_boundary_is_soft_in_the_image(self, tmp_path):
        # the rendered edge must be ambiguous: image gradient magnitude at
        # the mask boundary stays well below the mask's own step of 1
        cfg = SynthConfig(count=4, image_size=48, seed=4)
        for record in gen_synthetic(cfg, tmp_path / "d"):
            image = load_image(record.image_path).mean(axis=2)
            mask = load_mask(record.mask_path)
            edge = np.abs(np.diff(mask, axis=0))
            step = np.abs(np.diff(image, axis=0))[edge == 1]
            assert step.mean() < 0.5

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SynthConfig(count=0)
        with pytest.raises(ConfigError):
            SynthConfig(area_range=(0.4, 0.2))
        with pytest.raises(ConfigError):
            SynthConfig(blob_count=(0, 2))
        with pytest.raises(ConfigError):
            SynthConfig(area_range=(0.0, 0.5))


class TestRasterIO:
    def test_binary_mask_roundtrip(self, tmp_path):
        mask = (np.random.default_rng(0).random((9, 7)) < 0.5).astype(float)
        path = tmp_path / "m.png"
        save_mask(path, mask)
        assert np.array_equal(load_mask(path), mask)

    def test_probability_map_quantizes_to_8bit(self, tmp_path):
        values = np.linspace(0.0, 1.0, 64).reshape(8, 8)
        path = tmp_path / "p.png"
        save_mask(path, values)
        from magup.data import _decode
        raw = _decode(path, "L")
        assert np.array_equal(raw, (values * 255.0).round())

    def test_missing_file_is_data_error(self, tmp_path):
        with pytest.raises(DataError):
            load_image(tmp_path / "absent.png")

    def test_undecodable_file_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not a png")
        with pytest.raises(DataError):
            load_mask(bad)


class TestDatasetListing:
    def test_pairs_sorted_by_name(self, tmp_path):
        gen_synthetic(SynthConfig(count=3, image_size=16, blob_count=(1, 1),
                                  area_range=(0.02, 0.6), seed=0), tmp_path)
        records = list_dataset(tmp_path)
        names = [Path(r.image_path).name for r in records]
        assert names == sorted(names)
        assert all(Path(r.image_path).name == Path(r.mask_path).name
                   for r in records)

    def test_orphan_image_rejected(self, tmp_path):
        gen_synthetic(SynthConfig(count=1, image_size=16, blob_count=(1, 1),
                                  area_range=(0.02, 0.6), seed=0), tmp_path)
        (tmp_path / "masks" / "0000.png").unlink()
        with pytest.raises(DataError):
            list_dataset(tmp_path)

    def test_missing_directory_rejected(self, tmp_path):
        with pytest.raises(DataError):
            list_dataset(tmp_path / "nowhere")

    def test_empty_dataset_rejected(self, tmp_path):
        (tmp_path / "images").mkdir(parents=True)
        (tmp_path / "masks").mkdir()
        with pytest.raises(DataError):
            list_dataset(tmp_path)

    def test_extent_mismatch_rejected(self, tmp_path):
        gen_synthetic(SynthConfig(count=1, image_size=16, blob_count=(1, 1),
                                  area_range=(0.02, 0.6), seed=0), tmp_path)
        save_mask(tmp_path / "masks" / "0000.png", np.zeros((8, 8)))
        with pytest.raises(DataError):
            load_pair(list_dataset(tmp_path)[0])


class TestAugment:
    def sample(self, size=24):
        rng = np.random.default_rng(1)
        image = rng.random((size, size, 3))
        mask = np.zeros((size, size))
        mask[4:12, 6:14] = 1.0
        return image, mask

    def test_unit_scale_passes_through(self):
        image, mask = self.sample()
        out_i, out_m = augment(image, mask, Rng(0), (1.0,), 24)
        assert np.array_equal(out_i, image)
        assert np.array_equal(out_m, mask)

    def test_upscale_crops_back_to_size(self):
        image, mask = self.sample()
        out_i, out_m = augment(image, mask, Rng(1), (1.25,), 24)
        assert out_i.shape == (24, 24, 3)
        assert out_m.shape == (24, 24)
        assert set(np.unique(out_m)) <= {0.0, 1.0}

    def test_downscale_fits_back_to_size(self):
        image, mask = self.sample()
        out_i, out_m = augment(image, mask, Rng(2), (0.75,), 24)
        assert out_i.shape == (24, 24, 3)
        assert set(np.unique(out_m)) <= {0.0, 1.0}

    def test_scale_choice_is_seed_deterministic(self):
        image, mask = self.sample()
        a = augment(image, mask, Rng(3), (0.75, 1.0, 1.25), 24)
        b = augment(image, mask, Rng(3), (0.75, 1.0, 1.25), 24)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_fit_to_size_resizes_both(self):
        image, mask = self.sample(20)
        out_i, out_m = fit_to_size(image, mask, 16)
        assert out_i.shape == (16, 16, 3)
        assert out_m.shape == (16, 16)
        assert set(np.unique(out_m)) <= {0.0, 1.0}


# -- run configuration -------------------------------------------------------------


class TestRunConfig:
    def test_file_roundtrip(self, tmp_path):
        cfg = default_run_config()
        cfg.train.lr = 0.5
        cfg.encoder.adapter.reduction = 2
        path = tmp_path / "cfg.json"
        save_run_config(cfg, path)
        loaded = load_run_config(path)
        assert loaded.train.lr == 0.5
        assert loaded.encoder.adapter.reduction == 2
        assert isinstance(loaded.train.scale_factors, tuple)

    def test_missing_keys_use_defaults(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text('{"train": {"lr": 0.25}}')
        cfg = load_run_config(path)
        assert cfg.train.lr == 0.25
        assert cfg.train.batch == 8
        assert cfg.encoder.image_size == 352

    def test_unknown_key_rejected_with_location(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text('{"encoder": {"adapter": {"reductoin": 2}}}')
        with pytest.raises(ConfigError, match="config.encoder.adapter"):
            load_run_config(path)

    def test_null_clears_optional_sections(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text('{"bdc": null, "encoder": {"adapter": null}}')
        cfg = load_run_config(path)
        assert cfg.bdc is None
        assert cfg.encoder.adapter is None

    def test_null_on_required_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text('{"train": {"lr": null}}')
        with pytest.raises(ConfigError):
            load_run_config(path)

    def test_invalid_json_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_run_config(path)

    def test_model_config_inherits_train_seed(self):
        cfg = default_run_config()
        cfg.train.seed = 9
        assert model_config_from_run(cfg).seed == 9


class TestAblations:
    def test_each_toggle_lands(self):
        cfg = apply_ablations(default_run_config(), ["msd"])
        assert cfg.encoder.adapter.msd is False
        cfg = apply_ablations(default_run_config(), ["1dmamba", "2dmamba"])
        assert cfg.encoder.adapter.mamba1d is False
        assert cfg.encoder.adapter.mamba2d is False
        cfg = apply_ablations(default_run_config(), ["bdc"])
        assert cfg.bdc is None

    def test_names_are_documented(self):
        assert ABLATION_NAMES == ("msd", "1dmamba", "2dmamba", "bdc")

    def test_unknown_name_rejected(self):
        with pytest.raises(ConfigError):
            apply_ablations(default_run_config(), ["mds"])

    def test_ablating_absent_adapter_rejected(self):
        cfg = default_run_config()
        cfg.encoder.adapter = None
        with pytest.raises(ConfigError):
            apply_ablations(cfg, ["msd"])


# -- command-line surface -----------------------------------------------------------


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """One generated dataset + one trained checkpoint shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.json"
    config.write_text(json.dumps(TINY_RUN))
    data = root / "data"
    assert main(["gen", "--config", str(config), "--out", str(data)]) == 0
    ckpt1 = root / "s1.ckpt"
    assert main(["train", "--stage", "1", "--config", str(config),
                 "--data", str(data), "--out", str(ckpt1)]) == 0
    ckpt2 = root / "s2.ckpt"
    assert main(["train", "--stage", "2", "--config", str(config),
                 "--data", str(data), "--out", str(ckpt2),
                 "--init", str(ckpt1)]) == 0
    return {"root": root, "config": config, "data": data,
            "ckpt1": ckpt1, "ckpt2": ckpt2}


class TestCli:
    def test_gen_writes_the_requested_count(self, cli_workspace):
        images = list((cli_workspace["data"] / "images").glob("*.png"))
        assert len(images) == 2

    def test_gen_overrides(self, tmp_path, capsys):
        out = tmp_path / "d"
        code = main(["gen", "--out", str(out), "--count", "1",
                     "--size", "16", "--seed", "3"])
        assert code == 0
        assert "wrote 1" in capsys.readouterr().out
        assert load_image(next((out / "images").glob("*.png"))).shape \
            == (16, 16, 3)

    def test_train_reports_steps_and_writes_checkpoint(self, cli_workspace,
                                                       capsys):
        model, header = load_checkpoint(cli_workspace["ckpt1"])
        assert model.cfg.encoder.image_size == 16
        assert any(e["name"].startswith("bdc.")
                   for e in header["manifest"])

    def test_train_stage2_continues_from_init(self, cli_workspace):
        m1, _ = load_checkpoint(cli_workspace["ckpt1"])
        m2, _ = load_checkpoint(cli_workspace["ckpt2"])
        p1, p2 = dict(m1.named_params()), dict(m2.named_params())
        assert np.array_equal(p1["head.proj.w"].data, p2["head.proj.w"].data)
        assert not np.array_equal(p1["decoder.token"].data,
                                  p2["decoder.token"].data)

    def test_train_ablation_flag_drops_bdc(self, cli_workspace, tmp_path):
        out = tmp_path / "ablated.ckpt"
        code = main(["train", "--stage", "1",
                     "--config", str(cli_workspace["config"]),
                     "--data", str(cli_workspace["data"]),
                     "--out", str(out), "--ablate", "bdc,msd"])
        assert code == 0
        model, header = load_checkpoint(out)
        assert model.distiller is None
        assert model.cfg.encoder.adapter.msd is False

    def test_eval_prints_aligned_table_and_csv(self, cli_workspace, tmp_path,
                                               capsys):
        csv_path = tmp_path / "report.csv"
        code = main(["eval", "--ckpt", str(cli_workspace["ckpt2"]),
                     "--data", str(cli_workspace["data"]),
                     "--csv", str(csv_path)])
        assert code == 0
        out = capsys.readouterr().out
        assert out.splitlines()[0].split() == \
            ["mDice", "mIoU", "wFm", "Sm", "Em", "MAE_x100"]
        assert "(n=2)" in out
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "mDice,mIoU,wFm,Sm,Em,MAE_x100"
        assert len(lines[1].split(",")) == 6

    def test_infer_writes_mask_of_input_extents(self, cli_workspace, tmp_path,
                                                capsys):
        image_path = next((cli_workspace["data"] / "images").glob("*.png"))
        out = tmp_path / "pred.png"
        code = main(["infer", "--ckpt", str(cli_workspace["ckpt2"]),
                     "--image", str(image_path), "--out", str(out)])
        assert code == 0
        pred = load_image(out)
        assert pred.shape[:2] == load_image(image_path).shape[:2]

    def test_infer_resizes_foreign_extents(self, cli_workspace, tmp_path):
        rgb = (np.random.default_rng(5).random((20, 28, 3)) * 255)
        from PIL import Image
        src = tmp_path / "in.png"
        Image.fromarray(rgb.astype(np.uint8), mode="RGB").save(src)
        out = tmp_path / "pred.png"
        assert main(["infer", "--ckpt", str(cli_workspace["ckpt2"]),
                     "--image", str(src), "--out", str(out)]) == 0
        from magup.data import _decode
        assert _decode(out, "L").shape == (20, 28)

    def test_metrics_scores_prediction_directory(self, cli_workspace, capsys):
        masks = str(cli_workspace["data"] / "masks")
        code = main(["metrics", "--pred-dir", masks, "--gt-dir", masks])
        assert code == 0
        out = capsys.readouterr().out
        row = out.splitlines()[1].split()
        assert [float(v) for v in row] == [1.0, 1.0, 1.0, 1.0, 1.0, 0.0]


class TestCliErrors:
    def test_missing_dataset_fails_cleanly(self, tmp_path, capsys):
        code = main(["train", "--stage", "1", "--data",
                     str(tmp_path / "none"), "--out", str(tmp_path / "x.ckpt")])
        assert code == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_corrupt_checkpoint_fails_cleanly(self, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"junk")
        code = main(["eval", "--ckpt", str(bad), "--data", str(tmp_path)])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_unknown_ablation_fails_cleanly(self, cli_workspace, tmp_path,
                                            capsys):
        code = main(["train", "--stage", "1",
                     "--config", str(cli_workspace["config"]),
                     "--data", str(cli_workspace["data"]),
                     "--out", str(tmp_path / "x.ckpt"), "--ablate", "nope"])
        assert code == 1
        assert "unknown ablation" in capsys.readouterr().err

    def test_bad_config_fails_cleanly(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text('{"train": {"lr": -1}}')
        code = main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")])
        assert code == 1
        assert "error:" in capsys.readouterr().err
