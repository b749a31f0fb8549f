"""Checkpoint container: roundtrip fidelity, corruption detection, stripping."""

import numpy as np
import pytest

from magup.adapter import MaGuPConfig
from magup.bdc import BDCConfig
from magup.checkpoint import MAGIC, load_checkpoint, save_checkpoint, strip_bdc
from magup.errors import CheckpointError
from magup.model import EncoderConfig, ModelConfig, SegModel, TrainConfig, \
    train_stage


def small_model(seed=0, bdc=BDCConfig(attn_width=4)):
    enc = EncoderConfig(image_size=16, patch_size=8, d_model=8, depth=1,
                        heads=2, adapter=MaGuPConfig(reduction=2))
    return SegModel(ModelConfig(encoder=enc, bdc=bdc, seed=seed))


def trained_model(seed=0):
    model = small_model(seed)
    rng = np.random.default_rng(seed)
    samples = [(rng.random((16, 16, 3)),
                (rng.random((16, 16)) < 0.5).astype(np.float64))]
    train_stage(model, samples,
                    TrainConfig(stage=1, lr=1e-3, batch=1, epochs=2,
                                               seed=seed, scale_factors=(1.0,)))
    return model


class TestRoundTrip:
    def test_loaded_params_match_saved_f32(self, tmp_path):
        model = trained_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        loaded, header = load_checkpoint(path)
        for (na, pa), (nb, pb) in zip(model.named_params(),
                                      loaded.named_params()):
            assert na == nb
            assert np.array_equal(pa.data.astype(np.float32), pb.data)
        assert header["version"] == 1

    def test_resave_is_byte_identical(self, tmp_path):
        model = trained_model(1)
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(model, a)
        loaded, _ = load_checkpoint(a)
        save_checkpoint(loaded, b)
        assert a.read_bytes() == b.read_bytes()

    def test_loaded_model_infers_identically(self, tmp_path):
        model = trained_model(2)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        # quantize the live model the same way the file does
        for _, p in model.named_params():
            p.assign(p.data.astype(np.float32).astype(np.float64))
        loaded, _ = load_checkpoint(path)
        image = np.random.default_rng(2).random((16, 16, 3))
        assert np.array_equal(model.infer(image), loaded.infer(image))

    def test_config_travels_with_weights(self, tmp_path):
        model = small_model(3)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        loaded, _ = load_checkpoint(path)
        assert loaded.cfg.encoder.image_size == 16
        assert loaded.cfg.encoder.adapter.reduction == 2
        assert loaded.cfg.bdc.attn_width == 4


class TestCorruption:
    def write(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small_model(), path)
        return path, bytearray(path.read_bytes())

    def test_bad_magic(self, tmp_path):
        path, raw = self.write(tmp_path)
        raw[:3] = b"XXX"
        path.write_bytes(raw)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_flipped_header_byte(self, tmp_path):
        path, raw = self.write(tmp_path)
        at = raw.index(b'"manifest"')
        raw[at + 1] ^= 0x20
        path.write_bytes(raw)
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_truncated_blob(self, tmp_path):
        path, raw = self.write(tmp_path)
        path.write_bytes(raw[:-16])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_truncated_header(self, tmp_path):
        path, raw = self.write(tmp_path)
        path.write_bytes(raw[: len(MAGIC) + 40])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_not_a_checkpoint_at_all(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"hello world\n" * 10)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)


class TestStripBdc:
    def test_strip_removes_params_and_config(self, tmp_path):
        model = trained_model(4)
        full, bare = tmp_path / "full.ckpt", tmp_path / "bare.ckpt"
        save_checkpoint(model, full)
        strip_bdc(full, bare)
        loaded, header = load_checkpoint(bare)
        assert loaded.distiller is None
        assert not any(e["name"].startswith("bdc.")
                       for e in header["manifest"])
        assert bare.stat().st_size < full.stat().st_size

    def test_strip_preserves_inference_bit_exactly(self, tmp_path):
        model = trained_model(5)
        full, bare = tmp_path / "full.ckpt", tmp_path / "bare.ckpt"
        save_checkpoint(model, full)
        strip_bdc(full, bare)
        with_bdc, _ = load_checkpoint(full)
        without, _ = load_checkpoint(bare)
        for i in range(3):
            image = np.random.default_rng(10 + i).random((16, 16, 3))
            assert np.array_equal(with_bdc.infer(image), without.infer(image))

    def test_strip_is_idempotent_on_bdc_free_files(self, tmp_path):
        model = small_model(6, bdc=None)
        src, dst = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(model, src)
        strip_bdc(src, dst)
        assert src.read_bytes() == dst.read_bytes()
