"""Binary checkpoint format: round trips, validation and atomic writes."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conunetr.checkpoint import MAGIC, CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from conunetr.model import build_model, preset_config, unet_preset_config
from conunetr.training import AdamW


@pytest.fixture(scope="module")
def saved(tmp_path_factory):
    model = build_model(preset_config("tiny", seed=4))
    opt = AdamW(model.named_parameters(), lr=3e-4)
    for name, p in model.named_parameters():
        p.grad = np.full(p.shape, 0.01, dtype=np.float32)
    opt.step()
    path = save_checkpoint(tmp_path_factory.mktemp("ckpt") / "m.bin", model, opt, {"epoch": 3, "trained_ages": [0, 1]})
    return path, model, opt


class TestRoundTrip:
    def test_parameters_and_meta(self, saved):
        path, model, _ = saved
        loaded, meta = load_checkpoint(path)
        assert meta == {"epoch": 3, "trained_ages": [0, 1]}
        assert loaded.config == model.config
        ref = dict(model.named_parameters())
        for name, p in loaded.named_parameters():
            assert np.array_equal(p.data, ref[name].data)

    def test_optimizer_state(self, saved):
        path, model, opt = saved
        loaded, _ = load_checkpoint(path)
        opt2 = AdamW(loaded.named_parameters(), lr=3e-4)
        load_checkpoint(path, loaded, opt2)
        assert opt2.t == 1
        assert all(np.array_equal(opt2.m[n], opt.m[n]) and np.array_equal(opt2.v[n], opt.v[n]) for n in opt.m)

    def test_header_layout(self, saved):
        raw = saved[0].read_bytes()
        assert raw[:8] == MAGIC
        assert struct.unpack("<I", raw[8:12]) == (1,)
        assert read_checkpoint(saved[0])["optimizer"]["lr"] == 3e-4

    def test_unet(self, tmp_path):
        model = build_model(unet_preset_config("tiny"))
        loaded, meta = load_checkpoint(save_checkpoint(tmp_path / "u.bin", model))
        assert type(loaded) is type(model) and meta == {}

    def test_no_optimizer_state(self, tmp_path):
        model = build_model(preset_config("tiny"))
        path = save_checkpoint(tmp_path / "m.bin", model)
        with pytest.raises(CheckpointError, match="no optimizer state"):
            load_checkpoint(path, model, AdamW(model.named_parameters()))


class TestValidation:
    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            read_checkpoint(tmp_path / "none.bin")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"NOTACKPT" + bytes(16))
        with pytest.raises(CheckpointError, match="bad magic"):
            read_checkpoint(tmp_path / "x.bin")

    def test_version(self, saved, tmp_path):
        raw = bytearray(saved[0].read_bytes())
        raw[8:12] = struct.pack("<I", 9)
        (tmp_path / "v.bin").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version 9"):
            read_checkpoint(tmp_path / "v.bin")

    def test_trailing_bytes(self, saved, tmp_path):
        (tmp_path / "t.bin").write_bytes(saved[0].read_bytes() + b"\0")
        with pytest.raises(CheckpointError, match="trailing"):
            read_checkpoint(tmp_path / "t.bin")

    @settings(max_examples=25)
    @given(st.floats(0.0, 0.999))
    def test_truncation_detected_and_model_untouched(self, saved, tmp_path_factory, frac):
        path, _, _ = saved
        raw = path.read_bytes()
        cut = tmp_path_factory.mktemp("cut") / "c.bin"
        cut.write_bytes(raw[: int(len(raw) * frac)])
        target = build_model(preset_config("tiny", seed=99))
        before = {n: p.data.copy() for n, p in target.named_parameters()}
        with pytest.raises(CheckpointError):
            load_checkpoint(cut, target)
        assert all(np.array_equal(p.data, before[n]) for n, p in target.named_parameters())

    def test_architecture_mismatch_named(self, saved):
        other = build_model(preset_config("tiny", conditioning_mode="none"))
        with pytest.raises(CheckpointError, match="unexpected parameter.*age_tokens"):
            load_checkpoint(saved[0], other)

    def test_shape_mismatch_named(self, saved):
        other = build_model(preset_config("tiny", k_ages=4))
        with pytest.raises(CheckpointError, match="shape mismatch for age_tokens"):
            load_checkpoint(saved[0], other)

    def test_atomic_overwrite(self, saved, tmp_path, monkeypatch):
        path = tmp_path / "m.bin"
        path.write_bytes(saved[0].read_bytes())
        original = path.read_bytes()

        def boom(self, target):
            raise OSError("disk full")

        monkeypatch.setattr(type(path), "replace", boom)
        with pytest.raises(OSError):
            save_checkpoint(path, build_model(preset_config("tiny", seed=7)))
        assert path.read_bytes() == original
