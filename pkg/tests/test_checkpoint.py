import struct

import numpy as np
import pytest

from atmseg.checkpoint import (
    FormatError, assign_parameters, load_checkpoint, save_checkpoint,
)
from atmseg.config import RunConfig
from atmseg.data import image_to_input
from atmseg.model import build_model
from atmseg.tensor import Rng, Tensor


def tiny_model():
    cfg = RunConfig()
    cfg.set("encoder.width", "16").set("encoder.heads", "2")
    cfg.set("encoder.depth", "2").set("encoder.taps", "1,2")
    cfg.set("data.image_size", "16").set("data.classes", "3")
    return build_model(cfg.model_config(), 0), cfg


class TestByteLayout:
    def test_empty_model_header_only(self, tmp_path):
        path = str(tmp_path / "e.ckpt")
        save_checkpoint({}, path)
        blob = open(path, "rb").read()
        assert blob == b"SGV2" + struct.pack("<I", 1) + struct.pack("<I", 0)
        assert len(blob) == 12

    def test_one_tensor_hex_oracle(self, tmp_path):
        path = str(tmp_path / "one.ckpt")
        save_checkpoint({"w": Tensor(np.array([1.0, 2.0]))}, path)
        blob = open(path, "rb").read()
        expect = (
            b"SGV2"
            + bytes.fromhex("01000000")          # version 1
            + bytes.fromhex("01000000")          # one tensor
            + bytes.fromhex("01000000") + b"w"   # name
            + bytes.fromhex("01000000")          # rank 1
            + bytes.fromhex("0200000000000000")  # dim 2
            + bytes.fromhex("0000803f")          # 1.0f
            + bytes.fromhex("00000040")          # 2.0f
        )
        assert blob == expect

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(str(path))

    def test_truncation(self, tmp_path):
        good = tmp_path / "good.ckpt"
        save_checkpoint({"w": Tensor(np.ones(4))}, str(good))
        blob = good.read_bytes()
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(blob[:-3])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(str(bad))

    def test_bad_version(self, tmp_path):
        path = tmp_path / "v.ckpt"
        path.write_bytes(b"SGV2" + struct.pack("<I", 9) + struct.pack("<I", 0))
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(str(path))


class TestRoundTrip:
    def test_storage_precision(self, tmp_path):
        rng = Rng(0)
        table = {"a": Tensor(rng.normal((5, 3))), "b": Tensor(rng.normal((7,)))}
        path = str(tmp_path / "rt.ckpt")
        save_checkpoint(table, path)
        loaded, _, _ = load_checkpoint(path)
        for k, t in table.items():
            # float32 storage: exact to float32, 1e-6 relative to float64
            assert np.array_equal(loaded[k],
                                  t.data.astype(np.float32).astype(np.float64))
            assert np.abs(loaded[k] - t.data).max() < 1e-6

    def test_second_save_is_identity(self, tmp_path):
        # once quantized to storage precision, round-trips are bit-exact
        rng = Rng(1)
        table = {"w": Tensor(rng.normal((4, 4)))}
        p1, p2 = str(tmp_path / "1.ckpt"), str(tmp_path / "2.ckpt")
        save_checkpoint(table, p1)
        loaded, _, _ = load_checkpoint(p1)
        save_checkpoint({k: Tensor(v) for k, v in loaded.items()}, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_config_echo_and_rng_state(self, tmp_path):
        rng = Rng(123)
        rng.normal((7,))
        path = str(tmp_path / "meta.ckpt")
        save_checkpoint({"w": Tensor(np.zeros(2))}, path,
                        config_text="encoder.depth=4\n", rng=rng)
        table, text, restored = load_checkpoint(path)
        assert text == "encoder.depth=4\n"
        assert set(table) == {"w"}
        assert np.array_equal(restored.normal((9,)), rng.normal((9,)))

    def test_model_eval_outputs_close_after_roundtrip(self, tmp_path):
        model, cfg = tiny_model()
        rng = Rng(5)
        img = rng.uniform(0, 1, (16, 16, 3))
        before = model.forward(Tensor(img))["seg"].seg_scores.data.copy()
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(model, path, config_text=cfg.text())
        model2, _ = tiny_model()
        table, _, _ = load_checkpoint(path)
        assign_parameters(model2, table)
        after = model2.forward(Tensor(img))["seg"].seg_scores.data
        assert np.abs(after - before).max() < 1e-4  # float32 storage drift

    def test_assign_rejects_name_mismatch(self, tmp_path):
        model, _ = tiny_model()
        path = str(tmp_path / "m.ckpt")
        save_checkpoint({"bogus": Tensor(np.zeros(2))}, path)
        table, _, _ = load_checkpoint(path)
        with pytest.raises(FormatError):
            assign_parameters(model, table)
