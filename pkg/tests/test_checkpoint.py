"""On-disk artifact round trips: PTNS tensors and PICK checkpoints for the
backbone and codec, including their config payloads."""

import numpy as np
import pytest

from picm.codec import CodecConfig, CodecModel
from picm.diffcore.checkpoint import CheckpointError, load_pick, save_pick
from picm.diffcore.tensor import Tensor
from picm.pipeline import load_backbone, load_codec, save_backbone, save_codec
from picm.ptns import TensorFileError, load_ptns, save_ptns
from picm.tasks import BackboneConfig, StagedBackbone


class TestPtns:
    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.normal(size=(2, 3, 5, 7)).astype(np.float32)
        path = tmp_path / "t.ptns"
        save_ptns(path, arr)
        assert np.array_equal(load_ptns(path), arr)

    def test_scalar_coerces_to_1d(self, tmp_path):
        path = tmp_path / "t.ptns"
        save_ptns(path, np.float32(3.5))
        assert load_ptns(path).shape == (1,)
        save_ptns(path, np.arange(4, dtype=np.float32))
        assert np.array_equal(load_ptns(path), [0, 1, 2, 3])

    def test_float64_input_is_stored_as_f32(self, tmp_path):
        path = tmp_path / "t.ptns"
        save_ptns(path, np.array([1.0, 2.0], dtype=np.float64))
        assert load_ptns(path).dtype == np.float32

    def test_malformed_files(self, tmp_path):
        bad = tmp_path / "bad.ptns"
        bad.write_bytes(b"NOPE")
        with pytest.raises(TensorFileError):
            load_ptns(bad)
        bad.write_bytes(b"PTNS\x07\x01" + b"\x04\x00\x00\x00" + b"\x00" * 16)
        with pytest.raises(TensorFileError):
            load_ptns(bad)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.ptns"
        save_ptns(path, np.ones((4, 4), dtype=np.float32))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(TensorFileError):
            load_ptns(path)


class TestPick:
    def test_roundtrip_and_order_independence(self, tmp_path):
        rng = np.random.default_rng(1)
        arrays = {"a/w": rng.normal(size=(3, 4)).astype(np.float32),
                  "b/b": rng.normal(size=(7,)).astype(np.float32)}
        path = tmp_path / "c.pick"
        save_pick(path, arrays)
        back = load_pick(path)
        assert set(back) == set(arrays)
        for k in arrays:
            assert np.array_equal(back[k], arrays[k])

    def test_corruption_detected(self, tmp_path):
        path = tmp_path / "c.pick"
        save_pick(path, {"w": np.ones(16, dtype=np.float32)})
        blob = bytearray(path.read_bytes())
        blob[-5] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            load_pick(path)

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "c.pick"
        save_pick(path, {"w": np.ones(16, dtype=np.float32)})
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError):
            load_pick(path)


class TestModelCheckpoints:
    def test_backbone_roundtrip_preserves_function(self, tmp_path):
        cfg = BackboneConfig(feature_gain=2.5)
        bb = StagedBackbone(np.random.default_rng(2), cfg)
        path = tmp_path / "bb.pick"
        save_backbone(path, bb)
        back = load_backbone(path)
        assert back.cfg == cfg
        x = Tensor(np.random.default_rng(3).normal(size=(1, 3, 32, 32)).astype(np.float32))
        assert np.array_equal(bb.extract_general(x).data, back.extract_general(x).data)

    def test_codec_roundtrip_preserves_state(self, tmp_path):
        cfg = CodecConfig(in_channels=8, base=12, latent=16, hyper=6,
                          cond_width=6, w_width=10)
        codec = CodecModel(np.random.default_rng(4), cfg)
        path = tmp_path / "c.pick"
        save_codec(path, codec)
        back = load_codec(path)
        assert back.cfg == cfg
        before = codec.state_dict()
        after = back.state_dict()
        assert before.keys() == after.keys()
        for key in before:
            assert np.array_equal(before[key], after[key]), key

    def test_wrong_kind_of_checkpoint_rejected(self, tmp_path):
        bb = StagedBackbone(np.random.default_rng(5))
        path = tmp_path / "bb.pick"
        save_backbone(path, bb)
        with pytest.raises(KeyError):
            load_codec(path)
