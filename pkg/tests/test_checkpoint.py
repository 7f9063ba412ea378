import numpy as np
import pytest

from memaudit import checkpoint as ck


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        arrays = {"a": rng.standard_normal((3, 4)).astype(np.float32),
                  "b": rng.standard_normal(5), "c": np.zeros((0, 2), np.float32)}
        sha = ck.save_checkpoint(tmp_path / "m.ckpt", {"kind": "x", "epoch": 3}, arrays)
        header, back = ck.load_checkpoint(tmp_path / "m.ckpt")
        assert header["kind"] == "x" and header["epoch"] == 3
        assert sha == ck.file_sha256(tmp_path / "m.ckpt")
        for k, v in arrays.items():
            assert back[k].dtype == v.dtype and back[k].tobytes() == v.tobytes()

    def test_identical_inputs_identical_bytes(self, tmp_path, rng):
        arrays = {"w": rng.standard_normal(8).astype(np.float32)}
        a = ck.save_checkpoint(tmp_path / "a", {"k": 1}, arrays)
        b = ck.save_checkpoint(tmp_path / "b", {"k": 1}, arrays)
        assert a == b

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(ck.CheckpointError):
            ck.load_checkpoint(tmp_path / "x")

    def test_truncated(self, tmp_path, rng):
        ck.save_checkpoint(tmp_path / "m", {}, {"w": rng.standard_normal(100)})
        raw = (tmp_path / "m").read_bytes()
        (tmp_path / "m").write_bytes(raw[:-8])
        with pytest.raises(ck.CheckpointError):
            ck.load_checkpoint(tmp_path / "m")


class TestEmbeddingTable:
    def test_round_trip(self, tmp_path, rng):
        t = rng.standard_normal((4, 32)).astype(np.float32)
        ck.save_embedding_table(tmp_path / "e.emb", list("abcd"), t, "ckpt123")
        ids, back, header = ck.load_embedding_table(tmp_path / "e.emb")
        assert ids == list("abcd")
        assert header["dim"] == 32 and header["count"] == 4 and header["checkpoint"] == "ckpt123"
        assert back.tobytes() == t.tobytes()

    def test_shape_mismatch(self, tmp_path):
        with pytest.raises(ck.CheckpointError):
            ck.save_embedding_table(tmp_path / "e.emb", ["a"], np.zeros((2, 32)))
