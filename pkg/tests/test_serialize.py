import numpy as np
import pytest
from numpy.random import default_rng

from occlufit import serialize
from occlufit.dbm import JointLayerParams, ShapeDbmParams, TextureDbmParams
from occlufit.geometry import build_reference_frame
from occlufit.rbm import BinaryRbmParams, GaussianRbmParams
from occlufit.rdbm import RdbmParams
from occlufit.serialize import (ContainerError, load_container,
                                pack_container, save_container,
                                unpack_container)


def _gaussian(rng, n_vis, n_hid):
    return GaussianRbmParams(rng.normal(size=(n_vis, n_hid)),
                             rng.normal(size=n_vis),
                             np.abs(rng.normal(size=n_vis)) + 0.5,
                             rng.normal(size=n_hid))


def _binary(rng, n_vis, n_hid):
    return BinaryRbmParams(rng.normal(size=(n_vis, n_hid)),
                           rng.normal(size=n_vis),
                           rng.normal(size=n_hid))


class TestContainer:
    def test_pack_unpack_round_trip(self):
        rng = default_rng(0)
        arrays = {"a": rng.normal(size=(3, 4)),
                  "b": np.arange(5, dtype=np.int64)}
        kind, back, meta = unpack_container(
            pack_container("demo", arrays, {"note": "x"}))
        assert kind == "demo"
        assert meta == {"note": "x"}
        np.testing.assert_array_equal(back["a"], arrays["a"])
        np.testing.assert_array_equal(back["b"], arrays["b"])
        assert back["b"].dtype == np.int64

    def test_pack_is_deterministic(self):
        arrays = {"w": np.ones((2, 2)), "b": np.zeros(2)}
        assert pack_container("demo", arrays) == pack_container("demo",
                                                                arrays)

    def test_bad_magic_raises(self):
        blob = pack_container("demo", {"a": np.ones(2)})
        with pytest.raises(ContainerError, match="magic"):
            unpack_container(b"NOTMAGIC" + blob[8:])

    def test_corrupt_payload_raises(self):
        blob = bytearray(pack_container("demo", {"a": np.ones(8)}))
        blob[30] ^= 0xFF
        with pytest.raises(ContainerError, match="checksum"):
            unpack_container(bytes(blob))

    def test_unknown_version_raises(self):
        import struct
        blob = bytearray(pack_container("demo", {"a": np.ones(2)}))
        struct.pack_into("<I", blob, 8, 99)
        body = bytes(blob[8:-4])
        import zlib
        crc = struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
        with pytest.raises(ContainerError, match="version"):
            unpack_container(serialize.MAGIC + body + crc)

    def test_truncated_file_raises(self):
        with pytest.raises(ContainerError):
            unpack_container(b"OCFL")

    def test_save_load_file(self, tmp_path):
        path = tmp_path / "model.bin"
        save_container(path, "demo", {"a": np.full(3, 7.0)})
        kind, arrays, meta = load_container(path)
        assert kind == "demo"
        np.testing.assert_array_equal(arrays["a"], [7.0, 7.0, 7.0])
        assert not list(tmp_path.glob("*.tmp"))


class TestModelRoundTrips:
    def test_dbm_save_load_save_identical(self, tmp_path):
        rng = default_rng(1)
        p = ShapeDbmParams(_gaussian(rng, 10, 6), _binary(rng, 6, 3))
        path = tmp_path / "shape.bin"
        serialize.save_dbm(path, p, "shape-dbm", {"epochs": 5})
        first = path.read_bytes()
        back, meta = serialize.load_dbm(path)
        assert isinstance(back, ShapeDbmParams)
        assert meta == {"epochs": 5}
        serialize.save_dbm(path, back, "shape-dbm", meta)
        assert path.read_bytes() == first

    def test_rdbm_save_load_save_identical(self, tmp_path):
        rng = default_rng(2)
        tex = TextureDbmParams(_gaussian(rng, 12, 5), _binary(rng, 5, 3))
        p = RdbmParams(tex, _binary(rng, 12, 4),
                       np.full(12, 2.0), rng.normal(size=12),
                       np.abs(rng.normal(size=12)) + 0.5)
        path = tmp_path / "rdbm.bin"
        serialize.save_rdbm(path, p)
        first = path.read_bytes()
        back, _ = serialize.load_rdbm(path)
        np.testing.assert_array_equal(back.gating_gamma, p.gating_gamma)
        np.testing.assert_array_equal(back.mask_rbm.weights,
                                      p.mask_rbm.weights)
        serialize.save_rdbm(path, back)
        assert path.read_bytes() == first

    def test_joint_round_trip(self, tmp_path):
        rng = default_rng(3)
        p = JointLayerParams(rng.normal(size=(4, 6)),
                             rng.normal(size=(5, 6)), rng.normal(size=6))
        path = tmp_path / "joint.bin"
        serialize.save_joint(path, p)
        back, _ = serialize.load_joint(path)
        np.testing.assert_array_equal(back.weights_shape, p.weights_shape)
        np.testing.assert_array_equal(back.weights_texture,
                                      p.weights_texture)
        serialize.save_joint(path, back)
        assert path.read_bytes() == serialize.pack_container(
            "joint", {"weights_shape": p.weights_shape,
                      "weights_texture": p.weights_texture,
                      "hidden_bias": p.hidden_bias}, {})

    def test_frame_round_trip(self, tmp_path):
        rng = default_rng(4)
        shapes = [np.array([2.0, 2.0, 20.0, 3.0, 4.0, 20.0, 21.0, 21.0])
                  + rng.normal(0, 0.5, 8) for _ in range(4)]
        frame = build_reference_frame(shapes, (16, 16))
        path = tmp_path / "frame.bin"
        serialize.save_frame(path, frame)
        first = path.read_bytes()
        back, _ = serialize.load_frame(path)
        assert back.resolution == frame.resolution
        np.testing.assert_array_equal(back.mean_shape, frame.mean_shape)
        np.testing.assert_array_equal(back.pixel_bary, frame.pixel_bary)
        serialize.save_frame(path, back)
        assert path.read_bytes() == first

    def test_standardizer_round_trip(self, tmp_path):
        path = tmp_path / "std.bin"
        serialize.save_standardizer(path, np.arange(4.0),
                                    np.full(4, 2.0))
        mean, std, _ = serialize.load_standardizer(path)
        np.testing.assert_array_equal(mean, np.arange(4.0))
        np.testing.assert_array_equal(std, np.full(4, 2.0))

    def test_kind_mismatch_raises(self, tmp_path):
        path = tmp_path / "std.bin"
        serialize.save_standardizer(path, np.zeros(2), np.ones(2))
        with pytest.raises(ContainerError):
            serialize.load_rdbm(path)
        with pytest.raises(ContainerError):
            serialize.load_joint(path)
        with pytest.raises(ContainerError):
            serialize.load_frame(path)
