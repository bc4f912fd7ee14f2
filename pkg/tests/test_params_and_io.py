import numpy as np
import pytest

from fcmh.autodiff import Tensor
from fcmh.errors import FormatError
from fcmh.params import MAGIC, ParamStore
from fcmh.rng import Xoshiro256
from fcmh.toydata import (FeaturePyramid, ToyImage, generate_dataset,
                          load_ppm, load_pyramid_file, save_ppm,
                          save_pyramid_file)


class TestParamStore:
    def _store(self):
        ps = ParamStore()
        rng = Xoshiro256(1)
        ps.register("b.weight", Tensor(rng.normal((3, 4)), requires_grad=True))
        ps.register("a.bias", Tensor(rng.normal(7), requires_grad=True))
        ps.set_meta("c_min", -1.25)
        return ps

    def test_roundtrip_bytes_stable(self):
        ps = self._store()
        blob = ps.to_bytes()
        ps2 = ParamStore.from_bytes(blob)
        assert ps2.to_bytes() == blob
        np.testing.assert_allclose(ps2["a.bias"].data, ps["a.bias"].data, atol=1e-7)

    def test_names_sorted(self):
        blob = self._store().to_bytes()
        assert blob.index(b"a.bias") < blob.index(b"b.weight")

    def test_f32_precision_exact_roundtrip(self):
        ps = ParamStore()
        vals = np.array([0.5, -1.25, 3.0, 1e-3], dtype=np.float32).astype(np.float64)
        ps.register("x", Tensor(vals))
        ps2 = ParamStore.from_bytes(ps.to_bytes())
        np.testing.assert_array_equal(ps2["x"].data, vals)

    def test_bad_magic(self):
        blob = bytearray(self._store().to_bytes())
        blob[:4] = b"NOPE"
        with pytest.raises(FormatError) as ei:
            ParamStore.from_bytes(bytes(blob))
        assert "offset 0" in str(ei.value)

    def test_truncation(self):
        blob = self._store().to_bytes()
        with pytest.raises(FormatError):
            ParamStore.from_bytes(blob[:-3])

    def test_meta_bytes(self):
        ps = ParamStore()
        ps.set_meta_bytes("config_hash", b"\x01\xfe\x7f")
        assert ps.get_meta_bytes("config_hash") == b"\x01\xfe\x7f"


class TestDataset:
    def test_determinism(self):
        a = generate_dataset(1, seed=0)[0]
        b = generate_dataset(1, seed=0)[0]
        np.testing.assert_array_equal(a.pixels, b.pixels)
        assert a.label == b.label and a.center == b.center

    def test_empty(self):
        assert generate_dataset(0, seed=3) == []

    def test_pixels_in_range_and_shape(self):
        for img in generate_dataset(5, seed=1):
            assert img.pixels.shape == (3, 64, 64)
            assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0
            assert 20.0 <= img.center[0] < 44.0

    def test_class_histogram_near_uniform(self):
        data = generate_dataset(3000, seed=7)
        counts = np.bincount([im.label for im in data], minlength=3)
        np.testing.assert_allclose(counts / 3000.0, 1 / 3, atol=1 / 30)


class TestPyramidFile:
    def _pyramids(self, n=3):
        rng = Xoshiro256(9)
        out = []
        for _ in range(n):
            arrs = [rng.normal(s).astype(np.float32).astype(np.float64)
                    for s in ((32, 16, 16), (32, 8, 8), (32, 4, 4), (32, 2, 2))]
            out.append(FeaturePyramid(*arrs))
        return out

    def test_bit_exact_roundtrip(self, tmp_path):
        pyrs = self._pyramids()
        path = tmp_path / "p.fpyr"
        save_pyramid_file(path, pyrs)
        loaded = load_pyramid_file(path)
        assert len(loaded) == 3
        for a, b in zip(pyrs, loaded):
            for la, lb in zip(a.levels(), b.levels()):
                np.testing.assert_array_equal(la, lb)
        # double round trip is byte-identical
        path2 = tmp_path / "q.fpyr"
        save_pyramid_file(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic_offset(self, tmp_path):
        path = tmp_path / "bad.fpyr"
        path.write_bytes(b"XXXX" + b"\x00" * 20)
        with pytest.raises(FormatError) as ei:
            load_pyramid_file(path)
        assert ei.value.offset == 0

    def test_truncation_offset_reported(self, tmp_path):
        pyrs = self._pyramids(1)
        path = tmp_path / "t.fpyr"
        save_pyramid_file(path, pyrs)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(FormatError) as ei:
            load_pyramid_file(path)
        assert ei.value.offset is not None


class TestPpm:
    def test_roundtrip(self, tmp_path):
        rng = Xoshiro256(4)
        img = np.round(rng.uniform((3, 16, 16)) * 255) / 255.0
        path = tmp_path / "x.ppm"
        save_ppm(path, img)
        back = load_ppm(path)
        np.testing.assert_allclose(back, img, atol=1e-12)
