import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from memaudit import volumes as vol
from memaudit.audit import ncc_matrix

CUBE = (16, 16, 16)


@pytest.fixture(scope="module")
def group():
    return vol.enumerate_orientations(CUBE)


@pytest.fixture(scope="module")
def corpus():
    return vol.generate_phantoms(7, 64, CUBE, prefix="tr")


class TestVol1:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        v = vol.Volume("a", rng.standard_normal(CUBE).astype(np.float32))
        vol.save_volume(v, tmp_path / "a.vol")
        w = vol.load_volume(tmp_path / "a.vol")
        assert w.id == "a"
        assert w.voxels.tobytes() == v.voxels.tobytes()

    @given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
                  elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
    def test_round_trip_any_finite(self, tmp_path_factory, x):
        p = tmp_path_factory.mktemp("v") / "x.vol"
        vol.save_volume(vol.Volume("x", x), p)
        assert vol.load_volume(p).voxels.tobytes() == x.tobytes()

    def test_header_layout(self, tmp_path):
        vol.save_volume(vol.Volume("a", np.zeros((2, 3, 4), np.float32)), tmp_path / "a.vol")
        raw = (tmp_path / "a.vol").read_bytes()
        assert raw[:4] == b"VOL1"
        assert np.frombuffer(raw[4:16], "<u4").tolist() == [2, 3, 4]
        assert raw[16:20] == b"\x00\x00\x00\x00"
        assert len(raw) == 20 + 24 * 4

    def test_bad_magic(self, tmp_path):
        (tmp_path / "b.vol").write_bytes(b"XXXX" + bytes(40))
        with pytest.raises(vol.BadMagicError):
            vol.load_volume(tmp_path / "b.vol")

    def test_truncated_payload(self, tmp_path):
        raw = vol.HEADER.pack(b"VOL1", 16, 16, 16, 0) + np.zeros(10, "<f4").tobytes()
        (tmp_path / "t.vol").write_bytes(raw)
        with pytest.raises(vol.TruncatedPayloadError):
            vol.load_volume(tmp_path / "t.vol")

    def test_unknown_dtype(self, tmp_path):
        (tmp_path / "d.vol").write_bytes(vol.HEADER.pack(b"VOL1", 1, 1, 1, 9) + bytes(4))
        with pytest.raises(vol.UnknownDtypeError):
            vol.load_volume(tmp_path / "d.vol")


class TestManifest:
    def test_write_and_read(self, tmp_path, corpus):
        m = vol.write_dataset(tmp_path, corpus[:4], corpus[4:6], seed=7)
        back = vol.DatasetManifest.read(tmp_path / "manifest.json")
        assert back.ids("train") == m.ids("train") == [v.id for v in corpus[:4]]
        assert [v.voxels.tobytes() for v in back.load("val")] == [v.voxels.tobytes() for v in corpus[4:6]]

    def test_duplicate_ids_rejected(self, tmp_path, corpus):
        with pytest.raises(ValueError, match="unique"):
            vol.write_dataset(tmp_path, corpus[:2], corpus[:1])

    def test_missing_file_rejected(self, tmp_path, corpus):
        vol.write_dataset(tmp_path, corpus[:2])
        (tmp_path / f"{corpus[0].id}.vol").unlink()
        with pytest.raises(FileNotFoundError):
            vol.DatasetManifest.read(tmp_path / "manifest.json")


class TestNormalize:
    def test_three_values(self):
        out = vol.normalize(vol.Volume("n", np.array([0.0, 5.0, 10.0]).reshape(1, 1, 3)))
        np.testing.assert_array_equal(out.voxels.ravel(), [-1.0, 0.0, 1.0])

    def test_constant_volume(self):
        assert not vol.normalize(vol.Volume("c", np.full((2, 2, 2), 3.0))).voxels.any()

    @given(arrays(np.float64, (3, 3, 3), elements=st.floats(-1e3, 1e3)))
    def test_idempotent_and_range(self, x):
        once = vol.normalize(vol.Volume("h", x))
        twice = vol.normalize(once)
        np.testing.assert_array_equal(once.voxels, twice.voxels)
        if x.max() > x.min():
            assert once.voxels.min() == -1.0 and once.voxels.max() == 1.0


class TestPhantoms:
    def test_deterministic(self):
        a = vol.generate_phantoms(3, 4, CUBE)
        b = vol.generate_phantoms(3, 4, CUBE)
        assert all(x.id == y.id and x.voxels.tobytes() == y.voxels.tobytes() for x, y in zip(a, b))

    def test_distinct_and_dissimilar(self, corpus):
        assert len({v.id for v in corpus}) == 64
        m = ncc_matrix(vol.stack(corpus)[:, 0], vol.stack(corpus)[:, 0])
        off = m[np.triu_indices(64, 1)]
        assert np.median(off) < 0.8

    def test_range(self, corpus):
        for v in corpus:
            assert v.voxels.min() == -1.0 and v.voxels.max() == 1.0

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            vol.generate_phantoms(0, 1, (4, 4, 4))


class TestOrientations:
    @pytest.mark.parametrize("dims,count", [((16, 16, 16), 48), ((32, 32, 16), 16), ((32, 16, 8), 8)])
    def test_counts(self, dims, count):
        os_ = vol.enumerate_orientations(dims)
        assert len(os_) == count == len(set(os_))
        assert os_[0].is_identity

    def test_closed_under_composition_and_inverse(self, group):
        s = set(group)
        for a in group:
            assert a.inverse() in s
            for b in group:
                assert a.then(b) in s

    def test_composition_matches_sequential_application(self, group, rng):
        x = rng.standard_normal((4, 4, 4))
        for a in group[::5]:
            for b in group[::7]:
                seq = vol.orient_array(vol.orient_array(x, a), b)
                np.testing.assert_array_equal(vol.orient_array(x, a.then(b)), seq)

    def test_inverse_restores(self, group, rng):
        v = vol.Volume("r", rng.standard_normal(CUBE))
        for o in group:
            back = vol.apply_orientation(vol.apply_orientation(v, o), o.inverse())
            np.testing.assert_array_equal(back.voxels, v.voxels)

    def test_identity_and_double_flip(self, rng):
        v = vol.Volume("r", rng.standard_normal(CUBE))
        np.testing.assert_array_equal(vol.apply_orientation(v, vol.IDENTITY).voxels, v.voxels)
        fw = vol.Orientation((0, 1, 2), (False, False, True))
        twice = vol.apply_orientation(vol.apply_orientation(v, fw), fw)
        np.testing.assert_array_equal(twice.voxels, v.voxels)

    def test_multiset_and_energy_preserved(self, group, rng):
        v = vol.Volume("r", rng.standard_normal(CUBE).astype(np.float32))
        ref = np.sort(v.voxels.ravel())
        for o in group:
            w = vol.apply_orientation(v, o).voxels
            np.testing.assert_array_equal(np.sort(w.ravel()), ref)
            # summed in sorted order so the comparison does not depend on traversal order
            energy = np.sum(np.sort(w.astype(np.float64).ravel()) ** 2)
            assert energy == np.sum(ref.astype(np.float64) ** 2)

    def test_invalid_orientation_rejected(self):
        v = vol.Volume("r", np.zeros((4, 4, 2)))
        with pytest.raises(ValueError):
            vol.apply_orientation(v, vol.Orientation((2, 1, 0), (False,) * 3))

    def test_label_round_trip(self, group):
        for o in group:
            assert vol.orientation_from_label(o.label()) == o


class TestRandomAugment:
    def test_reproducible_and_consistent(self, rng):
        v = vol.Volume("r", rng.standard_normal(CUBE))
        a, oa = vol.random_augment(v, np.random.default_rng(5))
        b, ob = vol.random_augment(v, np.random.default_rng(5))
        assert oa == ob
        np.testing.assert_array_equal(a.voxels, b.voxels)
        np.testing.assert_array_equal(vol.apply_orientation(v, oa).voxels, a.voxels)

    def test_uniform_frequencies(self, group):
        v = vol.Volume("r", np.zeros((2, 2, 2)))
        r = np.random.default_rng(0)
        orients = vol.enumerate_orientations((2, 2, 2))
        counts = {}
        for _ in range(10_000):
            _, o = vol.random_augment(v, r, orients)
            counts[o] = counts.get(o, 0) + 1
        assert len(counts) == 48
        freq = np.array(list(counts.values())) / 10_000
        assert np.all(np.abs(freq - 1 / 48) < 0.01)
