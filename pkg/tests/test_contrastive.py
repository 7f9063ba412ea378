import numpy as np
import pytest

from memaudit import contrastive as con
from memaudit import volumes as vol
from memaudit.numerics import ShapeError, Tensor, grad_check

TINY = con.EmbedderConfig(dims=(8, 8, 8), widths=(2, 2), hidden=6, out_dim=4, seed=2)
DESK = con.EmbedderConfig(margin=1.0, epochs=60, seed=0)


def _vec(x):
    return Tensor(np.asarray(x, dtype=np.float64))


class TestTripletLoss:
    def test_hand_value(self):
        loss = con.triplet_loss(_vec([0, 0]), _vec([3, 4]), _vec([1, 0]))
        assert float(loss.data) == 4.0

    def test_inactive_hinge(self):
        a = _vec([1.0, -2.0])
        assert float(con.triplet_loss(a, a, _vec([5.0, 5.0])).data) == 0.0

    def test_margin_adds(self):
        loss = con.triplet_loss(_vec([0, 0]), _vec([3, 4]), _vec([1, 0]), margin=0.5)
        assert float(loss.data) == 4.5

    def test_batch_mean_exact(self, rng):
        a, p, n = rng.standard_normal((3, 7, 5))
        want = np.mean(np.maximum(0, np.linalg.norm(a - p, axis=1) - np.linalg.norm(a - n, axis=1)))
        got = float(con.triplet_loss(_vec(a), _vec(p), _vec(n)).data)
        assert got == pytest.approx(want, rel=1e-14, abs=1e-15)

    def test_errors(self):
        with pytest.raises(ShapeError):
            con.triplet_loss(_vec([0, 0]), _vec([0, 0, 0]), _vec([0, 0]))
        with pytest.raises(ValueError):
            con.triplet_loss(_vec([0, 0]), _vec([1, 0]), _vec([0, 1]), margin=-1)

    def test_gradient_when_active(self, rng):
        a = rng.standard_normal((4, 6))
        params = {"a": a, "p": a + 3 * rng.standard_normal(a.shape), "n": a + 0.1 * rng.standard_normal(a.shape)}
        d = lambda x, y: np.linalg.norm(x - y, axis=1)
        assert np.all(d(params["a"], params["p"]) > d(params["a"], params["n"]))
        rep = grad_check(lambda q: con.triplet_loss(q["a"], q["p"], q["n"]), params)
        assert rep.max_rel_error < 1e-4, rep


class TestSampling:
    def test_id_constraints_and_orientation(self, corpus64, rng):
        batches = con.sample_triplets(corpus64[:10], 4, rng)
        assert [len(b) for b in batches] == [4, 4, 2]
        for t in (t for b in batches for t in b):
            assert t.negative.id != t.anchor.id
            assert t.positive.id == t.anchor.id
            assert np.array_equal(t.positive.voxels, vol.apply_orientation(t.anchor, t.orientation).voxels)

    def test_every_anchor_once(self, corpus64, rng):
        anchors = [t.anchor.id for b in con.sample_triplets(corpus64, 16, rng) for t in b]
        assert sorted(anchors) == sorted(v.id for v in corpus64)

    def test_seeded(self, corpus64):
        def ids(seed):
            b = con.sample_triplets(corpus64, None, np.random.default_rng(seed))[0]
            return [(t.anchor.id, t.negative.id, t.orientation.label()) for t in b]
        assert ids(3) == ids(3)
        assert ids(3) != ids(4)

    def test_single_volume_rejected(self, corpus64, rng):
        with pytest.raises(ValueError):
            con.sample_triplets(corpus64[:1], 1, rng)

    def test_validation_triplet_count(self, heldout):
        trips = con.validation_triplets(heldout, 70, seed=1)
        assert len(trips) == 70
        assert [t.anchor.id for t in trips] == [t.anchor.id for t in con.validation_triplets(heldout, 70, 1)]


class TestEmbed:
    def test_shape_and_determinism(self, corpus64):
        cfg = con.EmbedderConfig()
        p = con.EmbedderParams(cfg, con.init_embedder(cfg))
        e = con.embed(p, corpus64[0].voxels)
        assert e.shape == (32,)
        assert np.all(np.isfinite(e))
        assert np.array_equal(e, con.embed(p, corpus64[0].voxels))

    def test_identical_inputs_in_batch(self, corpus64):
        cfg = con.EmbedderConfig()
        p = con.EmbedderParams(cfg, con.init_embedder(cfg))
        e = con.embed_volumes(p, [corpus64[3], corpus64[3]])
        assert np.array_equal(e[0], e[1])

    def test_dims_mismatch(self, rng):
        cfg = con.EmbedderConfig()
        p = con.EmbedderParams(cfg, con.init_embedder(cfg))
        with pytest.raises(ShapeError):
            con.embed(p, rng.uniform(-1, 1, (8, 16, 16)))

    def test_orbit_average_invariant(self, rng):
        p = con.EmbedderParams(TINY, con.init_embedder(TINY, np.float64))
        x = vol.Volume("x", rng.uniform(-1, 1, (8, 8, 8)))
        e = con.embed(p, x.voxels)
        for o in vol.enumerate_orientations(x.dims):
            np.testing.assert_allclose(con.embed(p, vol.apply_orientation(x, o).voxels), e,
                                       rtol=0, atol=1e-12)

    def test_raw_network_not_invariant(self, rng):
        p = con.EmbedderParams(TINY, con.init_embedder(TINY, np.float64))
        x = vol.Volume("x", rng.uniform(-1, 1, (8, 8, 8)))
        o = vol.enumerate_orientations(x.dims)[5]
        assert not np.allclose(con.embed_network(p, x.voxels),
                               con.embed_network(p, vol.apply_orientation(x, o).voxels))

    def test_bounded_output(self, rng):
        cfg = con.EmbedderConfig(dims=(8, 8, 8), widths=(2, 2), hidden=6, out_dim=4, bounded=True)
        p = con.EmbedderParams(cfg, con.init_embedder(cfg, np.float64))
        e = con.embed(p, 50 * rng.standard_normal((3, 1, 8, 8, 8)))
        assert np.all(np.abs(e) <= 1)

    def test_network_grad_check(self, rng):
        params = con.init_embedder(TINY, np.float64)
        a, n = (Tensor(rng.uniform(-1, 1, (2, 1, 8, 8, 8))) for _ in range(2))
        pos = Tensor(a.data[:, :, ::-1].copy())

        def loss(p):
            return con.triplet_loss(con.embed_graph(p, a, TINY), con.embed_graph(p, pos, TINY),
                                    con.embed_graph(p, n, TINY), margin=10.0)
        rep = grad_check(loss, params)
        assert rep.max_rel_error < 1e-4, rep


class TestConfig:
    def test_round_trip(self):
        assert con.EmbedderConfig.from_dict(DESK.to_dict()) == DESK

    def test_invalid(self):
        with pytest.raises(ValueError):
            con.EmbedderConfig(dims=(16, 16, 10))
        with pytest.raises(ValueError):
            con.EmbedderConfig(margin=-0.1)

    def test_trunk_geometry(self):
        assert con.EmbedderConfig().trunk_shape == (8, 4, 4, 4)


class TestTrainingGuards:
    def test_collapse_detected(self, corpus64):
        cfg = con.EmbedderConfig(epochs=1, collapse_floor=1e9)
        with pytest.raises(con.EmbeddingCollapseError):
            con.train_embedder(cfg, corpus64[:4])

    def test_too_few_volumes(self, corpus64):
        with pytest.raises(ValueError):
            con.train_embedder(con.EmbedderConfig(epochs=1), corpus64[:1])

    def test_seeded_loss_curve(self, corpus64):
        cfg = con.EmbedderConfig(epochs=2, batch_size=4, margin=1.0)
        a = con.train_embedder(cfg, corpus64[:8], corpus64[8:12])[1]
        b = con.train_embedder(cfg, corpus64[:8], corpus64[8:12])[1]
        assert a.loss == b.loss
        assert a.val_accuracy == b.val_accuracy

    def test_positive_transform_shape_checked(self, corpus64):
        with pytest.raises(ShapeError):
            con.train_embedder(con.EmbedderConfig(epochs=1), corpus64[:4],
                               positive_transform=lambda x: x[:, :, :8])

    def test_untrained_raw_accuracy_near_chance(self, heldout):
        p = con.EmbedderParams(DESK, con.init_embedder(DESK))
        acc = con.triplet_accuracy(p, con.validation_triplets(heldout, 256, 0), raw=True)
        assert acc == pytest.approx(0.5, abs=0.1)


@pytest.fixture(scope="module")
def trained(corpus64, heldout):
    return con.train_embedder(DESK, corpus64, heldout)


class TestTrained:
    def test_validation_accuracy(self, trained):
        params, hist = trained
        assert len(hist.loss) == DESK.epochs
        assert hist.val_accuracy[hist.best_epoch] >= 0.95
        assert hist.val_accuracy[hist.best_epoch] == max(hist.val_accuracy)

    def test_augmented_nearest_is_source(self, trained, corpus64):
        params = trained[0]
        E = con.embed_volumes(params, corpus64)
        hits = total = 0
        for i, v in enumerate(corpus64):
            aug = [vol.apply_orientation(v, o) for o in vol.enumerate_orientations(v.dims)]
            A = con.embed_volumes(params, aug)
            d = ((A[:, None, :].astype(np.float64) - E[None]) ** 2).mean(-1)
            hits += int(np.sum(d.argmin(1) == i))
            total += len(aug)
        assert hits / total >= 0.95

    def test_augmented_closer_than_other(self, trained, corpus64):
        params = trained[0]
        rng = np.random.default_rng(5)
        E = con.embed_volumes(params, corpus64).astype(np.float64)
        wins = 0
        for _ in range(200):
            i, j = rng.choice(len(corpus64), 2, replace=False)
            aug, _ = vol.random_augment(corpus64[i], rng)
            ea = con.embed_volumes(params, [aug])[0]
            wins += np.mean((E[i] - ea) ** 2) < np.mean((E[i] - E[j]) ** 2)
        assert wins / 200 >= 0.95

    def test_separation(self, trained, corpus64):
        params = trained[0]
        E = con.embed_volumes(params, corpus64).astype(np.float64)
        d = ((E[:, None] - E[None]) ** 2).mean(-1)
        np.fill_diagonal(d, np.inf)
        worst_own = []
        for i, v in enumerate(corpus64[:16]):
            A = con.embed_volumes(params, [vol.apply_orientation(v, o)
                                          for o in vol.enumerate_orientations(v.dims)])
            worst_own.append(((A - E[i]) ** 2).mean(-1).max())
        assert np.median(d.min(1)) > np.median(worst_own)

    def test_checkpoint_round_trip(self, trained, tmp_path):
        params = trained[0]
        con.save(params, tmp_path / "e.ckpt")
        back = con.load(tmp_path / "e.ckpt")
        assert back.config == params.config
        assert all(back.arrays[k].tobytes() == params.arrays[k].tobytes() for k in params.arrays)
