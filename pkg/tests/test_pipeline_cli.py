import json

import numpy as np
import pytest

from memaudit import audit as au
from memaudit import cli
from memaudit import pipeline as pl
from memaudit import volumes as vol

TINY = {
    "dims": [8, 8, 8], "n_train": 6, "n_val": 8, "synth_multiplier": 2,
    "autoencoder": {"factor": 2, "latent_channels": 2, "widths": [4], "epochs": 2, "batch_size": 4},
    "embedder": {"widths": [4, 4], "hidden": 8, "epochs": 2, "batch_size": 4, "val_triplets": 8},
    "diffusion": {"T": 10, "width": 4, "mixer_hidden": 8, "time_features": 4, "epochs": 2,
                  "batch_size": 4},
    "planted": {"exact": 1, "flipped": 1, "rotated": 1},
}


def tiny_config(**over):
    cfg = pl.make_config(TINY)
    for k, v in over.items():
        pl.set_path(cfg, k, v)
    return cfg


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


class TestConfig:
    def test_defaults_valid(self):
        cfg = pl.make_config()
        assert cfg["synth_multiplier"] == 4
        assert pl.embedder_config(cfg).out_dim == 32

    def test_unknown_field(self):
        with pytest.raises(pl.ConfigError, match="embedder.nope"):
            pl.make_config({"embedder": {"nope": 1}})

    @pytest.mark.parametrize("key,value,field", [
        ("n_val", 2, "n_val"),
        ("synth_multiplier", 0, "synth_multiplier"),
        ("diffusion.beta_1", 0.5, "diffusion.beta_1"),
        ("diffusion.T", 1, "diffusion.T"),
        ("audit.quantile", 1.5, "audit.quantile"),
        ("dims", [16, 16], "dims"),
        ("embedder.epochs", 0, "embedder.epochs"),
    ])
    def test_field_level_messages(self, key, value, field):
        with pytest.raises(pl.ConfigError, match=field):
            pl.load_config(None, {key: value})

    def test_too_many_planted(self, tmp_path):
        r = pl.Run(tmp_path, tiny_config(**{"planted.exact": 7}))
        r.phantom()
        with pytest.raises(pl.ConfigError, match="planted"):
            r.plant()

    def test_missing_file(self, tmp_path):
        with pytest.raises(pl.ConfigError, match="does not exist"):
            pl.load_config(tmp_path / "none.json")

    def test_hash_and_seeds(self):
        assert pl.config_hash({"a": 1, "b": 2}) == pl.config_hash({"b": 2, "a": 1})
        assert pl.derive_seed(7, "train") == pl.derive_seed(7, "train")
        assert len({pl.derive_seed(7, "train"), pl.derive_seed(7, "val"), pl.derive_seed(8, "train")}) == 3


class TestPlanted:
    def test_orientation_kinds(self):
        flips, rots = pl.orientation_kinds()
        assert len(flips) == 7
        assert len(rots) == 23 - 3

    def test_pool_contents(self, corpus64):
        pool, truth = pl.planted_pool(corpus64, 40, {"exact": 2, "flipped": 2, "rotated": 1}, 3)
        assert len(pool) == 40 and len(truth) == 5
        assert len({v.id for v in pool}) == 40
        by_id = {v.id: v for v in pool}
        src = {v.id: v for v in corpus64}
        for tid, (sid, label) in truth.items():
            o = vol.orientation_from_label(label)
            assert np.array_equal(by_id[sid].voxels, vol.orient_array(src[tid].voxels, o))
        labels = sorted(lab for _, lab in truth.values())
        assert labels.count(vol.IDENTITY.label()) == 2


class TestCli:
    def test_phantom_reproducible(self, tmp_path):
        args = ["phantom", "--count", "6", "--val-count", "8", "--dims", "8,8,8", "--seed", "7",
                "--out", "data/"]
        assert cli.run(args + ["--root", str(tmp_path / "a")]) == 0
        assert cli.run(args + ["--root", str(tmp_path / "b")]) == 0
        m = vol.DatasetManifest.read(tmp_path / "a" / "data" / "manifest.json")
        assert len(m.ids("train")) == 6 and len(m.ids("val")) == 8
        for e in m.entries:
            assert (tmp_path / "a" / "data" / e.path).read_bytes() == \
                (tmp_path / "b" / "data" / e.path).read_bytes()

    def test_root_from_environment(self, tmp_path, monkeypatch, config_file):
        monkeypatch.setenv(pl.ROOT_ENV, str(tmp_path / "env"))
        assert cli.run(["phantom", "--config", str(config_file)]) == 0
        assert (tmp_path / "env" / "data" / "manifest.json").is_file()

    def test_missing_dependency_exit(self, tmp_path, capsys):
        assert cli.run(["train-ae", "--root", str(tmp_path)]) == 3
        assert "phantom" in capsys.readouterr().err

    def test_generate_needs_denoiser(self, tmp_path, config_file):
        root = ["--root", str(tmp_path), "--config", str(config_file)]
        assert cli.run(["phantom"] + root) == 0
        assert cli.run(["train-ae"] + root) == 0
        assert cli.run(["generate"] + root) == 3

    def test_config_error_exit(self, tmp_path, capsys):
        assert cli.run(["phantom", "--root", str(tmp_path), "--set", "n_val=2"]) == 2
        assert "n_val" in capsys.readouterr().err
        assert cli.run(["phantom", "--root", str(tmp_path), "--set", "bogus=1"]) == 2

    def test_bad_config_file(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert cli.run(["phantom", "--root", str(tmp_path), "--config", str(bad)]) == 2

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning", "ignore:invalid value:RuntimeWarning")
    def test_numerical_failure_exit(self, tmp_path, config_file):
        root = ["--root", str(tmp_path), "--config", str(config_file)]
        assert cli.run(["phantom"] + root) == 0
        assert cli.run(["train-ae", "--set", "autoencoder.lr=1e30", "--epochs", "20"] + root) == 4
        stage = json.loads((tmp_path / pl.MANIFEST_NAME).read_text())["stages"]["train-ae"]
        assert stage["status"] == "failed"

    def test_bad_dims_flag(self, tmp_path):
        with pytest.raises(SystemExit):
            cli.run(["phantom", "--root", str(tmp_path), "--dims", "8,8"])


class TestRun:
    def test_stage_caching(self, tmp_path):
        r = pl.Run(tmp_path, tiny_config())
        assert r.phantom() is True
        before = (tmp_path / pl.MANIFEST_NAME).read_text()
        assert pl.Run(tmp_path, tiny_config()).phantom() is False
        assert (tmp_path / pl.MANIFEST_NAME).read_text() == before
        assert pl.Run(tmp_path, tiny_config(), force=True).phantom() is True

    def test_config_change_reruns(self, tmp_path):
        pl.Run(tmp_path, tiny_config()).phantom()
        assert pl.Run(tmp_path, tiny_config(seed=8)).phantom() is True

    def test_tampered_output_reruns(self, tmp_path):
        r = pl.Run(tmp_path, tiny_config())
        r.phantom()
        r.data_manifest().write_text(r.data_manifest().read_text() + " ")
        assert pl.Run(tmp_path, tiny_config()).phantom() is True

    def test_manifest_traces_outputs(self, tmp_path):
        r = pl.Run(tmp_path, tiny_config())
        r.audit_pipeline(planted=True)
        doc = json.loads((tmp_path / pl.MANIFEST_NAME).read_text())
        assert set(doc["stages"]) == {"phantom", "train-ae", "train-con", "generate", "audit"}
        for name, s in doc["stages"].items():
            assert s["status"] == "complete"
            assert s["config_hash"] == pl.config_hash(s["config"])
            for rel in s["outputs"]:
                assert (tmp_path / rel).is_file(), rel

    def test_planted_report(self, tmp_path):
        rep = pl.Run(tmp_path, tiny_config()).audit_pipeline(planted=True)
        assert len(rep.records) == 6
        assert sum(r.truth for r in rep.records) == 3
        assert (tmp_path / "reports" / "audit.csv").is_file()
        assert (tmp_path / "reports" / "embeddings_synth.emb").is_file()

    def test_byte_exact_rerun(self, tmp_path):
        a = pl.Run(tmp_path / "a", tiny_config()).audit_pipeline()
        b = pl.Run(tmp_path / "b", tiny_config()).audit_pipeline()
        assert a == b
        ra = (tmp_path / "a" / "reports" / "audit.json").read_bytes()
        assert ra == (tmp_path / "b" / "reports" / "audit.json").read_bytes()
        assert au.AuditReport.from_json(ra.decode()).config["seed"] == 7

    def test_experiment_shape(self, tmp_path):
        cfg = tiny_config()
        res = pl.Run(tmp_path, cfg).experiment(seeds=2)
        assert [r["seed_index"] for r in res["per_seed"]] == [0, 1]
        doc = json.loads((tmp_path / "experiment" / "comparison.json").read_text())
        assert set(doc) == {"copy_rate_aug", "copy_rate_noaug", "shared_detector", "per_seed"}
        assert doc["copy_rate_aug"] == pytest.approx(np.mean([r["copy_rate_aug"] for r in res["per_seed"]]))
        assert (tmp_path / "experiment" / "seed1" / "noaug" / "reports" / "audit.json").is_file()

    def test_experiment_cli(self, tmp_path, config_file, capsys):
        assert cli.run(["experiment", "--seeds", "1", "--root", str(tmp_path),
                        "--config", str(config_file)]) == 0
        assert "aug" in capsys.readouterr().out
