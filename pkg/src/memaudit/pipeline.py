"""Config-driven stages: phantoms, the three trainings, generation, audit.

All outputs live under a run root. ``run_manifest.json`` in the root records,
for every stage, the hash of the config that produced it, the SHA-256 of each
output file and the wall-clock time. A stage whose hash and outputs are
unchanged is skipped unless forced.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import audit as au
from . import autoencoder as ae
from . import contrastive as con
from . import diffusion as df
from . import volumes as vol
from .checkpoint import file_sha256, save_embedding_table

log = logging.getLogger(__name__)

ROOT_ENV = "MEMAUDIT_ROOT"
MANIFEST_NAME = "run_manifest.json"

DEFAULT_CONFIG: dict = {
    "paths": {"data": "data", "checkpoints": "checkpoints", "synth": "synth",
              "reports": "reports"},
    "seed": 7,
    "dims": [16, 16, 16],
    "n_train": 64,
    "n_val": 256,
    "synth_multiplier": 4,
    "autoencoder": {"factor": 4, "latent_channels": 8, "widths": [16, 32], "lr": 2e-3,
                    "epochs": 100, "batch_size": 16, "augment": True},
    "embedder": {"widths": [16, 8], "hidden": 128, "margin": 1.0, "lr": 1e-3, "epochs": 60,
                 "batch_size": 16, "augment_negative": True, "val_triplets": 256,
                 "orbit_average": True, "bounded": True, "roundtrip_positives": True},
    "diffusion": {"T": 100, "beta_1": 1e-3, "beta_T": 0.2, "augment": False, "clip": True,
                  "width": 32, "depth": 1, "time_features": 32, "mixer_hidden": 256,
                  "lr": 2e-3, "epochs": 400, "batch_size": 10, "cosine_decay": True},
    "audit": {"quantile": 0.05, "bins": 20, "ncc_threshold": 0.95},
    "planted": {"exact": 3, "flipped": 4, "rotated": 3},
}


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


class MissingDependencyError(RuntimeError):
    """A stage's input artifact does not exist yet."""


# ---------------------------------------------------------------- config

def _merge(base: dict, over: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"{prefix}{k}: unknown config field")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{prefix}{k}: expected an object")
            out[k] = _merge(base[k], v, f"{prefix}{k}.")
        else:
            out[k] = v
    return out


def set_path(cfg: dict, dotted: str, value) -> None:
    """Assign ``value`` at a dotted key such as ``diffusion.epochs``."""
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"{dotted}: unknown config field")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"{dotted}: unknown config field")
    node[keys[-1]] = value


def _check(cond: bool, name: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{name}: {msg}")


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def make_config(overrides: dict | None = None) -> dict:
    """Defaults merged with ``overrides`` and validated."""
    cfg = _merge(DEFAULT_CONFIG, overrides or {})
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    _check(_is_int(cfg["seed"]) and cfg["seed"] >= 0, "seed", "must be a non-negative integer")
    d = cfg["dims"]
    _check(isinstance(d, list) and len(d) == 3 and all(_is_int(n) and n >= 8 for n in d),
           "dims", "must be three integers >= 8")
    _check(_is_int(cfg["n_train"]) and cfg["n_train"] >= 2, "n_train", "must be an integer >= 2")
    _check(_is_int(cfg["n_val"]) and cfg["n_val"] >= 5, "n_val", "must be an integer >= 5")
    _check(_is_int(cfg["synth_multiplier"]) and cfg["synth_multiplier"] >= 1,
           "synth_multiplier", "must be an integer >= 1")
    for section in ("autoencoder", "embedder", "diffusion"):
        for key in ("epochs", "batch_size"):
            v = cfg[section][key]
            _check(_is_int(v) and v >= 1, f"{section}.{key}", "must be a positive integer")
        _check(isinstance(cfg[section]["lr"], (int, float)) and cfg[section]["lr"] > 0,
               f"{section}.lr", "must be positive")
    q = cfg["audit"]["quantile"]
    _check(isinstance(q, (int, float)) and 0 < q < 1, "audit.quantile", "must lie in (0, 1)")
    _check(_is_int(cfg["audit"]["bins"]) and cfg["audit"]["bins"] >= 2, "audit.bins", "must be >= 2")
    dc = cfg["diffusion"]
    _check(_is_int(dc["T"]) and dc["T"] >= 2, "diffusion.T", "must be an integer >= 2")
    _check(0 < dc["beta_1"] <= dc["beta_T"] < 1, "diffusion.beta_1",
           "need 0 < beta_1 <= beta_T < 1")
    p = cfg["planted"]
    for k in ("exact", "flipped", "rotated"):
        _check(_is_int(p[k]) and p[k] >= 0, f"planted.{k}", "must be a non-negative integer")
    try:
        autoencoder_config(cfg)
        embedder_config(cfg)
        denoiser_config(cfg, (1,) * 4)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides: dict | None = None) -> dict:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} does not exist") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
    cfg = _merge(DEFAULT_CONFIG, doc)
    for k, v in (overrides or {}).items():
        set_path(cfg, k, v)
    validate_config(cfg)
    return cfg


def config_hash(doc) -> str:
    raw = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(raw).hexdigest()[:16]


def derive_seed(seed: int, *labels) -> int:
    """Independent 32-bit seed for a named purpose."""
    words = [seed] + [int.from_bytes(hashlib.sha256(str(x).encode()).digest()[:4], "little")
                      for x in labels]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def autoencoder_config(cfg: dict, seed: int | None = None) -> ae.AutoencoderConfig:
    a = cfg["autoencoder"]
    return ae.AutoencoderConfig(
        dims=tuple(cfg["dims"]), factor=a["factor"], latent_channels=a["latent_channels"],
        widths=tuple(a["widths"]), lr=a["lr"], epochs=a["epochs"], batch_size=a["batch_size"],
        seed=derive_seed(cfg["seed"], "autoencoder") if seed is None else seed,
        augment=bool(a["augment"]))


def embedder_config(cfg: dict) -> con.EmbedderConfig:
    e = cfg["embedder"]
    return con.EmbedderConfig(
        dims=tuple(cfg["dims"]), widths=tuple(e["widths"]), hidden=e["hidden"], margin=e["margin"],
        lr=e["lr"], epochs=e["epochs"], batch_size=e["batch_size"],
        seed=derive_seed(cfg["seed"], "embedder"), augment_negative=bool(e["augment_negative"]),
        val_triplets=e["val_triplets"], orbit_average=bool(e["orbit_average"]),
        bounded=bool(e["bounded"]))


def denoiser_config(cfg: dict, latent_shape, seed: int = 0) -> df.DenoiserConfig:
    d = cfg["diffusion"]
    return df.DenoiserConfig(
        latent_shape=tuple(latent_shape), width=d["width"], depth=d["depth"],
        time_features=d["time_features"], mixer_hidden=d["mixer_hidden"], lr=d["lr"],
        epochs=d["epochs"], batch_size=d["batch_size"], cosine_decay=bool(d["cosine_decay"]),
        seed=seed)


def default_root() -> Path:
    return Path(os.environ.get(ROOT_ENV, "."))


# ---------------------------------------------------------------- manifest

@dataclass
class RunManifest:
    path: Path
    config: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)

    @classmethod
    def open(cls, root: Path) -> "RunManifest":
        path = Path(root) / MANIFEST_NAME
        if path.is_file():
            doc = json.loads(path.read_text())
            return cls(path, doc.get("config", {}), doc.get("stages", {}))
        return cls(path)

    def save(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"tool_version": __version__, "config": self.config, "stages": self.stages}
        tmp = self.path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
        tmp.replace(self.path)

    def is_current(self, stage: str, digest: str, root: Path) -> bool:
        s = self.stages.get(stage)
        if not s or s.get("status") != "complete" or s.get("config_hash") != digest:
            return False
        for rel, sha in s.get("outputs", {}).items():
            p = root / rel
            if not p.is_file() or file_sha256(p) != sha:
                return False
        return True


class Run:
    """One run root with its config and manifest."""

    def __init__(self, root, config: dict | None = None, force: bool = False):
        self.root = Path(root)
        self.config = copy.deepcopy(config) if config is not None else make_config()
        validate_config(self.config)
        self.force = force
        self.manifest = RunManifest.open(self.root)
        self.manifest.config = self.config

    # paths
    def path(self, kind: str, *parts) -> Path:
        return self.root / self.config["paths"][kind] / Path(*parts) if parts else \
            self.root / self.config["paths"][kind]

    def arm_dir(self, arm: str | None) -> Path:
        return self.root if arm is None else self.root / "experiment" / arm

    def data_manifest(self) -> Path:
        return self.path("data", "manifest.json")

    def ae_ckpt(self) -> Path:
        return self.path("checkpoints", "autoencoder.ckpt")

    def embedder_ckpt(self) -> Path:
        return self.path("checkpoints", "embedder.ckpt")

    def denoiser_ckpt(self, arm: str | None = None) -> Path:
        return self.arm_dir(arm) / self.config["paths"]["checkpoints"] / "denoiser.ckpt"

    def synth_manifest(self, arm: str | None = None) -> Path:
        return self.arm_dir(arm) / self.config["paths"]["synth"] / "manifest.json"

    def report_path(self, arm: str | None = None, suffix: str = "json") -> Path:
        return self.arm_dir(arm) / self.config["paths"]["reports"] / f"audit.{suffix}"

    # bookkeeping
    def _require(self, path: Path, producer: str) -> None:
        if not path.is_file():
            raise MissingDependencyError(f"missing {path}; run `{producer}` first")

    def _stage_hash(self, stage: str) -> str:
        return self.manifest.stages.get(stage, {}).get("config_hash", "")

    def _run_stage(self, stage: str, doc: dict, fn) -> bool:
        """Run ``fn`` unless the stage is current; returns whether it ran."""
        digest = config_hash(doc)
        if not self.force and self.manifest.is_current(stage, digest, self.root):
            log.info("%s: up to date", stage)
            return False
        self.manifest.stages[stage] = {"status": "incomplete", "config_hash": digest}
        self.manifest.save()
        t0 = time.perf_counter()
        try:
            outputs = fn()
        except BaseException:
            self.manifest.stages[stage]["status"] = "failed"
            self.manifest.save()
            raise
        self.manifest.stages[stage] = {
            "status": "complete", "config_hash": digest, "config": doc,
            "seconds": round(time.perf_counter() - t0, 3),
            "outputs": {str(Path(p).relative_to(self.root)): file_sha256(p) for p in outputs},
        }
        self.manifest.save()
        return True

    # ------------------------------------------------------------ stages

    def phantom(self) -> bool:
        c = self.config
        doc = {"seed": c["seed"], "dims": c["dims"], "n_train": c["n_train"], "n_val": c["n_val"]}

        def go():
            dims = tuple(c["dims"])
            train = vol.generate_phantoms(derive_seed(c["seed"], "train"), c["n_train"], dims,
                                          prefix="tr")
            val = vol.generate_phantoms(derive_seed(c["seed"], "val"), c["n_val"], dims,
                                        prefix="va")
            m = vol.write_dataset(self.path("data"), train, val, seed=c["seed"])
            return [self.data_manifest()] + [m.root / e.path for e in m.entries]
        return self._run_stage("phantom", doc, go)

    def train_ae(self) -> bool:
        self._require(self.data_manifest(), "phantom")
        doc = {"autoencoder": self.config["autoencoder"], "seed": self.config["seed"],
               "data": self._stage_hash("phantom")}

        def go():
            params, curve = ae.train_autoencoder(autoencoder_config(self.config), self.data_manifest())
            self.ae_ckpt().parent.mkdir(parents=True, exist_ok=True)
            ae.save(params, self.ae_ckpt(), len(curve), curve[-1])
            return [self.ae_ckpt()]
        return self._run_stage("train-ae", doc, go)

    def train_con(self) -> bool:
        self._require(self.data_manifest(), "phantom")
        rt = bool(self.config["embedder"]["roundtrip_positives"])
        if rt:
            self._require(self.ae_ckpt(), "train-ae")
        doc = {"embedder": self.config["embedder"], "seed": self.config["seed"],
               "data": self._stage_hash("phantom"),
               "autoencoder": self._stage_hash("train-ae") if rt else None}

        def go():
            transform = None
            if rt:
                p = ae.load(self.ae_ckpt())
                transform = lambda b: ae.decode_batched(p, ae.encode_batched(p, b))  # noqa: E731
            m = vol.DatasetManifest.read(self.data_manifest())
            params, hist = con.train_embedder(embedder_config(self.config), m,
                                              positive_transform=transform)
            self.embedder_ckpt().parent.mkdir(parents=True, exist_ok=True)
            con.save(params, self.embedder_ckpt(), hist.best_epoch,
                     hist.loss[hist.best_epoch] if hist.loss else None)
            return [self.embedder_ckpt()]
        return self._run_stage("train-con", doc, go)

    def _diff_label(self, arm):
        return "train-diff" if arm is None else f"train-diff[{arm}]"

    def train_diff(self, arm: str | None = None, augment: bool | None = None,
                   seed: int | None = None) -> bool:
        self._require(self.ae_ckpt(), "train-ae")
        self._require(self.data_manifest(), "phantom")
        dcfg = dict(self.config["diffusion"])
        if augment is not None:
            dcfg["augment"] = bool(augment)
        seed = derive_seed(self.config["seed"], "diffusion") if seed is None else seed
        doc = {"diffusion": dcfg, "seed": seed, "autoencoder": self._stage_hash("train-ae"),
               "data": self._stage_hash("phantom")}

        def go():
            p = ae.load(self.ae_ckpt())
            train = vol.DatasetManifest.read(self.data_manifest()).load("train")
            x = vol.stack(train)
            if dcfg["augment"]:
                orients = vol.enumerate_orientations(tuple(self.config["dims"]))
                lat = np.stack([ae.encode_batched(p, np.stack([vol.orient_array(v.voxels, o)[None]
                                                               for o in orients]))
                                for v in train])
            else:
                lat = ae.encode_batched(p, x)
            sched = df.make_schedule(dcfg["T"], dcfg["beta_1"], dcfg["beta_T"])
            cfg = denoiser_config({"diffusion": dcfg}, p.config.latent_shape, seed)
            params, curve = df.train_denoiser(cfg, lat, sched)
            out = self.denoiser_ckpt(arm)
            out.parent.mkdir(parents=True, exist_ok=True)
            df.save(params, out, len(curve), curve[-1])
            return [out]
        return self._run_stage(self._diff_label(arm), doc, go)

    def _synth_count(self) -> int:
        return self.config["n_train"] * self.config["synth_multiplier"]

    def generate(self, arm: str | None = None, seed: int | None = None) -> bool:
        self._require(self.ae_ckpt(), "train-ae")
        self._require(self.denoiser_ckpt(arm), "train-diff")
        seed = derive_seed(self.config["seed"], "generate") if seed is None else seed
        doc = {"count": self._synth_count(), "seed": seed, "clip": self.config["diffusion"]["clip"],
               "denoiser": self._stage_hash(self._diff_label(arm))}

        def go():
            p = ae.load(self.ae_ckpt())
            d = df.load(self.denoiser_ckpt(arm))
            z = df.generate(d, self._synth_count(), seed, clip=bool(self.config["diffusion"]["clip"]))
            x = ae.decode_batched(p, z.astype(np.float32))
            synth = [vol.Volume(f"sy-{i:05d}", x[i, 0]) for i in range(len(x))]
            m = vol.write_dataset(self.synth_manifest(arm).parent, [], synth=synth, seed=seed,
                                  notes=json.dumps({"kind": "ldm"}))
            return [self.synth_manifest(arm)] + [m.root / e.path for e in m.entries]
        return self._run_stage("generate" if arm is None else f"generate[{arm}]", doc, go)

    def plant(self) -> bool:
        """Synthetic pool of fresh phantoms plus planted copies of training volumes."""
        self._require(self.data_manifest(), "phantom")
        c = self.config
        _check(sum(c["planted"].values()) <= c["n_train"], "planted",
               "more planted copies than training volumes")
        doc = {"count": self._synth_count(), "planted": c["planted"], "seed": c["seed"],
               "data": self._stage_hash("phantom")}

        def go():
            train = vol.DatasetManifest.read(self.data_manifest()).load("train")
            synth, truth = planted_pool(train, self._synth_count(), c["planted"],
                                        derive_seed(c["seed"], "planted"))
            m = vol.write_dataset(self.synth_manifest().parent, [], synth=synth, seed=c["seed"],
                                  notes=json.dumps({"kind": "planted", "truth": truth},
                                                   sort_keys=True))
            return [self.synth_manifest()] + [m.root / e.path for e in m.entries]
        return self._run_stage("generate", doc, go)

    def audit(self, arm: str | None = None) -> au.AuditReport:
        self._require(self.data_manifest(), "phantom")
        self._require(self.embedder_ckpt(), "train-con")
        self._require(self.synth_manifest(arm), "generate")
        gen_stage = "generate" if arm is None else f"generate[{arm}]"
        acfg = self.config["audit"]
        doc = {"audit": acfg, "embedder": self._stage_hash("train-con"),
               "synth": self._stage_hash(gen_stage), "data": self._stage_hash("phantom")}
        report_json = self.report_path(arm)

        def go():
            report = self.build_audit(arm)
            report.save(report_json, self.report_path(arm, "csv"))
            tables = [report_json.parent / f"embeddings_{n}.emb" for n in ("train", "val", "synth")]
            return [report_json, self.report_path(arm, "csv")] + tables
        self._run_stage("audit" if arm is None else f"audit[{arm}]", doc, go)
        return au.AuditReport.read(report_json)

    def embedding_tables(self, arm: str | None = None):
        params = con.load(self.embedder_ckpt())
        data = vol.DatasetManifest.read(self.data_manifest())
        synth_m = vol.DatasetManifest.read(self.synth_manifest(arm))
        ckpt_id = file_sha256(self.embedder_ckpt())[:16]
        out_dir = self.report_path(arm).parent
        out_dir.mkdir(parents=True, exist_ok=True)
        tables = {}
        for name, m, split in (("train", data, "train"), ("val", data, "val"),
                               ("synth", synth_m, "synth")):
            vols = m.load(split)
            emb = con.embed_volumes(params, vols)
            save_embedding_table(out_dir / f"embeddings_{name}.emb",
                                 [v.id for v in vols], emb, ckpt_id)
            tables[name] = au.as_table([v.id for v in vols], emb)
        return tables, synth_m

    def build_audit(self, arm: str | None = None) -> au.AuditReport:
        tables, synth_m = self.embedding_tables(arm)
        notes = json.loads(synth_m.notes) if synth_m.notes else {}
        truth = None
        if notes.get("kind") == "planted":
            truth = {tid: True for tid in notes["truth"]}
        acfg = self.config["audit"]
        seeds = {"master": self.config["seed"], "synth": synth_m.seed}
        return au.run_audit(tables["train"], tables["val"], tables["synth"], acfg["quantile"],
                            acfg["bins"], truth, config=self.config, seeds=seeds)

    # ------------------------------------------------------------ compositions

    def audit_pipeline(self, planted: bool = False) -> au.AuditReport:
        self.phantom()
        self.train_ae()
        self.train_con()
        if planted:
            self.plant()
        else:
            self.train_diff()
            self.generate()
        return self.audit()

    def experiment(self, seeds: int = 3) -> dict:
        """Paired LDM arms with and without augmentation over ``seeds`` seeds.

        The corpus, autoencoder and detector are shared by every arm.
        """
        if seeds < 1:
            raise ConfigError("seeds: must be >= 1")
        self.phantom()
        self.train_ae()
        self.train_con()
        rows = []
        for k in range(seeds):
            ldm_seed = derive_seed(self.config["seed"], "experiment-ldm", k)
            gen_seed = derive_seed(self.config["seed"], "experiment-generate", k)
            row = {"seed_index": k, "ldm_seed": ldm_seed, "generate_seed": gen_seed}
            for name, flag in (("aug", True), ("noaug", False)):
                arm = f"seed{k}/{name}"
                self.train_diff(arm, augment=flag, seed=ldm_seed)
                self.generate(arm, seed=gen_seed)
                row[f"copy_rate_{name}"] = self.audit(arm).copy_rate
            rows.append(row)
        result = {
            "copy_rate_aug": float(np.mean([r["copy_rate_aug"] for r in rows])),
            "copy_rate_noaug": float(np.mean([r["copy_rate_noaug"] for r in rows])),
            "shared_detector": True,
            "per_seed": rows,
        }
        out = self.root / "experiment" / "comparison.json"
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = out.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(result, indent=2))
        tmp.replace(out)
        return result


# ---------------------------------------------------------------- planted copies

def orientation_kinds(dims=(16, 16, 16)) -> tuple[list[vol.Orientation], list[vol.Orientation]]:
    """Pure flips and proper rotations (non-trivial axis permutation, determinant +1)."""
    flips, rots = [], []
    for o in vol.enumerate_orientations(dims):
        if o.is_identity:
            continue
        if tuple(o.perm) == (0, 1, 2):
            flips.append(o)
            continue
        sign = np.linalg.det(np.eye(3)[list(o.perm)]) * (-1) ** sum(bool(f) for f in o.flips)
        if sign > 0:
            rots.append(o)
    return flips, rots


def planted_pool(train, count: int, planted: dict, seed: int):
    """``count`` synthetic volumes: fresh phantoms plus copies of training volumes.

    Returns ``(volumes, truth)`` where ``truth`` maps each copied training id
    to ``[synthetic id, orientation label]``. Synthetic ids are assigned in a
    shuffled order so they carry no information about provenance.
    """
    n_copy = planted["exact"] + planted["flipped"] + planted["rotated"]
    if n_copy > len(train) or n_copy > count:
        raise ValueError("more planted copies than training volumes or pool slots")
    rng = np.random.default_rng(seed)
    dims = train[0].dims
    flips, rots = orientation_kinds(dims)
    sources = rng.choice(len(train), n_copy, replace=False)
    kinds = ([vol.IDENTITY] * planted["exact"]
             + [flips[i] for i in rng.integers(len(flips), size=planted["flipped"])]
             + [rots[i] for i in rng.integers(len(rots), size=planted["rotated"])])
    fresh = vol.generate_phantoms(int(rng.integers(2**31)), count - n_copy, dims, prefix="fresh")
    arrays = [vol.orient_array(train[s].voxels, o) for s, o in zip(sources, kinds)]
    arrays += [v.voxels for v in fresh]
    order = rng.permutation(count)
    out = [None] * count
    truth = {}
    for slot, src in enumerate(order):
        sid = f"sy-{slot:05d}"
        out[slot] = vol.Volume(sid, arrays[src])
        if src < n_copy:
            truth[train[sources[src]].id] = [sid, kinds[src].label()]
    return out, truth
