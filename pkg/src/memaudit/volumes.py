"""Volumes, the VOL1 file format, dataset manifests, phantoms and orientations.

A volume is a ``(D, H, W)`` float array stored in C order, so voxel
``(d, h, w)`` sits at flat index ``(d*H + h)*W + w``.

VOL1 layout (little-endian)::

    0..3    b"VOL1"
    4..15   uint32 D, H, W
    16      dtype code (0 = float32)
    17..19  zero padding
    20..    D*H*W float32 values
"""
from __future__ import annotations

import itertools
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"VOL1"
HEADER = struct.Struct("<4s3IB3x")
DTYPES = {0: np.dtype("<f4")}


SPLITS = ("train", "val", "synth")


class VolumeFormatError(ValueError):
    """Base class for unreadable VOL1 files."""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class UnknownDtypeError(VolumeFormatError):
    pass


@dataclass
class Volume:
    id: str
    voxels: np.ndarray

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume {self.id!r}: voxels must be a non-empty 3-d array, "
                             f"got shape {self.voxels.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)


# --------------------------------------------------------------------- I/O

def save_volume(v: Volume, path) -> None:
    D, H, W = v.dims
    payload = np.ascontiguousarray(v.voxels, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, D, H, W, 0))
        fh.write(payload)


def load_volume(path, id: str | None = None) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < HEADER.size:
        raise TruncatedPayloadError(f"{path}: header is {len(raw)} bytes, need {HEADER.size}")
    _, D, H, W, code = HEADER.unpack_from(raw)
    if code not in DTYPES:
        raise UnknownDtypeError(f"{path}: unknown dtype code {code}")
    dtype = DTYPES[code]
    n = D * H * W
    if n == 0:
        raise VolumeFormatError(f"{path}: zero extent in dims {(D, H, W)}")
    need = n * dtype.itemsize
    have = len(raw) - HEADER.size
    if have < need:
        raise TruncatedPayloadError(
            f"{path}: header declares {D}x{H}x{W} ({n} values) but payload holds "
            f"{have // dtype.itemsize}")
    vox = np.frombuffer(raw, dtype=dtype, count=n, offset=HEADER.size).reshape(D, H, W)
    return Volume(id if id is not None else Path(path).stem, vox.astype(np.float32))


# --------------------------------------------------------------------- manifests

@dataclass
class ManifestEntry:
    id: str
    path: str
    split: str


@dataclass
class DatasetManifest:
    """Train, validation and synthetic volume files.

    Entry paths are stored relative to ``root`` (the manifest's directory).
    """
    entries: list[ManifestEntry]
    seed: int | None = None
    created: str = ""
    notes: str = ""
    root: Path = field(default=Path("."), repr=False)

    def validate(self) -> None:
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"manifest ids are not unique: {dup[:5]}")
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"entry {e.id!r}: split must be one of {SPLITS}, got {e.split!r}")
            if not (self.root / e.path).is_file():
                raise FileNotFoundError(f"entry {e.id!r}: {self.root / e.path} does not exist")

    def ids(self, split: str) -> list[str]:
        return [e.id for e in self.entries if e.split == split]

    def load(self, split: str) -> list[Volume]:
        return [load_volume(self.root / e.path, e.id) for e in self.entries if e.split == split]

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "created": self.created,
            "notes": self.notes,
            "entries": [{"id": e.id, "path": e.path, "split": e.split} for e in self.entries],
        }
        return json.dumps(doc, indent=2)

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(self.to_json())
        os.replace(tmp, path)

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        entries = [ManifestEntry(e["id"], e["path"], e["split"]) for e in doc["entries"]]
        m = cls(entries, doc.get("seed"), doc.get("created", ""), doc.get("notes", ""),
                root=path.parent)
        m.validate()
        return m


def write_dataset(out_dir, train: Sequence[Volume], val: Sequence[Volume] = (),
                  seed: int | None = None, created: str = "", notes: str = "",
                  synth: Sequence[Volume] = ()) -> DatasetManifest:
    """Write volumes as VOL1 files plus ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for split, vols in (("train", train), ("val", val), ("synth", synth)):
        for v in vols:
            rel = f"{v.id}.vol"
            save_volume(v, out / rel)
            entries.append(ManifestEntry(v.id, rel, split))
    m = DatasetManifest(entries, seed, created, notes, root=out)
    m.validate()
    m.save(out / "manifest.json")
    return m


def as_volume_list(source, split: str = "train") -> list[Volume]:
    """Accept a manifest, a manifest path, or a sequence of volumes."""
    if isinstance(source, DatasetManifest):
        return source.load(split)
    if isinstance(source, (str, os.PathLike)):
        return DatasetManifest.read(source).load(split)
    return list(source)


def stack(volumes: Sequence[Volume], dtype=np.float32) -> np.ndarray:
    """``[N, 1, D, H, W]`` batch array."""
    return np.stack([np.asarray(v.voxels, dtype=dtype) for v in volumes])[:, None]


# --------------------------------------------------------------------- intensities

def normalize(v: Volume) -> Volume:
    """Affine rescale to ``[-1, 1]``; constant volumes become all zeros."""
    x = np.asarray(v.voxels, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        out = np.zeros_like(x)
    else:
        out = 2.0 * (x - lo) / (hi - lo) - 1.0
        # pin the extremes; rounding can otherwise leave them one ulp off
        out[x == lo] = -1.0
        out[x == hi] = 1.0
    return Volume(v.id, out.astype(v.voxels.dtype if v.voxels.dtype.kind == "f" else np.float32))


# --------------------------------------------------------------------- phantoms

@dataclass(frozen=True)
class PhantomConfig:
    min_shapes: int = 1
    max_shapes: int = 4
    radius_range: tuple[float, float] = (0.12, 0.35)
    intensity_range: tuple[float, float] = (0.5, 1.5)
    background_slope: float = 0.6
    texture_amplitude: float = 0.35
    texture_waves: int = 3
    edge_softness: float = 0.04


def _phantom(rng: np.random.Generator, dims, cfg: PhantomConfig) -> np.ndarray:
    grids = np.meshgrid(*[(np.arange(n) + 0.5) / n for n in dims], indexing="ij")
    coords = np.stack(grids, axis=-1)

    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    vol = cfg.background_slope * (coords - 0.5) @ direction

    for _ in range(cfg.texture_waves):
        freq = rng.uniform(0.5, 2.0, size=3) * rng.choice([-1.0, 1.0], size=3)
        phase = rng.uniform(0, 2 * np.pi)
        vol += (cfg.texture_amplitude / cfg.texture_waves) * np.cos(
            2 * np.pi * coords @ freq + phase)

    for _ in range(int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))):
        center = rng.uniform(0.2, 0.8, size=3)
        radii = rng.uniform(*cfg.radius_range, size=3)
        sign = rng.choice([-1.0, 1.0])
        amp = sign * rng.uniform(*cfg.intensity_range)
        rel = (coords - center) / radii
        if rng.random() < 0.5:
            r = np.sqrt(np.sum(rel ** 2, axis=-1))
        else:
            r = np.max(np.abs(rel), axis=-1)
        vol += amp / (1.0 + np.exp((r - 1.0) / max(cfg.edge_softness, 1e-6) * np.min(radii)))
    return vol


def generate_phantoms(seed: int, count: int, dims=(16, 16, 16),
                      config: PhantomConfig | None = None, prefix: str = "ph") -> list[Volume]:
    """Deterministic synthetic volumes normalized to ``[-1, 1]``.

    Each volume draws from its own child stream of ``SeedSequence(seed)``, so
    volume ``i`` does not depend on ``count``.
    """
    cfg = config or PhantomConfig()
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 8:
        raise ValueError(f"phantom dims must be three extents >= 8, got {dims}")
    if count < 1:
        raise ValueError("count must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(count)
    out = []
    for i, ss in enumerate(streams):
        raw = _phantom(np.random.default_rng(ss), dims, cfg)
        out.append(normalize(Volume(f"{prefix}{seed}-{i:05d}", raw.astype(np.float32))))
    return out


# --------------------------------------------------------------------- orientations

@dataclass(frozen=True)
class Orientation:
    """Axis permutation followed by per-axis flips of the permuted array.

    Applying it computes ``np.transpose(x, perm)`` and then reverses every
    output axis ``k`` with ``flips[k]`` set.
    """
    perm: tuple[int, int, int] = (0, 1, 2)
    flips: tuple[bool, bool, bool] = (False, False, False)

    def is_valid_for(self, dims) -> bool:
        return all(dims[self.perm[k]] == dims[k] for k in range(3))

    def inverse(self) -> "Orientation":
        q = tuple(int(i) for i in np.argsort(self.perm))
        return Orientation(q, tuple(self.flips[q[m]] for m in range(3)))

    def then(self, other: "Orientation") -> "Orientation":
        """Orientation equal to applying ``self`` first and ``other`` second."""
        perm = tuple(self.perm[other.perm[m]] for m in range(3))
        flips = tuple(other.flips[m] ^ self.flips[other.perm[m]] for m in range(3))
        return Orientation(perm, flips)

    @property
    def is_identity(self) -> bool:
        return self.perm == (0, 1, 2) and not any(self.flips)

    def label(self) -> str:
        return "p" + "".join(map(str, self.perm)) + "f" + "".join("1" if f else "0" for f in self.flips)


IDENTITY = Orientation()


def orient_array(x: np.ndarray, o: Orientation) -> np.ndarray:
    out = np.transpose(x, o.perm)
    axes = tuple(k for k in range(3) if o.flips[k])
    if axes:
        out = np.flip(out, axis=axes)
    return np.ascontiguousarray(out)


def apply_orientation(v: Volume, o: Orientation) -> Volume:
    if not o.is_valid_for(v.dims):
        raise ValueError(f"orientation {o.label()} mixes axes of unequal extent for dims {v.dims}")
    return Volume(v.id, orient_array(v.voxels, o))


def enumerate_orientations(dims=(16, 16, 16)) -> list[Orientation]:
    """All extent-preserving orientations of a grid, identity first."""
    out = []
    for perm in itertools.permutations(range(3)):
        if not all(dims[perm[k]] == dims[k] for k in range(3)):
            continue
        for flips in itertools.product((False, True), repeat=3):
            out.append(Orientation(tuple(perm), tuple(flips)))
    return out


def random_augment(v: Volume, rng: np.random.Generator,
                   orientations: Sequence[Orientation] | None = None) -> tuple[Volume, Orientation]:
    choices = orientations if orientations is not None else enumerate_orientations(v.dims)
    o = choices[int(rng.integers(len(choices)))]
    return apply_orientation(v, o), o


def orientation_from_label(label: str) -> Orientation:
    perm = tuple(int(c) for c in label[1:4])
    flips = tuple(c == "1" for c in label[5:8])
    return Orientation(perm, flips)


def all_orientations_of(volumes: Iterable[Volume]) -> list[tuple[Volume, Orientation]]:
    out = []
    for v in volumes:
        for o in enumerate_orientations(v.dims):
            out.append((apply_orientation(v, o), o))
    return out
