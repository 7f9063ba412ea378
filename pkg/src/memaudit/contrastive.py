"""Orientation-invariant volume embedder trained with a triplet hinge.

The network reuses the autoencoder's downsampling trunk (two stride-2 4^3
convolutions down to an 8-channel 4^3 grid for 16^3 inputs), flattens it and
maps it through two dense layers to a 32-vector.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import volumes as vol
from ._training import TrainingDivergedError, he_normal, leaves, snapshot
from .checkpoint import load_checkpoint, save_checkpoint
from .numerics import (Adam, NonFiniteError, ShapeError, Tensor, backward, conv3d, dense,
                       l2_norm, leaky_relu, mean_all, relu, reshape, sub, tanh)

log = logging.getLogger(__name__)

EMBED_DIM = 32


class EmbeddingCollapseError(TrainingDivergedError):
    """Batch embeddings lost (almost) all variance."""


@dataclass(frozen=True)
class EmbedderConfig:
    dims: tuple[int, int, int] = (16, 16, 16)
    widths: tuple[int, ...] = (16, 8)
    hidden: int = 128
    out_dim: int = EMBED_DIM
    margin: float = 0.0
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    augment_negative: bool = True
    val_triplets: int = 256
    collapse_floor: float = 1e-6
    slope: float = 0.2
    orbit_average: bool = True
    bounded: bool = False

    def __post_init__(self):
        f = 2 ** len(self.widths)
        for axis, n in zip("DHW", self.dims):
            if n % f:
                raise ValueError(f"axis {axis}: extent {n} not divisible by {f}")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")

    @property
    def trunk_shape(self) -> tuple[int, ...]:
        f = 2 ** len(self.widths)
        return (self.widths[-1],) + tuple(n // f for n in self.dims)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EmbedderConfig":
        d = dict(d)
        d["dims"] = tuple(d["dims"])
        d["widths"] = tuple(d["widths"])
        return cls(**d)


@dataclass
class EmbedderParams:
    config: EmbedderConfig
    arrays: dict[str, np.ndarray]


@dataclass(frozen=True)
class Triplet:
    anchor: vol.Volume
    positive: vol.Volume
    negative: vol.Volume
    orientation: vol.Orientation
    negative_orientation: vol.Orientation = vol.IDENTITY


@dataclass
class TrainingHistory:
    loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    val_ratio: list[float] = field(default_factory=list)
    best_epoch: int = -1


def init_embedder(config: EmbedderConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed)
    a = {}
    cin = 1
    for i, cout in enumerate(config.widths):
        a[f"conv{i}.w"] = he_normal(rng, (cout, cin, 4, 4, 4), cin * 64, dtype=dtype)
        cin = cout
    flat = int(np.prod(config.trunk_shape))
    a["fc1.w"] = he_normal(rng, (config.hidden, flat), flat, dtype=dtype)
    a["fc1.b"] = np.zeros(config.hidden, dtype=dtype)
    a["fc2.w"] = he_normal(rng, (config.out_dim, config.hidden), config.hidden, 1.0, dtype)
    a["fc2.b"] = np.zeros(config.out_dim, dtype=dtype)
    return a


def embed_graph(p: dict[str, Tensor], x: Tensor, config: EmbedderConfig) -> Tensor:
    """``[N, 1, D, H, W]`` -> ``[N, out_dim]``."""
    if x.data.ndim != 5 or tuple(x.shape[1:]) != (1,) + tuple(config.dims):
        raise ShapeError(f"embedder expects [N, 1, {config.dims}], got {x.shape}")
    h = x
    for i in range(len(config.widths)):
        h = leaky_relu(conv3d(h, p[f"conv{i}.w"], 2, 1), config.slope)
    h = reshape(h, (x.shape[0], -1))
    h = leaky_relu(dense(h, p["fc1.w"], p["fc1.b"]), config.slope)
    out = dense(h, p["fc2.w"], p["fc2.b"])
    return tanh(out) if config.bounded else out


def _as_batch(x) -> tuple[np.ndarray, bool]:
    if isinstance(x, vol.Volume):
        return x.voxels[None, None], False
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None, None], False
    if x.ndim == 4:
        return x[None], False
    if x.ndim == 5:
        return x, True
    raise ShapeError(f"cannot embed array of shape {x.shape}")


def embed_network(params: EmbedderParams, x, chunk: int = 256) -> np.ndarray:
    """Raw network output, without orientation averaging."""
    xb, batched = _as_batch(x)
    dtype = next(iter(params.arrays.values())).dtype
    p = leaves(params.arrays, False)
    out = np.concatenate([embed_graph(p, Tensor(xb[i:i + chunk].astype(dtype)), params.config).data
                          for i in range(0, len(xb), chunk)])
    return out if batched else out[0]


def _orient_batch(xb: np.ndarray, o: vol.Orientation) -> np.ndarray:
    out = np.transpose(xb, (0, 1) + tuple(2 + k for k in o.perm))
    axes = tuple(2 + k for k in range(3) if o.flips[k])
    return np.ascontiguousarray(np.flip(out, axis=axes) if axes else out)


def embed(params: EmbedderParams, x, chunk: int = 256) -> np.ndarray:
    """Embedding of one volume (``[32]``) or a batch (``[N, 32]``).

    With ``config.orbit_average`` the network output is averaged over every
    extent-preserving orientation of the input, which makes the embedding
    exactly invariant to flips and axis permutations.
    """
    xb, batched = _as_batch(x)
    if not params.config.orbit_average:
        out = embed_network(params, xb, chunk)
    else:
        if tuple(xb.shape[2:]) != tuple(params.config.dims):
            raise ShapeError(f"embedder expects [N, 1, {params.config.dims}], got {xb.shape}")
        orients = vol.enumerate_orientations(params.config.dims)
        acc = np.zeros((len(xb), params.config.out_dim), dtype=np.float64)
        for o in orients:
            acc += embed_network(params, _orient_batch(xb, o), chunk)
        out = (acc / len(orients)).astype(next(iter(params.arrays.values())).dtype)
    return out if batched else out[0]


def embed_volumes(params: EmbedderParams, volumes: Sequence[vol.Volume]) -> np.ndarray:
    return embed(params, vol.stack(volumes, next(iter(params.arrays.values())).dtype))


def triplet_loss(e_a: Tensor, e_p: Tensor, e_n: Tensor, margin: float = 0.0) -> Tensor:
    """Mean over the batch of ``max(0, |a - p| - |a - n| + margin)``.

    Accepts single ``[d]`` vectors or ``[B, d]`` batches.
    """
    if not (e_a.shape == e_p.shape == e_n.shape):
        raise ShapeError(f"triplet dimensions differ: {e_a.shape}, {e_p.shape}, {e_n.shape}")
    if margin < 0:
        raise ValueError("margin must be non-negative")
    d_pos = l2_norm(sub(e_a, e_p))
    d_neg = l2_norm(sub(e_a, e_n))
    gap = sub(d_pos, d_neg)
    if margin:
        gap = gap + Tensor(np.asarray(margin, dtype=gap.dtype))
    return mean_all(relu(gap))


def sample_triplets(volumes: Sequence[vol.Volume], batch: int | None, rng: np.random.Generator,
                    augment_negative: bool = True,
                    orientations: Sequence[vol.Orientation] | None = None) -> list[list[Triplet]]:
    """One epoch of triplets, grouped into batches.

    Every volume is an anchor exactly once (random order); the positive is a
    random orientation of the anchor and the negative a uniformly drawn
    different volume, itself randomly oriented when ``augment_negative``.
    """
    vols = list(volumes)
    n = len(vols)
    if n < 2:
        raise ValueError("triplet sampling needs at least two volumes")
    orients = orientations if orientations is not None else vol.enumerate_orientations(vols[0].dims)
    out = []
    for a in rng.permutation(n):
        pos, o = vol.random_augment(vols[a], rng, orients)
        j = int(rng.integers(n - 1))
        j = j + 1 if j >= a else j
        neg = vols[j]
        on = vol.IDENTITY
        if augment_negative:
            neg, on = vol.random_augment(neg, rng, orients)
        out.append(Triplet(vols[a], pos, neg, o, on))
    size = batch or n
    return [out[i:i + size] for i in range(0, n, size)]


def _triplet_arrays(triplets: Sequence[Triplet], dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    A = vol.stack([t.anchor for t in triplets], dtype)
    P = vol.stack([t.positive for t in triplets], dtype)
    N = vol.stack([t.negative for t in triplets], dtype)
    return A, P, N


def triplet_distances(params: EmbedderParams, triplets: Sequence[Triplet],
                      raw: bool = False) -> tuple[np.ndarray, np.ndarray]:
    dtype = next(iter(params.arrays.values())).dtype
    A, P, N = _triplet_arrays(triplets, dtype)
    f = embed_network if raw else embed
    ea, ep, en = f(params, A), f(params, P), f(params, N)
    dp = np.linalg.norm(ea.astype(np.float64) - ep, axis=1)
    dn = np.linalg.norm(ea.astype(np.float64) - en, axis=1)
    return dp, dn


def triplet_accuracy(params: EmbedderParams, triplets: Sequence[Triplet], raw: bool = False) -> float:
    """Fraction of triplets whose positive is strictly closer than the negative."""
    dp, dn = triplet_distances(params, triplets, raw)
    return float(np.mean(dp < dn))


def validation_triplets(volumes: Sequence[vol.Volume], count: int, seed: int) -> list[Triplet]:
    """``count`` seeded triplets drawn in without-replacement anchor passes."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    out: list[Triplet] = []
    while len(out) < count:
        for b in sample_triplets(volumes, None, rng):
            out.extend(b)
    return out[:count]


def train_embedder(config: EmbedderConfig, data, val=None, dtype=np.float32,
                   positive_transform: Callable[[np.ndarray], np.ndarray] | None = None):
    """Fit the embedder on triplets of training volumes.

    ``data``/``val`` are manifests, manifest paths or volume sequences; with
    a manifest and no explicit ``val``, its ``val`` split is used. Returns
    ``(params, history)`` where ``params`` is the best-validation checkpoint
    (highest triplet accuracy, ties broken by the lower median ratio of
    positive to negative distance). Without validation volumes the final
    epoch is returned. ``positive_transform`` maps a ``[B, 1, D, H, W]``
    batch of positives to degraded versions of the same shape, such as an
    autoencoder round trip, before they are embedded.
    """
    train = vol.as_volume_list(data, "train")
    if val is None and (isinstance(data, (vol.DatasetManifest, str)) or hasattr(data, "__fspath__")):
        val = vol.as_volume_list(data, "val")
    val_vols = list(val) if val is not None else []
    if len(train) < 2:
        raise ValueError("embedder training needs at least two training volumes")
    for v in train + val_vols:
        if v.dims != tuple(config.dims):
            raise ShapeError(f"volume {v.id!r} has dims {v.dims}, config expects {config.dims}")

    p = leaves(init_embedder(config, dtype))
    opt = Adam(lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
    orients = vol.enumerate_orientations(config.dims)
    vtrip = (validation_triplets(val_vols, config.val_triplets, config.seed)
             if len(val_vols) >= 2 else [])
    hist = TrainingHistory()
    best_key, best = None, snapshot(p)
    last_good = snapshot(p)
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for batch in sample_triplets(train, config.batch_size, rng, config.augment_negative, orients):
            A, P, N = _triplet_arrays(batch, dtype)
            if positive_transform is not None:
                P = np.asarray(positive_transform(P), dtype=dtype)
                if P.shape != A.shape:
                    raise ShapeError(f"positive_transform returned {P.shape}, expected {A.shape}")
            try:
                ea = embed_graph(p, Tensor(A), config)
                ep = embed_graph(p, Tensor(P), config)
                en = embed_graph(p, Tensor(N), config)
                var = float(np.var(np.concatenate([ea.data, ep.data, en.data]), axis=0).mean())
                if var < config.collapse_floor:
                    raise EmbeddingCollapseError(
                        f"epoch {epoch}: batch embedding variance {var:.3g} below "
                        f"{config.collapse_floor:g}", epoch, last_good)
                loss = triplet_loss(ea, ep, en, config.margin)
                grads = backward(loss, p)
            except EmbeddingCollapseError:
                raise
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"embedder epoch {epoch}: {exc}", epoch,
                                            last_good) from exc
            opt.step(p, grads)
            total += float(loss.data) * len(batch)
            count += len(batch)
        hist.loss.append(total / count)
        last_good = snapshot(p)
        if vtrip:
            dp, dn = triplet_distances(EmbedderParams(config, last_good), vtrip, raw=True)
            acc = float(np.mean(dp < dn))
            ratio = float(np.median(dp / np.maximum(dn, 1e-12)))
            hist.val_accuracy.append(acc)
            hist.val_ratio.append(ratio)
            key = (acc, -ratio)
            if best_key is None or key >= best_key:
                best_key, best, hist.best_epoch = key, last_good, epoch
            log.debug("embedder epoch %d loss %.4f val acc %.3f ratio %.3f",
                      epoch, hist.loss[-1], acc, ratio)
    if not vtrip:
        best, hist.best_epoch = last_good, config.epochs - 1
    return EmbedderParams(config, best), hist


def save(params: EmbedderParams, path, epoch: int | None = None, loss: float | None = None) -> str:
    header = {"kind": "embedder", "config": params.config.to_dict(), "epoch": epoch, "loss": loss}
    return save_checkpoint(path, header, params.arrays)


def load(path) -> EmbedderParams:
    header, arrays = load_checkpoint(path)
    if header.get("kind") != "embedder":
        raise ValueError(f"{path} is not an embedder checkpoint")
    return EmbedderParams(EmbedderConfig.from_dict(header["config"]), arrays)
