"""3D convolutional autoencoder trained on mean L1 reconstruction error.

Encoder: ``log2(factor)`` blocks of (4^3 conv, stride 2, pad 1, leaky ReLU),
then a 3^3 conv to ``latent_channels``. Decoder mirrors it with a 3^3 conv,
stride-2 transposed convolutions and a final ``tanh`` so reconstructions
stay inside the ``(-1, 1)`` intensity range of the data.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import volumes as vol
from ._training import TrainingDivergedError, cast, he_normal, leaves, snapshot
from .checkpoint import load_checkpoint, save_checkpoint
from .numerics import (Adam, NonFiniteError, ShapeError, Tensor, backward, conv3d,
                       l1_loss, leaky_relu, tanh, transposed_conv3d)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AutoencoderConfig:
    dims: tuple[int, int, int] = (16, 16, 16)
    factor: int = 4
    latent_channels: int = 8
    widths: tuple[int, ...] = (16, 32)
    lr: float = 2e-3
    epochs: int = 150
    batch_size: int = 16
    seed: int = 0
    augment: bool = False
    slope: float = 0.2

    def __post_init__(self):
        f = self.factor
        if f < 2 or f & (f - 1):
            raise ValueError(f"factor must be a power of two >= 2, got {f}")
        stages = f.bit_length() - 1
        if len(self.widths) != stages:
            raise ValueError(f"factor {f} needs {stages} widths, got {len(self.widths)}")
        for axis, n in zip("DHW", self.dims):
            if n % f:
                raise ValueError(f"axis {axis}: extent {n} is not divisible by factor {f}")

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        return (self.latent_channels,) + tuple(n // self.factor for n in self.dims)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AutoencoderConfig":
        d = dict(d)
        d["dims"] = tuple(d["dims"])
        d["widths"] = tuple(d["widths"])
        return cls(**d)


@dataclass
class AutoencoderParams:
    config: AutoencoderConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def encoder(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if k.startswith("enc.")}

    @property
    def decoder(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if k.startswith("dec.")}


def init_params(config: AutoencoderConfig, dtype=np.float32) -> AutoencoderParams:
    rng = np.random.default_rng(config.seed)
    w = config.widths
    a: dict[str, np.ndarray] = {}
    cin = 1
    for i, cout in enumerate(w):
        a[f"enc.down{i}.w"] = he_normal(rng, (cout, cin, 4, 4, 4), cin * 64, dtype=dtype)
        cin = cout
    a["enc.latent.w"] = he_normal(rng, (config.latent_channels, cin, 3, 3, 3), cin * 27, 1.0, dtype)
    a["dec.in.w"] = he_normal(rng, (w[-1], config.latent_channels, 3, 3, 3),
                              config.latent_channels * 27, dtype=dtype)
    # transposed kernels are [C_in_of_output_side..]: shape [C_from, C_to, k, k, k]
    outs = list(reversed(w[:-1])) + [1]
    cfrom = w[-1]
    for i, cto in enumerate(outs):
        gain = 1.0 if i == len(outs) - 1 else 2.0
        # each output voxel of a stride-2 k4 transposed conv sees 8 taps per input channel
        a[f"dec.up{i}.w"] = he_normal(rng, (cfrom, cto, 4, 4, 4), cfrom * 8, gain, dtype)
        cfrom = cto
    return AutoencoderParams(config, a)


def _batch(x) -> tuple[np.ndarray, bool]:
    if isinstance(x, vol.Volume):
        return x.voxels[None, None], False
    if isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None, None], False
    if x.ndim == 4:
        return x[None], False
    if x.ndim == 5:
        return x, True
    raise ShapeError(f"expected a volume, [1,D,H,W] or [N,1,D,H,W], got shape {x.shape}")


def encode_graph(p: dict[str, Tensor], x: Tensor, config: AutoencoderConfig) -> Tensor:
    if tuple(x.shape[-3:]) != tuple(config.dims) or x.shape[-4] != 1:
        raise ShapeError(f"encoder expects [.., 1, {config.dims}], got {x.shape}")
    h = x
    for i in range(len(config.widths)):
        h = leaky_relu(conv3d(h, p[f"enc.down{i}.w"], 2, 1), config.slope)
    return conv3d(h, p["enc.latent.w"], 1, 1)


def decode_graph(p: dict[str, Tensor], z: Tensor, config: AutoencoderConfig) -> Tensor:
    if tuple(z.shape[-4:]) != config.latent_shape:
        raise ShapeError(f"decoder expects latent {config.latent_shape}, got {z.shape[-4:]}")
    h = leaky_relu(conv3d(z, p["dec.in.w"], 1, 1), config.slope)
    n = len(config.widths)
    for i in range(n):
        h = transposed_conv3d(h, p[f"dec.up{i}.w"], 2, 1)
        h = tanh(h) if i == n - 1 else leaky_relu(h, config.slope)
    return h


def encode(params: AutoencoderParams, x) -> np.ndarray:
    """Latent ``[C, d, h, w]`` for one volume or ``[N, C, d, h, w]`` for a batch."""
    xb, batched = _batch(x)
    z = encode_graph(leaves(params.arrays, False), Tensor(xb.astype(_dtype(params))),
                     params.config).data
    return z if batched else z[0]


def decode(params: AutoencoderParams, z) -> np.ndarray:
    """Reconstruction ``[1, D, H, W]`` (or ``[N, 1, D, H, W]``) in ``(-1, 1)``."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z)
    batched = z.ndim == 5
    zb = z if batched else z[None]
    x = decode_graph(leaves(params.arrays, False), Tensor(zb.astype(_dtype(params))),
                     params.config).data
    # tanh rounds to exactly +-1 in float32 once saturated; keep the open interval
    edge = np.nextafter(x.dtype.type(1), x.dtype.type(0))
    np.clip(x, -edge, edge, out=x)
    return x if batched else x[0]


def encode_batched(params: AutoencoderParams, batch: np.ndarray, chunk: int = 64) -> np.ndarray:
    return np.concatenate([encode(params, batch[i:i + chunk]) for i in range(0, len(batch), chunk)])


def decode_batched(params: AutoencoderParams, z: np.ndarray, chunk: int = 64) -> np.ndarray:
    return np.concatenate([decode(params, z[i:i + chunk]) for i in range(0, len(z), chunk)])


def _dtype(params: AutoencoderParams):
    return next(iter(params.arrays.values())).dtype


def reconstruction_loss(p: dict[str, Tensor], x: Tensor, config: AutoencoderConfig) -> Tensor:
    return l1_loss(x, decode_graph(p, encode_graph(p, x, config), config))


def reconstruction_error(params: AutoencoderParams, volumes: Sequence[vol.Volume]) -> float:
    """Mean L1 between volumes and their reconstructions."""
    x = vol.stack(volumes, _dtype(params))
    xhat = decode_batched(params, encode_batched(params, x))
    return float(np.mean(np.abs(x.astype(np.float64) - xhat)))


def train_autoencoder(config: AutoencoderConfig, data, dtype=np.float32):
    """Fit the autoencoder by Adam on mean L1 reconstruction loss.

    ``data`` is a :class:`~memaudit.volumes.DatasetManifest` (train split
    used), a manifest path, or a sequence of volumes. Returns
    ``(params, loss_curve)`` where ``loss_curve[e]`` is the sample-weighted
    mean batch loss of epoch ``e``.
    """
    volumes = vol.as_volume_list(data, "train")
    if not volumes:
        raise ValueError("autoencoder training needs at least one training volume")
    for v in volumes:
        if v.dims != tuple(config.dims):
            raise ShapeError(f"volume {v.id!r} has dims {v.dims}, config expects {config.dims}")
    params = init_params(config, dtype)
    p = leaves(params.arrays)
    opt = Adam(lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    orients = vol.enumerate_orientations(config.dims)
    base = vol.stack(volumes, dtype)
    n = len(volumes)
    curve: list[float] = []
    last_good = snapshot(p)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = base[idx]
            if config.augment:
                xb = np.stack([vol.orient_array(xi[0], orients[rng.integers(len(orients))])[None]
                               for xi in xb])
            try:
                loss = reconstruction_loss(p, Tensor(xb), config)
                grads = backward(loss, p)
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"autoencoder epoch {epoch}: {exc}", epoch,
                                            last_good) from exc
            opt.step(p, grads)
            total += float(loss.data) * len(idx)
        curve.append(total / n)
        last_good = snapshot(p)
        log.debug("autoencoder epoch %d loss %.5f", epoch, curve[-1])
    return AutoencoderParams(config, last_good), curve


def save(params: AutoencoderParams, path, epoch: int | None = None,
         loss: float | None = None) -> str:
    header = {"kind": "autoencoder", "config": params.config.to_dict(),
              "epoch": epoch, "loss": loss}
    return save_checkpoint(path, header, params.arrays)


def load(path) -> AutoencoderParams:
    header, arrays = load_checkpoint(path)
    if header.get("kind") != "autoencoder":
        raise ValueError(f"{path} is not an autoencoder checkpoint")
    return AutoencoderParams(AutoencoderConfig.from_dict(header["config"]), arrays)


def parameter_report(config: AutoencoderConfig):
    from ._training import param_report
    return param_report(init_params(config).arrays)


def as_float64(params: AutoencoderParams) -> AutoencoderParams:
    return AutoencoderParams(params.config, cast(params.arrays, np.float64))
