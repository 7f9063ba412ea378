"""Denoising diffusion over autoencoder latents.

Timesteps are 1-based: ``betas[t - 1]`` is the noise variance added by step
``t``. The denoiser predicts the injected noise (epsilon parameterization)
and sampling uses reverse variance ``beta_t``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from ._training import TrainingDivergedError, he_normal, leaves, snapshot
from .checkpoint import load_checkpoint, save_checkpoint
from .numerics import (Adam, NonFiniteError, ShapeError, Tensor, add, add_channel_bias,
                       backward, conv3d, dense, leaky_relu, mse_loss, reshape)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- schedule

@dataclass(frozen=True)
class VarianceSchedule:
    betas: np.ndarray
    kind: str = "linear"

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def beta(self, t: int) -> float:
        return float(self.betas[self._index(t)])

    def alpha_bar(self, t: int) -> float:
        """Cumulative product up to ``t``; ``alpha_bar(0) == 1``."""
        if t == 0:
            return 1.0
        return float(self.alpha_bars[self._index(t)])

    def _index(self, t) -> int:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return int(t) - 1

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T, "beta_1": float(self.betas[0]),
                "beta_T": float(self.betas[-1])}

    @classmethod
    def from_dict(cls, d: dict) -> "VarianceSchedule":
        return make_schedule(d["T"], d["beta_1"], d["beta_T"], d.get("kind", "linear"))


def make_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02,
                  kind: str = "linear") -> VarianceSchedule:
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind {kind!r}")
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not 0 < beta_1 <= beta_T < 1:
        raise ValueError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    return VarianceSchedule(np.linspace(beta_1, beta_T, T, dtype=np.float64), kind)


def forward_step(z_prev: np.ndarray, t: int, eps: np.ndarray, schedule: VarianceSchedule) -> np.ndarray:
    """One noising step: ``sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) eps``."""
    b = schedule.beta(t)
    if np.shape(eps) != np.shape(z_prev):
        raise ShapeError(f"eps shape {np.shape(eps)} differs from z {np.shape(z_prev)}")
    return np.sqrt(1.0 - b) * z_prev + np.sqrt(b) * eps


def q_sample(z0: np.ndarray, t: int, eps: np.ndarray, schedule: VarianceSchedule) -> np.ndarray:
    """Closed-form marginal: ``sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps``."""
    ab = schedule.alpha_bar(schedule._index(t) + 1)
    if np.shape(eps) != np.shape(z0):
        raise ShapeError(f"eps shape {np.shape(eps)} differs from z {np.shape(z0)}")
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------- latent stats

@dataclass(frozen=True)
class LatentStats:
    """Per-channel mean/std of training latents.

    ``bound`` is the largest absolute standardized training value; sampling
    can clip its running estimate of ``z_0`` to it.
    """
    mean: np.ndarray
    std: np.ndarray
    bound: float = float("inf")

    @classmethod
    def fit(cls, latents: np.ndarray, floor: float = 1e-6) -> "LatentStats":
        z = np.asarray(latents, dtype=np.float64)
        # channel axis is the 4th from the end
        z = np.moveaxis(z.reshape((-1,) + z.shape[-4:]), 1, 0).reshape(z.shape[-4], -1)
        mean, std = z.mean(axis=1), np.maximum(z.std(axis=1), floor)
        bound = float(np.max(np.abs((z - mean[:, None]) / std[:, None])))
        return cls(mean, std, bound)

    def _view(self, a: np.ndarray) -> np.ndarray:
        return a.reshape(-1, 1, 1, 1)

    def standardize(self, z: np.ndarray) -> np.ndarray:
        return ((z - self._view(self.mean)) / self._view(self.std)).astype(z.dtype)

    def destandardize(self, z: np.ndarray) -> np.ndarray:
        return (z * self._view(self.std) + self._view(self.mean)).astype(z.dtype)


# ---------------------------------------------------------------- denoiser

@dataclass(frozen=True)
class DenoiserConfig:
    latent_shape: tuple[int, int, int, int] = (8, 4, 4, 4)
    width: int = 48
    depth: int = 3
    time_features: int = 32
    mixer_hidden: int = 256
    lr: float = 1e-3
    epochs: int = 1000
    batch_size: int = 10
    seed: int = 0
    slope: float = 0.2
    cosine_decay: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["latent_shape"] = tuple(d["latent_shape"])
        return cls(**d)


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    arrays: dict[str, np.ndarray]
    stats: LatentStats
    schedule: VarianceSchedule


def time_table(T: int, features: int) -> np.ndarray:
    """Sinusoidal features for timesteps ``0..T`` as rows."""
    half = features // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    t = np.arange(T + 1)[:, None] * freqs[None]
    return np.concatenate([np.sin(t), np.cos(t)], axis=1)


def init_denoiser(config: DenoiserConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed)
    C = config.latent_shape[0]
    W, F = config.width, config.time_features
    a = {"in.w": he_normal(rng, (W, C, 3, 3, 3), C * 27, dtype=dtype)}
    for j in range(config.depth):
        if j > 0:
            a[f"h{j}.w"] = he_normal(rng, (W, W, 3, 3, 3), W * 27, 1.0, dtype)
        a[f"t{j}.w"] = he_normal(rng, (W, F), F, 1.0, dtype)
        a[f"t{j}.b"] = np.zeros(W, dtype=dtype)
    if config.mixer_hidden:
        M = W * int(np.prod(config.latent_shape[1:]))
        a["mix.in.w"] = he_normal(rng, (config.mixer_hidden, M), M, dtype=dtype)
        a["mix.in.b"] = np.zeros(config.mixer_hidden, dtype=dtype)
        a["mix.t.w"] = he_normal(rng, (config.mixer_hidden, F), F, 1.0, dtype)
        a["mix.out.w"] = he_normal(rng, (M, config.mixer_hidden), config.mixer_hidden, 1.0, dtype)
        a["mix.out.b"] = np.zeros(M, dtype=dtype)
    a["out.w"] = (he_normal(rng, (C, W, 3, 3, 3), W * 27, 1.0, dtype) * 0.01).astype(dtype)
    return a


def denoiser_graph(p: dict[str, Tensor], z_t: Tensor, temb: np.ndarray,
                   config: DenoiserConfig) -> Tensor:
    """Predicted noise for a batch ``[N, C, d, h, w]`` with time features ``[N, F]``."""
    if tuple(z_t.shape[1:]) != tuple(config.latent_shape):
        raise ShapeError(f"denoiser expects [N, {config.latent_shape}], got {z_t.shape}")
    te = Tensor(temb.astype(z_t.dtype))
    h = conv3d(z_t, p["in.w"], 1, 1)
    h = leaky_relu(add_channel_bias(h, dense(te, p["t0.w"], p["t0.b"])), config.slope)
    for j in range(1, config.depth):
        r = conv3d(h, p[f"h{j}.w"], 1, 1)
        r = leaky_relu(add_channel_bias(r, dense(te, p[f"t{j}.w"], p[f"t{j}.b"])), config.slope)
        h = add(h, r)
    if config.mixer_hidden:
        # global dense block: every latent voxel sees every other one
        n = h.shape[0]
        flat = reshape(h, (n, -1))
        m = add(dense(flat, p["mix.in.w"], p["mix.in.b"]),
                dense(te, p["mix.t.w"], Tensor(np.zeros(config.mixer_hidden, dtype=h.dtype))))
        m = dense(leaky_relu(m, config.slope), p["mix.out.w"], p["mix.out.b"])
        h = add(h, reshape(m, h.shape))
    return conv3d(h, p["out.w"], 1, 1)


def predict_noise(params: DenoiserParams, z_t: np.ndarray, t) -> np.ndarray:
    """``eps_hat(z_t, t)`` in standardized latent space; ``t`` int or per-sample array."""
    z = np.asarray(z_t)
    single = z.ndim == 4
    zb = z[None] if single else z
    dtype = next(iter(params.arrays.values())).dtype
    ts = np.broadcast_to(np.asarray(t, dtype=np.int64), (zb.shape[0],))
    table = time_table(params.schedule.T, params.config.time_features)
    out = denoiser_graph(leaves(params.arrays, False), Tensor(zb.astype(dtype)), table[ts],
                         params.config).data
    return out[0] if single else out


def denoising_loss(p: dict[str, Tensor], z0: np.ndarray, t: np.ndarray, eps: np.ndarray,
                   schedule: VarianceSchedule, table: np.ndarray, config: DenoiserConfig) -> Tensor:
    ab = schedule.alpha_bars[t - 1].reshape(-1, 1, 1, 1, 1)
    zt = (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(z0.dtype)
    return mse_loss(Tensor(eps), denoiser_graph(p, Tensor(zt), table[t], config))


def train_denoiser(config: DenoiserConfig, latents: np.ndarray, schedule: VarianceSchedule,
                   stats: LatentStats | None = None, dtype=np.float32):
    """Fit the noise predictor on latents.

    ``latents`` is ``[N, C, d, h, w]``, or ``[N, K, C, d, h, w]`` when every
    training item has ``K`` variants (augmented encodings); in that case each
    epoch visits every item once through one randomly chosen variant.
    Latents are standardized with ``stats`` (fitted on ``latents`` when not
    given). With ``cosine_decay`` the step size falls from ``lr`` to zero
    along a half cosine over all steps. Returns ``(params, per-epoch mean loss)``.
    """
    z = np.asarray(latents, dtype=dtype)
    if z.ndim == 5:
        z = z[:, None]
    if z.ndim != 6 or tuple(z.shape[2:]) != tuple(config.latent_shape):
        raise ShapeError(f"latents must be [N,(K,){config.latent_shape}], got {np.shape(latents)}")
    if z.shape[0] < 2:
        raise ValueError("denoiser training needs at least two latents")
    stats = stats or LatentStats.fit(z)
    zs = stats.standardize(z.reshape((-1,) + z.shape[2:])).reshape(z.shape)
    n, k = z.shape[:2]

    arrays = init_denoiser(config, dtype)
    p = leaves(arrays)
    opt = Adam(lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    table = time_table(schedule.T, config.time_features)
    curve: list[float] = []
    last_good = snapshot(p)
    steps = config.epochs * -(-n // config.batch_size)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            if config.cosine_decay:
                opt.state.lr = config.lr * 0.5 * (1.0 + np.cos(np.pi * opt.state.step / steps))
            idx = order[start:start + config.batch_size]
            var = rng.integers(k, size=len(idx)) if k > 1 else np.zeros(len(idx), dtype=int)
            z0 = zs[idx, var]
            t = rng.integers(1, schedule.T + 1, size=len(idx))
            eps = rng.standard_normal(z0.shape).astype(dtype)
            try:
                loss = denoising_loss(p, z0, t, eps, schedule, table, config)
                grads = backward(loss, p)
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"denoiser epoch {epoch}: {exc}", epoch,
                                            last_good) from exc
            opt.step(p, grads)
            total += float(loss.data) * len(idx)
        curve.append(total / n)
        last_good = snapshot(p)
        if epoch % 100 == 0:
            log.debug("denoiser epoch %d loss %.4f", epoch, curve[-1])
    return DenoiserParams(config, last_good, stats, schedule), curve


# ---------------------------------------------------------------- sampling

def posterior_mean(z_t: np.ndarray, t: int, eps_hat: np.ndarray, schedule: VarianceSchedule) -> np.ndarray:
    b = schedule.beta(t)
    ab = schedule.alpha_bar(t)
    return (z_t - (b / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(1.0 - b)


def clip_noise_estimate(z_t: np.ndarray, t: int, eps_hat: np.ndarray,
                        schedule: VarianceSchedule, bound: float) -> np.ndarray:
    """Noise estimate consistent with the implied ``z_0`` clipped to ``[-bound, bound]``."""
    ab = schedule.alpha_bar(t)
    z0 = (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    z0 = np.clip(z0, -bound, bound)
    return (z_t - np.sqrt(ab) * z0) / np.sqrt(1.0 - ab)


def p_sample_step(params: DenoiserParams, z_t: np.ndarray, t: int, schedule: VarianceSchedule,
                  rng: np.random.Generator | None = None, eps_hat: np.ndarray | None = None,
                  noise: np.ndarray | None = None, clip: float | None = None) -> np.ndarray:
    """One ancestral step ``z_t -> z_{t-1}`` in standardized latent space.

    No noise is added at ``t == 1``. ``eps_hat`` may be supplied to bypass
    the network (oracle denoisers in tests); ``noise`` likewise fixes the
    injected Gaussian. With ``clip`` set, the noise estimate is first made
    consistent with a clipped ``z_0`` estimate.
    """
    schedule._index(t)
    if eps_hat is None:
        eps_hat = predict_noise(params, z_t, t)
    if clip is not None:
        eps_hat = clip_noise_estimate(z_t, t, eps_hat, schedule, clip)
    mean = posterior_mean(z_t, t, eps_hat, schedule)
    if t == 1:
        return mean.astype(np.asarray(z_t).dtype)
    if noise is None:
        if rng is None:
            raise ValueError("p_sample_step needs rng or noise for t > 1")
        noise = rng.standard_normal(np.shape(z_t))
    return (mean + np.sqrt(schedule.beta(t)) * noise).astype(np.asarray(z_t).dtype)


def generate(params: DenoiserParams, count: int, seed: int,
             schedule: VarianceSchedule | None = None, chunk: int = 128,
             clip: bool = False) -> np.ndarray:
    """Sample ``count`` latents ``[count, C, d, h, w]`` in the autoencoder's scale.

    Sample ``i`` draws all of its noise from child stream ``i`` of
    ``SeedSequence(seed)``. ``clip`` bounds the running ``z_0`` estimate by
    the training range stored in the latent stats.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    schedule = schedule or params.schedule
    shape = tuple(params.config.latent_shape)
    dtype = next(iter(params.arrays.values())).dtype
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]
    out = []
    for s in range(0, count, chunk):
        block = rngs[s:s + chunk]
        z = np.stack([r.standard_normal(shape) for r in block]).astype(dtype)
        for t in range(schedule.T, 0, -1):
            noise = np.stack([r.standard_normal(shape) for r in block]) if t > 1 else None
            z = p_sample_step(params, z, t, schedule, noise=noise,
                              clip=params.stats.bound if clip else None)
        out.append(z)
    z = np.concatenate(out)
    return params.stats.destandardize(z)


# ---------------------------------------------------------------- checkpoints

def save(params: DenoiserParams, path, epoch: int | None = None, loss: float | None = None) -> str:
    header = {"kind": "denoiser", "config": params.config.to_dict(),
              "schedule": params.schedule.to_dict(), "epoch": epoch, "loss": loss}
    arrays = dict(params.arrays)
    arrays["stats.mean"] = params.stats.mean
    arrays["stats.std"] = params.stats.std
    header["stats_bound"] = params.stats.bound
    return save_checkpoint(path, header, arrays)


def load(path) -> DenoiserParams:
    header, arrays = load_checkpoint(path)
    if header.get("kind") != "denoiser":
        raise ValueError(f"{path} is not a denoiser checkpoint")
    stats = LatentStats(arrays.pop("stats.mean"), arrays.pop("stats.std"),
                        header.get("stats_bound", float("inf")))
    return DenoiserParams(DenoiserConfig.from_dict(header["config"]), arrays, stats,
                          VarianceSchedule.from_dict(header["schedule"]))
