"""cVAE training with a latent regressor.

One step encodes each target spectrogram, samples ``z`` by
reparameterization and separates the mixture with it (reconstruction and KL
terms). It then separates the same mixtures with a fresh ``z' ~ N(0, I)``,
re-encodes the outputs and penalizes ``|z' - mu|`` (latent term). Both
separator passes run as one batch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import MixtureSample, sample_training_example
from .model import LatentDist, ModelConfig, ParamSet, init_params, load_checkpoint, query_encode, save_checkpoint, separate, to_f32_grid
from .tensor import AdamState, Tensor


@dataclass(frozen=True)
class Hyper:
    lambda_r: float = 10.0
    lambda_kl: float = 0.01
    lambda_latent: float = 0.5
    lr: float = 0.0002
    decay_start: int = 200000
    decay_every: int = 10000
    decay_step: float = 5e-6
    decay_mode: str = "subtract"  # or "set": lr becomes decay_step after decay_start
    lr_floor: float = 1e-7
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 5
    clip_norm: float = 5.0
    conv_dtype: str = "float32"  # matmul precision inside training convolutions

    def __post_init__(self):
        if min(self.lambda_r, self.lambda_kl, self.lambda_latent) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch < 1:
            raise ValueError("batch must be positive")
        if self.conv_dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported conv dtype {self.conv_dtype!r}")
        if self.decay_mode not in ("subtract", "set"):
            raise ValueError(f"unknown decay mode {self.decay_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepReport:
    iteration: int
    loss_r: float
    loss_kl: float
    loss_latent: float
    loss_total: float
    grad_norm: float
    lr: float

    def log_line(self) -> str:
        vals = (self.loss_r, self.loss_kl, self.loss_latent, self.loss_total, self.lr)
        return "\t".join([str(self.iteration)] + [format(v, ".17g") for v in vals])


# ---------------------------------------------------------------------------
# losses


def reparameterize(dist: LatentDist, rng: np.random.Generator | None = None, noise=None) -> Tensor:
    """``mu + exp(logvar / 2) * eps`` with ``eps ~ N(0, I)``."""
    if noise is None:
        noise = rng.standard_normal(dist.mu.shape)
    return T.add(dist.mu, T.mul(T.exp(T.scale(dist.logvar, 0.5)), T.Tensor(noise)))


def loss_reconstruction(target_mag, est_mag) -> Tensor:
    """Mean absolute error over all bins."""
    target_mag, est_mag = T.as_tensor(target_mag), T.as_tensor(est_mag)
    if target_mag.shape != est_mag.shape:
        raise ValueError(f"shape mismatch {target_mag.shape} vs {est_mag.shape}")
    return T.mean(T.abs_(T.sub(est_mag, target_mag)))


def loss_kl(dist: LatentDist) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over dimensions, averaged over a batch."""
    mu, lv = dist.mu, dist.logvar
    per = T.add(T.sub(T.add(T.mul(mu, mu), T.exp(lv)), lv), -1.0)
    total = T.scale(T.sum_(per), 0.5)
    batch = mu.shape[0] if mu.ndim == 2 else 1
    return T.scale(total, 1.0 / batch)


def loss_latent_regressor(z_drawn, recovered_mu) -> Tensor:
    """Mean absolute error between a drawn latent and its re-encoded mean."""
    z_drawn, recovered_mu = T.as_tensor(z_drawn), T.as_tensor(recovered_mu)
    if z_drawn.shape != recovered_mu.shape:
        raise ValueError(f"dimension mismatch {z_drawn.shape} vs {recovered_mu.shape}")
    return T.mean(T.abs_(T.sub(z_drawn, recovered_mu)))


def lr_schedule(iteration: int, hyper: Hyper = Hyper()) -> float:
    if iteration < hyper.decay_start:
        return hyper.lr
    if hyper.decay_mode == "set":
        return hyper.decay_step
    steps = math.floor((iteration - hyper.decay_start) / hyper.decay_every + 1)
    return max(hyper.lr - hyper.decay_step * steps, hyper.lr_floor)


# ---------------------------------------------------------------------------
# one step


@dataclass
class Batch:
    mix_mag: np.ndarray  # N x F x T
    target_mag: np.ndarray


def stack_batch(samples: Sequence[MixtureSample]) -> Batch:
    if not samples:
        raise ValueError("empty batch")
    return Batch(np.stack([s.mix_mag for s in samples]), np.stack([s.target_mag for s in samples]))


def compute_losses(params: Mapping[str, Tensor], cfg: ModelConfig, batch: Batch, noise: np.ndarray,
                   z_prior: np.ndarray, hyper: Hyper) -> tuple[Tensor, tuple[Tensor, Tensor, Tensor]]:
    """Total loss and its three terms for fixed noise draws."""
    n = batch.mix_mag.shape[0]
    dist = query_encode(params, cfg, batch.target_mag)
    z = reparameterize(dist, noise=noise)
    z_all = T.concat([z, T.Tensor(z_prior)], axis=0)
    mixes = np.concatenate([batch.mix_mag, batch.mix_mag], axis=0)
    _, est_all = separate(params, cfg, mixes, z_all)
    est, est_prior = T.split(est_all, [n, n], axis=0)
    l_r = loss_reconstruction(batch.target_mag, est)
    l_kl = loss_kl(dist)
    recovered = query_encode(params, cfg, est_prior).mu
    l_lat = loss_latent_regressor(z_prior, recovered)
    total = T.add(T.add(T.scale(l_r, hyper.lambda_r), T.scale(l_kl, hyper.lambda_kl)), T.scale(l_lat, hyper.lambda_latent))
    return total, (l_r, l_kl, l_lat)


def train_step(params: ParamSet, cfg: ModelConfig, state: AdamState, batch: Batch | Sequence[MixtureSample],
               rng: np.random.Generator, hyper: Hyper, iteration: int | None = None) -> StepReport:
    """Forward, backward, clip and one Adam update (in place)."""
    if not isinstance(batch, Batch):
        batch = stack_batch(batch)
    iteration = state.t if iteration is None else iteration
    n = batch.mix_mag.shape[0]
    noise = rng.standard_normal((n, cfg.latent_dim))
    z_prior = rng.standard_normal((n, cfg.latent_dim))
    for p in params.values():
        p.zero_grad()
    with T.conv_precision(hyper.conv_dtype):
        try:
            total, (l_r, l_kl, l_lat) = compute_losses(params, cfg, batch, noise, z_prior, hyper)
        except T.NonFiniteError as exc:
            raise T.NonFiniteError(f"iteration {iteration}: non-finite value in forward pass ({exc})") from None
        T.backward(total)
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}
    norm = T.global_norm(grads[k] for k in sorted(grads))
    if not math.isfinite(norm):
        raise T.NonFiniteError(f"iteration {iteration}: non-finite gradient norm")
    if hyper.clip_norm and norm > hyper.clip_norm:
        factor = hyper.clip_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
    lr = lr_schedule(iteration, hyper)
    T.adam_step(params, grads, state, lr, hyper.beta1, hyper.beta2, hyper.adam_eps)
    # keep state on the float32 grid so checkpoints (float32) resume exactly
    for name, p in params.items():
        p.data = to_f32_grid(p.data)
        state.m[name] = to_f32_grid(state.m[name])
        state.v[name] = to_f32_grid(state.v[name])
    return StepReport(iteration, l_r.item(), l_kl.item(), l_lat.item(), total.item(), norm, lr)


# ---------------------------------------------------------------------------
# loop


def step_rngs(seed: int, iteration: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent data and noise generators for one iteration."""
    return (np.random.default_rng([int(seed), int(iteration), 0]),
            np.random.default_rng([int(seed), int(iteration), 1]))


def sample_batch(pool, cfg: ModelConfig, rng: np.random.Generator, size: int) -> Batch:
    samples = [sample_training_example(pool, rng, cfg.window, cfg.hop, cfg.frames) for _ in range(size)]
    return stack_batch(samples)


CHECKPOINT_NAME = "checkpoint.qsep"
LOG_NAME = "loss.log"


def train_loop(cfg: ModelConfig, pool, iterations: int, out_dir, seed: int = 0, hyper: Hyper = Hyper(),
               checkpoint_every: int = 0, resume: str | Path | None = None, progress=None) -> Path:
    """Train for ``iterations`` total steps, writing ``loss.log`` and checkpoints to ``out_dir``.

    With ``resume`` the run continues from the checkpoint's step count; data
    and noise are drawn per iteration from ``(seed, iteration)``, so a resumed
    run reproduces the uninterrupted one.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / LOG_NAME
    if resume is not None:
        params, state, ckpt_cfg, meta = load_checkpoint(resume)
        if ckpt_cfg != cfg:
            raise ValueError("checkpoint config differs from the requested config")
        seed = int(meta.get("seed", seed))
        lines = log_path.read_text().splitlines()[:state.t] if log_path.exists() else []
        log_path.write_text("".join(line + "\n" for line in lines))
    else:
        params = init_params(cfg, seed)
        state = AdamState()
        log_path.write_text("")
    meta = {"seed": seed, "hyper": hyper.to_dict()}
    with log_path.open("a") as log:
        for it in range(state.t, iterations):
            data_rng, noise_rng = step_rngs(seed, it)
            batch = sample_batch(pool, cfg, data_rng, hyper.batch)
            report = train_step(params, cfg, state, batch, noise_rng, hyper, it)
            log.write(report.log_line() + "\n")
            log.flush()
            if progress is not None:
                progress(report)
            if checkpoint_every and (it + 1) % checkpoint_every == 0 and it + 1 < iterations:
                save_checkpoint(params, state, cfg, out / f"checkpoint_{it + 1:07d}.qsep", meta)
    final = out / CHECKPOINT_NAME
    save_checkpoint(params, state, cfg, final, meta)
    return final


def read_loss_log(path) -> np.ndarray:
    """Rows of ``iter, L_R, L_KL, L_latent, L_total, lr``."""
    rows = [list(map(float, line.split("\t"))) for line in Path(path).read_text().splitlines() if line.strip()]
    return np.array(rows).reshape(-1, 6)
