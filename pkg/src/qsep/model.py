"""Query-net and Separator built on :mod:`qsep.tensor`.

The query encoder maps a magnitude spectrogram to a Gaussian latent
(mean, log-variance). The separator is a U-Net over the mixture magnitude,
conditioned on a latent vector twice: the vector is tiled over the
time-frequency plane as extra input channels, and every decoder layer but
the last applies AdaIN with a scale and bias projected from the vector.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import AdamState, Tensor

ParamSet = dict[str, Tensor]

LOGVAR_CLAMP = 10.0
NORM_EPS = 1e-5
LEAKY_SLOPE = 0.2
KERNEL = 4


@dataclass(frozen=True)
class ModelConfig:
    preset: str
    sample_rate: int
    window: int
    hop: int
    segment_seconds: float
    latent_dim: int
    query_channels: tuple[int, ...]
    query_time_strides: tuple[int, ...]
    gru_units: int
    sep_channels: tuple[int, ...]
    kernel: int = KERNEL

    def __post_init__(self):
        object.__setattr__(self, "query_channels", tuple(self.query_channels))
        object.__setattr__(self, "query_time_strides", tuple(self.query_time_strides))
        object.__setattr__(self, "sep_channels", tuple(self.sep_channels))
        if len(self.query_channels) != len(self.query_time_strides):
            raise ValueError("query_channels and query_time_strides differ in length")
        if self.hop <= 0 or self.window % self.hop:
            raise ValueError("window must be a multiple of hop")
        if self.sample_rate <= 0 or self.latent_dim <= 0:
            raise ValueError("sample_rate and latent_dim must be positive")
        if self.freq_bins % (2 ** self.depth) or self.frames <= 0:
            raise ValueError("window/segment too small for the separator depth")
        q_freq = 2 ** len(self.query_channels)
        q_time = int(np.prod(self.query_time_strides))
        if self.freq_bins % q_freq or self.frames % q_time:
            raise ValueError("network spectrogram not divisible by the query-net strides")

    @property
    def depth(self) -> int:
        return len(self.sep_channels)

    @property
    def segment_samples(self) -> int:
        return int(round(self.segment_seconds * self.sample_rate))

    @property
    def freq_bins(self) -> int:
        """Network frequency extent: STFT bins without the Nyquist bin."""
        return self.window // 2

    @property
    def stft_frames(self) -> int:
        return 1 + self.segment_samples // self.hop

    @property
    def frames(self) -> int:
        """Network time extent: STFT frames cropped to a multiple of ``2**(depth-1)``."""
        unit = 2 ** (self.depth - 1)
        return (self.stft_frames // unit) * unit

    @property
    def net_shape(self) -> tuple[int, int]:
        return self.freq_bins, self.frames

    @property
    def sep_time_strides(self) -> tuple[int, ...]:
        return (1,) + (2,) * (self.depth - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("query_channels", "query_time_strides", "sep_channels"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


def paper_config() -> ModelConfig:
    return ModelConfig(
        preset="paper",
        sample_rate=22050,
        window=1024,
        hop=256,
        segment_seconds=3.0,
        latent_dim=32,
        query_channels=(32, 32, 64, 64, 128, 128),
        query_time_strides=(1, 2, 1, 2, 1, 2),
        gru_units=128,
        sep_channels=(64, 128, 256, 512, 512, 512, 512, 512, 512),
    )


def desk_config() -> ModelConfig:
    # 8 kHz and 4096-sample segments give a 128 x 64 network spectrogram
    return ModelConfig(
        preset="desk",
        sample_rate=8000,
        window=256,
        hop=64,
        segment_seconds=0.512,
        latent_dim=16,
        query_channels=(8, 8, 16, 16, 32, 32),
        query_time_strides=(1, 2, 1, 2, 1, 2),
        gru_units=64,
        sep_channels=(12, 24, 48, 64, 64, 64, 64),
    )


PRESETS = {"paper": paper_config, "desk": desk_config}


def get_config(preset: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[preset]()
    except KeyError:
        raise ValueError(f"unknown preset {preset!r}") from None
    if not overrides:
        return base
    d = base.to_dict()
    d.update(overrides)
    return ModelConfig.from_dict(d)


@dataclass
class LatentDist:
    mu: Tensor
    logvar: Tensor


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every trainable tensor, in a fixed order."""
    k = cfg.kernel
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 1
    for i, c in enumerate(cfg.query_channels):
        shapes[f"q.conv{i}.w"] = (c, c_in, k, k)
        c_in = c
    gru_in = cfg.query_channels[-1] * (cfg.freq_bins // 2 ** len(cfg.query_channels))
    h = cfg.gru_units
    for gate in ("r", "z", "n"):
        shapes[f"q.gru.w_i{gate}"] = (gru_in, h)
        shapes[f"q.gru.w_h{gate}"] = (h, h)
        shapes[f"q.gru.b_{gate}"] = (h,)
    for head in ("mu", "logvar"):
        shapes[f"q.{head}.w"] = (h, cfg.latent_dim)
        shapes[f"q.{head}.b"] = (cfg.latent_dim,)

    chans = cfg.sep_channels
    c_in = 1 + cfg.latent_dim
    for i, c in enumerate(chans):
        shapes[f"s.enc{i}.w"] = (c, c_in, k, k)
        c_in = c
    depth = cfg.depth
    for j in range(depth):
        # decoder layer j mirrors encoder layer depth-1-j
        level = depth - 1 - j
        c_in_dec = chans[-1] if j == 0 else 2 * chans[level]
        c_out = chans[level - 1] if level > 0 else 1
        shapes[f"s.dec{j}.w"] = (c_in_dec, c_out, k, k)
        if j < depth - 1:
            for head in ("ys", "yb"):
                shapes[f"s.dec{j}.{head}.w"] = (cfg.latent_dim, c_out)
                shapes[f"s.dec{j}.{head}.b"] = (c_out,)
        else:
            shapes[f"s.dec{j}.b"] = (c_out,)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3] if ".enc" in name or ".conv" in name else shape[0] * shape[2] * shape[3]
    return shape[0]


def to_f32_grid(a: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 value, kept in float64."""
    return a.astype(np.float32).astype(np.float64)


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamSet:
    """He-normal weights, zero biases, AdaIN scale bias one.

    Values are rounded to float32 so checkpoints store them exactly.
    """
    rng = np.random.default_rng(seed)
    params: ParamSet = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            value = np.ones(shape) if name.endswith(".ys.b") else np.zeros(shape)
        else:
            std = np.sqrt(2.0 / _fan_in(name, shape))
            value = rng.standard_normal(shape) * std
        params[name] = Tensor(to_f32_grid(value), requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------------------
# networks


def _as_batch(mag) -> tuple[Tensor, bool]:
    """Return ``N x 1 x F x T`` and whether the input was a single spectrogram."""
    mag = T.as_tensor(mag)
    if mag.ndim == 2:
        return T.reshape(mag, (1, 1) + mag.shape), True
    if mag.ndim == 3:
        return T.reshape(mag, (mag.shape[0], 1) + mag.shape[1:]), False
    if mag.ndim == 4 and mag.shape[1] == 1:
        return mag, False
    raise ValueError(f"expected F x T, N x F x T or N x 1 x F x T magnitudes, got {mag.shape}")


def _check_net_shape(cfg: ModelConfig, x: Tensor) -> None:
    if x.shape[2:] != cfg.net_shape:
        raise ValueError(f"spectrogram shape {x.shape[2:]} does not match network shape {cfg.net_shape}")


def query_encode(params: Mapping[str, Tensor], cfg: ModelConfig, query_mag) -> LatentDist:
    """Encode query magnitudes into ``(mu, logvar)``.

    Six strided convolutions (instance norm + relu), then the feature maps are
    stacked along frequency to form a time sequence for the GRU, whose final
    state feeds two affine heads.
    """
    x, single = _as_batch(query_mag)
    _check_net_shape(cfg, x)
    k = cfg.kernel
    for i, ts in enumerate(cfg.query_time_strides):
        stride = (2, ts)
        pad = (T.same_padding(k, 2), T.same_padding(k, ts))
        x = T.relu(T.instance_norm(T.conv2d(x, params[f"q.conv{i}.w"], stride, pad), NORM_EPS))
    n, c, f, t = x.shape
    seq = T.reshape(T.transpose(x, (3, 0, 1, 2)), (t, n, c * f))
    steps = [T.reshape(s, (n, c * f)) for s in T.split(seq, [1] * t, axis=0)]
    gru = {key: params[f"q.gru.{key}"] for key in T.GRU_KEYS}
    _, h = T.gru_forward(gru, steps)
    mu = T.bias_add(T.matmul(h, params["q.mu.w"]), params["q.mu.b"])
    logvar = T.clip(T.bias_add(T.matmul(h, params["q.logvar.w"]), params["q.logvar.b"]), -LOGVAR_CLAMP, LOGVAR_CLAMP)
    if single:
        mu = T.reshape(mu, (cfg.latent_dim,))
        logvar = T.reshape(logvar, (cfg.latent_dim,))
    return LatentDist(mu, logvar)


def separate(params: Mapping[str, Tensor], cfg: ModelConfig, mixture_mag, z) -> tuple[Tensor, Tensor]:
    """Estimate a sigmoid mask for ``mixture_mag`` conditioned on ``z``.

    Returns ``(mask, mask * mixture_mag)`` in the input's layout.
    """
    m, single = _as_batch(mixture_mag)
    _check_net_shape(cfg, m)
    z = T.as_tensor(z)
    if z.ndim == 1:
        z = T.reshape(z, (1, z.shape[0]))
    n = m.shape[0]
    if z.shape != (n, cfg.latent_dim):
        raise ValueError(f"latent shape {z.shape} does not match batch {n} x {cfg.latent_dim}")
    f, t = cfg.net_shape
    k = cfg.kernel
    depth = cfg.depth
    skips = []
    x = m
    for i, ts in enumerate(cfg.sep_time_strides):
        pad = (T.same_padding(k, 2), T.same_padding(k, ts))
        if i == 0:
            # the tiled latent channels of the first layer are convolved
            # separately; the sum equals one conv over concat([m, tiled z])
            w_mix, w_lat = T.split(params["s.enc0.w"], [1, cfg.latent_dim], axis=1)
            x = T.conv2d(x, w_mix, (2, ts), pad) + T.tiled_conv2d(z, w_lat, (f, t), (2, ts), pad)
        else:
            x = T.conv2d(x, params[f"s.enc{i}.w"], (2, ts), pad)
        if x.shape[2] * x.shape[3] > 1:
            x = T.instance_norm(x, NORM_EPS)
        x = T.leaky_relu(x, LEAKY_SLOPE)
        skips.append(x)

    for j in range(depth):
        level = depth - 1 - j
        if j > 0:
            x = T.concat([x, skips[level]], axis=1)
        ts = cfg.sep_time_strides[level]
        out_size = (x.shape[2] * 2, x.shape[3] * ts)
        pad = (T.same_padding(k, 2), T.same_padding(k, ts))
        x = T.conv2d_transpose(x, params[f"s.dec{j}.w"], (2, ts), pad, out_size)
        if j < depth - 1:
            y_s = T.bias_add(T.matmul(z, params[f"s.dec{j}.ys.w"]), params[f"s.dec{j}.ys.b"])
            y_b = T.bias_add(T.matmul(z, params[f"s.dec{j}.yb.w"]), params[f"s.dec{j}.yb.b"])
            x = T.relu(T.adain(x, y_s, y_b, NORM_EPS))
        else:
            x = T.sigmoid(T.bias_add(x, params[f"s.dec{j}.b"]))

    mask = x
    est = T.mul(mask, m)
    if single:
        mask = T.reshape(mask, (f, t))
        est = T.reshape(est, (f, t))
    else:
        mask = T.reshape(mask, (n, f, t))
        est = T.reshape(est, (n, f, t))
    return mask, est


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"QSEP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_tensor(out: bytearray, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    out += struct.pack("<I", len(raw)) + raw
    out += struct.pack("<I", arr.ndim)
    out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    out += np.ascontiguousarray(arr, dtype="<f4").tobytes()


def checkpoint_bytes(params: Mapping[str, Tensor], state: AdamState, cfg: ModelConfig, meta: Mapping | None = None) -> bytes:
    header = json.dumps({"model": cfg.to_dict(), "meta": dict(meta or {})}, sort_keys=True).encode("utf-8")
    records = [(name, params[name].data) for name in params]
    for name in params:
        if name in state.m:
            records.append((f"adam.m/{name}", state.m[name]))
            records.append((f"adam.v/{name}", state.v[name]))
    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(header)) + header
    out += struct.pack("<QI", state.t, len(records))
    for name, arr in records:
        _write_tensor(out, name, arr)
    return bytes(out)


def save_checkpoint(params: Mapping[str, Tensor], state: AdamState, cfg: ModelConfig, path, meta: Mapping | None = None) -> None:
    """Write params, Adam moments and config; tensors are stored as little-endian float32."""
    Path(path).write_bytes(checkpoint_bytes(params, state, cfg, meta))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[ParamSet, AdamState, ModelConfig, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(params, state, config, meta)``."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError("not a QSEP checkpoint (bad magic)")
    version, hlen = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
        cfg = ModelConfig.from_dict(header["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from None
    t, count = r.unpack("<QI")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float64).reshape(dims)
        tensors[name] = arr
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after last tensor")

    expected = param_shapes(cfg)
    params: ParamSet = {}
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name}")
        if tensors[name].shape != shape:
            raise CheckpointError(f"tensor {name} has shape {tensors[name].shape}, config expects {shape}")
        params[name] = Tensor(tensors[name], requires_grad=True, name=name)
    state = AdamState(t=int(t))
    for name in expected:
        if f"adam.m/{name}" in tensors:
            state.m[name] = tensors[f"adam.m/{name}"]
            state.v[name] = tensors[f"adam.v/{name}"]
    return params, state, cfg, dict(header.get("meta", {}))
