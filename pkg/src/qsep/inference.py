"""Waveform-level encode/separate helpers shared by the latent, eval and CLI code."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import dsp
from . import tensor as T
from .model import ModelConfig, query_encode, separate


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, dsp.Waveform) else np.asarray(x, dtype=np.float64)


def fit_query(x, segment_samples: int) -> np.ndarray:
    """Center-crop or zero-pad a query to exactly one segment."""
    x = _samples(x)
    n = x.shape[0]
    if n >= segment_samples:
        start = (n - segment_samples) // 2
        return np.array(x[start:start + segment_samples])
    before = (segment_samples - n) // 2
    return np.pad(x, (before, segment_samples - n - before))


def encode_mag(params: Mapping[str, T.Tensor], cfg: ModelConfig, mag: np.ndarray) -> np.ndarray:
    """Posterior means for one (F x T) or a batch (N x F x T) of network magnitudes."""
    with T.no_grad():
        return query_encode(params, cfg, mag).mu.data.copy()


def encode(params: Mapping[str, T.Tensor], cfg: ModelConfig, query) -> np.ndarray:
    """Latent mean of a query waveform (fitted to one segment first)."""
    x = fit_query(query, cfg.segment_samples)
    mag = np.abs(dsp.to_network(dsp.stft(x, cfg.window, cfg.hop).bins, cfg.frames))
    return encode_mag(params, cfg, mag)


def _segments(x: np.ndarray, seg: int) -> np.ndarray:
    count = max(1, -(-x.shape[0] // seg))
    padded = np.zeros(count * seg)
    padded[:x.shape[0]] = x
    return padded.reshape(count, seg)


class SegmentedMixture:
    """A mixture cut into segments with cached network magnitudes and phases."""

    def __init__(self, mixture, cfg: ModelConfig):
        x = _samples(mixture)
        if x.shape[0] < cfg.window:
            raise ValueError(f"mixture of {x.shape[0]} samples is shorter than one window")
        self.cfg = cfg
        self.length = x.shape[0]
        self.segments = _segments(x, cfg.segment_samples)
        mags, phases = [], []
        for seg in self.segments:
            bins = dsp.stft(seg, cfg.window, cfg.hop).bins
            mags.append(np.abs(dsp.to_network(bins, cfg.frames)))
            phases.append(np.angle(bins))
        self.mags = np.stack(mags)
        self.phases = phases

    def estimate_mags(self, params: Mapping[str, T.Tensor], z: np.ndarray) -> np.ndarray:
        """Masked magnitudes for every segment, all conditioned on ``z``."""
        z = np.asarray(z, dtype=np.float64).reshape(1, -1)
        zs = np.repeat(z, self.mags.shape[0], axis=0)
        with T.no_grad():
            _, est = separate(params, self.cfg, self.mags, zs)
        return est.data

    def reconstruct(self, est_mags: np.ndarray) -> np.ndarray:
        """Overlap-add each segment with the mixture phase and concatenate."""
        cfg = self.cfg
        parts = [dsp.reconstruct(m, p, cfg.window, cfg.hop, cfg.segment_samples)
                 for m, p in zip(est_mags, self.phases)]
        return np.concatenate(parts)[:self.length]


def separate_waveform(params: Mapping[str, T.Tensor], cfg: ModelConfig, mixture, z) -> np.ndarray:
    """Segment-wise separation reusing a single latent for every segment."""
    seg = SegmentedMixture(mixture, cfg)
    return seg.reconstruct(seg.estimate_mags(params, z))
