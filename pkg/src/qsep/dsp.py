"""STFT analysis/synthesis, magnitude/phase views and mono WAV I/O.

Frames are centered: the signal is zero-padded by half a window on both
sides, so a signal of ``n`` samples yields ``1 + n // hop`` frames.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

DEFAULT_SAMPLE_RATE = 22050


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveforms are mono (1-D)")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class Spectrogram:
    """Complex ``bins x frames`` STFT plus the frame parameters that produced it."""

    bins: np.ndarray
    window: int
    hop: int
    length: int | None = None

    def __post_init__(self):
        if self.bins.ndim != 2 or self.bins.shape[0] != self.window // 2 + 1:
            raise ValueError(f"expected {self.window // 2 + 1} frequency bins, got shape {self.bins.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.bins.shape


def hann(n: int) -> np.ndarray:
    """Periodic Hann window (squared copies overlap-add to a constant at hop n/4)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _samples(w) -> np.ndarray:
    return w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)


def stft(w, window: int = 1024, hop: int | None = None) -> Spectrogram:
    x = _samples(w)
    hop = hop or window // 4
    if x.shape[0] < window:
        raise ValueError(f"signal of {x.shape[0]} samples is shorter than one window ({window})")
    half = window // 2
    padded = np.pad(x, (half, half))
    n_frames = 1 + x.shape[0] // hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, window)[::hop][:n_frames]
    bins = np.fft.rfft(frames * hann(window), axis=1).T
    return Spectrogram(np.ascontiguousarray(bins), window, hop, x.shape[0])


def istft(s: Spectrogram, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    Output samples are divided by the summed squared window, which is
    constant away from the edges.
    """
    window, hop = s.window, s.hop
    if s.bins.shape[0] != window // 2 + 1 or hop <= 0 or hop > window:
        raise ValueError("inconsistent STFT parameters")
    length = length if length is not None else s.length
    n_frames = s.bins.shape[1]
    if length is None:
        length = (n_frames - 1) * hop
    win = hann(window)
    frames = np.fft.irfft(s.bins.T, n=window, axis=1) * win
    half = window // 2
    total = max(length + 2 * half, (n_frames - 1) * hop + window)
    out = np.zeros(total)
    norm = np.zeros(total)
    wsq = win * win
    for t in range(n_frames):
        out[t * hop:t * hop + window] += frames[t]
        norm[t * hop:t * hop + window] += wsq
    out = out[half:half + length]
    norm = norm[half:half + length]
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    return out


def cola_sum(window: int, hop: int, n_frames: int) -> np.ndarray:
    """Summed squared analysis windows over the overlap-add support."""
    wsq = hann(window) ** 2
    out = np.zeros((n_frames - 1) * hop + window)
    for t in range(n_frames):
        out[t * hop:t * hop + window] += wsq
    return out


def mag_phase(s) -> tuple[np.ndarray, np.ndarray]:
    bins = s.bins if isinstance(s, Spectrogram) else np.asarray(s)
    return np.abs(bins), np.angle(bins)


def recombine(mag: np.ndarray, phase: np.ndarray) -> np.ndarray:
    return mag * np.exp(1j * phase)


def to_network(bins: np.ndarray, frames: int) -> np.ndarray:
    """Drop the Nyquist bin and crop (or zero-pad) to ``frames`` frames."""
    out = bins[:-1, :frames]
    if out.shape[1] < frames:
        out = np.pad(out, ((0, 0), (0, frames - out.shape[1])))
    return out


def from_network(net: np.ndarray, full_shape: tuple[int, int]) -> np.ndarray:
    """Inverse layout of :func:`to_network`; removed bins and frames come back as zeros."""
    out = np.zeros(full_shape, dtype=net.dtype)
    f = min(net.shape[0], full_shape[0])
    t = min(net.shape[1], full_shape[1])
    out[:f, :t] = net[:f, :t]
    return out


def reconstruct(est_mag: np.ndarray, mixture_phase: np.ndarray, window: int, hop: int, length: int) -> np.ndarray:
    """Waveform from a network-layout magnitude and the mixture's full-layout phase."""
    est_mag = np.asarray(est_mag)
    full_shape = mixture_phase.shape
    if est_mag.ndim != 2 or est_mag.shape[0] != full_shape[0] - 1:
        raise ValueError(f"magnitude shape {est_mag.shape} does not match phase shape {full_shape}")
    mag = from_network(est_mag, full_shape)
    return istft(Spectrogram(recombine(mag, mixture_phase), window, hop), length)


def snr_db(ref: np.ndarray, est: np.ndarray) -> float:
    err = np.sum((ref - est) ** 2)
    if err == 0:
        return np.inf
    return float(10.0 * np.log10(np.sum(ref ** 2) / err))


# ---------------------------------------------------------------------------
# WAV files


class WavError(ValueError):
    pass


def read_wav(path, expected_rate: int | None = None) -> Waveform:
    """Read a mono PCM16 or float32 WAV file."""
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise WavError(f"cannot read {path}: {exc}") from None
    if data.ndim != 1:
        raise WavError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavError(f"{path}: unsupported sample format {data.dtype}")
    if expected_rate is not None and rate != expected_rate:
        raise WavError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz (no resampling)")
    return Waveform(samples, rate)


def write_wav(path, w: Waveform, pcm16: bool = False) -> None:
    """Write mono audio as IEEE float32 (default) or clipped PCM16."""
    if pcm16:
        data = np.round(np.clip(w.samples, -1.0, 32767 / 32768) * 32768.0).astype(np.int16)
    else:
        data = w.samples.astype(np.float32)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), int(w.sample_rate), data)
