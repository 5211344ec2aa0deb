"""Synthetic stems, stem-directory loading and the training mixture sampler.

Training mixtures follow the group construction: classes are split into a
target group and a rest group, each class gets a Bernoulli(0.5) gate and a
Uniform[0.25, 1.25] gain, and ``m = s_T + s_R``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dsp

GAIN_LOW, GAIN_HIGH = 0.25, 1.25
GATE_P = 0.5
PEAK = 0.5
MAX_REDRAWS = 1000

# class name -> track name -> segments
StemSet = dict[str, dict[str, list[np.ndarray]]]


@dataclass(frozen=True)
class ClassSpec:
    """Recipe for one synthetic source class."""

    class_id: int
    name: str
    family: str  # harmonic | percussive | low_tone | chordal
    pitch_lo: float
    pitch_hi: float
    note_lo: float = 0.2
    note_hi: float = 0.6
    noisiness: float = 0.0
    brightness: float = 1.0  # partial k has amplitude k**-brightness
    decay: float = 1.0  # scales percussive and plucked decay times


_BASE_RECIPES = [
    ClassSpec(0, "vocals", "harmonic", 180.0, 450.0, 0.25, 0.7, noisiness=0.03, brightness=1.2),
    ClassSpec(1, "drums", "percussive", 45.0, 150.0, 0.1, 0.25),
    ClassSpec(2, "bass", "low_tone", 40.0, 85.0, 0.2, 0.5, brightness=1.8),
    ClassSpec(3, "other", "chordal", 500.0, 1100.0, 0.4, 1.0, brightness=0.7),
]
_EXTRA_FAMILIES = ["harmonic", "chordal", "percussive", "low_tone"]


def default_class_specs(k: int = 4) -> list[ClassSpec]:
    """``k`` class recipes; beyond the four base roles, families cycle with shifted ranges."""
    if k < 2:
        raise ValueError("need at least two classes")
    specs = list(_BASE_RECIPES[:k])
    for i in range(len(specs), k):
        family = _EXTRA_FAMILIES[(i - 4) % len(_EXTRA_FAMILIES)]
        shift = 1.3 ** (1 + (i - 4) // len(_EXTRA_FAMILIES))
        base = next(s for s in _BASE_RECIPES if s.family == family)
        specs.append(ClassSpec(i, f"class{i}", family, base.pitch_lo * shift, base.pitch_hi * shift,
                               base.note_lo, base.note_hi, base.noisiness, base.brightness))
    return specs


# ---------------------------------------------------------------------------
# synthesis


def _envelope(n: int, sr: int, attack: float, release: float) -> np.ndarray:
    env = np.ones(n)
    a = min(n, max(1, int(attack * sr)))
    r = min(n - a, max(1, int(release * sr)))
    env[:a] = np.linspace(0.0, 1.0, a, endpoint=False)
    if r > 0:
        env[n - r:] = np.linspace(1.0, 0.0, r)
    return env


def _partials(f0: np.ndarray, sr: int, brightness: float, rng, max_partials: int = 16) -> np.ndarray:
    """Sum of harmonics of an instantaneous-frequency track, band-limited below 0.45 * sr."""
    phase = 2.0 * np.pi * np.cumsum(f0) / sr
    out = np.zeros_like(f0)
    top = float(np.max(f0))
    for k in range(1, max_partials + 1):
        if k * top >= 0.45 * sr:
            break
        out += k ** -brightness * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    return out


def _notes(spec: ClassSpec, n: int, sr: int, rng):
    """Yield ``(start, length)`` note spans covering ``n`` samples with short rests."""
    pos = 0
    while pos < n:
        length = int(rng.uniform(spec.note_lo, spec.note_hi) * sr)
        yield pos, min(length, n - pos)
        pos += length
        if rng.random() < 0.2:
            pos += int(rng.uniform(0.02, 0.08) * sr)


def _harmonic(spec, n, sr, rng):
    out = np.zeros(n)
    for start, length in _notes(spec, n, sr, rng):
        f = math.exp(rng.uniform(math.log(spec.pitch_lo), math.log(spec.pitch_hi)))
        t = np.arange(length) / sr
        f0 = f * (1.0 + 0.015 * np.sin(2 * np.pi * rng.uniform(4.5, 6.5) * t))
        tone = _partials(f0, sr, spec.brightness, rng)
        tone += spec.noisiness * rng.standard_normal(length)
        out[start:start + length] += tone * _envelope(length, sr, 0.03, 0.05)
    return out


def _percussive(spec, n, sr, rng):
    out = np.zeros(n)
    pos = 0
    while pos < n:
        kind = rng.choice(3)
        length = min(n - pos, int(0.25 * sr))
        t = np.arange(length) / sr
        if kind == 0:  # kick: falling sine
            f = spec.pitch_hi * np.exp(-t / 0.04) + spec.pitch_lo
            hit = np.sin(2 * np.pi * np.cumsum(f) / sr) * np.exp(-t / (0.12 * spec.decay))
        elif kind == 1:  # snare: tone plus noise
            tone = 0.4 * np.sin(2 * np.pi * 1.25 * spec.pitch_hi * t)
            hit = (tone + rng.standard_normal(length)) * np.exp(-t / (0.09 * spec.decay))
        else:  # hat: differentiated noise
            noise = rng.standard_normal(length + 1)
            hit = 0.6 * np.diff(noise) * np.exp(-t / (0.04 * spec.decay))
        out[pos:pos + length] += hit * rng.uniform(0.6, 1.0)
        pos += int(rng.choice([0.125, 0.25]) * sr)
    # saturate like a bus compressor: lowers the crest factor so peak
    # normalization leaves the drums about as loud as the tonal classes
    return np.tanh(4.0 * out / max(np.max(np.abs(out)), 1e-12))


def _low_tone(spec, n, sr, rng):
    out = np.zeros(n)
    for start, length in _notes(spec, n, sr, rng):
        f = math.exp(rng.uniform(math.log(spec.pitch_lo), math.log(spec.pitch_hi)))
        t = np.arange(length) / sr
        tone = _partials(np.full(length, f), sr, spec.brightness, rng, max_partials=3)
        pluck = 0.4 + 0.6 * np.exp(-t / (0.3 * spec.decay))
        out[start:start + length] += tone * pluck * _envelope(length, sr, 0.01, 0.04)
    return out


def _chordal(spec, n, sr, rng):
    out = np.zeros(n)
    for start, length in _notes(spec, n, sr, rng):
        root = math.exp(rng.uniform(math.log(spec.pitch_lo), math.log(spec.pitch_hi)))
        third = 4 if rng.random() < 0.5 else 3
        t = np.arange(length) / sr
        trem = 1.0 + 0.1 * np.sin(2 * np.pi * rng.uniform(3.0, 5.0) * t)
        chord = np.zeros(length)
        for semis in (0, third, 7):
            chord += _partials(np.full(length, root * 2 ** (semis / 12)), sr, spec.brightness, rng, max_partials=8)
        out[start:start + length] += chord * trem * _envelope(length, sr, 0.08, 0.1)
    return out


def track_timbre(spec: ClassSpec, rng: np.random.Generator) -> ClassSpec:
    """Per-track variation inside a class: register, brightness, breath noise and decay."""
    shift = math.exp(rng.uniform(-0.2, 0.2))
    return replace(spec, pitch_lo=spec.pitch_lo * shift, pitch_hi=spec.pitch_hi * shift,
                   brightness=spec.brightness * math.exp(rng.uniform(-0.25, 0.25)),
                   noisiness=spec.noisiness * rng.uniform(0.3, 2.0),
                   decay=spec.decay * math.exp(rng.uniform(-0.4, 0.4)))


_FAMILIES = {"harmonic": _harmonic, "percussive": _percussive, "low_tone": _low_tone, "chordal": _chordal}


def generate_stem(spec: ClassSpec, duration: float, seed: int, sample_rate: int = dsp.DEFAULT_SAMPLE_RATE) -> dsp.Waveform:
    """Deterministic synthetic track for ``spec``, peak-normalized to 0.5.

    Samples are rounded to float32 so a WAV round trip is exact.
    """
    try:
        fn = _FAMILIES[spec.family]
    except KeyError:
        raise ValueError(f"unknown family {spec.family!r}") from None
    rng = np.random.default_rng([int(seed), spec.class_id])
    n = int(round(duration * sample_rate))
    x = fn(track_timbre(spec, rng), n, sample_rate, rng)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x * (PEAK / peak)
    return dsp.Waveform(x.astype(np.float32).astype(np.float64), sample_rate)


# ---------------------------------------------------------------------------
# segmentation and loading


def segment(w, segment_samples: int) -> list[np.ndarray]:
    """Non-overlapping segments; the last partial segment is zero-padded."""
    x = w.samples if isinstance(w, dsp.Waveform) else np.asarray(w, dtype=np.float64)
    if segment_samples <= 0:
        raise ValueError("segment length must be positive")
    out = []
    for start in range(0, x.shape[0], segment_samples):
        seg = x[start:start + segment_samples]
        if seg.shape[0] < segment_samples:
            seg = np.pad(seg, (0, segment_samples - seg.shape[0]))
        out.append(np.array(seg))
    return out


def _audible(seg: np.ndarray) -> bool:
    return bool(np.max(np.abs(seg), initial=0.0) > 1e-4)


def load_stem_dir(path, sample_rate: int, segment_samples: int) -> StemSet:
    """Read ``<root>/<class>/<track>.wav`` into class -> track -> segments.

    Classes and tracks are sorted lexicographically. Silent segments are
    dropped.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"stem directory {root} does not exist")
    stems: StemSet = {}
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(class_dir.glob("*.wav"))
        if not files:
            raise ValueError(f"class directory {class_dir} contains no .wav files")
        tracks = {}
        for f in files:
            w = dsp.read_wav(f, expected_rate=sample_rate)
            tracks[f.stem] = [s for s in segment(w, segment_samples) if _audible(s)]
        stems[class_dir.name] = tracks
    if not stems:
        raise ValueError(f"no class directories under {root}")
    return stems


def synthetic_stems(specs: list[ClassSpec], tracks: int, track_seconds: float, seed: int,
                    sample_rate: int, segment_samples: int) -> StemSet:
    """In-memory equivalent of :func:`generate_dataset` followed by :func:`load_stem_dir`."""
    stems: StemSet = {}
    for spec in sorted(specs, key=lambda s: s.name):
        per_track = {}
        for j in range(tracks):
            w = generate_stem(spec, track_seconds, track_seed(seed, j), sample_rate)
            per_track[f"track{j:03d}"] = [s for s in segment(w, segment_samples) if _audible(s)]
        stems[spec.name] = per_track
    return stems


def track_seed(seed: int, index: int) -> int:
    return int(seed) * 1000 + index


def generate_dataset(root, specs: list[ClassSpec], tracks: int, track_seconds: float, seed: int,
                     sample_rate: int) -> Path:
    """Write synthetic stems as float32 WAVs plus a ``manifest.txt`` of key=value lines."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = [
        f"seed={seed}",
        f"classes={len(specs)}",
        f"sample_rate={sample_rate}",
        f"tracks_per_class={tracks}",
        f"track_seconds={track_seconds}",
    ]
    for spec in specs:
        for j in range(tracks):
            w = generate_stem(spec, track_seconds, track_seed(seed, j), sample_rate)
            dsp.write_wav(root / spec.name / f"track{j:03d}.wav", w)
        lines += [
            f"class.{spec.name}.id={spec.class_id}",
            f"class.{spec.name}.family={spec.family}",
            f"class.{spec.name}.pitch_range={spec.pitch_lo:g}-{spec.pitch_hi:g}",
            f"class.{spec.name}.note_range={spec.note_lo:g}-{spec.note_hi:g}",
            f"class.{spec.name}.noisiness={spec.noisiness:g}",
            f"class.{spec.name}.brightness={spec.brightness:g}",
            f"class.{spec.name}.decay={spec.decay:g}",
        ]
    manifest = root / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def flatten(stems: StemSet) -> dict[str, list[np.ndarray]]:
    """Class -> all segments, in track order."""
    return {c: [s for segs in tracks.values() for s in segs] for c, tracks in stems.items()}


# ---------------------------------------------------------------------------
# training mixtures


@dataclass
class MixtureSample:
    mixture: np.ndarray
    target: np.ndarray
    rest: np.ndarray
    classes: list[str]
    in_target: np.ndarray  # bool per class
    alphas: np.ndarray
    betas: np.ndarray
    mix_mag: np.ndarray = field(repr=False, default=None)
    target_mag: np.ndarray = field(repr=False, default=None)


def net_magnitude(x: np.ndarray, window: int, hop: int, frames: int) -> np.ndarray:
    return np.abs(dsp.to_network(dsp.stft(x, window, hop).bins, frames))


def draw_gates(rng: np.random.Generator, k: int) -> np.ndarray:
    return rng.integers(0, 2, size=k)


def draw_gains(rng: np.random.Generator, k: int) -> np.ndarray:
    return rng.uniform(GAIN_LOW, GAIN_HIGH, size=k)


def draw_groups(rng: np.random.Generator, k: int) -> np.ndarray:
    """Target-group membership: uniform group size in 1..k, then a uniform subset."""
    size = int(rng.integers(1, k + 1))
    mask = np.zeros(k, dtype=bool)
    mask[rng.choice(k, size=size, replace=False)] = True
    return mask


def mix(stems: list[np.ndarray], in_target: np.ndarray, alphas, betas) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(m, s_T, s_R)`` with ``m = s_T + s_R``."""
    n = stems[0].shape[0]
    s_t, s_r = np.zeros(n), np.zeros(n)
    for i, v in enumerate(stems):
        scaled = betas[i] * alphas[i] * v
        if in_target[i]:
            s_t = s_t + scaled
        else:
            s_r = s_r + scaled
    return s_t + s_r, s_t, s_r


def sample_training_example(pool: dict[str, list[np.ndarray]], rng: np.random.Generator,
                            window: int | None = None, hop: int | None = None,
                            frames: int | None = None) -> MixtureSample:
    """Draw one mixture from a class -> segments pool.

    When every gate in the target group is zero the target gates are redrawn.
    Magnitudes are attached when ``window``/``hop``/``frames`` are given.
    """
    classes = sorted(pool)
    if not classes or any(len(pool[c]) == 0 for c in classes):
        raise ValueError("empty stem pool")
    k = len(classes)
    in_target = draw_groups(rng, k)
    alphas = draw_gates(rng, k)
    betas = draw_gains(rng, k)
    stems = [pool[c][int(rng.integers(len(pool[c])))] for c in classes]
    m, s_t, s_r = mix(stems, in_target, alphas, betas)
    redraws = 0
    while not np.any(s_t):
        redraws += 1
        if redraws > MAX_REDRAWS:
            raise RuntimeError("could not draw a non-silent target")
        alphas = alphas.copy()
        alphas[in_target] = draw_gates(rng, int(in_target.sum()))
        m, s_t, s_r = mix(stems, in_target, alphas, betas)
    sample = MixtureSample(m, s_t, s_r, classes, in_target, alphas, betas)
    if window is not None:
        sample.mix_mag = net_magnitude(m, window, hop, frames)
        sample.target_mag = net_magnitude(s_t, window, hop, frames)
    return sample


@dataclass
class TestMixture:
    name: str
    mixture: np.ndarray
    sources: dict[str, np.ndarray]


def make_test_mixtures(stems: StemSet, count: int, seed: int) -> list[TestMixture]:
    """Held-out mixtures with every class present at a random gain."""
    pool = flatten(stems)
    classes = sorted(pool)
    rng = np.random.default_rng([int(seed), 7])
    out = []
    for i in range(count):
        gains = draw_gains(rng, len(classes))
        sources = {c: gains[j] * pool[c][int(rng.integers(len(pool[c])))] for j, c in enumerate(classes)}
        mixture = np.zeros_like(next(iter(sources.values())))
        for c in classes:
            mixture = mixture + sources[c]
        out.append(TestMixture(f"mix{i:03d}", mixture, sources))
    return out
