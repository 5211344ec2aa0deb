"""Latent-space utilities: slerp, mean vectors, cosine retrieval, iterative
re-encoding and CSV export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import dsp
from . import tensor as T
from .inference import SegmentedMixture, encode_mag
from .model import ModelConfig

DEGENERATE_ANGLE = 1e-6


def _vec(z, what: str = "latent") -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"{what} must be a 1-D vector, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError(f"{what} contains non-finite values")
    return z


def _nonzero(z, what: str = "latent") -> np.ndarray:
    z = _vec(z, what)
    if not np.any(z):
        raise ValueError(f"{what} is the zero vector")
    return z


def slerp(z1, z2, alpha: float) -> np.ndarray:
    """Spherical interpolation; linear when the angle is (numerically) 0 or pi."""
    z1, z2 = _nonzero(z1, "z1"), _nonzero(z2, "z2")
    if z1.shape != z2.shape:
        raise ValueError(f"dimension mismatch {z1.shape} vs {z2.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return z1.copy()
    if alpha == 1.0:
        return z2.copy()
    u1 = z1 / np.linalg.norm(z1)
    u2 = z2 / np.linalg.norm(z2)
    along = float(u1 @ u2)
    across = float(np.linalg.norm(u2 - along * u1))
    theta = np.arctan2(across, along)
    if theta < DEGENERATE_ANGLE or abs(np.pi - theta) < DEGENERATE_ANGLE:
        return (1.0 - alpha) * z1 + alpha * z2
    s = np.sin(theta)
    return (np.sin((1.0 - alpha) * theta) / s) * z1 + (np.sin(alpha * theta) / s) * z2


def class_mean(latents: Iterable) -> np.ndarray:
    rows = [_vec(z) for z in latents]
    if not rows:
        raise ValueError("cannot average an empty set of latents")
    return np.mean(np.stack(rows), axis=0)


def cosine_distance(z1, z2) -> float:
    z1, z2 = _nonzero(z1, "z1"), _nonzero(z2, "z2")
    if z1.shape != z2.shape:
        raise ValueError(f"dimension mismatch {z1.shape} vs {z2.shape}")
    return float(1.0 - (z1 / np.linalg.norm(z1)) @ (z2 / np.linalg.norm(z2)))


def delta_cd(z_test, z_mean, z_ret) -> float:
    """How much closer the retrieved vector is to ``z_test`` than the mean vector."""
    return cosine_distance(z_test, z_mean) - cosine_distance(z_test, z_ret)


@dataclass(frozen=True)
class LibraryEntry:
    label: str
    z: np.ndarray
    count: int = 1


class LatentLibrary:
    """Labelled latent vectors (class or track means) kept in label order."""

    def __init__(self, entries: Iterable[LibraryEntry] = ()):
        self._entries: dict[str, LibraryEntry] = {}
        for e in entries:
            self.add(e.label, e.z, e.count)

    def add(self, label: str, z, count: int = 1) -> None:
        if label in self._entries:
            raise ValueError(f"duplicate library label {label!r}")
        if count < 1:
            raise ValueError("count must be at least 1")
        self._entries[label] = LibraryEntry(str(label), _vec(z).copy(), int(count))

    @classmethod
    def from_groups(cls, groups: Mapping[str, Sequence]) -> "LatentLibrary":
        """One mean vector per label from lists of latents."""
        lib = cls()
        for label in sorted(groups):
            lib.add(label, class_mean(groups[label]), len(groups[label]))
        return lib

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, label) -> bool:
        return label in self._entries

    def __getitem__(self, label: str) -> np.ndarray:
        try:
            return self._entries[label].z
        except KeyError:
            raise KeyError(f"no library entry for {label!r}") from None

    def labels(self) -> list[str]:
        return sorted(self._entries)

    def entries(self) -> list[LibraryEntry]:
        return [self._entries[k] for k in self.labels()]


def retrieve_nearest(z_query, library: LatentLibrary) -> tuple[str, np.ndarray]:
    """Entry with the smallest cosine distance; ties go to the lowest label."""
    if len(library) == 0:
        raise ValueError("empty latent library")
    best_label, best_d = None, np.inf
    for e in library.entries():
        d = cosine_distance(z_query, e.z)
        if d < best_d:
            best_label, best_d = e.label, d
    return best_label, library[best_label]


# ---------------------------------------------------------------------------
# iterative re-encoding


def iterative_separate(params: Mapping[str, T.Tensor], cfg: ModelConfig, mixture, z_init,
                       n_rounds: int = 2) -> tuple[dsp.Waveform, list[np.ndarray]]:
    """Separate, re-encode the estimate, and separate again ``n_rounds - 1`` times.

    The trace holds the latent used in each completed round. For mixtures
    longer than one segment the re-encoded latent is the mean over segments.
    A silent estimate stops the loop and the last audible result is kept.
    """
    if n_rounds < 1:
        raise ValueError("n_rounds must be at least 1")
    rate = mixture.sample_rate if isinstance(mixture, dsp.Waveform) else cfg.sample_rate
    seg = SegmentedMixture(mixture, cfg)
    z = _vec(z_init).copy()
    est = seg.estimate_mags(params, z)
    trace = [z]
    for _ in range(n_rounds - 1):
        if not np.any(est):
            break
        z_next = encode_mag(params, cfg, est).mean(axis=0)
        est_next = seg.estimate_mags(params, z_next)
        if not np.any(est_next):
            break
        z, est = z_next, est_next
        trace.append(z)
    return dsp.Waveform(seg.reconstruct(est), rate), trace


# ---------------------------------------------------------------------------
# CSV export


def export_latents(rows: Iterable[tuple[str, np.ndarray]], path, dim: int | None = None) -> Path:
    """Write ``label,z_0,...`` rows; floats use ``repr`` so they parse back exactly."""
    rows = [(str(label), _vec(z)) for label, z in rows]
    if dim is None:
        dim = rows[0][1].shape[0] if rows else 0
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["label"] + [f"z_{i}" for i in range(dim)])
        for label, z in rows:
            if z.shape[0] != dim:
                raise ValueError(f"row {label!r} has {z.shape[0]} values, expected {dim}")
            w.writerow([label] + [repr(float(v)) for v in z])
    return path


def read_latents(path) -> list[tuple[str, np.ndarray]]:
    with Path(path).open(newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "label":
            raise ValueError(f"{path}: not a latent CSV (missing label header)")
        return [(row[0], np.array([float(v) for v in row[1:]])) for row in reader]


# ---------------------------------------------------------------------------
# libraries from stems


def encode_stems(params: Mapping[str, T.Tensor], cfg: ModelConfig, stems: Mapping[str, Mapping[str, list]],
                 batch: int = 16) -> list[tuple[str, str, int, np.ndarray]]:
    """``(class, track, segment index, mu)`` for every stem segment, in sorted order."""
    keys, mags = [], []
    for cls in sorted(stems):
        for track in sorted(stems[cls]):
            for i, seg in enumerate(stems[cls][track]):
                keys.append((cls, track, i))
                bins = dsp.stft(seg, cfg.window, cfg.hop).bins
                mags.append(np.abs(dsp.to_network(bins, cfg.frames)))
    out = []
    for start in range(0, len(mags), batch):
        mus = encode_mag(params, cfg, np.stack(mags[start:start + batch]))
        out += [(*keys[start + j], mus[j]) for j in range(mus.shape[0])]
    return out


def build_library(encoded: Sequence[tuple[str, str, int, np.ndarray]], by: str = "class") -> LatentLibrary:
    """Mean vectors per class (``by="class"``) or per ``class/track``."""
    if by not in ("class", "track"):
        raise ValueError(f"unknown grouping {by!r}")
    groups: dict[str, list] = {}
    for cls, track, _, mu in encoded:
        groups.setdefault(cls if by == "class" else f"{cls}/{track}", []).append(mu)
    return LatentLibrary.from_groups(groups)


def track_class(label: str) -> str:
    """Class part of a ``class/track`` library label."""
    return label.split("/", 1)[0]
