"""Projection SDR, delta-SDR and median reports."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import dsp
from . import tensor as T
from .data import TestMixture
from .inference import encode, separate_waveform
from .latent import LatentLibrary, iterative_separate, retrieve_nearest
from .model import ModelConfig

SDR_FLOOR = -40.0
SDR_CEIL = 60.0
MODES = ("mean-vector", "ground-truth-query", "retrieved", "iterative")


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, dsp.Waveform) else np.asarray(x, dtype=np.float64)


def sdr(reference, estimate) -> float:
    """``10 log10(|s_t|^2 / |est - s_t|^2)`` with ``s_t`` the projection of the estimate onto the reference."""
    s, e = _samples(reference), _samples(estimate)
    if s.shape != e.shape:
        raise ValueError(f"length mismatch {s.shape} vs {e.shape}")
    ss = float(s @ s)
    if ss == 0.0:
        raise ValueError("reference is all zeros")
    target = (float(s @ e) / ss) * s
    num = float(target @ target)
    err = e - target
    den = float(err @ err)
    if num == 0.0:
        return SDR_FLOOR
    if den == 0.0:
        return SDR_CEIL
    return float(np.clip(10.0 * np.log10(num / den), SDR_FLOOR, SDR_CEIL))


def delta_sdr(gt, est_ret, est_mean) -> float:
    return sdr(gt, est_ret) - sdr(gt, est_mean)


def median(values: Sequence[float]) -> float:
    """Median of the finite values; an even count averages the middle pair."""
    vals = sorted(float(v) for v in values if np.isfinite(v))
    if not vals:
        return float("nan")
    mid = len(vals) // 2
    if len(vals) % 2:
        return vals[mid]
    return (vals[mid - 1] + vals[mid]) / 2.0


@dataclass
class EvalReport:
    mode: str
    scores: dict[tuple[str, str], float]  # (track, class) -> dB
    preset: str = ""
    checkpoint: str = ""
    medians: dict[str, float] = field(init=False)

    def __post_init__(self):
        classes = sorted({c for _, c in self.scores})
        self.medians = {c: median([v for (_, k), v in self.scores.items() if k == c]) for c in classes}

    def __len__(self) -> int:
        return len(self.scores)

    def to_tsv(self) -> str:
        lines = ["track\tclass\tsdr_db"]
        for (track, cls) in sorted(self.scores):
            lines.append(f"{track}\t{cls}\t{self.scores[(track, cls)]:.6f}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        """Aligned one-row table of per-class medians."""
        classes = sorted(self.medians)
        width = max([10] + [len(c) + 2 for c in classes])
        label = f"{self.mode} ({self.preset})" if self.preset else self.mode
        first = max(len(label), len("method")) + 2
        head = "method".ljust(first) + "".join(c.rjust(width) for c in classes)
        row = label.ljust(first) + "".join(f"{self.medians[c]:.2f}".rjust(width) for c in classes)
        meta = f"median SDR [dB], {len(self.scores)} estimates"
        if self.checkpoint:
            meta += f", checkpoint {self.checkpoint}"
        return "\n".join([meta, head, row]) + "\n"


def conditioning(params, cfg: ModelConfig, mixture: TestMixture, cls: str, mode: str,
                 library: LatentLibrary | None) -> np.ndarray:
    """Latent used for ``cls`` under an evaluation mode (iterative starts from the mean)."""
    if mode == "ground-truth-query":
        return encode(params, cfg, mixture.sources[cls])
    if library is None or cls not in library:
        raise KeyError(f"latent library has no entry for class {cls!r}")
    if mode == "retrieved":
        gt = encode(params, cfg, mixture.sources[cls])
        return retrieve_nearest(gt, library)[1]
    return library[cls]


def evaluate(params: Mapping[str, T.Tensor], cfg: ModelConfig, test_set: Sequence[TestMixture],
             library: LatentLibrary | None, mode: str = "mean-vector", rounds: int = 2,
             preset: str = "", checkpoint: str = "") -> EvalReport:
    """SDR of every (mixture, class) pair under one conditioning mode.

    ``retrieved`` conditions on the library entry nearest to the ground-truth
    query's encoding (the library is typically per-track means).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    if not test_set:
        raise ValueError("empty test set")
    scores = {}
    for mix in test_set:
        for cls in sorted(mix.sources):
            ref = mix.sources[cls]
            if not np.any(ref):
                continue
            z = conditioning(params, cfg, mix, cls, mode, library)
            if mode == "iterative":
                est = iterative_separate(params, cfg, mix.mixture, z, rounds)[0].samples
            else:
                est = separate_waveform(params, cfg, mix.mixture, z)
            scores[(mix.name, cls)] = sdr(ref, est)
    return EvalReport(mode, scores, preset or cfg.preset, checkpoint)


def class_following(params: Mapping[str, T.Tensor], cfg: ModelConfig, test_set: Sequence[TestMixture],
                    library: LatentLibrary) -> dict[str, float]:
    """Per class ``c``: fraction of mixtures where conditioning on ``z_c`` gives the best SDR for source ``c``.

    Every class mean in the library is tried on every mixture; a mixture
    counts for ``c`` only when ``z_c`` beats every other class mean strictly.
    """
    classes = library.labels()
    wins = {c: 0 for c in classes}
    totals = {c: 0 for c in classes}
    for mix in test_set:
        ests = {d: separate_waveform(params, cfg, mix.mixture, library[d]) for d in classes}
        for c in classes:
            ref = mix.sources.get(c)
            if ref is None or not np.any(ref):
                continue
            scores = {d: sdr(ref, ests[d]) for d in classes}
            totals[c] += 1
            wins[c] += all(scores[c] > scores[d] for d in classes if d != c)
    return {c: wins[c] / totals[c] for c in classes if totals[c]}


def latent_regression_error(params: Mapping[str, T.Tensor], cfg: ModelConfig, mixture_mags: np.ndarray,
                            rng: np.random.Generator, count: int = 100) -> float:
    """Mean of ``|z - mu(Q(S(M, z)))|_1 / d_z`` over ``count`` prior draws ``z``.

    Mixture ``i`` of ``mixture_mags`` is paired with draw ``i`` (cycling).
    """
    from .model import query_encode, separate

    z = rng.standard_normal((count, cfg.latent_dim))
    idx = np.arange(count) % mixture_mags.shape[0]
    errs = []
    with T.no_grad():
        for start in range(0, count, 10):
            sl = slice(start, min(start + 10, count))
            _, est = separate(params, cfg, mixture_mags[idx[sl]], z[sl])
            mu = query_encode(params, cfg, est).mu.data
            errs.append(np.abs(z[sl] - mu).sum(axis=1) / cfg.latent_dim)
    return float(np.concatenate(errs).mean())
