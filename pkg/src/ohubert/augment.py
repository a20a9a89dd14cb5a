"""Utterance mixing, synthetic reverberation and the half-batch two-stage policy."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import fftconvolve

from .corpus import SegmentBatch, Waveform


@dataclass(frozen=True)
class ImpulseResponse:
    taps: np.ndarray
    sample_rate: int
    rt60_s: float


@dataclass(frozen=True)
class AugmentPolicy:
    mix_snr_range_db: tuple[float, float] = (0.0, 10.0)
    mix_region_fraction_range: tuple[float, float] = (0.2, 0.6)
    rt60_range_s: tuple[float, float] = (0.2, 0.6)
    seed: int = 0

    def __post_init__(self):
        for name in ("mix_snr_range_db", "mix_region_fraction_range", "rt60_range_s"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lo > hi ({lo} > {hi})")
            object.__setattr__(self, name, (float(lo), float(hi)))
        lo, hi = self.mix_region_fraction_range
        if lo < 0 or hi > 1:
            raise ValueError("mix_region_fraction_range must lie in [0, 1]")
        if self.rt60_range_s[0] <= 0:
            raise ValueError("rt60 must be > 0")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def mix_gain(primary: np.ndarray, secondary: np.ndarray, snr_db: float) -> float:
    e_p = float(np.mean(primary ** 2)) if len(primary) else 0.0
    e_s = float(np.mean(secondary ** 2)) if len(secondary) else 0.0
    if e_s == 0.0:
        raise ValueError("secondary has zero energy in the mix region; gain undefined")
    return math.sqrt(e_p / e_s * 10.0 ** (-snr_db / 10.0))


def mix_utterances(primary: Waveform, secondary: Waveform, snr_db: float,
                   region: tuple[int, int]) -> Waveform:
    """Add ``secondary`` into ``primary[start:start+len]`` at the requested SNR.

    The gain is computed from the energies inside the region only; samples
    outside it are returned untouched.
    """
    start, length = int(region[0]), int(region[1])
    x = primary.samples
    if start < 0 or length < 0 or start + length > len(x):
        raise ValueError(f"mix region {region} outside primary of length {len(x)}")
    out = x.copy()
    if length == 0:
        return primary.with_samples(out)
    s = secondary.samples
    if len(s) < length:
        if len(s) == 0:
            raise ValueError("secondary is empty")
        s = np.resize(s, length)
    s = s[:length]
    g = mix_gain(x[start:start + length], s, snr_db)
    out[start:start + length] = x[start:start + length] + g * s
    return primary.with_samples(out)


def synth_rir(rt60_s: float, sample_rate: int, seed: int) -> ImpulseResponse:
    """Exponentially decaying Gaussian noise with a unit direct path."""
    if rt60_s <= 0:
        raise ValueError("rt60_s must be > 0")
    n_taps = math.ceil(1.5 * rt60_s * sample_rate)
    tau = rt60_s / (3.0 * math.log(10.0))
    n = np.arange(n_taps)
    w = np.random.default_rng(seed).standard_normal(n_taps)
    taps = w * np.exp(-n / (sample_rate * tau))
    taps[0] = 1.0
    return ImpulseResponse(taps, sample_rate, rt60_s)


def rir_envelope(n, rt60_s: float, sample_rate: int):
    tau = rt60_s / (3.0 * math.log(10.0))
    return np.exp(-np.asarray(n, dtype=np.float64) / (sample_rate * tau))


def reverberate(w: Waveform, h: ImpulseResponse) -> Waveform:
    """Convolve, truncate to the input length, restore the input's peak."""
    if w.sample_rate != h.sample_rate:
        raise ValueError(f"sample rate mismatch: {w.sample_rate} vs {h.sample_rate}")
    x = w.samples
    if len(x) == 0:
        return w.with_samples(x.copy())
    y = fftconvolve(x, h.taps)[:len(x)]
    peak_in = np.max(np.abs(x))
    peak_out = np.max(np.abs(y))
    if peak_out > 0:
        y = y * (peak_in / peak_out)
    return w.with_samples(y)


def two_stage_augment(batch: SegmentBatch, policy: AugmentPolicy,
                      seed: int | None = None) -> SegmentBatch:
    """Mix every segment with an in-batch donor; reverberate a random half.

    ``seed`` overrides ``policy.seed`` (the trainer passes a per-step seed).
    The returned batch carries a boolean ``reverberated`` mask.
    """
    n_seg = len(batch)
    if n_seg < 2:
        raise ValueError("two_stage_augment needs at least 2 segments")
    if batch.n_sources < 2:
        raise ValueError("batch has a single source; no valid mixing donor")
    rng = np.random.default_rng(policy.seed if seed is None else seed)
    order = rng.permutation(n_seg)
    reverb = np.zeros(n_seg, dtype=bool)
    reverb[order[n_seg // 2:]] = True

    out = np.empty_like(batch.samples)
    T = batch.segment_length
    for i in range(n_seg):
        donors = np.flatnonzero(batch.source_index != batch.source_index[i])
        donor = int(donors[rng.integers(len(donors))])
        snr = rng.uniform(*policy.mix_snr_range_db)
        frac = rng.uniform(*policy.mix_region_fraction_range)
        length = int(round(frac * T))
        start = int(rng.integers(T - length + 1))
        shift = int(rng.integers(T))
        seg = batch.segment(i)
        donor_w = batch.segment(donor).with_samples(np.roll(batch.samples[donor], -shift))
        if length > 0 and not np.any(donor_w.samples[:length]):
            mixed = seg  # silent donor region: nothing to add
        else:
            mixed = mix_utterances(seg, donor_w, snr, (start, length))
        rt60 = rng.uniform(*policy.rt60_range_s)
        rir_seed = int(rng.integers(2 ** 31))
        if reverb[i]:
            mixed = reverberate(mixed, synth_rir(rt60, batch.sample_rate, rir_seed))
        out[i] = mixed.samples
    return batch.replace(out, reverberated=reverb)
