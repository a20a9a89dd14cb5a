"""Log-mel features, k-means codebooks and frame-level pseudo-labels."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Waveform

LOG_FLOOR = 1e-10


@dataclass
class FeatureFrames:
    frames: np.ndarray  # (T, d)
    frame_rate: float
    source_id: str = ""


@dataclass
class Codebook:
    centroids: np.ndarray  # (C, d)
    inertia_history: list[float] = field(default_factory=list)
    n_iter: int = 0

    @property
    def C(self) -> int:
        return self.centroids.shape[0]

    def save(self, path) -> None:
        np.save(path, self.centroids)

    @classmethod
    def load(cls, path) -> "Codebook":
        return cls(np.load(path))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape (n_mels, n_fft//2 + 1)."""
    n_bins = n_fft // 2 + 1
    bin_hz = np.linspace(0.0, sample_rate / 2.0, n_bins)
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_hz - lo) / (mid - lo)
        down = (hi - bin_hz) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def n_frames(n_samples: int, window: int, hop: int) -> int:
    return (n_samples - window) // hop + 1


def extract_features(w: Waveform, n_mels: int = 40, window: int = 400,
                     hop: int = 320) -> FeatureFrames:
    x = w.samples
    if window > len(x):
        raise ValueError(f"window {window} longer than signal ({len(x)} samples)")
    T = n_frames(len(x), window, hop)
    n_fft = 1 << (window - 1).bit_length()
    idx = np.arange(window)[None, :] + hop * np.arange(T)[:, None]
    frames = x[idx] * np.hanning(window)[None, :]
    mag = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))
    mel = mag @ mel_filterbank(n_mels, n_fft, w.sample_rate).T
    return FeatureFrames(np.log(mel + LOG_FLOOR), w.sample_rate / hop, w.source_id)


def _sq_dists(x: np.ndarray, c: np.ndarray, chunk: int = 4096) -> np.ndarray:
    # exact broadcast differences; the expanded-norm trick breaks exact ties
    out = np.empty((x.shape[0], c.shape[0]))
    for s in range(0, x.shape[0], chunk):
        d = x[s:s + chunk, None, :] - c[None, :, :]
        out[s:s + chunk] = np.einsum("ncd,ncd->nc", d, d)
    return out


def nearest(x: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = _sq_dists(x, c)
    idx = np.argmin(d, axis=1)  # first minimum -> lowest centroid index on ties
    return idx, d[np.arange(len(x)), idx]


def _kmeanspp(x: np.ndarray, C: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, C):
        total = d2.sum()
        if total <= 0:
            raise ValueError(f"fewer than {C} distinct feature vectors")
        i = rng.choice(len(x), p=d2 / total)
        centers.append(x[i])
        d2 = np.minimum(d2, _sq_dists(x, x[i][None])[:, 0])
    return np.array(centers)


def kmeans_fit(features, C: int, iters: int = 50, seed: int = 0) -> Codebook:
    """Lloyd's algorithm with k-means++ seeding.

    ``features`` is a (N, d) array or a sequence of FeatureFrames. Stops after
    ``iters`` rounds or when no assignment changes. ``inertia_history[k]`` is
    the inertia after the k-th assignment step.
    """
    if not isinstance(features, np.ndarray):
        features = np.concatenate([f.frames for f in features], axis=0)
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be 2-D")
    if C < 1:
        raise ValueError("C must be >= 1")
    if len(x) < C:
        raise ValueError(f"need at least C={C} feature vectors, got {len(x)}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, C, rng)
    history = []
    assign = None
    it = 0
    for it in range(1, iters + 1):
        new_assign, d = nearest(x, centroids)
        history.append(float(d.sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(C):
            members = assign == c
            if members.any():
                centroids[c] = x[members].mean(axis=0)
        empty = [c for c in range(C) if not (assign == c).any()]
        if empty:
            # reseed each empty cluster at the point farthest from its centroid
            _, d = nearest(x, centroids)
            for c in empty:
                far = int(np.argmax(d))
                centroids[c] = x[far]
                d[far] = 0.0
    return Codebook(centroids, history, it)


@dataclass
class FrameLabels:
    labels: np.ndarray
    source_id: str = ""


def resample_nearest(labels: np.ndarray, target: int) -> np.ndarray:
    """Nearest-neighbour resampling along time to exactly ``target`` entries."""
    n = len(labels)
    if target <= 0:
        return labels[:0].copy()
    if n == target:
        return labels.copy()
    pos = np.floor((np.arange(target) + 0.5) * n / target).astype(np.int64)
    return labels[np.clip(pos, 0, n - 1)]


def assign_labels(features: FeatureFrames, cb: Codebook,
                  encoder_frame_count: int) -> FrameLabels:
    if features.frames.shape[1] != cb.centroids.shape[1]:
        raise ValueError(f"feature dim {features.frames.shape[1]} != codebook dim "
                         f"{cb.centroids.shape[1]}")
    idx, _ = nearest(features.frames, cb.centroids)
    return FrameLabels(resample_nearest(idx, encoder_frame_count), features.source_id)


def save_labels(path, labels: dict[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for sid in sorted(labels):
            f.write(json.dumps({"source_id": sid,
                                "labels": [int(v) for v in labels[sid]]}) + "\n")


def load_labels(path) -> dict[str, np.ndarray]:
    out = {}
    with open(Path(path), encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[rec["source_id"]] = np.asarray(rec["labels"], dtype=np.int64)
    return out


def label_corpus(audio: dict[str, Waveform], codebook_size: int, frame_counter,
                 n_mels: int = 40, window: int = 400, hop: int = 320, iters: int = 50,
                 seed: int = 0) -> tuple[Codebook, dict[str, np.ndarray]]:
    """Fit one codebook over every utterance and label each at encoder frame rate.

    ``frame_counter(n_samples)`` gives the encoder frame count of an utterance.
    """
    feats = {sid: extract_features(w, n_mels, window, hop) for sid, w in sorted(audio.items())}
    cb = kmeans_fit(list(feats.values()), codebook_size, iters, seed)
    labels = {sid: assign_labels(f, cb, frame_counter(len(audio[sid]))).labels
              for sid, f in feats.items()}
    return cb, labels
