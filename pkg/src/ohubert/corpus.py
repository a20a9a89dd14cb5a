"""Synthetic corpus generation, WAV I/O, manifests and key/query batches."""

from __future__ import annotations

import itertools
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.io import wavfile

N_PROTOTYPES = 5
PHONE_SECONDS = 0.1
_PERMUTATIONS = list(itertools.permutations(range(N_PROTOTYPES)))


class WavFormatError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""
    speaker_class: int = -1
    content_class: int = -1

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def with_samples(self, samples: np.ndarray) -> "Waveform":
        return Waveform(samples, self.sample_rate, self.source_id,
                        self.speaker_class, self.content_class)


@dataclass
class ManifestEntry:
    source_id: str
    path: str
    speaker_class: int
    content_class: int
    duration: float


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.source_id in seen:
                raise ValueError(f"duplicate source_id in manifest: {e.source_id}")
            seen.add(e.source_id)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def subset(self, indices: Iterable[int]) -> "Manifest":
        return Manifest([self.entries[i] for i in indices], self.root)

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            for e in self.entries:
                rec = {"source_id": e.source_id, "path": e.path,
                       "speaker_class": e.speaker_class,
                       "content_class": e.content_class,
                       "duration": e.duration}
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        entries = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    entries.append(ManifestEntry(
                        source_id=str(rec["source_id"]), path=str(rec["path"]),
                        speaker_class=int(rec.get("speaker_class", -1)),
                        content_class=int(rec.get("content_class", -1)),
                        duration=float(rec.get("duration", 0.0))))
                except (KeyError, ValueError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad manifest record ({exc})") from None
        return cls(entries, path.parent)

    def load_audio(self) -> dict[str, Waveform]:
        return {e.source_id: self.load_entry(e) for e in self.entries}

    def load_entry(self, entry: ManifestEntry) -> Waveform:
        w = load_wav(self.resolve(entry))
        w.source_id = entry.source_id
        w.speaker_class = entry.speaker_class
        w.content_class = entry.content_class
        return w


# --------------------------------------------------------------------------
# WAV I/O

def load_wav(path) -> Waveform:
    """Read a mono RIFF/WAVE file (16-bit PCM or 32-bit float) into [-1, 1]."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:  # scipy raises ValueError / struct errors on bad headers
        raise WavFormatError(f"{path}: malformed WAV ({exc})") from None
    if data.ndim != 1:
        raise WavFormatError(f"{path}: expected mono, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported encoding {data.dtype}")
    return Waveform(samples, int(rate), source_id=path.stem)


def write_wav(path, w: Waveform | np.ndarray, sample_rate: int | None = None) -> None:
    """Write 16-bit PCM mono. Samples are clipped to the representable range."""
    if isinstance(w, Waveform):
        samples, rate = w.samples, w.sample_rate
    else:
        samples, rate = np.asarray(w, dtype=np.float64), sample_rate
    if rate is None:
        raise ValueError("sample_rate required for raw arrays")
    pcm = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    wavfile.write(path, int(rate), pcm)


# --------------------------------------------------------------------------
# synthetic corpus

@dataclass(frozen=True)
class SpeakerSignature:
    f0: float
    formants: tuple[float, float]
    bandwidths: tuple[float, float]
    tilt_db_per_octave: float


def speaker_signature(speaker_class: int, n_speakers: int, seed: int) -> SpeakerSignature:
    # f0 on a log grid keeps speakers separable; formants/tilt are seeded draws.
    frac = speaker_class / max(n_speakers - 1, 1)
    f0 = 90.0 * 2.0 ** (1.4 * frac)
    rng = np.random.default_rng([seed, 101, speaker_class])
    f1 = rng.uniform(300, 900)
    f2 = rng.uniform(1100, 2600)
    bw = (rng.uniform(80, 160), rng.uniform(120, 250))
    tilt = rng.uniform(-9.0, -3.0)
    return SpeakerSignature(f0, (f1, f2), bw, tilt)


def _phone(proto: int, n: int, sample_rate: int, rng) -> np.ndarray:
    t = np.arange(n) / sample_rate
    dur = n / sample_rate
    phase = rng.uniform(0, 2 * np.pi)
    if proto == 0:
        x = np.sin(2 * np.pi * 600 * t + phase)
    elif proto == 1:
        # linear chirp 800 -> 1600 Hz
        x = np.sin(2 * np.pi * (800 * t + 0.5 * (800 / dur) * t ** 2) + phase)
    elif proto == 2:
        x = np.sin(2 * np.pi * 2200 * t + phase)
    elif proto == 3:
        x = np.sin(2 * np.pi * (3000 * t - 0.5 * (1200 / dur) * t ** 2) + phase)
    else:
        x = 0.5 * (np.sin(2 * np.pi * 1000 * t + phase) + np.sin(2 * np.pi * 3400 * t))
    return x * np.hanning(n)


def content_sequence(content_class: int) -> tuple[int, ...]:
    return _PERMUTATIONS[content_class % len(_PERMUTATIONS)]


def synth_utterance(spk: SpeakerSignature, content_class: int, n_samples: int,
                    sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n_samples) / sample_rate
    f0 = spk.f0 * (1.0 + rng.uniform(-0.02, 0.02))
    vibrato = 0.01 * np.sin(2 * np.pi * rng.uniform(4, 6) * t + rng.uniform(0, 2 * np.pi))
    inst_phase = 2 * np.pi * np.cumsum(f0 * (1 + vibrato)) / sample_rate
    voice = np.zeros(n_samples)
    n_harm = int(min(4000.0, 0.45 * sample_rate) // f0)
    for h in range(1, n_harm + 1):
        fh = h * f0
        amp = 10 ** (spk.tilt_db_per_octave * math.log2(fh / 100.0) / 20)
        for fc, bw, gain in zip(spk.formants, spk.bandwidths, (4.0, 2.5)):
            amp *= 1.0 + gain * math.exp(-0.5 * ((fh - fc) / bw) ** 2)
        voice += amp * np.sin(h * inst_phase + rng.uniform(0, 2 * np.pi))
    voice /= np.sqrt(np.mean(voice ** 2)) + 1e-12

    phones = np.zeros(n_samples)
    seq = content_sequence(content_class)
    plen = int(round(PHONE_SECONDS * sample_rate))
    for k, start in enumerate(range(0, n_samples, plen)):
        n = min(plen, n_samples - start)
        phones[start:start + n] = _phone(seq[k % len(seq)], plen, sample_rate, rng)[:n]
    phones /= np.sqrt(np.mean(phones ** 2)) + 1e-12

    x = voice + 0.8 * phones + 0.02 * rng.standard_normal(n_samples)
    return 0.9 * x / np.max(np.abs(x))


def synth_corpus(n_speakers: int, n_contents: int, utterances_per_speaker: int,
                 duration_s: float, sample_rate: int = 16000, seed: int = 0,
                 out_dir=None, min_segment_samples: int = 1) -> Manifest:
    """Generate the synthetic corpus and write ``wavs/*.wav`` plus ``manifest.jsonl``."""
    if n_speakers < 2:
        raise ValueError("n_speakers must be >= 2")
    if not 1 <= n_contents <= len(_PERMUTATIONS):
        raise ValueError(f"n_contents must be in [1, {len(_PERMUTATIONS)}]")
    if utterances_per_speaker < 1:
        raise ValueError("utterances_per_speaker must be >= 1")
    n_samples = int(round(duration_s * sample_rate))
    if n_samples <= 0:
        raise ValueError("zero-duration request")
    if n_samples < 2 * min_segment_samples:
        raise ValueError(f"duration too short: {n_samples} samples < 2 x {min_segment_samples}")
    if out_dir is None:
        raise ValueError("out_dir is required")
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wavs"
    try:
        wav_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from None
    if not os.access(wav_dir, os.W_OK):
        raise OSError(f"output directory not writable: {wav_dir}")

    entries = []
    for spk_cls in range(n_speakers):
        sig = speaker_signature(spk_cls, n_speakers, seed)
        for u in range(utterances_per_speaker):
            rng = np.random.default_rng([seed, 202, spk_cls, u])
            content = int(rng.integers(n_contents))
            samples = synth_utterance(sig, content, n_samples, sample_rate, rng)
            sid = f"spk{spk_cls:03d}_utt{u:04d}"
            rel = f"wavs/{sid}.wav"
            write_wav(out_dir / rel, samples, sample_rate)
            entries.append(ManifestEntry(sid, rel, spk_cls, content, n_samples / sample_rate))
    manifest = Manifest(entries, out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


# --------------------------------------------------------------------------
# key/query segmentation and batches

def cyclic_pad(samples: np.ndarray, length: int) -> np.ndarray:
    if len(samples) == 0:
        raise ValueError("cannot pad an empty waveform")
    if len(samples) >= length:
        return samples
    return np.resize(samples, length)


def split_key_query(w: Waveform, t: int, rng: np.random.Generator | None = None,
                    align: int = 1) -> tuple[Waveform, Waveform, int]:
    """Split into (key, query) of ``t`` samples each.

    Longer inputs are first cropped to ``2t`` at a random offset that is a
    multiple of ``align``; shorter ones are cyclically padded. Returns the
    crop offset too.
    """
    if t <= 0:
        raise ValueError("segment length must be positive")
    samples = w.samples
    if len(samples) < 2 * t:
        samples = cyclic_pad(samples, 2 * t)
    offset = 0
    if len(samples) > 2 * t:
        if rng is None:
            raise ValueError("rng required to crop a waveform longer than 2t")
        n_slots = (len(samples) - 2 * t) // align + 1
        offset = int(rng.integers(n_slots)) * align
    crop = samples[offset:offset + 2 * t]
    return w.with_samples(crop[:t].copy()), w.with_samples(crop[t:].copy()), offset


@dataclass
class SegmentBatch:
    """2n segments ordered key_0, query_0, key_1, query_1, ..."""

    samples: np.ndarray  # (2n, t)
    source_index: np.ndarray  # (2n,)
    roles: tuple[str, ...]
    source_ids: tuple[str, ...]  # per segment
    speaker_class: np.ndarray
    content_class: np.ndarray
    offsets: np.ndarray  # crop offset of the parent 2t window, per segment
    sample_rate: int
    reverberated: np.ndarray | None = None

    @property
    def n_sources(self) -> int:
        return len(set(self.source_index.tolist()))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def segment_length(self) -> int:
        return self.samples.shape[1]

    def pair_labels(self) -> np.ndarray:
        """Symmetric 0/1 matrix; 1 ("Issame") iff distinct segments share a source."""
        same = self.source_index[:, None] == self.source_index[None, :]
        np.fill_diagonal(same, False)
        return same.astype(np.int64)

    def segment(self, i: int) -> Waveform:
        return Waveform(self.samples[i], self.sample_rate, self.source_ids[i],
                        int(self.speaker_class[i]), int(self.content_class[i]))

    def replace(self, samples: np.ndarray, reverberated=None) -> "SegmentBatch":
        return SegmentBatch(samples, self.source_index.copy(), self.roles, self.source_ids,
                            self.speaker_class.copy(), self.content_class.copy(),
                            self.offsets.copy(), self.sample_rate, reverberated)


def make_batch(manifest: Manifest, n: int, t: int, seed: int,
               audio: Mapping[str, Waveform] | None = None, align: int = 1) -> SegmentBatch:
    """Sample ``n`` distinct sources and split each into a key/query pair."""
    if n < 1:
        raise ValueError("batch size must be >= 1")
    if n > len(manifest):
        raise ValueError(f"batch size {n} exceeds manifest size {len(manifest)}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(manifest), size=n, replace=False)
    return batch_from_entries(manifest, picks, t, rng, audio, align)


def batch_from_entries(manifest: Manifest, picks: Sequence[int], t: int,
                       rng: np.random.Generator, audio=None, align: int = 1) -> SegmentBatch:
    rows, src, roles, ids, spk, cnt, offs = [], [], [], [], [], [], []
    rate = None
    for k, idx in enumerate(picks):
        entry = manifest.entries[int(idx)]
        w = audio[entry.source_id] if audio is not None else manifest.load_entry(entry)
        if rate is None:
            rate = w.sample_rate
        elif w.sample_rate != rate:
            raise ValueError("sample_rate differs across the corpus")
        key, query, off = split_key_query(w, t, rng, align)
        for role, seg in (("key", key), ("query", query)):
            rows.append(seg.samples)
            src.append(k)
            roles.append(role)
            ids.append(entry.source_id)
            spk.append(entry.speaker_class)
            cnt.append(entry.content_class)
        offs.extend([off, off])
    return SegmentBatch(np.stack(rows), np.asarray(src), tuple(roles), tuple(ids),
                        np.asarray(spk), np.asarray(cnt), np.asarray(offs), int(rate))
