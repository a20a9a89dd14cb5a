"""Frozen-feature probes: G / L / GL / R extraction, layer-weighted linear
classifiers, layer-importance reports and majority-vote ensembling."""

from __future__ import annotations

import csv
import json
import zlib
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_checkpoint, validate_shapes
from .config import RunConfig
from .corpus import Waveform
from .model import OHubert

MODES = ("G", "L", "GL", "R")
TASKS = {"speaker": "speaker_class", "content": "content_class"}
_NEEDS = {"G": ("G",), "L": ("L",), "GL": ("G", "L"), "R": ("R",)}


def load_encoder(ckpt) -> OHubert:
    """Model in eval mode from a Checkpoint or a path. Heads are loaded but never used here."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    cfg = RunConfig.from_dict(ckpt.config)
    dtype = torch.float64 if ckpt.header.get("dtype") == "float64" else torch.float32
    model = OHubert(cfg.model, seed=0).to(dtype)
    validate_shapes(ckpt, model)
    model.load_state_dict({k: v.to(dtype) for k, v in ckpt.group("model/").items()})
    model.eval()
    return model


def random_position(source_id: str, t: int, seed: int) -> int:
    """Seeded uniform content index for mode R; the same index is used at every layer."""
    if t < 1:
        raise ValueError("mode R needs at least one content frame")
    rng = np.random.default_rng([seed, zlib.crc32(source_id.encode("utf-8"))])
    return int(rng.integers(t))


@torch.no_grad()
def _hidden(model: OHubert, w: Waveform) -> tuple[np.ndarray, np.ndarray]:
    dtype = next(model.parameters()).dtype
    hs, _ = model.encode(torch.as_tensor(w.samples, dtype=dtype)[None])
    usp = hs.usp[:, 0].double().numpy()  # (l, d)
    content = hs.content[:, 0].double().numpy()  # (l, t, d)
    return usp, content


def extract_features(model, w: Waveform, mode: str, seed: int = 0,
                     alpha_gl: float | np.ndarray = 0.0) -> np.ndarray:
    """Per-layer feature vectors, shape (l, d_model).

    G: the USP state. L: mean of the content states. GL: mean_j(alpha*h_USP + h_j),
    which is alpha*G + L (``alpha_gl`` is a scalar or one value per layer).
    R: the content state at one seeded position.
    """
    if mode not in MODES:
        raise ValueError(f"unknown probe mode {mode!r}; expected one of {', '.join(MODES)}")
    if not isinstance(model, OHubert):
        model = load_encoder(model)
    usp, content = _hidden(model, w)
    if mode == "G":
        return usp
    if mode == "L":
        return content.mean(axis=1)
    if mode == "GL":
        a = np.broadcast_to(np.asarray(alpha_gl, dtype=np.float64), (usp.shape[0],))
        return a[:, None] * usp + content.mean(axis=1)
    return content[:, random_position(w.source_id, content.shape[1], seed)]


@dataclass
class FeatureSet:
    """Features for a list of utterances; arrays are (N, l, d)."""

    source_ids: list[str]
    speaker: np.ndarray
    content: np.ndarray
    G: np.ndarray | None = None
    L: np.ndarray | None = None
    R: np.ndarray | None = None
    r_seed: int = 0

    def targets(self, task: str) -> np.ndarray:
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; expected speaker or content")
        return self.speaker if task == "speaker" else self.content

    def parts(self, mode: str) -> dict[str, np.ndarray]:
        need = _NEEDS[mode]
        missing = [k for k in need if getattr(self, k) is None]
        if missing:
            raise ValueError(f"feature set lacks {', '.join(missing)} (needed for mode {mode})")
        return {k: getattr(self, k) for k in need}

    def save(self, path) -> None:
        arrays = {k: getattr(self, k) for k in ("G", "L", "R") if getattr(self, k) is not None}
        np.savez(path, source_ids=np.array(self.source_ids), speaker=self.speaker,
                 content=self.content, r_seed=np.array(self.r_seed), **arrays)

    @classmethod
    def load(cls, path) -> "FeatureSet":
        with np.load(path) as z:
            opt = {k: z[k] for k in ("G", "L", "R") if k in z.files}
            return cls([str(s) for s in z["source_ids"]], z["speaker"], z["content"],
                       r_seed=int(z["r_seed"]), **opt)


def extract_all(model, waveforms: Sequence[Waveform], modes: Sequence[str] = MODES,
                seed: int = 0) -> FeatureSet:
    """One forward pass per utterance; G and L are stored separately for GL."""
    if not isinstance(model, OHubert):
        model = load_encoder(model)
    keep = set()
    for m in modes:
        keep.update(_NEEDS[m])
    out = {k: [] for k in ("G", "L", "R")}
    for w in waveforms:
        usp, content = _hidden(model, w)
        if "G" in keep:
            out["G"].append(usp)
        if "L" in keep:
            out["L"].append(content.mean(axis=1))
        if "R" in keep:
            out["R"].append(content[:, random_position(w.source_id, content.shape[1], seed)])
    arrays = {k: np.stack(v) for k, v in out.items() if v}
    return FeatureSet([w.source_id for w in waveforms],
                      np.array([w.speaker_class for w in waveforms], dtype=np.int64),
                      np.array([w.content_class for w in waveforms], dtype=np.int64),
                      r_seed=seed, **arrays)


def split_utterances(y: np.ndarray, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Stratified train/dev/test index split; each utterance lands in exactly one part."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr < 0).any() or fr.sum() <= 0:
        raise ValueError("split needs three non-negative fractions")
    fr = fr / fr.sum()
    rng = np.random.default_rng([seed, 77])
    parts = ([], [], [])
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        n_tr = int(round(fr[0] * len(idx)))
        n_dev = int(round(fr[1] * len(idx)))
        parts[0].extend(idx[:n_tr])
        parts[1].extend(idx[n_tr:n_tr + n_dev])
        parts[2].extend(idx[n_tr + n_dev:])
    train, dev, test = (np.sort(np.array(p, dtype=np.int64)) for p in parts)
    if len(np.unique(y[train])) < 2:
        raise ValueError("degenerate split: the training part holds fewer than 2 classes")
    return train, dev, test


@dataclass
class Probe:
    """Softmax layer weights over per-layer features plus one linear classifier."""

    mode: str
    classes: np.ndarray
    layer_logits: np.ndarray  # (l,)
    weight: np.ndarray  # (d, K)
    bias: np.ndarray  # (K,)
    mean: dict[str, np.ndarray]  # per part, (l, d) train-set statistics
    std: dict[str, np.ndarray]
    alpha_gl: np.ndarray | None = None  # (1,) or (l,)

    @property
    def layer_weights(self) -> np.ndarray:
        z = self.layer_logits - self.layer_logits.max()
        e = np.exp(z)
        return e / e.sum()

    def _tensors(self):
        t = {k: torch.tensor(getattr(self, k), dtype=torch.float64)
             for k in ("layer_logits", "weight", "bias")}
        t["alpha_gl"] = (torch.tensor(self.alpha_gl, dtype=torch.float64)
                         if self.alpha_gl is not None else None)
        return t

    def logits(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        with torch.no_grad():
            x = _standardize(parts, self.mean, self.std)
            return _forward(x, self.mode, **self._tensors()).numpy()

    def predict(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        return self.classes[self.logits(parts).argmax(axis=1)]

    def to_dict(self) -> dict:
        return {"mode": self.mode, "classes": self.classes.tolist(),
                "layer_logits": self.layer_logits.tolist(), "weight": self.weight.tolist(),
                "bias": self.bias.tolist(),
                "mean": {k: v.tolist() for k, v in self.mean.items()},
                "std": {k: v.tolist() for k, v in self.std.items()},
                "alpha_gl": None if self.alpha_gl is None else self.alpha_gl.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Probe":
        arr = lambda v: np.asarray(v, dtype=np.float64)  # noqa: E731
        return cls(d["mode"], np.asarray(d["classes"], dtype=np.int64), arr(d["layer_logits"]),
                   arr(d["weight"]), arr(d["bias"]),
                   {k: arr(v) for k, v in d["mean"].items()},
                   {k: arr(v) for k, v in d["std"].items()},
                   None if d.get("alpha_gl") is None else arr(d["alpha_gl"]))


def _standardize(parts, mean, std) -> dict[str, torch.Tensor]:
    return {k: torch.tensor((v - mean[k]) / std[k], dtype=torch.float64) for k, v in parts.items()}


def _forward(x: dict[str, torch.Tensor], mode: str, layer_logits, weight, bias,
             alpha_gl=None) -> torch.Tensor:
    if mode == "GL":
        feats = alpha_gl[:, None] * x["G"] + x["L"]  # alpha broadcasts over (N, l, d)
    else:
        feats = next(iter(x.values()))
    pooled = torch.einsum("l,nld->nd", torch.softmax(layer_logits, 0), feats)
    return pooled @ weight + bias


def train_probe(parts: dict[str, np.ndarray], y: np.ndarray, mode: str, epochs: int = 300,
                lr: float = 0.5, seed: int = 0, gl_per_layer: bool = False,
                dev: tuple[dict[str, np.ndarray], np.ndarray] | None = None,
                eval_every: int = 10, history: list | None = None) -> Probe:
    """Full-batch plain gradient descent on cross-entropy.

    ``parts`` maps "G"/"L"/"R" to (N, l, d) arrays (GL needs both G and L).
    Features are standardised with train-set statistics. With ``dev`` given,
    the parameters with the best dev accuracy (first best on ties) are kept.
    ``history`` collects the layer-weight vector after every epoch.
    """
    if mode not in MODES:
        raise ValueError(f"unknown probe mode {mode!r}")
    classes, yi = np.unique(np.asarray(y), return_inverse=True)
    if len(classes) < 2:
        raise ValueError("degenerate split: need at least 2 classes to train a probe")
    mean = {k: v.mean(axis=0) for k, v in parts.items()}
    std = {k: np.maximum(v.std(axis=0), 1e-8) for k, v in parts.items()}
    x = _standardize(parts, mean, std)
    n_layers, d = next(iter(parts.values())).shape[1:]
    gen = torch.Generator().manual_seed(seed)
    params = {
        "layer_logits": torch.zeros(n_layers, dtype=torch.float64),
        "weight": torch.randn(d, len(classes), generator=gen, dtype=torch.float64) * 0.01,
        "bias": torch.zeros(len(classes), dtype=torch.float64),
    }
    if mode == "GL":
        params["alpha_gl"] = torch.ones(n_layers if gl_per_layer else 1, dtype=torch.float64)
    for p in params.values():
        p.requires_grad_(True)
    opt = torch.optim.SGD(list(params.values()), lr=lr)
    target = torch.as_tensor(yi)

    def snapshot() -> Probe:
        p = {k: v.detach().numpy().copy() for k, v in params.items()}
        return Probe(mode, classes, p["layer_logits"], p["weight"], p["bias"], mean, std,
                     p.get("alpha_gl"))

    best, best_acc = None, -1.0
    for epoch in range(1, epochs + 1):
        opt.zero_grad()
        F.cross_entropy(_forward(x, mode, **params), target).backward()
        opt.step()
        if history is not None:
            history.append(torch.softmax(params["layer_logits"].detach(), 0).numpy().copy())
        if dev is not None and (epoch % eval_every == 0 or epoch == epochs):
            cand = snapshot()
            acc = float(np.mean(cand.predict(dev[0]) == dev[1]))
            if acc > best_acc:
                best, best_acc = cand, acc
    return best if best is not None else snapshot()


def accuracy(probe: Probe, parts: dict[str, np.ndarray], y: np.ndarray) -> float:
    return float(np.mean(probe.predict(parts) == np.asarray(y)))


def _take(parts: dict[str, np.ndarray], idx: np.ndarray) -> dict[str, np.ndarray]:
    return {k: v[idx] for k, v in parts.items()}


@dataclass
class ProbeReport:
    task: str
    mode: str
    dev_accuracy: float
    test_accuracy: float
    layer_weights: list[float]
    alpha_gl: list[float] | None
    test_ids: list[str]
    test_predictions: list[int]
    test_targets: list[int]
    probe: dict = field(repr=False, default_factory=dict)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ProbeReport":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def run_probe(features: FeatureSet, task: str, mode: str, epochs: int = 300, lr: float = 0.5,
              seed: int = 0, split=(0.6, 0.2, 0.2), gl_per_layer: bool = False) -> ProbeReport:
    """Split by utterance, train on the train part, pick by dev, score the test part."""
    y = features.targets(task)
    parts = features.parts(mode)
    tr, dv, te = split_utterances(y, split, seed)
    probe = train_probe(_take(parts, tr), y[tr], mode, epochs, lr, seed, gl_per_layer,
                        dev=(_take(parts, dv), y[dv]) if len(dv) else None)
    test_parts = _take(parts, te)
    return ProbeReport(
        task, mode,
        accuracy(probe, _take(parts, dv), y[dv]) if len(dv) else float("nan"),
        accuracy(probe, test_parts, y[te]),
        probe.layer_weights.tolist(),
        None if probe.alpha_gl is None else probe.alpha_gl.tolist(),
        [features.source_ids[i] for i in te],
        probe.predict(test_parts).tolist(), y[te].tolist(),
        probe.to_dict())


CSV_FIELDS = ("task", "mode", "layer", "weight")


def layer_weight_report(reports: Sequence[ProbeReport]) -> list[dict]:
    """Rows (task, mode, layer, weight) with 1-based layers; weights sum to 1 per (task, mode)."""
    rows = []
    for r in reports:
        for i, w in enumerate(r.layer_weights):
            rows.append({"task": r.task, "mode": r.mode, "layer": i + 1, "weight": float(w)})
    return rows


def write_layer_csv(rows: list[dict], path, plot: bool = True) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        wr = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        wr.writeheader()
        for row in rows:
            wr.writerow({**row, "weight": repr(float(row["weight"]))})
    if plot:
        from .plotting import plot_layer_weights
        plot_layer_weights(rows, path.with_suffix(".png"), "layer importance")
    return path


def read_layer_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return [{"task": r["task"], "mode": r["mode"], "layer": int(r["layer"]),
                 "weight": float(r["weight"])} for r in csv.DictReader(f)]


def ensemble_vote(predictions, dev_accuracy) -> np.ndarray:
    """Majority vote over classifiers (rows of ``predictions``, shape (k, N)).

    On a tie between classes, the vote of the highest-dev-accuracy classifier
    among those backing a tied class decides; equal dev accuracies fall back to
    the earlier classifier.
    """
    votes = np.asarray(predictions)
    dev = np.asarray(dev_accuracy, dtype=np.float64)
    if votes.ndim != 2 or votes.shape[0] != len(dev):
        raise ValueError("predictions must be (n_classifiers, n_examples) with one dev accuracy each")
    order = sorted(range(len(dev)), key=lambda i: (-dev[i], i))
    out = np.empty(votes.shape[1], dtype=votes.dtype)
    for j in range(votes.shape[1]):
        counts = Counter(votes[:, j].tolist())
        top = max(counts.values())
        tied = {c for c, n in counts.items() if n == top}
        out[j] = next(votes[i, j] for i in order if votes[i, j] in tied)
    return out


def ensemble_reports(reports: Sequence[ProbeReport]) -> dict:
    """Vote the test predictions of several reports over the same utterances."""
    if not reports:
        raise ValueError("no reports to ensemble")
    ids = reports[0].test_ids
    for r in reports[1:]:
        if r.test_ids != ids or r.task != reports[0].task:
            raise ValueError(f"inconsistent example sets: {r.mode} report covers different "
                             "utterances or task")
    preds = np.array([r.test_predictions for r in reports])
    dev = [r.dev_accuracy for r in reports]
    final = ensemble_vote(preds, dev)
    y = np.asarray(reports[0].test_targets)
    return {"task": reports[0].task,
            "accuracy": {r.mode: r.test_accuracy for r in reports}
            | {"ensemble": float(np.mean(final == y))},
            "dev_accuracy": {r.mode: r.dev_accuracy for r in reports},
            "predictions": final.tolist(), "test_ids": ids}


def r_seed_sweep(model, waveforms: Sequence[Waveform], task: str, n_seeds: int = 100,
                 **probe_kw) -> np.ndarray:
    """Test accuracy of the R-mode probe for seeds 0..n_seeds-1 (position and probe seed)."""
    if not isinstance(model, OHubert):
        model = load_encoder(model)
    hidden = [_hidden(model, w)[1] for w in waveforms]
    speaker = np.array([w.speaker_class for w in waveforms], dtype=np.int64)
    content = np.array([w.content_class for w in waveforms], dtype=np.int64)
    ids = [w.source_id for w in waveforms]
    accs = []
    for s in range(n_seeds):
        R = np.stack([h[:, random_position(sid, h.shape[1], s)] for h, sid in zip(hidden, ids)])
        fs = FeatureSet(ids, speaker, content, R=R, r_seed=s)
        accs.append(run_probe(fs, task, "R", seed=s, **probe_kw).test_accuracy)
    return np.array(accs)
