"""Pre-training loop, checkpoint round-trips and the finite-difference gradient check."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .augment import two_stage_augment
from .checkpoint import Checkpoint, CheckpointError
from .config import RunConfig
from .corpus import Manifest, SegmentBatch, Waveform, batch_from_entries, speaker_signature, \
    split_key_query, synth_utterance
from .labeler import load_labels
from .losses import (LossBreakdown, NegativeQueue, mpl_loss, orth_reg, simclr_loss, total_loss,
                     usp_loss)
from .model import OHubert, frame_count, sample_mask

log = logging.getLogger(__name__)

# sub-stream ids for the per-step generators
_BATCH, _AUGMENT, _MASK, _QUEUE, _NEGATIVES, _DEV = range(6)


@dataclass
class BatchInputs:
    wav: torch.Tensor  # (B, samples)
    masked: torch.Tensor  # (B, t) bool
    labels: torch.Tensor  # (B, t) int64
    source_index: np.ndarray
    source_ids: list[str]
    batch: SegmentBatch


def segment_labels(full: np.ndarray, offset_frames: int, t: int) -> np.ndarray:
    return full[(offset_frames + np.arange(t)) % len(full)]


def build_inputs(batch: SegmentBatch, labels: dict[str, np.ndarray] | None, cfg: RunConfig,
                 mask_rng: np.random.Generator, dtype=torch.float32) -> BatchInputs:
    """Attach per-segment pseudo-labels and masks; sources without labels are dropped."""
    hop = cfg.model.downsample
    t = frame_count(batch.segment_length, cfg.model)
    keep, rows = [], []
    for i in range(len(batch)):
        sid = batch.source_ids[i]
        if labels is None:
            rows.append(np.zeros(t, dtype=np.int64))
            keep.append(i)
            continue
        if sid not in labels:
            continue
        fo = int(batch.offsets[i]) // hop + (t if batch.roles[i] == "query" else 0)
        rows.append(segment_labels(labels[sid], fo, t))
        keep.append(i)
    dropped = sorted({batch.source_ids[i] for i in range(len(batch))} -
                     {batch.source_ids[i] for i in keep})
    if dropped:
        log.warning("no pseudo-labels for %d source(s), skipped: %s", len(dropped), dropped[:3])
    if not keep:
        raise ValueError("no batch source has pseudo-labels")
    keep = np.asarray(keep)
    lab = np.stack(rows)
    if lab.max() >= cfg.model.C:
        raise ValueError(f"label {lab.max()} out of range for C={cfg.model.C}")
    masks = np.stack([sample_mask(t, cfg.model, rng=mask_rng).as_bool() for _ in keep])
    return BatchInputs(
        wav=torch.as_tensor(batch.samples[keep], dtype=dtype),
        masked=torch.as_tensor(masks),
        labels=torch.as_tensor(lab),
        source_index=batch.source_index[keep],
        source_ids=[batch.source_ids[i] for i in keep],
        batch=batch)


def compute_losses(model: OHubert, inputs: BatchInputs, cfg: RunConfig, rng: np.random.Generator,
                   negatives=None) -> tuple[LossBreakdown, torch.Tensor, torch.Tensor]:
    """Forward pass and all loss components. Returns (breakdown, wlf, lambdas)."""
    tc = cfg.train
    hs, _ = model.encode(inputs.wav, inputs.masked)
    l_mpl = mpl_loss(hs.content[-1], inputs.labels, inputs.masked, model.proj, cfg.model.tau)
    wlf, lam = model.lambda_head(hs.usp)
    q_lam = q_wlf = None
    if negatives is not None:
        q_lam, q_wlf = negatives[0].to(lam.dtype), negatives[1].to(wlf.dtype)
    l_usp = usp_loss(lam, inputs.source_index, model.lambda_head, margin=tc.am_margin,
                     scale=tc.am_scale, n_negatives=tc.usp_negatives, queue_lambdas=q_lam, rng=rng)
    l_sim = simclr_loss(wlf, inputs.source_index, tc.simclr_temperature, q_wlf)
    l_orth = orth_reg(hs.usp, hs.content, tc.orth_mode, tc.orth_eps)
    br = total_loss({"l_mpl": l_mpl, "l_usp": l_usp, "l_simclr": l_sim, "l_orth": l_orth},
                    tc.alpha)
    return br, wlf, lam


def lr_at(step: int, cfg: RunConfig) -> float:
    """Linear warm-up then linear decay; ``step`` counts completed updates."""
    tc = cfg.train
    w = tc.warmup
    if step < w:
        return tc.lr * (step + 1) / w
    return tc.lr * max(0.0, (tc.steps - step) / max(1, tc.steps - w))


def split_dev(manifest: Manifest, fraction: float, seed: int) -> tuple[Manifest, Manifest]:
    n_dev = int(round(fraction * len(manifest)))
    if n_dev == 0:
        return manifest, Manifest([], manifest.root)
    order = np.random.default_rng([seed, 9001]).permutation(len(manifest))
    dev = sorted(order[:n_dev].tolist())
    train = sorted(order[n_dev:].tolist())
    return manifest.subset(train), manifest.subset(dev)


class Trainer:
    """Holds model, optimizer, queue and data; ``step`` counts completed updates."""

    def __init__(self, cfg: RunConfig, manifest: Manifest | None = None,
                 labels: dict[str, np.ndarray] | None = None,
                 audio: dict[str, Waveform] | None = None):
        self.cfg = cfg
        tc = cfg.train
        self.dtype = torch.float64 if tc.float64 else torch.float32
        self.model = OHubert(cfg.model, seed=tc.init_seed).to(self.dtype)
        self.opt = torch.optim.Adam(self.model.parameters(), lr=tc.lr, foreach=False)
        self.queue = NegativeQueue(tc.queue_capacity, tc.queue_activation_step)
        self.step = 0
        self.best_dev: float | None = None
        self.manifest = manifest
        self.labels = labels
        self.audio = audio
        if manifest is not None:
            if self.audio is None:
                self.audio = manifest.load_audio()
            self.train_set, self.dev_set = split_dev(manifest, tc.dev_fraction, tc.seed)
            if len(self.train_set) < tc.batch_sources:
                raise ValueError(f"train split has {len(self.train_set)} sources, "
                                 f"fewer than batch_sources={tc.batch_sources}")

    # -- data ---------------------------------------------------------------
    def _rng(self, step: int, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.train.seed, step, stream])

    @property
    def segment_samples(self) -> int:
        return self.cfg.train.segment_frames * self.cfg.model.downsample

    def prepare(self, step: int) -> BatchInputs:
        tc = self.cfg.train
        rng = self._rng(step, _BATCH)
        picks = rng.choice(len(self.train_set), size=tc.batch_sources, replace=False)
        clean = batch_from_entries(self.train_set, picks, self.segment_samples, rng, self.audio,
                                   align=self.cfg.model.downsample)
        aug = two_stage_augment(clean, self.cfg.augment,
                                seed=[self.cfg.augment.seed, tc.seed, step, _AUGMENT])
        return build_inputs(aug, self.labels, self.cfg, self._rng(step, _MASK), self.dtype)

    # -- optimisation -------------------------------------------------------
    def train_step(self, inputs: BatchInputs | None = None) -> LossBreakdown:
        tc = self.cfg.train
        k = self.step
        if inputs is None:
            inputs = self.prepare(k)
        negatives = self.queue.sample(tc.queue_sample, k, self._rng(k, _QUEUE),
                                      exclude_sources=set(inputs.source_ids))
        self.model.train()
        self.opt.zero_grad(set_to_none=True)
        br, wlf, lam = compute_losses(self.model, inputs, self.cfg, self._rng(k, _NEGATIVES),
                                      negatives)
        br.total.backward()
        if tc.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), tc.grad_clip)
        for g in self.opt.param_groups:
            g["lr"] = lr_at(k, self.cfg)
        self.opt.step()
        self.queue.push(lam, wlf, inputs.source_ids)
        self.step += 1
        return br

    @torch.no_grad()
    def dev_loss(self) -> float | None:
        tc = self.cfg.train
        if self.manifest is None or len(self.dev_set) < 2:
            return None
        n = min(tc.batch_sources, len(self.dev_set))
        rng = np.random.default_rng([tc.seed, _DEV])
        picks = rng.choice(len(self.dev_set), size=n, replace=False)
        clean = batch_from_entries(self.dev_set, picks, self.segment_samples, rng, self.audio,
                                   align=self.cfg.model.downsample)
        aug = two_stage_augment(clean, self.cfg.augment, seed=[tc.seed, _DEV, 1])
        inputs = build_inputs(aug, self.labels, self.cfg, np.random.default_rng([tc.seed, _DEV, 2]),
                              self.dtype)
        self.model.eval()
        br, _, _ = compute_losses(self.model, inputs, self.cfg,
                                  np.random.default_rng([tc.seed, _DEV, 3]))
        return br.l_total

    # -- checkpoints --------------------------------------------------------
    def to_checkpoint(self) -> Checkpoint:
        names = {p: n for n, p in self.model.named_parameters()}
        tensors = {f"model/{k}": v for k, v in self.model.state_dict().items()}
        for p, st in self.opt.state.items():
            for key in ("step", "exp_avg", "exp_avg_sq"):
                v = st[key]
                tensors[f"optim/{names[p]}/{key}"] = v if torch.is_tensor(v) else torch.tensor(float(v))
        if len(self.queue):
            tensors["queue/lambdas"] = self.queue.lambdas
            tensors["queue/wlf"] = self.queue.wlf
        header = {"config": self.cfg.to_dict(), "step": self.step,
                  "queue_source_ids": list(self.queue.source_ids),
                  "best_dev": self.best_dev,
                  "dtype": "float64" if self.dtype == torch.float64 else "float32"}
        return Checkpoint(header, tensors)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, manifest=None, labels=None, audio=None,
                        cfg: RunConfig | None = None) -> "Trainer":
        cfg = cfg or RunConfig.from_dict(ckpt.config)
        tr = cls(cfg, manifest, labels, audio)
        ckpt_io.validate_shapes(ckpt, tr.model)
        state = {k: v.to(tr.dtype) for k, v in ckpt.group("model/").items()}
        tr.model.load_state_dict(state)
        params = dict(tr.model.named_parameters())
        optim = ckpt.group("optim/")
        for name, p in params.items():
            if f"{name}/exp_avg" not in optim:
                continue
            tr.opt.state[p] = {
                "step": optim[f"{name}/step"].clone(),
                "exp_avg": optim[f"{name}/exp_avg"].to(tr.dtype).clone(),
                "exp_avg_sq": optim[f"{name}/exp_avg_sq"].to(tr.dtype).clone(),
            }
        ids = ckpt.header.get("queue_source_ids", [])
        if ids:
            if "queue/lambdas" not in ckpt.tensors or ckpt.tensors["queue/lambdas"].shape[0] != len(ids):
                raise CheckpointError("queue tensors inconsistent with header")
            tr.queue.lambdas = ckpt.tensors["queue/lambdas"].to(tr.dtype).clone()
            tr.queue.wlf = ckpt.tensors["queue/wlf"].to(tr.dtype).clone()
            tr.queue.source_ids = list(ids)
        tr.step = ckpt.step
        tr.best_dev = ckpt.header.get("best_dev")
        return tr


def load_data(cfg: RunConfig):
    tc = cfg.train
    if not tc.manifest:
        raise ValueError("train.manifest is not set")
    manifest = Manifest.load(tc.manifest)
    labels = load_labels(tc.labels) if tc.labels else None
    if labels is None:
        raise ValueError("train.labels is not set")
    return manifest, labels


def pretrain(cfg: RunConfig, out_dir, resume=None, progress=None,
             data=None) -> Trainer:
    """Run ``cfg.train.steps`` updates, writing logs and checkpoints under ``out_dir``.

    Writes config.json, train_log.jsonl (one line per step), events.jsonl,
    step_*.ohub every ``checkpoint_every`` steps, best.ohub and final.ohub.
    """
    from .plotting import plot_training_log

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest, labels = data if data is not None else load_data(cfg)
    audio = manifest.load_audio()
    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else ckpt_io.load_checkpoint(resume)
        tr = Trainer.from_checkpoint(ck, manifest, labels, audio, cfg)
    else:
        tr = Trainer(cfg, manifest, labels, audio)
    cfg.save(out / "config.json")
    tc = cfg.train
    mode = "a" if resume is not None else "w"
    with open(out / "train_log.jsonl", mode, encoding="utf-8") as logf, \
            open(out / "events.jsonl", mode, encoding="utf-8") as evf:
        while tr.step < tc.steps:
            if tr.step == tc.queue_activation_step:
                evf.write(json.dumps({"step": tr.step + 1, "event": "queue_activated",
                                      "queue_size": len(tr.queue)}) + "\n")
            br = tr.train_step()
            logf.write(json.dumps(br.as_log(tr.step)) + "\n")
            if progress:
                progress(tr.step, br)
            if tr.step % tc.dev_every == 0 or tr.step == tc.steps:
                dev = tr.dev_loss()
                if dev is not None and (tr.best_dev is None or dev < tr.best_dev):
                    tr.best_dev = dev
                    ckpt_io.save_checkpoint(out / "best.ohub", tr.to_checkpoint())
                    evf.write(json.dumps({"step": tr.step, "event": "best_dev", "dev_loss": dev}) + "\n")
            if tc.checkpoint_every and tr.step % tc.checkpoint_every == 0:
                ckpt_io.save_checkpoint(out / f"step_{tr.step:06d}.ohub", tr.to_checkpoint())
    ckpt_io.save_checkpoint(out / "final.ohub", tr.to_checkpoint())
    if not (out / "best.ohub").exists():
        ckpt_io.save_checkpoint(out / "best.ohub", tr.to_checkpoint())
    plot_training_log(out / "train_log.jsonl", out / "loss_curve.png")
    return tr


def read_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# --------------------------------------------------------------------------
# gradient check

GROUPS = ("conv", "attention", "ffn", "layernorm", "mask_embedding", "usp_embedding",
          "projection", "wlf", "mlp", "scorer")


def param_group(name: str) -> str:
    if name.startswith("feature_encoder."):
        return "conv"
    if name == "mask_embedding":
        return "mask_embedding"
    if name in ("usp_embedding", "encoder.usp_position"):
        return "usp_embedding"
    if name.startswith("encoder.blocks."):
        if ".attn." in name:
            return "attention"
        if ".ffn." in name:
            return "ffn"
        return "layernorm"
    if name.startswith("proj."):
        return "projection"
    if name == "lambda_head.wlf_raw":
        return "wlf"
    if name.startswith("lambda_head.mlp"):
        return "mlp"
    if name.startswith("lambda_head.scorer"):
        return "scorer"
    raise KeyError(name)


def gradcheck_inputs(cfg: RunConfig, seed: int = 0, n_sources: int = 3,
                     t_frames: int | None = None) -> BatchInputs:
    """A small in-memory synthetic batch (no files) for gradient checks."""
    mc = cfg.model
    t = t_frames or mc.mask_span + 4
    seg = t * mc.downsample
    rate = cfg.corpus.sample_rate
    rng = np.random.default_rng([seed, 77])
    rows, src, roles, ids = [], [], [], []
    for s in range(n_sources):
        sig = speaker_signature(s, n_sources, seed)
        x = synth_utterance(sig, s, 2 * seg, rate, rng)
        key, query, _ = split_key_query(Waveform(x, rate, f"gc{s}"), seg)
        rows += [key.samples, query.samples]
        src += [s, s]
        roles += ["key", "query"]
        ids += [f"gc{s}"] * 2
    batch = SegmentBatch(np.stack(rows), np.asarray(src), tuple(roles), tuple(ids),
                         np.asarray(src), np.zeros(len(src), dtype=int),
                         np.zeros(len(src), dtype=int), rate)
    labels = {f"gc{s}": rng.integers(mc.C, size=2 * t) for s in range(n_sources)}
    mask_rng = np.random.default_rng([seed, 78])
    while True:
        inputs = build_inputs(batch, labels, cfg, mask_rng, torch.float64)
        if inputs.masked.any():
            return inputs


def grad_check(cfg: RunConfig, n_params_sampled: int = 16, eps: float = 1e-5, seed: int = 0,
               n_directions: int = 2, inputs: BatchInputs | None = None,
               model: OHubert | None = None) -> dict[str, dict]:
    """Central differences of l_total along random directions, per parameter group.

    For each group a random subset of ``n_params_sampled`` coordinates is
    drawn; the directional derivative along a Gaussian direction on that
    subset is compared with the analytic gradient. Runs in float64.
    """
    model = (model or OHubert(cfg.model, seed=seed)).double()
    inputs = inputs or gradcheck_inputs(cfg, seed)

    def loss() -> torch.Tensor:
        br, _, _ = compute_losses(model, inputs, cfg, np.random.default_rng([seed, 79]))
        return br.total

    model.zero_grad(set_to_none=True)
    loss().backward()
    params = dict(model.named_parameters())
    grads = {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
             for n, p in params.items()}
    rng = np.random.default_rng([seed, 80])
    report = {}
    for group in GROUPS:
        names = [n for n in params if param_group(n) == group]
        if not names:
            continue
        sizes = np.array([params[n].numel() for n in names])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        total = int(offsets[-1])
        worst = 0.0
        for _ in range(n_directions):
            flat = rng.choice(total, size=min(n_params_sampled, total), replace=False)
            coords = []
            for f in flat:
                i = int(np.searchsorted(offsets, f, side="right") - 1)
                coords.append((names[i], int(f - offsets[i])))
            v = rng.standard_normal(len(coords))
            analytic = sum(float(grads[n].reshape(-1)[j]) * vi for (n, j), vi in zip(coords, v))
            with torch.no_grad():
                for (n, j), vi in zip(coords, v):
                    params[n].view(-1)[j] += eps * vi
                plus = float(loss())
                for (n, j), vi in zip(coords, v):
                    params[n].view(-1)[j] -= 2 * eps * vi
                minus = float(loss())
                for (n, j), vi in zip(coords, v):
                    params[n].view(-1)[j] += eps * vi
            numeric = (plus - minus) / (2 * eps)
            denom = max(abs(analytic), abs(numeric), 1e-12)
            worst = max(worst, abs(analytic - numeric) / denom)
        report[group] = {"max_rel_err": worst, "n_coords": min(n_params_sampled, total),
                         "n_directions": n_directions}
    return report
