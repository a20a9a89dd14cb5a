"""Masked prediction, USP (AM-softmax pair) and regularisation losses."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .model import ModelConfig, ProjectionHead, cosine, project_logits

# incremented whenever a loss is skipped for lack of inputs
warnings_counter: Counter = Counter()


class LambdaHead(nn.Module):
    """Softmax-weighted layer sum of USP states, two MLP blocks, pair scorer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.wlf_raw = nn.Parameter(torch.zeros(cfg.n_layers))
        self.mlp1 = nn.Linear(cfg.d_model, cfg.d_model)
        self.mlp2 = nn.Linear(cfg.d_model, cfg.lambda_dim)
        self.scorer = nn.Linear(2 * cfg.lambda_dim, 1)
        self.pair_features = cfg.pair_features

    def layer_weights(self) -> torch.Tensor:
        return torch.softmax(self.wlf_raw, dim=0)

    def wlf(self, usp: torch.Tensor) -> torch.Tensor:
        """(l, B, d) -> (B, d)."""
        if usp.shape[0] != self.wlf_raw.shape[0]:
            raise ValueError(f"expected {self.wlf_raw.shape[0]} layers, got {usp.shape[0]}")
        return torch.einsum("l,lbd->bd", self.layer_weights(), usp)

    def embed(self, wlf_out: torch.Tensor) -> torch.Tensor:
        return F.gelu(self.mlp2(F.gelu(self.mlp1(wlf_out))))

    def forward(self, usp: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        w = self.wlf(usp)
        return w, self.embed(w)

    def score(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Order-symmetric pair score.

        concat: mean of linear(concat[a, b]) and linear(concat[b, a]), which is
        additive in a and b. interaction: linear(concat[a*b, (a-b)^2]), same
        input width, symmetric by construction.
        """
        if self.pair_features == "interaction":
            return self.scorer(torch.cat([a * b, (a - b) ** 2], dim=-1)).squeeze(-1)
        ab = self.scorer(torch.cat([a, b], dim=-1))
        ba = self.scorer(torch.cat([b, a], dim=-1))
        return (0.5 * (ab + ba)).squeeze(-1)


def lambda_embed(usp: torch.Tensor, head: LambdaHead) -> torch.Tensor:
    return head(usp)[1]


# --------------------------------------------------------------------------
# content

def mpl_loss(content: torch.Tensor, labels: torch.Tensor, masked: torch.Tensor,
             head: ProjectionHead, tau: float) -> torch.Tensor:
    """Cross-entropy of cosine logits at masked frames only.

    content: (B, t, d) last-layer content states; labels: (B, t) int;
    masked: (B, t) bool. Averaged over all masked frames in the batch.
    """
    if labels.shape != masked.shape or content.shape[:-1] != masked.shape:
        raise ValueError(f"shape mismatch: content {tuple(content.shape)}, labels "
                         f"{tuple(labels.shape)}, mask {tuple(masked.shape)}")
    if not bool(masked.any()):
        warnings_counter["mpl_empty_mask"] += 1
        return content.sum() * 0.0
    h = content[masked]
    logits = project_logits(h, head, tau)
    return F.cross_entropy(logits, labels[masked])


# --------------------------------------------------------------------------
# other: USP pair classification

def am_softmax_pair_loss(z: torch.Tensor, y: torch.Tensor, margin: float,
                         scale: float) -> torch.Tensor:
    """Two-class additive-margin softmax on pair scores.

    Class 1 ("same") has logit z, class 0 has -z; the margin is subtracted
    from the target class before scaling.
    """
    y = y.to(z.dtype)
    logits = torch.stack([-z - margin * (1 - y), z - margin * y], dim=-1) * scale
    return F.cross_entropy(logits, y.long())


def usp_pairs(source_index: np.ndarray, n_negatives: int, rng: np.random.Generator,
              n_queue: int = 0):
    """Enumerate scored pairs as (anchor, partner, from_queue, label) index arrays.

    One anchor per source (its first segment). The positive partner is the
    sibling segment; negatives come from the queue when ``n_queue`` > 0,
    otherwise from in-batch segments of other sources.
    """
    source_index = np.asarray(source_index)
    anchors, partners, from_queue, labels = [], [], [], []
    for s in dict.fromkeys(source_index.tolist()):
        members = np.flatnonzero(source_index == s)
        if len(members) < 2:
            continue
        a = int(members[0])
        anchors.append(a); partners.append(int(members[1])); from_queue.append(False); labels.append(1)
        if n_queue > 0:
            pool = np.arange(n_queue)
        else:
            pool = np.flatnonzero(source_index != s)
        k = min(n_negatives, len(pool))
        for j in rng.choice(pool, size=k, replace=False) if k else []:
            anchors.append(a); partners.append(int(j)); from_queue.append(n_queue > 0); labels.append(0)
    if not labels or 1 not in labels:
        raise ValueError("usp_loss needs at least one positive pair")
    if 0 not in labels:
        raise ValueError("no negatives available: batch has one source and the queue is empty")
    return (np.asarray(anchors), np.asarray(partners), np.asarray(from_queue, dtype=bool),
            np.asarray(labels))


def usp_loss(lambdas: torch.Tensor, source_index, head: LambdaHead, *,
             margin: float = 0.2, scale: float = 30.0, n_negatives: int = 16,
             queue_lambdas: torch.Tensor | None = None,
             rng: np.random.Generator | None = None) -> torch.Tensor:
    """AM-softmax over sampled Issame pairs; queued rows are constants (no gradient)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    n_queue = 0 if queue_lambdas is None else int(queue_lambdas.shape[0])
    if n_queue:
        queue_lambdas = queue_lambdas.detach()
    a, b, fq, y = usp_pairs(source_index, n_negatives, rng, n_queue)
    left = lambdas[torch.as_tensor(a)]
    if n_queue:
        right = torch.where(torch.as_tensor(fq)[:, None],
                            queue_lambdas[torch.as_tensor(np.where(fq, b, 0))],
                            lambdas[torch.as_tensor(np.where(fq, 0, b))])
    else:
        right = lambdas[torch.as_tensor(b)]
    z = head.score(left, right)
    return am_softmax_pair_loss(z, torch.as_tensor(y), margin, scale)


# --------------------------------------------------------------------------
# regularisation

def simclr_loss(wlf_out: torch.Tensor, source_index, temperature: float = 0.1,
                queue_wlf: torch.Tensor | None = None) -> torch.Tensor:
    """NT-Xent over L2-normalised WLF outputs; queue rows act as extra negatives."""
    source_index = np.asarray(source_index)
    n_src = len(set(source_index.tolist()))
    n_queue = 0 if queue_wlf is None else int(queue_wlf.shape[0])
    if n_src < 2 and n_queue == 0:
        raise ValueError("simclr_loss needs >= 2 sources or queued negatives")
    B = wlf_out.shape[0]
    z = F.normalize(wlf_out, dim=-1, eps=1e-8)
    sims = z @ z.T / temperature
    if n_queue:
        q = F.normalize(queue_wlf.detach(), dim=-1, eps=1e-8)
        sims = torch.cat([sims, z @ q.T / temperature], dim=1)
    self_mask = torch.zeros_like(sims, dtype=torch.bool)
    self_mask[torch.arange(B), torch.arange(B)] = True
    sims = sims.masked_fill(self_mask, float("-inf"))
    pos = []
    for i in range(B):
        sib = np.flatnonzero((source_index == source_index[i]) & (np.arange(B) != i))
        if len(sib) != 1:
            raise ValueError("each source must contribute exactly two segments")
        pos.append(int(sib[0]))
    return F.cross_entropy(sims, torch.as_tensor(pos))


def orth_reg(usp: torch.Tensor, content: torch.Tensor, mode: str = "literal",
             eps_sim: float = 1e-2) -> torch.Tensor:
    """Per-layer USP vs mean-content similarity term, summed over layers, batch-averaged.

    literal: sum_i 1 / max(eps_sim, cos_i); distinct: sum_i cos_i^2.
    usp: (l, B, d); content: (l, B, t, d).
    """
    if usp.shape[0] < 1:
        raise ValueError("orth_reg needs at least one layer")
    cos = cosine(usp, content.mean(dim=-2))  # (l, B)
    if mode == "literal":
        per = 1.0 / cos.clamp_min(eps_sim)
    elif mode == "distinct":
        per = cos ** 2
    else:
        raise ValueError(f"unknown orth mode {mode!r}")
    return per.sum(dim=0).mean()


# --------------------------------------------------------------------------
# total

@dataclass
class LossBreakdown:
    l_mpl: float
    l_usp: float
    l_simclr: float
    l_orth: float
    l_total: float
    alpha: float
    total: torch.Tensor | None = None

    def as_log(self, step: int) -> dict:
        return {"step": step, "l_mpl": self.l_mpl, "l_usp": self.l_usp,
                "l_simclr": self.l_simclr, "l_orth": self.l_orth, "l_total": self.l_total}


COMPONENTS = ("l_mpl", "l_usp", "l_simclr", "l_orth")


def combine(l_mpl: float, l_usp: float, l_simclr: float, l_orth: float, alpha: float) -> float:
    return l_mpl + alpha * (l_usp + l_simclr + l_orth)


def total_loss(parts: dict, alpha: float = 10.0) -> LossBreakdown:
    """Weighted sum; ``parts`` maps l_mpl/l_usp/l_simclr/l_orth to scalars or tensors."""
    vals = {}
    for name in COMPONENTS:
        v = parts[name]
        f = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(f):
            raise FloatingPointError(f"non-finite loss component {name} = {f}")
        vals[name] = f
    tensors = [parts[n] for n in COMPONENTS]
    total = None
    if all(torch.is_tensor(t) for t in tensors):
        total = tensors[0] + alpha * (tensors[1] + tensors[2] + tensors[3])
    return LossBreakdown(**vals, l_total=combine(*(vals[n] for n in COMPONENTS), alpha),
                         alpha=alpha, total=total)


# --------------------------------------------------------------------------
# negative queue

class NegativeQueue:
    """FIFO of detached (Lambda, WLF) embeddings tagged with their source id."""

    def __init__(self, capacity: int = 1024, activation_step: int = 500):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.activation_step = activation_step
        self.lambdas: torch.Tensor | None = None
        self.wlf: torch.Tensor | None = None
        self.source_ids: list[str] = []

    def __len__(self) -> int:
        return len(self.source_ids)

    def push(self, lambdas: torch.Tensor, wlf: torch.Tensor, source_ids: Sequence[str]) -> None:
        if len(source_ids) != lambdas.shape[0] or wlf.shape[0] != lambdas.shape[0]:
            raise ValueError("push: mismatched lengths")
        lam = lambdas.detach().clone()
        w = wlf.detach().clone()
        if self.lambdas is not None:
            lam = torch.cat([self.lambdas, lam.to(self.lambdas.dtype)])
            w = torch.cat([self.wlf, w.to(self.wlf.dtype)])
        ids = self.source_ids + list(source_ids)
        drop = max(0, len(ids) - self.capacity)
        self.lambdas, self.wlf, self.source_ids = lam[drop:], w[drop:], ids[drop:]

    def is_active(self, step: int) -> bool:
        return step >= self.activation_step

    def sample(self, k: int, step: int, rng: np.random.Generator,
               exclude_sources=()) -> tuple[torch.Tensor, torch.Tensor, list[str]] | None:
        """min(k, eligible) uniform draws without replacement, or None before activation.

        Returns (lambdas, wlf, source_ids) of the drawn entries.
        """
        if not self.is_active(step) or not self.source_ids or k <= 0:
            return None
        excl = set(exclude_sources)
        eligible = np.asarray([i for i, s in enumerate(self.source_ids) if s not in excl])
        if len(eligible) == 0:
            return None
        idx = torch.as_tensor(np.sort(rng.choice(eligible, size=min(k, len(eligible)), replace=False)))
        return self.lambdas[idx], self.wlf[idx], [self.source_ids[i] for i in idx.tolist()]

    def to(self, dtype) -> "NegativeQueue":
        if self.lambdas is not None:
            self.lambdas = self.lambdas.to(dtype)
            self.wlf = self.wlf.to(dtype)
        return self
