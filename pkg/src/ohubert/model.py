"""Conv feature encoder, span masking, USP token and a pre-norm transformer."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_CLAMP = 1e-8


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ffn_dim: int = 256
    conv_strides: list[int] = field(default_factory=lambda: [5, 4, 4, 4])
    conv_kernels: list[int] = field(default_factory=lambda: [5, 8, 8, 8])
    conv_norm: str = "group"
    C: int = 32
    tau: float = 0.1
    mask_span: int = 10
    mask_prob_per_frame: float = 0.07
    d_proj: int | None = None
    d_lambda: int | None = None
    pair_features: str = "concat"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if len(self.conv_strides) != len(self.conv_kernels):
            raise ValueError("conv_strides and conv_kernels differ in length")
        for k, s in zip(self.conv_kernels, self.conv_strides):
            if k < s or (k - s) % 2:
                raise ValueError(f"kernel {k} / stride {s}: need kernel >= stride, even difference")
        if self.pair_features not in ("concat", "interaction"):
            raise ValueError(f"pair_features must be concat|interaction, got {self.pair_features!r}")
        if self.conv_norm not in ("group", "layer"):
            raise ValueError(f"conv_norm must be group|layer, got {self.conv_norm!r}")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")

    @property
    def proj_dim(self) -> int:
        return self.d_proj or self.d_model

    @property
    def lambda_dim(self) -> int:
        return self.d_lambda or self.d_model

    @property
    def downsample(self) -> int:
        return int(np.prod(self.conv_strides))

    def to_dict(self) -> dict:
        return asdict(self)


def frame_count(n_samples: int, cfg: ModelConfig) -> int:
    """Encoder frames for an input of ``n_samples`` (floor composition of the strides)."""
    t = n_samples
    for k, s in zip(cfg.conv_kernels, cfg.conv_strides):
        pad = (k - s) // 2
        t = (t + 2 * pad - k) // s + 1
        if t < 1:
            raise ValueError(f"input of {n_samples} samples is shorter than the receptive field")
    return t


class ConvFeatureEncoder(nn.Module):
    """Strided Conv1d stack with GELU.

    conv_norm="group": per-channel normalisation over time after the first
    conv and a LayerNorm on the output frames. conv_norm="layer": LayerNorm
    over channels after every conv.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        chans = [1] + [d] * len(cfg.conv_strides)
        self.convs = nn.ModuleList(
            nn.Conv1d(chans[i], chans[i + 1], k, stride=s, padding=(k - s) // 2)
            for i, (k, s) in enumerate(zip(cfg.conv_kernels, cfg.conv_strides)))
        if cfg.conv_norm == "group":
            self.norms = nn.ModuleList([nn.GroupNorm(d, d)])
            self.out_norm = nn.LayerNorm(d)
        else:
            self.norms = nn.ModuleList(nn.LayerNorm(d) for _ in cfg.conv_strides)
            self.out_norm = None

    def forward(self, wav: torch.Tensor) -> torch.Tensor:
        """(B, samples) -> (B, t, d_model)."""
        frame_count(wav.shape[-1], self.cfg)
        x = wav.unsqueeze(1)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if self.out_norm is None:
                x = self.norms[i](x.transpose(1, 2)).transpose(1, 2)
            elif i < len(self.norms):
                x = self.norms[i](x)
            x = F.gelu(x)
        x = x.transpose(1, 2)
        return self.out_norm(x) if self.out_norm is not None else x


@dataclass
class MaskSpec:
    t: int
    span_starts: np.ndarray
    masked: np.ndarray  # sorted frame indices in [0, t)

    @property
    def coverage(self) -> float:
        return len(self.masked) / self.t

    def as_bool(self) -> np.ndarray:
        m = np.zeros(self.t, dtype=bool)
        m[self.masked] = True
        return m


def sample_mask(t: int, cfg: ModelConfig, seed=None, rng: np.random.Generator | None = None) -> MaskSpec:
    """Each frame starts a span with prob ``mask_prob_per_frame``; spans clip at t-1."""
    if t <= cfg.mask_span:
        raise ValueError(f"t={t} must exceed mask_span={cfg.mask_span}")
    if rng is None:
        rng = np.random.default_rng(seed)
    starts = np.flatnonzero(rng.random(t) < cfg.mask_prob_per_frame)
    m = np.zeros(t, dtype=bool)
    for s in starts:
        m[s:s + cfg.mask_span] = True
    return MaskSpec(t, starts, np.flatnonzero(m))


def apply_mask(U: torch.Tensor, masked: torch.Tensor, mask_embedding: torch.Tensor) -> torch.Tensor:
    """Replace rows flagged in the boolean ``masked`` (..., t) with the mask embedding."""
    return torch.where(masked.unsqueeze(-1), mask_embedding.expand_as(U), U)


def prepend_usp(U: torch.Tensor, usp_embedding: torch.Tensor) -> torch.Tensor:
    usp = usp_embedding.expand(*U.shape[:-2], 1, U.shape[-1])
    return torch.cat([usp, U], dim=-2)


def sinusoidal_positions(n: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / (10000.0 ** (i / d))
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.to(dtype)


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x, return_weights=False):
        B, T, D = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).view(B, T, 3, h, D // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(D // h)
        attn = torch.softmax(scores, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(B, T, D)
        y = self.out(y)
        return (y, attn) if return_weights else y


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = SelfAttention(cfg.d_model, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ffn = nn.Sequential(nn.Linear(cfg.d_model, cfg.ffn_dim), nn.GELU(),
                                 nn.Linear(cfg.ffn_dim, cfg.d_model))

    def forward(self, x, return_weights=False):
        a = self.attn(self.norm1(x), return_weights)
        if return_weights:
            a, w = a
        x = x + a
        x = x + self.ffn(self.norm2(x))
        return (x, w) if return_weights else x


@dataclass
class HiddenStates:
    """``layers`` is (l, B, t+1, d); row 0 of every layer is the USP slot."""

    embedded: torch.Tensor  # (B, t+1, d) transformer input after positions
    layers: torch.Tensor
    attention: list[torch.Tensor] | None = None

    @property
    def n_layers(self) -> int:
        return self.layers.shape[0]

    @property
    def usp(self) -> torch.Tensor:
        return self.layers[:, :, 0]

    @property
    def content(self) -> torch.Tensor:
        return self.layers[:, :, 1:]

    @property
    def last(self) -> torch.Tensor:
        return self.layers[-1] if self.n_layers else self.embedded


class TransformerEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.usp_position = nn.Parameter(torch.randn(cfg.d_model) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))

    def forward(self, seq: torch.Tensor, return_attention=False) -> HiddenStates:
        T = seq.shape[-2] - 1
        pe = sinusoidal_positions(T, seq.shape[-1], seq.dtype).to(seq.device)
        pos = torch.cat([self.usp_position.unsqueeze(0), pe], dim=0)
        x = seq + pos
        embedded = x
        states, maps = [], []
        for i, block in enumerate(self.blocks):
            x = block(x, return_attention)
            if return_attention:
                x, w = x
                maps.append(w)
            if not torch.isfinite(x).all():
                raise NonFiniteError(f"non-finite hidden state at transformer layer {i + 1}")
            states.append(x)
        if states:
            layers = torch.stack(states)
        else:
            layers = x.new_zeros((0,) + tuple(x.shape))
        return HiddenStates(embedded, layers, maps if return_attention else None)


class ProjectionHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.A = nn.Linear(cfg.d_model, cfg.proj_dim, bias=False)
        self.E = nn.Parameter(torch.randn(cfg.C, cfg.proj_dim))


def cosine(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> torch.Tensor:
    na = a.norm(dim=dim).clamp_min(NORM_CLAMP)
    nb = b.norm(dim=dim).clamp_min(NORM_CLAMP)
    return (a * b).sum(dim) / (na * nb)


def project_logits(h: torch.Tensor, head: ProjectionHead, tau: float) -> torch.Tensor:
    """cos(A h, e_c) / tau for every codeword c; h is (..., d_model)."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    z = F.normalize(head.A(h), dim=-1, eps=NORM_CLAMP)
    e = F.normalize(head.E, dim=-1, eps=NORM_CLAMP)
    return z @ e.T / tau


class OHubert(nn.Module):
    """Encoder plus pre-training heads (the heads are dropped for feature extraction)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        from .losses import LambdaHead

        self.cfg = cfg
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.feature_encoder = ConvFeatureEncoder(cfg)
            self.mask_embedding = nn.Parameter(torch.rand(cfg.d_model) - 0.5)
            self.usp_embedding = nn.Parameter(torch.randn(cfg.d_model) * 0.02)
            self.encoder = TransformerEncoder(cfg)
            self.proj = ProjectionHead(cfg)
            self.lambda_head = LambdaHead(cfg)
        finally:
            torch.random.set_rng_state(gen_state)

    def encode(self, wav: torch.Tensor, masked: torch.Tensor | None = None,
               return_attention=False) -> tuple[HiddenStates, torch.Tensor]:
        U = self.feature_encoder(wav)
        if masked is not None:
            U = apply_mask(U, masked, self.mask_embedding)
        seq = prepend_usp(U, self.usp_embedding)
        return self.encoder(seq, return_attention), U
