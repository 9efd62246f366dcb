"""Time-domain extraction backbone with dual-path attention and visual fusion.

Pipeline: conv encoder -> chunked dual-path transformer blocks (intra-chunk
self-attention, cross-attention against the aligned visual cue, inter-chunk
self-attention, feed-forward) -> sigmoid mask -> transposed-conv overlap-add
decoder trimmed to the input length.

The encoder/decoder pair is initialized as a perfect-reconstruction filterbank
(analysis rows [A; -A] with orthonormal columns, synthesis [A/2; -A/2]), so an
all-ones mask reproduces the input up to edge effects even before training.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import AudioClip
from .visual import VisualStream


@dataclasses.dataclass
class BackboneConfig:
    enc_kernel: int = 16
    enc_stride: int = 8
    model_dim: int = 64
    n_blocks: int = 2
    chunk_len: int = 50
    n_heads: int = 4
    visual_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        fields = (self.enc_kernel, self.enc_stride, self.model_dim,
                  self.n_blocks, self.chunk_len, self.n_heads, self.visual_dim)
        if any(v <= 0 for v in fields):
            raise ValueError("all backbone dimensions must be positive")
        if self.enc_stride > self.enc_kernel:
            raise ValueError("enc_stride must be <= enc_kernel")
        if self.model_dim % self.n_heads != 0:
            raise ValueError("model_dim must be divisible by n_heads")
        if self.model_dim < 2 * self.enc_kernel:
            raise ValueError("model_dim must be >= 2 * enc_kernel")


def sinusoidal_encoding(length: int, dim: int, dtype, device) -> torch.Tensor:
    pos = torch.arange(length, dtype=dtype, device=device).unsqueeze(1)
    i = torch.arange(0, dim, 2, dtype=dtype, device=device)
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=dtype), i / dim)
    pe = torch.zeros(length, dim, dtype=dtype, device=device)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : pe[:, 1::2].shape[1]])
    return pe


class SeparatorBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.norm_intra = nn.LayerNorm(dim)
        self.attn_intra = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm_cross = nn.LayerNorm(dim)
        self.attn_cross = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm_inter = nn.LayerNorm(dim)
        self.attn_inter = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm_ffn = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 2 * dim)
        self.fc2 = nn.Linear(2 * dim, dim)

    def forward(self, h: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        # h, v: (B, S, C, D) chunked audio latents / aligned visual features
        b, s, c, d = h.shape
        x = h.reshape(b * s, c, d)
        q = self.norm_intra(x)
        x = x + self.attn_intra(q, q, q, need_weights=False)[0]

        vq = v.reshape(b * s, c, d)
        q = self.norm_cross(x)
        x = x + self.attn_cross(q, vq, vq, need_weights=False)[0]

        x = x.reshape(b, s, c, d).transpose(1, 2).reshape(b * c, s, d)
        q = self.norm_inter(x)
        x = x + self.attn_inter(q, q, q, need_weights=False)[0]
        x = x.reshape(b, c, s, d).transpose(1, 2)

        q = self.norm_ffn(x)
        return x + self.fc2(F.relu(self.fc1(q)))


class Extractor(nn.Module):
    """The AV-TSE model; initialization is fully determined by cfg.seed."""

    def __init__(self, cfg: BackboneConfig, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.encoder = nn.Conv1d(1, d, cfg.enc_kernel, cfg.enc_stride, bias=False)
        self.visual_proj = nn.Linear(cfg.visual_dim, d)
        self.blocks = nn.ModuleList(
            SeparatorBlock(d, cfg.n_heads) for _ in range(cfg.n_blocks)
        )
        self.mask_norm = nn.LayerNorm(d)
        self.mask_head = nn.Linear(d, d)
        self.decoder = nn.ConvTranspose1d(d, 1, cfg.enc_kernel, cfg.enc_stride,
                                          bias=False)
        self._init_params()
        self.to(dtype)

    def _init_params(self):
        g = torch.Generator().manual_seed(self.cfg.seed)
        for name, p in self.named_parameters():
            if p.dim() >= 2:
                fan_in = p.shape[-1] if p.dim() == 2 else int(np.prod(p.shape[1:]))
                with torch.no_grad():
                    p.copy_(torch.randn(p.shape, generator=g) / math.sqrt(fan_in))
            elif "weight" in name:  # layer norm scales
                with torch.no_grad():
                    p.fill_(1.0)
            else:
                with torch.no_grad():
                    p.zero_()
        # perfect-reconstruction filterbank for encoder/decoder
        k, d = self.cfg.enc_kernel, self.cfg.model_dim
        a = torch.linalg.qr(torch.randn(d // 2, k, generator=g))[0]
        with torch.no_grad():
            self.encoder.weight.copy_(torch.cat([a, -a], dim=0).unsqueeze(1))
            self.decoder.weight.copy_(torch.cat([a, -a], dim=0).unsqueeze(1) / 2)

    # -- shape helpers -------------------------------------------------

    def num_frames(self, length: int) -> int:
        return (length - self.cfg.enc_kernel) // self.cfg.enc_stride + 1

    def _padded_length(self, length: int) -> int:
        k, s = self.cfg.enc_kernel, self.cfg.enc_stride
        if length < k:
            return k
        rem = (length - k) % s
        return length if rem == 0 else length + (s - rem)

    # -- forward pieces ------------------------------------------------

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """(B, L) -> rectified latents (B, T, D); no padding applied."""
        if x.shape[-1] < self.cfg.enc_kernel:
            raise ValueError("input shorter than the encoder kernel")
        z = F.relu(self.encoder(x.unsqueeze(1)))
        return z.transpose(1, 2)

    def estimate_mask(self, h: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        """Latents (B, T, D) + aligned visual (B, T, D) -> mask in (0, 1)."""
        b, t, d = h.shape
        c = self.cfg.chunk_len
        pad = (-t) % c
        h = F.pad(h, (0, 0, 0, pad))
        v = F.pad(v, (0, 0, 0, pad))
        s = h.shape[1] // c
        h = h.reshape(b, s, c, d)
        v = v.reshape(b, s, c, d)
        h = h + sinusoidal_encoding(c, d, h.dtype, h.device)
        for block in self.blocks:
            h = block(h, v)
        h = h.reshape(b, s * c, d)[:, :t]
        return torch.sigmoid(self.mask_head(self.mask_norm(h)))

    def forward(self, x: torch.Tensor, visual: torch.Tensor) -> torch.Tensor:
        """x: (B, L) mixture, visual: (B, T_v, visual_dim) -> (B, L) estimate."""
        length = x.shape[-1]
        x_p = F.pad(x, (0, self._padded_length(length) - length))
        z = self.encode(x_p)
        t_a = z.shape[1]
        v_al = align_visual_torch(visual, t_a)
        v_emb = self.visual_proj(v_al)
        mask = self.estimate_mask(z, v_emb)
        y = self.decoder((z * mask).transpose(1, 2)).squeeze(1)
        return y[..., :length]


def init_params(cfg: BackboneConfig, dtype=torch.float32) -> Extractor:
    """Build a freshly initialized extractor; deterministic in cfg.seed."""
    return Extractor(cfg, dtype=dtype)


def align_visual_torch(v: torch.Tensor, t_a: int) -> torch.Tensor:
    """Nearest-frame repetition of (B, T_v, D) onto t_a rows."""
    t_v = v.shape[1]
    if t_v < 1:
        raise ValueError("empty visual stream")
    if t_a == t_v:
        return v
    if t_a == 1 or t_v == 1:
        idx = torch.zeros(t_a, dtype=torch.long, device=v.device)
    else:
        pos = torch.arange(t_a, dtype=torch.float64) * (t_v - 1) / (t_a - 1)
        idx = torch.round(pos).long()
    return v[:, idx]


def align_visual(v: VisualStream, t_a: int) -> np.ndarray:
    """Numpy-facing alignment: output row t = v[round(t*(T_v-1)/(T_a-1))]."""
    out = align_visual_torch(torch.from_numpy(v.frames).unsqueeze(0), t_a)
    return out.squeeze(0).numpy()


def encode_audio(x: AudioClip, model: Extractor) -> np.ndarray:
    """Rectified encoder latents (T_a, model_dim) for a clip."""
    with torch.no_grad():
        z = model.encode(
            torch.as_tensor(x.samples, dtype=next(model.parameters()).dtype)
            .unsqueeze(0)
        )
    return z.squeeze(0).numpy()


def extract(x: AudioClip, v: VisualStream, model: Extractor) -> AudioClip:
    """Run the extractor on one mixture/cue pair."""
    expected = x.duration_s * v.fps
    if abs(v.num_frames - expected) > 1.0 + 1e-9:
        raise ValueError(
            f"visual stream length {v.num_frames} does not match audio "
            f"duration ({expected:.2f} frames expected)"
        )
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        est = model(
            torch.as_tensor(x.samples, dtype=dtype).unsqueeze(0),
            torch.as_tensor(v.frames, dtype=dtype).unsqueeze(0),
        )
    return AudioClip(est.squeeze(0).double().numpy(), x.sample_rate)
