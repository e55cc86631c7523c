"""Patch-attention encoder mapping mask channels into the generator's style space.

The encoder emits per-layer (freq, phase) offsets; the truncation rule adds
them to average codes computed from the mapping network, so a zero offset
renders the average scene. Patch tokens (rather than aggressive conv
pooling) keep small mask regions visible to the output.
"""

from __future__ import annotations

import torch
from torch import nn

from .config import EncoderConfig
from .errors import ConfigurationError, InputError
from .fields import LatentOffset, StyleAverages, StyleCode


class AttentionBlock(nn.Module):
    """Pre-norm multi-head self-attention + MLP."""

    def __init__(self, width: int, n_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, width * 4),
            nn.GELU(),
            nn.Linear(width * 4, width),
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        h = self.norm1(tokens)
        attn_out, _ = self.attn(h, h, h, need_weights=False)
        tokens = tokens + attn_out
        return tokens + self.mlp(self.norm2(tokens))


class PatchAttentionEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        n_patches = (cfg.resolution // cfg.patch_size) ** 2
        self.patch_embed = nn.Conv2d(
            cfg.in_channels, cfg.embed_width,
            kernel_size=cfg.patch_size, stride=cfg.patch_size,
        )
        self.pos_embed = nn.Parameter(torch.randn(1, n_patches, cfg.embed_width) * 0.02)
        self.blocks = nn.ModuleList(
            AttentionBlock(cfg.embed_width, cfg.n_heads) for _ in range(cfg.n_blocks)
        )
        self.norm = nn.LayerNorm(cfg.embed_width)
        self.head = nn.Linear(cfg.embed_width, cfg.output_size)
        if cfg.zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, R, R) -> (B, output_size) flat offsets."""
        if x.ndim != 4:
            raise InputError(f"encoder input must be (B, C, H, W), got shape {tuple(x.shape)}")
        if x.shape[1] != self.cfg.in_channels:
            raise InputError(
                f"encoder expects {self.cfg.in_channels} channels, got {x.shape[1]}"
            )
        if x.shape[2] != self.cfg.resolution or x.shape[3] != self.cfg.resolution:
            raise InputError(
                f"encoder expects {self.cfg.resolution}x{self.cfg.resolution} input, "
                f"got {x.shape[2]}x{x.shape[3]}"
            )
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)  # (B, P, W)
        tokens = tokens + self.pos_embed
        for block in self.blocks:
            tokens = block(tokens)
        pooled = self.norm(tokens).mean(dim=1)
        return self.head(pooled)

    def encode(self, x: torch.Tensor, n_layers: int, width: int) -> LatentOffset:
        """Single input (C, R, R) or batch (B, C, R, R) -> per-layer offsets."""
        if 2 * n_layers * width != self.cfg.output_size:
            raise ConfigurationError(
                f"encoder output {self.cfg.output_size} != 2 * {n_layers} * {width} "
                "expected by the decoder"
            )
        squeeze = x.ndim == 3
        flat = self.forward(x.unsqueeze(0) if squeeze else x)
        if squeeze:
            flat = flat.squeeze(0)
        return StyleCode.from_flat(flat, n_layers, width)


def apply_truncation(offset: LatentOffset, averages: StyleAverages) -> StyleCode:
    """Average-plus-offset parameterization of the decoder codes."""
    if offset.freq.shape[-2:] != averages.freq.shape[-2:]:
        raise InputError(
            f"offset layers {tuple(offset.freq.shape[-2:])} incongruent with "
            f"averages {tuple(averages.freq.shape[-2:])}"
        )
    return StyleCode(freq=averages.freq + offset.freq,
                     phase=averages.phase + offset.phase)


def compute_style_averages(
    mapping,
    latent_dim: int,
    n_samples: int = 10_000,
    rng: torch.Generator | None = None,
    batch_size: int = 1024,
) -> StyleAverages:
    """Empirical mean style over standard-normal latents, streamed in batches."""
    if n_samples < 1:
        raise InputError(f"n_samples must be >= 1, got {n_samples}")
    gen = rng or torch.Generator().manual_seed(0)
    freq_sum = None
    phase_sum = None
    done = 0
    with torch.no_grad():
        while done < n_samples:
            n = min(batch_size, n_samples - done)
            z = torch.randn((n, latent_dim), generator=gen)
            code = mapping(z)
            f = code.freq.sum(dim=0)
            p = code.phase.sum(dim=0)
            freq_sum = f if freq_sum is None else freq_sum + f
            phase_sum = p if phase_sum is None else phase_sum + p
            done += n
    return StyleCode(freq=freq_sum / n_samples, phase=phase_sum / n_samples)
