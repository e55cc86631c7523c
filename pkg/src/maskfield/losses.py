"""Loss stack for inversion training: reconstruction, perceptual, latent
regularizer, non-saturating GAN with R1, and the region-scale anneal.

Reduction convention: reconstruction and perceptual terms are mean-of-squares
over elements so the combination weights stay comparable across region sizes;
the latent regularizer is a plain Euclidean norm.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from .config import AnnealScheduleConfig, DiscriminatorConfig, LossWeights, PerceptualConfig
from .errors import InputError, NumericError
from .fields import LatentOffset


def rec_loss(target: torch.Tensor, rendered: torch.Tensor) -> torch.Tensor:
    """Pixel-space mean squared error between a region pair."""
    if target.shape != rendered.shape:
        raise InputError(
            f"region shapes differ: {tuple(target.shape)} vs {tuple(rendered.shape)}"
        )
    return ((target - rendered) ** 2).mean()


class PerceptualExtractor(nn.Module):
    """Fixed random conv stack used as the feature network.

    The weights are seeded, frozen and never trained, so identical inputs
    always give identical features. A pretrained feature stack can be swapped
    in by replacing this module; the loss only needs `features()`.
    """

    def __init__(self, cfg: PerceptualConfig | None = None):
        super().__init__()
        self.cfg = cfg or PerceptualConfig()
        torch.manual_seed(self.cfg.seed)
        chans = [self.cfg.in_channels] + [
            self.cfg.base_channels * (2 ** i) for i in range(self.cfg.n_layers)
        ]
        self.stages = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1),
                nn.LeakyReLU(0.2),
            )
            for c_in, c_out in zip(chans[:-1], chans[1:])
        )
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, image: torch.Tensor) -> list[torch.Tensor]:
        """(B, 3, H, W) -> feature maps at the configured stages."""
        feats = []
        h = image
        for i, stage in enumerate(self.stages):
            h = stage(h)
            if i in self.cfg.layer_ids:
                feats.append(h)
        return feats


def perceptual_loss(
    target: torch.Tensor, rendered: torch.Tensor, extractor: PerceptualExtractor
) -> torch.Tensor:
    """Feature-space mean squared error, averaged over the selected stages."""
    if target.shape != rendered.shape:
        raise InputError(
            f"image shapes differ: {tuple(target.shape)} vs {tuple(rendered.shape)}"
        )
    f_t = extractor.features(target)
    f_r = extractor.features(rendered)
    losses = [((a - b) ** 2).mean() for a, b in zip(f_t, f_r)]
    return torch.stack(losses).mean()


def reg_loss(offset: LatentOffset) -> torch.Tensor:
    """Euclidean norm of the flattened offset; pulls codes toward the averages.

    Batched offsets give the mean of per-sample norms.
    """
    flat = offset.flatten()
    if not torch.isfinite(flat).all():
        raise NumericError("latent offset contains non-finite entries")
    if flat.ndim == 1:
        return flat.norm()
    return flat.norm(dim=-1).mean()


class PatchDiscriminator(nn.Module):
    """Convolutional score map over image regions (PatchGAN-style).

    `forward` returns the raw map; `score` aggregates it to one logit per
    sample by mean, which is what the losses consume.
    """

    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        self.cfg = cfg or DiscriminatorConfig()
        torch.manual_seed(self.cfg.seed)
        layers: list[nn.Module] = []
        c_in = self.cfg.in_channels
        c_out = self.cfg.base_channels
        for i in range(self.cfg.n_layers):
            layers.append(nn.Conv2d(c_in, c_out, kernel_size=4, stride=2, padding=1))
            layers.append(nn.LeakyReLU(0.2))
            c_in, c_out = c_out, min(c_out * 2, 256)
        layers.append(nn.Conv2d(c_in, 1, kernel_size=3, stride=1, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4:
            raise InputError(f"discriminator input must be (B, C, H, W), got {tuple(images.shape)}")
        return self.net(images)

    def score(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward(images).mean(dim=(1, 2, 3))


def r1_penalty(scores: torch.Tensor, images: torch.Tensor) -> torch.Tensor:
    """E over the batch of the squared gradient norm of the score at real images."""
    (grad,) = torch.autograd.grad(
        outputs=scores.sum(), inputs=images, create_graph=True
    )
    return grad.reshape(grad.shape[0], -1).pow(2).sum(dim=1).mean()


def gan_losses(
    real_region: torch.Tensor,
    fake_region: torch.Tensor,
    discriminator,
    r1_weight: float = 10.0,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Non-saturating GAN terms for one region batch.

    Returns (generator loss, discriminator loss, r1 term). The discriminator
    loss sees the fake detached; the generator loss keeps the graph into the
    renderer. `discriminator` must expose `.score(images) -> (B,)`.
    """
    real = real_region.detach().requires_grad_(True)
    real_scores = discriminator.score(real)
    fake_scores_d = discriminator.score(fake_region.detach())
    if not (torch.isfinite(real_scores).all() and torch.isfinite(fake_scores_d).all()):
        raise NumericError("discriminator produced non-finite scores")
    r1 = r1_penalty(real_scores, real)
    d_loss = F.softplus(fake_scores_d).mean() + F.softplus(-real_scores).mean() + r1_weight * r1
    fake_scores_g = discriminator.score(fake_region)
    g_loss = F.softplus(-fake_scores_g).mean()
    return g_loss, d_loss, r1


def total_loss(
    rec: torch.Tensor | float,
    lpips: torch.Tensor | float,
    reg: torch.Tensor | float,
    gan: torch.Tensor | float,
    weights: LossWeights,
) -> torch.Tensor:
    """Weighted combination of the four training terms."""
    parts = [torch.as_tensor(p, dtype=torch.float32) for p in (rec, lpips, reg, gan)]
    if not all(torch.isfinite(p).all() for p in parts):
        raise NumericError("non-finite loss part in total_loss")
    rec_t, lpips_t, reg_t, gan_t = parts
    return (weights.rec * rec_t + weights.lpips * lpips_t
            + weights.reg * reg_t + weights.gan * gan_t)


class AnnealSchedule:
    """Region-scale sampling range: lower bound decays geometrically.

    lower(step) = start * (end / start) ** (step / total), clamped at `end`
    once `total_steps` is reached; alpha is drawn uniformly from
    [lower(step), upper].
    """

    def __init__(self, cfg: AnnealScheduleConfig | None = None):
        self.cfg = cfg or AnnealScheduleConfig()

    def lower_bound(self, step: int) -> float:
        if step < 0:
            raise InputError(f"step must be >= 0, got {step}")
        cfg = self.cfg
        frac = min(step / cfg.total_steps, 1.0)
        return cfg.start * math.exp(frac * math.log(cfg.end / cfg.start))

    def draw(self, step: int, rng) -> float:
        lo = self.lower_bound(step)
        return float(rng.uniform(lo, self.cfg.upper))


def anneal_alpha(step: int, schedule: AnnealSchedule, rng) -> float:
    """Sample the region scale for a training step."""
    return schedule.draw(step, rng)
