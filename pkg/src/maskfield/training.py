"""Two-phase training: decoder pretraining, then encoder inversion against a
frozen decoder.

Decoder pretraining supports three modes: `adversarial` (random latents and
poses against dataset crops), `overfit` (single scene, fixed latent,
reconstruction only) and `latent_table` (one fixed latent per dataset scene,
reconstruction only) - the desk-scale way to get a decoder whose style space
covers the procedural scenes. Encoder training renders the sampled region at
the sample's own pose for the reconstruction losses and at a random prior
pose for the GAN term, with ground-truth crops taken at the same region
coordinates.
"""

from __future__ import annotations

import csv
import logging
import time
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_decoder, params_hash, save_decoder, save_encoder
from .config import DecoderTrainConfig, EncoderTrainConfig
from .encoder import PatchAttentionEncoder, apply_truncation, compute_style_averages
from .errors import ConfigurationError, NumericError
from .fields import SceneGenerator, StyleCode
from .losses import (
    AnnealSchedule,
    PatchDiscriminator,
    PerceptualExtractor,
    anneal_alpha,
    gan_losses,
    perceptual_loss,
    rec_loss,
    reg_loss,
    total_loss,
)
from .masks import assemble_input, list_sample_ids, load_sample
from .metrics import psnr
from .rendering import (
    CameraPose,
    RegionSpec,
    bilinear_crop,
    composite,
    rays_from_coords,
    region_coordinates,
    sample_region,
    stratified_depths,
)
from .scenes import render_sample, sample_pose, sample_scene

log = logging.getLogger(__name__)


def render_region_batch(
    generator: SceneGenerator,
    styles: StyleCode,
    poses: list[CameraPose],
    region: RegionSpec,
    n_depth: int,
    near: float = 0.8,
    far: float = 1.2,
    rng: torch.Generator | None = None,
    deterministic: bool = False,
    pixel_idx: torch.Tensor | None = None,
) -> torch.Tensor:
    """Render a batch of styles/poses over one region; (B, K, 3) pixels.

    `pixel_idx` selects a subset of the region's flattened grid (ray
    subsampling for cheap reconstruction steps); None renders every grid
    coordinate.
    """
    coords = region_coordinates(region).reshape(-1, 2)
    if pixel_idx is not None:
        coords = coords[pixel_idx]
    n_rays = coords.shape[0]
    origins = []
    dirs = []
    for pose in poses:
        o, d = rays_from_coords(pose, coords, region.image_hw)
        origins.append(o)
        dirs.append(d)
    o = torch.stack(origins)                      # (B, K, 3)
    d = torch.stack(dirs)
    b = o.shape[0]
    depths = stratified_depths(
        near, far, n_depth, b * n_rays, rng=rng, deterministic=deterministic
    ).reshape(b, n_rays, n_depth)
    points = o.unsqueeze(2) + depths.unsqueeze(-1) * d.unsqueeze(2)
    dir_s = d.unsqueeze(2).expand_as(points)
    density, color = generator.query_field(
        points.reshape(b, n_rays * n_depth, 3),
        dir_s.reshape(b, n_rays * n_depth, 3),
        styles,
    )
    density = density.reshape(b, n_rays, n_depth)
    color = color.reshape(b, n_rays, n_depth, 3)
    pixels, _, _ = composite(depths, density, color, far)
    return pixels


class LossHistory:
    """Per-step scalars, flushed to CSV."""

    def __init__(self, fields: list[str]):
        self.fields = fields
        self.rows: list[dict] = []

    def add(self, **values) -> None:
        self.rows.append(values)

    def column(self, name: str) -> list[float]:
        return [row[name] for row in self.rows]

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.fields)
            writer.writeheader()
            writer.writerows(self.rows)


def _check_finite(value: torch.Tensor, step: int, what: str) -> None:
    if not torch.isfinite(value).all():
        raise NumericError(f"{what} diverged (non-finite) at step {step}")


class _TrainingData:
    """Dataset split preloaded into tensors for the toy-scale loops."""

    def __init__(self, root: str | Path, encoder_resolution: int | None = None,
                 n_labels: int | None = None):
        root = Path(root)
        self.ids = list_sample_ids(root)
        masks, images, poses = [], [], []
        self.raw_masks = []
        for i in self.ids:
            mask, image, pose = load_sample(root, i)
            self.raw_masks.append(mask)
            images.append(torch.from_numpy(image))
            poses.append(pose)
            if encoder_resolution is not None:
                masks.append(assemble_input(mask, resolution=encoder_resolution,
                                            n_labels=n_labels))
        self.images = torch.stack(images)         # (N, H, W, 3)
        self.poses = poses
        self.encoder_inputs = torch.stack(masks) if masks else None
        self.n_labels = n_labels

    def __len__(self) -> int:
        return len(self.ids)


# ---------------------------------------------------------------------------
# decoder pretraining


def pretrain_decoder(cfg: DecoderTrainConfig, out_path: str | Path,
                     data_dir: str | Path | None = None,
                     resume: str | Path | None = None) -> Path:
    """Train the generator per cfg.mode and write a decoder checkpoint."""
    torch.manual_seed(cfg.seed)
    if resume:
        generator, _ = load_decoder(resume)
    else:
        generator = SceneGenerator(cfg.field)
    if cfg.mode == "overfit":
        history = _pretrain_overfit(generator, cfg)
    elif cfg.mode == "latent_table":
        if data_dir is None:
            raise ConfigurationError("latent_table mode needs a dataset directory")
        history = _pretrain_latent_table(generator, cfg, data_dir)
    elif cfg.mode == "adversarial":
        if data_dir is None:
            raise ConfigurationError("adversarial mode needs a dataset directory")
        history = _pretrain_adversarial(generator, cfg, data_dir)
    else:
        raise ConfigurationError(f"unknown decoder training mode {cfg.mode!r}")
    out_path = Path(out_path)
    save_decoder(out_path, generator, extras={
        "mode": cfg.mode,
        "steps": cfg.steps,
        "final_loss": history.rows[-1].get("loss", float("nan")) if history.rows else None,
    })
    history.write_csv(out_path.with_suffix(".losses.csv"))
    return out_path


def _pretrain_overfit(generator: SceneGenerator, cfg: DecoderTrainConfig) -> LossHistory:
    """Fit one procedural scene from a fixed latent, reconstruction only."""
    scene_rng = np.random.default_rng(cfg.overfit_scene_seed)
    params = sample_scene(scene_rng, seed=cfg.overfit_scene_seed)
    views = []
    for _ in range(cfg.overfit_views):
        pose = sample_pose(scene_rng)
        image, _, _ = render_sample(params, pose, image_size=cfg.image_size,
                                    n_depth=max(cfg.n_depth, 48))
        views.append((pose, torch.from_numpy(image)))

    gen_t = torch.Generator().manual_seed(cfg.seed)
    z = torch.randn((cfg.field.latent_dim,), generator=gen_t)
    region = RegionSpec.full_frame(cfg.image_size)
    n_pixels = cfg.image_size * cfg.image_size
    opt = torch.optim.Adam(generator.parameters(), lr=cfg.lr_generator)
    np_rng = np.random.default_rng(cfg.seed)
    history = LossHistory(["step", "loss", "psnr"])

    for step in range(cfg.steps):
        pose, target = views[int(np_rng.integers(len(views)))]
        idx = torch.from_numpy(
            np_rng.choice(n_pixels, size=min(cfg.rays_per_scene, n_pixels), replace=False)
        )
        style = generator.map_latent(z)
        pixels = render_region_batch(
            generator, _batch_style(style, 1), [pose], region, cfg.n_depth,
            rng=gen_t, pixel_idx=idx,
        )
        target_flat = target.reshape(-1, 3)[idx]
        loss = rec_loss(target_flat, pixels.squeeze(0))
        _check_finite(loss, step, "overfit reconstruction loss")
        opt.zero_grad()
        loss.backward()
        opt.step()
        row = {"step": step, "loss": float(loss.item()), "psnr": float("nan")}
        if (step + 1) % cfg.log_every == 0 or step == cfg.steps - 1:
            row["psnr"] = evaluate_overfit_psnr(generator, z, views, cfg)
            log.info("overfit step %d loss %.5f psnr %.2f", step, row["loss"], row["psnr"])
        history.add(**row)
    return history


def evaluate_overfit_psnr(generator, z, views, cfg) -> float:
    """Mean PSNR over the training views, rendered deterministically."""
    region = RegionSpec.full_frame(cfg.image_size)
    with torch.no_grad():
        style = generator.map_latent(z)
        values = []
        for pose, target in views:
            pixels = render_region_batch(
                generator, _batch_style(style, 1), [pose], region, cfg.n_depth,
                deterministic=True,
            )
            img = pixels.reshape(cfg.image_size, cfg.image_size, 3)
            values.append(psnr(img, target))
    return float(np.mean(values))


def _pretrain_latent_table(generator: SceneGenerator, cfg: DecoderTrainConfig,
                           data_dir: str | Path) -> LossHistory:
    """Reconstruction over the whole dataset with one fixed latent per scene."""
    data = _TrainingData(Path(data_dir))
    gen_t = torch.Generator().manual_seed(cfg.seed)
    zs = torch.randn((len(data), cfg.field.latent_dim), generator=gen_t)
    image_hw = data.images.shape[1:3]
    region = RegionSpec(scale=1.0, dh=0.0, dw=0.0,
                        grid_hw=(cfg.region_size, cfg.region_size), image_hw=tuple(image_hw))
    targets = torch.stack([
        bilinear_crop(img, region).reshape(-1, 3) for img in data.images
    ])                                            # (N, P, 3)
    n_pixels = targets.shape[1]
    opt = torch.optim.Adam(generator.parameters(), lr=cfg.lr_generator)
    np_rng = np.random.default_rng(cfg.seed)
    history = LossHistory(["step", "loss"])

    for step in range(cfg.steps):
        batch = np_rng.choice(len(data), size=min(cfg.batch_size, len(data)), replace=False)
        idx = torch.from_numpy(
            np_rng.choice(n_pixels, size=min(cfg.rays_per_scene, n_pixels), replace=False)
        )
        styles = generator.map_latent(zs[batch])
        poses = [data.poses[i] for i in batch]
        pixels = render_region_batch(
            generator, styles, poses, region, cfg.n_depth, rng=gen_t, pixel_idx=idx,
        )
        loss = rec_loss(targets[batch][:, idx], pixels)
        _check_finite(loss, step, "latent-table reconstruction loss")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.add(step=step, loss=float(loss.item()))
        if (step + 1) % cfg.log_every == 0:
            log.info("latent-table step %d loss %.5f", step, float(loss.item()))
    return history


def _pretrain_adversarial(generator: SceneGenerator, cfg: DecoderTrainConfig,
                          data_dir: str | Path) -> LossHistory:
    """Random latents and poses against real dataset crops."""
    data = _TrainingData(Path(data_dir))
    discriminator = PatchDiscriminator(cfg.discriminator)
    gen_t = torch.Generator().manual_seed(cfg.seed)
    np_rng = np.random.default_rng(cfg.seed)
    schedule = AnnealSchedule(cfg.anneal)
    g_params = list(generator.parameters())
    if cfg.freeze_generator:
        for p in g_params:
            p.requires_grad_(False)
    g_opt = None if cfg.freeze_generator else torch.optim.Adam(g_params, lr=cfg.lr_generator)
    d_opt = torch.optim.Adam(discriminator.parameters(), lr=cfg.lr_discriminator)
    image_hw = tuple(data.images.shape[1:3])
    grid = (cfg.region_size, cfg.region_size)
    history = LossHistory(["step", "g_loss", "d_loss", "r1", "d_accuracy", "alpha"])

    for step in range(cfg.steps):
        alpha = anneal_alpha(step, schedule, np_rng)
        region = sample_region(alpha, np_rng, image_hw, grid)
        batch = np_rng.choice(len(data), size=min(cfg.batch_size, len(data)), replace=False)
        real = torch.stack([
            bilinear_crop(data.images[i], region) for i in batch
        ]).permute(0, 3, 1, 2)
        z = torch.randn((len(batch), cfg.field.latent_dim), generator=gen_t)
        styles = generator.map_latent(z)
        poses = [sample_pose(np_rng, cfg.pose) for _ in batch]
        with torch.set_grad_enabled(not cfg.freeze_generator):
            pixels = render_region_batch(
                generator, styles, poses, region, cfg.n_depth, rng=gen_t,
            )
        fake = pixels.reshape(len(batch), *grid, 3).permute(0, 3, 1, 2)
        g_loss, d_loss, r1 = gan_losses(real, fake, discriminator, r1_weight=10.0)
        _check_finite(d_loss, step, "discriminator loss")
        # both backwards run before either step so no saved tensor is
        # modified in place while a graph still needs it
        if g_opt is not None:
            _check_finite(g_loss, step, "generator loss")
            g_opt.zero_grad()
            g_loss.backward()
        d_opt.zero_grad()
        d_loss.backward()
        if g_opt is not None:
            g_opt.step()
        d_opt.step()
        with torch.no_grad():
            correct = (discriminator.score(real.detach()) > 0).float().sum() + (
                discriminator.score(fake.detach()) <= 0
            ).float().sum()
            accuracy = float(correct / (2 * len(batch)))
        history.add(step=step, g_loss=float(g_loss.item()), d_loss=float(d_loss.item()),
                    r1=float(r1.item()), d_accuracy=accuracy, alpha=alpha)
        if (step + 1) % cfg.log_every == 0:
            log.info("adversarial step %d d %.4f g %.4f acc %.3f",
                     step, float(d_loss.item()), float(g_loss.item()), accuracy)
    return history


def _batch_style(style: StyleCode, n: int) -> StyleCode:
    return StyleCode(freq=style.freq.unsqueeze(0).expand(n, -1, -1),
                     phase=style.phase.unsqueeze(0).expand(n, -1, -1))


# ---------------------------------------------------------------------------
# encoder inversion training


def train_encoder(
    cfg: EncoderTrainConfig,
    data_dir: str | Path,
    decoder_path: str | Path,
    out_path: str | Path,
    resume: str | Path | None = None,
) -> Path:
    """Invert masks into the frozen decoder's style space.

    Per step: draw a region scale from the anneal schedule, render the region
    at the sample's own pose for the reconstruction/perceptual/regularizer
    terms and at a random prior pose for the GAN term, update encoder and
    discriminator. The decoder is asserted bitwise unchanged at the end.
    """
    torch.manual_seed(cfg.seed)
    decoder, _ = load_decoder(decoder_path)
    decoder.eval()
    for p in decoder.parameters():
        p.requires_grad_(False)
    decoder_hash_before = params_hash(decoder)

    if cfg.encoder.output_size != decoder.cfg.style_size:
        raise ConfigurationError(
            f"encoder output size {cfg.encoder.output_size} != decoder style size "
            f"{decoder.cfg.style_size}"
        )
    n_labels = cfg.encoder.in_channels - 2
    data = _TrainingData(Path(data_dir), encoder_resolution=cfg.encoder.resolution,
                         n_labels=n_labels)
    avg_gen = torch.Generator().manual_seed(cfg.seed + 101)
    averages = compute_style_averages(
        decoder.mapping, decoder.cfg.latent_dim, cfg.avg_samples, rng=avg_gen
    )
    if resume:
        from .checkpoint import load_encoder

        encoder, averages, _ = load_encoder(resume)
    else:
        encoder = PatchAttentionEncoder(cfg.encoder)
    discriminator = PatchDiscriminator(cfg.discriminator)
    perceptual = PerceptualExtractor(cfg.perceptual)
    enc_opt = torch.optim.Adam(encoder.parameters(), lr=cfg.lr_encoder)
    d_opt = torch.optim.Adam(discriminator.parameters(), lr=cfg.lr_discriminator)
    schedule = AnnealSchedule(cfg.anneal)
    np_rng = np.random.default_rng(cfg.seed)
    gen_t = torch.Generator().manual_seed(cfg.seed + 1)
    image_hw = tuple(data.images.shape[1:3])
    grid = (cfg.region_size, cfg.region_size)
    history = LossHistory(
        ["step", "total", "rec", "lpips", "reg", "gan", "d_loss", "r1", "alpha"]
    )
    t0 = time.time()

    for step in range(cfg.steps):
        batch = np_rng.choice(len(data), size=min(cfg.batch_size, len(data)), replace=False)
        inputs = data.encoder_inputs[batch]
        offsets = encoder.encode(inputs, decoder.cfg.n_layers, decoder.cfg.hidden_width)
        styles = apply_truncation(offsets, averages)

        alpha = anneal_alpha(step, schedule, np_rng)
        region = sample_region(alpha, np_rng, image_hw, grid)
        same_poses = [data.poses[i] for i in batch]
        recon = render_region_batch(
            decoder, styles, same_poses, region, cfg.n_depth, rng=gen_t,
        ).reshape(len(batch), *grid, 3).permute(0, 3, 1, 2)
        target = torch.stack([
            bilinear_crop(data.images[i], region) for i in batch
        ]).permute(0, 3, 1, 2)

        l_rec = rec_loss(target, recon)
        l_lpips = perceptual_loss(target, recon, perceptual)
        l_reg = reg_loss(offsets)

        rand_poses = [sample_pose(np_rng, cfg.pose) for _ in batch]
        fake = render_region_batch(
            decoder, styles, rand_poses, region, cfg.n_depth, rng=gen_t,
        ).reshape(len(batch), *grid, 3).permute(0, 3, 1, 2)
        g_gan, d_loss, r1 = gan_losses(target, fake, discriminator, cfg.weights.r1)
        total = total_loss(l_rec, l_lpips, l_reg, g_gan, cfg.weights)
        _check_finite(d_loss, step, "discriminator loss")
        _check_finite(total, step, "encoder total loss")

        # encoder backward first (it sprays grads through D via the GAN
        # term), then clear and rebuild D grads, then step both
        enc_opt.zero_grad()
        total.backward()
        d_opt.zero_grad()
        d_loss.backward()
        enc_opt.step()
        d_opt.step()

        history.add(step=step, total=float(total.item()), rec=float(l_rec.item()),
                    lpips=float(l_lpips.item()), reg=float(l_reg.item()),
                    gan=float(g_gan.item()), d_loss=float(d_loss.item()),
                    r1=float(r1.item()), alpha=alpha)
        if (step + 1) % cfg.log_every == 0:
            log.info("encoder step %d total %.5f rec %.5f (%.1fs)",
                     step, float(total.item()), float(l_rec.item()), time.time() - t0)

    decoder_hash_after = params_hash(decoder)
    if decoder_hash_after != decoder_hash_before:
        raise RuntimeError("frozen decoder parameters changed during encoder training")

    out_path = Path(out_path)
    save_encoder(out_path, encoder, averages, extras={
        "decoder_hash": decoder_hash_before,
        "steps": cfg.steps,
        "label_table": data.raw_masks[0].label_table,
    })
    history.write_csv(out_path.with_suffix(".losses.csv"))
    return out_path


def moving_average(values: list[float], window: int = 100) -> list[float]:
    """Trailing mean over `window` steps (shorter at the start)."""
    out = []
    acc = 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out
