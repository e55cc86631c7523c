"""Command-line entry points: dataset build, train, infer, evaluate, serve."""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path

import click
import numpy as np
from PIL import Image

from .config import (
    DatasetConfig,
    DecoderTrainConfig,
    EncoderTrainConfig,
    RenderOptions,
    ServiceConfig,
    load_config,
)
from .masks import SemanticMask, read_labels
from .rendering import CameraPose

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")


@click.group()
def main() -> None:
    """Semantic-mask-to-radiance-field toolkit."""


@main.group()
def dataset() -> None:
    """Procedural dataset commands."""


@dataset.command("build")
@click.option("--n-train", default=512, show_default=True)
@click.option("--n-test", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--size", default=64, show_default=True, help="image resolution")
@click.option("--out", required=True, type=click.Path())
def dataset_build(n_train: int, n_test: int, seed: int, size: int, out: str) -> None:
    from .scenes import build_dataset

    cfg = DatasetConfig(n_train=n_train, n_test=n_test, seed=seed, image_size=size)
    manifest = build_dataset(out, cfg)
    click.echo(f"wrote {n_train}+{n_test} samples to {out} "
               f"(seed {manifest['seed']})")


@main.command()
@click.option("--phase", type=click.Choice(["decoder", "encoder"]), required=True)
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", type=click.Path(exists=True))
@click.option("--decoder", "decoder_path", type=click.Path(exists=True),
              help="decoder checkpoint (encoder phase)")
@click.option("--resume", "resume_path", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def train(phase: str, config_path: str, data_dir: str | None, decoder_path: str | None,
          resume_path: str | None, out: str) -> None:
    """Run one training phase from a structured config file."""
    from .training import pretrain_decoder, train_encoder

    if phase == "decoder":
        cfg = load_config(DecoderTrainConfig, config_path)
        path = pretrain_decoder(cfg, out, data_dir=data_dir, resume=resume_path)
    else:
        if not decoder_path:
            raise click.UsageError("--decoder is required for the encoder phase")
        if not data_dir:
            raise click.UsageError("--data is required for the encoder phase")
        cfg = load_config(EncoderTrainConfig, config_path)
        path = train_encoder(cfg, data_dir, decoder_path, out, resume=resume_path)
    click.echo(f"checkpoint written to {path}")


def _parse_pose(text: str) -> CameraPose:
    parts = [float(p) for p in text.split(",")]
    if len(parts) < 2:
        raise click.UsageError(f"pose {text!r} needs at least yaw,pitch")
    roll = parts[2] if len(parts) > 2 else 0.0
    return CameraPose(yaw=parts[0], pitch=parts[1], roll=roll)


@main.command()
@click.option("--mask", "mask_path", required=True, type=click.Path(exists=True))
@click.option("--poses", "pose_specs", multiple=True, required=True,
              help="yaw,pitch[,roll] in radians; repeatable")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--checkpoints", default=None, type=click.Path(exists=True),
              help="directory holding decoder.pt/encoder.pt "
                   "(default $MASKFIELD_CHECKPOINT_DIR)")
@click.option("--labels", "labels_path", default=None, type=click.Path(exists=True))
@click.option("--size", default=64, show_default=True)
@click.option("--steps", default=28, show_default=True)
@click.option("--hierarchical", is_flag=True, default=False)
@click.option("--mix-seed", default=None, type=int)
@click.option("--mix-layer", default=None, type=int)
@click.option("--mix-t", default=0.5, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True)
def infer(mask_path: str, pose_specs: tuple[str, ...], out_dir: str,
          checkpoints: str | None, labels_path: str | None, size: int, steps: int,
          hierarchical: bool, mix_seed: int | None, mix_layer: int | None,
          mix_t: float, seed: int) -> None:
    """Encode a mask PNG and render it from the given viewpoints."""
    from .service import ModelBundle, StyleMixSpec, image_to_png_bytes

    ckpt_dir = checkpoints or os.environ.get("MASKFIELD_CHECKPOINT_DIR")
    if not ckpt_dir:
        raise click.UsageError("set --checkpoints or $MASKFIELD_CHECKPOINT_DIR")
    bundle = ModelBundle.from_dir(ckpt_dir)
    table = read_labels(Path(labels_path).parent) if labels_path else bundle.label_table
    arr = np.asarray(Image.open(mask_path).convert("L"))
    mask = SemanticMask(labels=arr, label_table={int(k): v for k, v in table.items()})
    style = bundle.encode_mask(mask)
    if mix_seed is not None:
        layer = mix_layer if mix_layer is not None else max(1, bundle.decoder.cfg.n_layers - 1)
        style = bundle.style_mix(style, StyleMixSpec(seed=mix_seed, boundary=layer,
                                                     weight=mix_t))
    poses = [_parse_pose(p) for p in pose_specs]
    opts = RenderOptions(n_coarse=steps, hierarchical=hierarchical, deterministic=True,
                         seed=seed)
    images = bundle.render_views(style, poses, resolution=size, options=opts)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        (out / f"view_{i:03d}.png").write_bytes(image_to_png_bytes(img))
    click.echo(f"wrote {len(images)} view(s) to {out}")


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--checkpoints", default=None, type=click.Path(exists=True))
@click.option("--size", default=32, show_default=True)
@click.option("--max-samples", default=None, type=int)
@click.option("--out", "out_path", default=None, type=click.Path())
def evaluate(data_dir: str, checkpoints: str | None, size: int,
             max_samples: int | None, out_path: str | None) -> None:
    """PSNR / IoU / runtime report over a dataset split."""
    from .service import ModelBundle
    from .service import evaluate as run_eval

    ckpt_dir = checkpoints or os.environ.get("MASKFIELD_CHECKPOINT_DIR")
    if not ckpt_dir:
        raise click.UsageError("set --checkpoints or $MASKFIELD_CHECKPOINT_DIR")
    bundle = ModelBundle.from_dir(ckpt_dir)
    report = run_eval(bundle, data_dir, resolution=size, max_samples=max_samples)
    for line in report.lines():
        click.echo(line)
    if out_path:
        Path(out_path).write_text(json.dumps(report.__dict__, indent=2))


@main.command()
@click.option("--checkpoints", default=None, type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8571, show_default=True)
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
def serve(checkpoints: str | None, host: str, port: int, config_path: str | None) -> None:
    """Run the HTTP inference service."""
    import uvicorn

    from .service import ModelBundle, create_app

    cfg = load_config(ServiceConfig, config_path) if config_path else ServiceConfig()
    ckpt_dir = (checkpoints or cfg.checkpoint_dir
                or os.environ.get("MASKFIELD_CHECKPOINT_DIR"))
    if not ckpt_dir:
        raise click.UsageError("set --checkpoints, config, or $MASKFIELD_CHECKPOINT_DIR")
    bundle = ModelBundle.from_dir(ckpt_dir)
    uvicorn.run(create_app(bundle, cfg), host=host, port=port)


if __name__ == "__main__":
    main()
