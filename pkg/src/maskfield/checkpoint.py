"""Self-describing checkpoint archives: version, kind, config, named tensors.

Every archive is a torch-saved dict of primitives and tensors (loadable with
weights_only=True). Decoder archives rebuild a SceneGenerator; encoder
archives carry the patch encoder plus the average style codes as a named
tensor pair.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import torch

from .config import EncoderConfig, FieldConfig, config_from_dict, config_to_dict
from .encoder import PatchAttentionEncoder
from .errors import DataError
from .fields import SceneGenerator, StyleCode

CHECKPOINT_VERSION = 1


def params_hash(module: torch.nn.Module) -> str:
    """Order-stable sha256 over named parameters; detects any weight mutation."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _save(path: str | Path, kind: str, config, params: dict, extras: dict | None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config_to_dict(config),
        "params": {k: v.detach().cpu() for k, v in params.items()},
        "extras": extras or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def _load(path: str | Path, kind: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if "version" not in payload:
        raise DataError(f"checkpoint {path} has no version field")
    if payload["version"] != CHECKPOINT_VERSION:
        raise DataError(
            f"checkpoint {path} has version {payload['version']}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    if payload.get("kind") != kind:
        raise DataError(f"checkpoint {path} is kind {payload.get('kind')!r}, expected {kind!r}")
    return payload


def save_decoder(path: str | Path, generator: SceneGenerator, extras: dict | None = None) -> None:
    _save(path, "decoder", generator.cfg, dict(generator.state_dict()), extras)


def load_decoder(path: str | Path) -> tuple[SceneGenerator, dict]:
    payload = _load(path, "decoder")
    cfg = config_from_dict(FieldConfig, payload["config"])
    generator = SceneGenerator(cfg)
    generator.load_state_dict(payload["params"])
    return generator, payload["extras"]


def save_encoder(
    path: str | Path,
    encoder: PatchAttentionEncoder,
    averages: StyleCode,
    extras: dict | None = None,
) -> None:
    params = dict(encoder.state_dict())
    params["style_averages.freq"] = averages.freq
    params["style_averages.phase"] = averages.phase
    _save(path, "encoder", encoder.cfg, params, extras)


def load_encoder(path: str | Path) -> tuple[PatchAttentionEncoder, StyleCode, dict]:
    payload = _load(path, "encoder")
    cfg = config_from_dict(EncoderConfig, payload["config"])
    params = dict(payload["params"])
    averages = StyleCode(
        freq=params.pop("style_averages.freq"),
        phase=params.pop("style_averages.phase"),
    )
    encoder = PatchAttentionEncoder(cfg)
    encoder.load_state_dict(params)
    return encoder, averages, payload["extras"]
