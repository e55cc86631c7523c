"""User-facing inference: mask encoding, multi-view rendering, style mixing,
batch evaluation, and the HTTP service.

Distribution-level metrics (FID/IS analogues) need pretrained classifiers and
are left as a registration hook: add callables to EXTRA_METRIC_HOOKS taking
(rendered_images, dataset_images) and returning a float.
"""

from __future__ import annotations

import base64
import io
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .checkpoint import file_hash, load_decoder, load_encoder
from .config import RenderOptions, ServiceConfig
from .encoder import apply_truncation
from .errors import HandleExpiredError, RequestError
from .fields import SceneGenerator, StyleCode
from .masks import SemanticMask, assemble_input
from .metrics import foreground_iou, psnr
from .rendering import CameraPose, RegionSpec, RenderedImage, render

log = logging.getLogger(__name__)

# name -> callable(rendered: list[np.ndarray], reference: list[np.ndarray]) -> float
EXTRA_METRIC_HOOKS: dict = {}


@dataclass
class StyleMixSpec:
    """Blend a random style into the content code from layer `boundary` up."""

    seed: int
    boundary: int            # 1-based first mixed layer
    weight: float            # t in [0, 1]

    def validate(self, n_layers: int) -> None:
        if not (1 <= self.boundary <= n_layers):
            raise RequestError(
                f"mix boundary layer {self.boundary} outside [1, {n_layers}]"
            )
        if not (0.0 <= self.weight <= 1.0):
            raise RequestError(f"mix weight must be in [0, 1], got {self.weight}")


class ModelBundle:
    """Loaded decoder + encoder + averages, shared read-only across requests."""

    def __init__(self, decoder_path: str | Path, encoder_path: str | Path):
        self.decoder, _ = load_decoder(decoder_path)
        self.encoder, self.averages, self.encoder_extras = load_encoder(encoder_path)
        self.decoder.eval()
        self.encoder.eval()
        for p in self.decoder.parameters():
            p.requires_grad_(False)
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        self.checkpoint_hash = file_hash(decoder_path)[:16] + file_hash(encoder_path)[:16]
        self.label_table = self.encoder_extras.get(
            "label_table", {0: "background", 1: "head", 2: "eye", 3: "mouth"}
        )
        self.n_labels = self.encoder.cfg.in_channels - 2

    @classmethod
    def from_dir(cls, checkpoint_dir: str | Path) -> "ModelBundle":
        root = Path(checkpoint_dir)
        return cls(root / "decoder.pt", root / "encoder.pt")

    def encode_mask(self, mask: SemanticMask) -> StyleCode:
        """assemble_input -> encode -> truncation; deterministic."""
        present = set(np.unique(mask.labels).tolist())
        known = {int(k) for k in self.label_table}
        unknown = sorted(present - known)
        if unknown:
            raise RequestError(f"mask contains unknown labels {unknown}")
        inputs = assemble_input(mask, resolution=self.encoder.cfg.resolution,
                                n_labels=self.n_labels)
        with torch.no_grad():
            offset = self.encoder.encode(
                inputs, self.decoder.cfg.n_layers, self.decoder.cfg.hidden_width
            )
        return apply_truncation(offset, self.averages)

    def render_views(
        self,
        style: StyleCode,
        poses: list[CameraPose],
        resolution: int = 64,
        options: RenderOptions | None = None,
    ) -> list[RenderedImage]:
        """Whole-image renders, one per pose, order preserved."""
        opts = options or RenderOptions()
        region = RegionSpec.full_frame(resolution)
        out = []
        with torch.no_grad():
            for pose in poses:
                out.append(render(self.decoder.query_field, style, pose, region, opts))
        return out

    def style_mix(self, content: StyleCode, spec: StyleMixSpec) -> StyleCode:
        """Layers below the boundary stay content; the rest blend toward a
        mapped random latent."""
        n_layers = self.decoder.cfg.n_layers
        spec.validate(n_layers)
        gen = torch.Generator().manual_seed(spec.seed)
        z = torch.randn((self.decoder.cfg.latent_dim,), generator=gen)
        with torch.no_grad():
            other = self.decoder.map_latent(z)
        k = spec.boundary - 1
        t = spec.weight
        freq = content.freq.clone()
        phase = content.phase.clone()
        freq[..., k:, :] = (1.0 - t) * content.freq[..., k:, :] + t * other.freq[..., k:, :]
        phase[..., k:, :] = (1.0 - t) * content.phase[..., k:, :] + t * other.phase[..., k:, :]
        return StyleCode(freq=freq, phase=phase)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvaluationReport:
    psnr_mean: float
    psnr_std: float
    iou_mean: float
    runtime_mean_s: float
    runtime_std_s: float
    decoder_params_m: float
    encoder_params_m: float
    n_samples: int
    extra_metrics: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        return [
            f"samples:          {self.n_samples}",
            f"same-view PSNR:   {self.psnr_mean:.2f} +/- {self.psnr_std:.2f} dB",
            f"foreground IoU:   {self.iou_mean:.4f}",
            f"runtime:          {self.runtime_mean_s:.3f} +/- {self.runtime_std_s:.3f} s",
            f"decoder params:   {self.decoder_params_m:.3f} M",
            f"encoder params:   {self.encoder_params_m:.3f} M",
        ] + [f"{k}: {v}" for k, v in self.extra_metrics.items()]


def evaluate(
    bundle: ModelBundle,
    data_dir: str | Path,
    resolution: int = 32,
    max_samples: int | None = None,
    min_runtime_renders: int = 20,
    options: RenderOptions | None = None,
    field_for_iou=None,
) -> EvaluationReport:
    """Same-view PSNR, silhouette IoU and runtime over a dataset split.

    IoU compares the rendered opacity mask (leftover transmittance < 0.5)
    against the input mask's foreground. `field_for_iou` substitutes an
    oracle radiance field for the decoder (used to pin the metric's upper
    bound); it must accept (positions, directions) like an analytic field.
    """
    from .masks import list_sample_ids, load_sample
    from .rendering import bilinear_crop

    opts = options or RenderOptions(keep_transmittance=True)
    opts.keep_transmittance = True
    ids = list_sample_ids(data_dir)
    if max_samples is not None:
        ids = ids[:max_samples]
    psnrs, ious = [], []
    for i in ids:
        mask, image, pose = load_sample(data_dir, i)
        h, w = mask.shape
        region = RegionSpec(scale=1.0, dh=0.0, dw=0.0,
                            grid_hw=(resolution, resolution), image_hw=(h, w))
        if field_for_iou is not None:
            with torch.no_grad():
                rendered = render(field_for_iou, None, pose, region, opts)
        else:
            style = bundle.encode_mask(mask)
            with torch.no_grad():
                rendered = render(bundle.decoder.query_field, style, pose, region, opts)
            target = bilinear_crop(torch.from_numpy(image), region)
            psnrs.append(psnr(rendered.pixels, target))
        pred_fg = (rendered.transmittance.numpy() < 0.5)
        true_fg = _downsample_mask(mask.labels, resolution) != 0
        ious.append(foreground_iou(pred_fg, true_fg))

    times = []
    style = bundle.encode_mask(load_sample(data_dir, ids[0])[0])
    pose = load_sample(data_dir, ids[0])[2]
    for _ in range(max(min_runtime_renders, 20)):
        t0 = time.perf_counter()
        bundle.render_views(style, [pose], resolution=resolution, options=opts)
        times.append(time.perf_counter() - t0)

    extra = {name: hook([], []) for name, hook in EXTRA_METRIC_HOOKS.items()}
    return EvaluationReport(
        psnr_mean=float(np.mean(psnrs)) if psnrs else float("nan"),
        psnr_std=float(np.std(psnrs)) if psnrs else float("nan"),
        iou_mean=float(np.mean(ious)),
        runtime_mean_s=float(np.mean(times)),
        runtime_std_s=float(np.std(times)),
        decoder_params_m=bundle.decoder.parameter_count() / 1e6,
        encoder_params_m=sum(p.numel() for p in bundle.encoder.parameters()) / 1e6,
        n_samples=len(ids),
        extra_metrics=extra,
    )


def _downsample_mask(labels: np.ndarray, resolution: int) -> np.ndarray:
    import cv2

    return cv2.resize(labels.astype(np.uint8), (resolution, resolution),
                      interpolation=cv2.INTER_NEAREST)


# ---------------------------------------------------------------------------
# HTTP service


class StyleHandleCache:
    """TTL cache of encoded styles; handles are opaque server-side keys."""

    def __init__(self, ttl_seconds: float):
        self.ttl = ttl_seconds
        self._store: dict[str, tuple[float, StyleCode]] = {}
        self._lock = threading.Lock()

    def put(self, style: StyleCode) -> tuple[str, float]:
        handle = uuid.uuid4().hex
        expires = time.monotonic() + self.ttl
        with self._lock:
            self._prune()
            self._store[handle] = (expires, style)
        return handle, expires

    def get(self, handle: str) -> StyleCode:
        with self._lock:
            self._prune()
            entry = self._store.get(handle)
        if entry is None:
            raise HandleExpiredError(f"style handle {handle!r} unknown or expired")
        return entry[1]

    def _prune(self) -> None:
        now = time.monotonic()
        dead = [k for k, (exp, _) in self._store.items() if exp < now]
        for k in dead:
            del self._store[k]


def image_to_png_bytes(img: RenderedImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(img.to_uint8(), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def mask_from_png_bytes(data: bytes, label_table: dict) -> SemanticMask:
    try:
        arr = np.asarray(Image.open(io.BytesIO(data)).convert("L"))
    except Exception as exc:
        raise RequestError(f"mask payload is not a decodable PNG: {exc}") from exc
    return SemanticMask(labels=arr, label_table={int(k): v for k, v in label_table.items()})


def create_app(bundle: ModelBundle, config: ServiceConfig | None = None):
    """FastAPI application exposing health, labels, encode, render and mix."""
    from fastapi import FastAPI
    from fastapi.responses import JSONResponse, Response
    from pydantic import BaseModel

    cfg = config or ServiceConfig()
    cache = StyleHandleCache(cfg.handle_ttl_seconds)
    render_gate = threading.Semaphore(cfg.max_concurrent_renders)
    app = FastAPI(title="maskfield", version=__version__)

    class PoseModel(BaseModel):
        yaw: float
        pitch: float
        roll: float = 0.0
        fov: float = 18.0
        distance: float = 1.0

        def to_pose(self) -> CameraPose:
            return CameraPose(yaw=self.yaw, pitch=self.pitch, roll=self.roll,
                              distance=self.distance, fov_deg=self.fov)

    class EncodeRequest(BaseModel):
        mask_png: str            # base64 PNG, 8-bit single channel, label ids

    class MixModel(BaseModel):
        seed: int
        layer: int
        t: float

    class RenderRequestModel(BaseModel):
        style_handle: str | None = None
        mask_png: str | None = None
        poses: list[PoseModel]
        resolution: int = 64
        steps: int | None = None
        hierarchical: bool = False
        mix: MixModel | None = None
        raw: bool = False

    class MixRequest(BaseModel):
        style_handle: str
        seed: int
        layer: int
        t: float

    def error_response(status: int, code: str, message: str, **extra):
        return JSONResponse(status_code=status,
                            content={"error": {"code": code, "message": message, **extra}})

    @app.exception_handler(HandleExpiredError)
    async def _expired(_, exc):
        return error_response(410, "handle_expired", str(exc))

    @app.exception_handler(RequestError)
    async def _bad_request(_, exc):
        code = "unknown_label" if "unknown label" in str(exc) else "bad_request"
        return error_response(422, code, str(exc))

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__,
                "checkpoint_hash": bundle.checkpoint_hash}

    @app.get("/labels")
    def labels():
        return {"labels": {str(k): v for k, v in bundle.label_table.items()}}

    @app.post("/encode")
    def encode(req: EncodeRequest):
        mask = mask_from_png_bytes(_b64decode(req.mask_png), bundle.label_table)
        style = bundle.encode_mask(mask)
        handle, expires = cache.put(style)
        return {"style_handle": handle, "ttl_seconds": cfg.handle_ttl_seconds}

    @app.post("/mix")
    def mix(req: MixRequest):
        content = cache.get(req.style_handle)
        mixed = bundle.style_mix(
            content, StyleMixSpec(seed=req.seed, boundary=req.layer, weight=req.t)
        )
        handle, _ = cache.put(mixed)
        return {"style_handle": handle, "ttl_seconds": cfg.handle_ttl_seconds}

    @app.post("/render")
    def render_endpoint(req: RenderRequestModel):
        if not req.poses:
            raise RequestError("at least one target pose is required")
        if req.resolution > cfg.max_resolution:
            raise RequestError(
                f"resolution {req.resolution} exceeds limit {cfg.max_resolution}"
            )
        if req.style_handle is not None:
            style = cache.get(req.style_handle)
        elif req.mask_png is not None:
            style = bundle.encode_mask(
                mask_from_png_bytes(_b64decode(req.mask_png), bundle.label_table)
            )
        else:
            raise RequestError("either style_handle or mask_png is required")
        if req.mix is not None:
            style = bundle.style_mix(
                style, StyleMixSpec(seed=req.mix.seed, boundary=req.mix.layer,
                                    weight=req.mix.t)
            )
        steps = req.steps or cfg.default_steps
        opts = RenderOptions(n_coarse=steps, n_fine=cfg.default_fine_steps,
                             hierarchical=req.hierarchical, deterministic=True)
        with render_gate:
            try:
                images = bundle.render_views(style, [p.to_pose() for p in req.poses],
                                             resolution=req.resolution, options=opts)
            except Exception as exc:  # pragma: no cover - diagnostic path
                diag = uuid.uuid4().hex[:12]
                log.exception("render failure %s", diag)
                return error_response(500, "render_failure", str(exc), diagnostic_id=diag)
        if req.raw:
            return Response(content=image_to_png_bytes(images[0]), media_type="image/png")
        return {"images": [base64.b64encode(image_to_png_bytes(im)).decode() for im in images]}

    return app


def _b64decode(payload: str) -> bytes:
    try:
        return base64.b64decode(payload, validate=True)
    except Exception as exc:
        raise RequestError(f"payload is not valid base64: {exc}") from exc
