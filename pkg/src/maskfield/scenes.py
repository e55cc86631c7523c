"""Procedural blob-face scenes: analytic radiance fields with exact labels.

Each scene is an ellipsoidal head with two spherical eyes and a mouth patch,
all inside the renderer's depth range. The analytic field provides density,
color and a label-of-point function, so rendered images come with
pixel-exact semantic masks (per-label opacity argmax along each ray).
"""

from __future__ import annotations

import hashlib
import math
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import DatasetConfig, PosePriorConfig, RenderOptions, SceneSamplerConfig
from .errors import InputError
from .masks import SemanticMask, save_sample, write_labels, write_poses
from .rendering import CameraPose, RegionSpec, composite, generate_rays, stratified_depths

LABEL_TABLE = {0: "background", 1: "head", 2: "eye", 3: "mouth"}


@dataclass
class ScenePart:
    center: np.ndarray       # (3,)
    radii: np.ndarray        # (3,) ellipsoid semi-axes
    color: np.ndarray        # (3,) in [0, 1]
    label: int


@dataclass
class SceneParams:
    parts: list[ScenePart]
    sigma_max: float = 120.0
    falloff_width: float = 0.01
    seed: int = 0

    def labels_present(self) -> set[int]:
        return {0} | {p.label for p in self.parts}


def sample_scene(rng: np.random.Generator, cfg: SceneSamplerConfig | None = None,
                 seed: int = 0) -> SceneParams:
    """Draw scene parameters from documented uniform ranges.

    Later parts override earlier ones where they overlap, so the fine parts
    (eyes, mouth) are listed after the head. Eye and mouth centers are placed
    in head-relative coordinates, which keeps them inside the head ellipsoid
    by construction.
    """
    cfg = cfg or SceneSamplerConfig()
    head_center = rng.uniform(-cfg.head_jitter, cfg.head_jitter, size=3)
    head_radii = np.array([
        rng.uniform(*cfg.head_radius_xy),
        rng.uniform(*cfg.head_radius_xy),
        rng.uniform(*cfg.head_radius_z),
    ])
    head_color = rng.uniform(0.35, 0.95, size=3)
    parts = [ScenePart(center=head_center, radii=head_radii, color=head_color, label=1)]

    eye_color = rng.uniform(0.0, 0.35, size=3)
    for side in (-1.0, 1.0):
        rel = _on_head_surface(rng, side * rng.uniform(0.38, 0.5), rng.uniform(0.18, 0.3))
        r_eye = rng.uniform(*cfg.eye_radius)
        parts.append(ScenePart(
            center=head_center + rel * head_radii,
            radii=np.full(3, r_eye),
            color=eye_color.copy(),
            label=2,
        ))

    mouth_rel = _on_head_surface(rng, rng.uniform(-0.08, 0.08), rng.uniform(-0.55, -0.4))
    r_mouth = rng.uniform(*cfg.mouth_radius)
    parts.append(ScenePart(
        center=head_center + mouth_rel * head_radii,
        radii=np.array([r_mouth, 0.45 * r_mouth, 0.5 * r_mouth]),
        color=rng.uniform(0.5, 1.0, size=3) * np.array([1.0, 0.35, 0.35]),
        label=3,
    ))
    return SceneParams(parts=parts, sigma_max=cfg.sigma_max,
                       falloff_width=cfg.falloff_width, seed=seed)


def _on_head_surface(rng: np.random.Generator, x_n: float, y_n: float) -> np.ndarray:
    """Head-relative position just inside the ellipsoid surface (camera side).

    Parts centered here poke through the surface by their own radius, so they
    stay visible from frontal views.
    """
    s = rng.uniform(0.95, 0.99)
    z_n = math.sqrt(max(s * s - x_n * x_n - y_n * y_n, 0.0))
    return np.array([x_n, y_n, z_n])


class AnalyticField:
    """Radiance oracle for a SceneParams: density, color and point labels.

    Density is sigma_max inside any part, fading linearly to zero across a
    band of `falloff_width` (in the part's normalized radial coordinate)
    outside the surface; width 0 gives a hard indicator. Where parts overlap,
    the last part in the list wins for color and label.
    """

    def __init__(self, params: SceneParams):
        self.params = params
        self.centers = torch.tensor(np.stack([p.center for p in params.parts]), dtype=torch.float32)
        self.radii = torch.tensor(np.stack([p.radii for p in params.parts]), dtype=torch.float32)
        self.colors = torch.tensor(np.stack([p.color for p in params.parts]), dtype=torch.float32)
        self.labels = torch.tensor([p.label for p in params.parts], dtype=torch.long)

    def radial(self, positions: torch.Tensor) -> torch.Tensor:
        """(N, P) normalized radial coordinate per part; <= 1 means inside."""
        diff = positions.unsqueeze(1) - self.centers.unsqueeze(0)
        return (diff / self.radii.unsqueeze(0)).norm(dim=-1)

    def __call__(self, positions: torch.Tensor, directions: torch.Tensor | None = None
                 ) -> tuple[torch.Tensor, torch.Tensor]:
        rho = self.radial(positions)
        w = self.params.falloff_width
        if w > 0:
            occ = ((1.0 + w - rho) / w).clamp(0.0, 1.0)
        else:
            occ = (rho <= 1.0).float()
        density = self.params.sigma_max * occ.max(dim=1).values
        color = self.colors[self._owner(rho)]
        return density, color

    def point_labels(self, positions: torch.Tensor) -> torch.Tensor:
        """Semantic label of each point (background where no part contains it)."""
        rho = self.radial(positions)
        inside = rho <= 1.0 + self.params.falloff_width
        labels = self.labels[self._owner(rho)]
        return torch.where(inside.any(dim=1), labels, torch.zeros_like(labels))

    def _owner(self, rho: torch.Tensor) -> torch.Tensor:
        """Index of the last part containing each point (head as fallback)."""
        inside = rho <= 1.0 + self.params.falloff_width
        order = torch.arange(rho.shape[1])
        ranked = torch.where(inside, order.unsqueeze(0), torch.full_like(order, -1).unsqueeze(0))
        owner = ranked.max(dim=1).values
        return owner.clamp_min(0)


def sample_pose(rng: np.random.Generator, prior: PosePriorConfig | None = None) -> CameraPose:
    prior = prior or PosePriorConfig()
    return CameraPose(
        yaw=float(rng.normal(prior.yaw_mean, prior.yaw_std)),
        pitch=float(rng.normal(prior.pitch_mean, prior.pitch_std)),
        roll=prior.roll,
        distance=prior.distance,
        fov_deg=prior.fov_deg,
    )


def render_sample(
    params: SceneParams,
    pose: CameraPose,
    image_size: int = 64,
    n_depth: int = 48,
    n_labels: int = 4,
    options: RenderOptions | None = None,
) -> tuple[np.ndarray, SemanticMask, CameraPose]:
    """Render (RGB image, semantic mask, pose) for one scene.

    The mask assigns each pixel the label with the largest accumulated
    compositing weight; pixels with total weight < 0.5 are background.
    """
    field = AnalyticField(params)
    opts = options or RenderOptions(n_coarse=n_depth, deterministic=True)
    region = RegionSpec.full_frame(image_size)
    origins, dirs = generate_rays(pose, region, opts.near, opts.far)
    o = origins.reshape(-1, 3)
    d = dirs.reshape(-1, 3)
    depths = stratified_depths(opts.near, opts.far, opts.n_coarse, o.shape[0],
                               deterministic=True)
    points = o.unsqueeze(1) + depths.unsqueeze(-1) * d.unsqueeze(1)
    flat = points.reshape(-1, 3)
    density, color = field(flat, None)
    n_rays, n_samples = depths.shape
    density = density.reshape(n_rays, n_samples)
    color = color.reshape(n_rays, n_samples, 3)
    pixel, weights, _ = composite(depths, density, color, opts.far)

    labels = field.point_labels(flat).reshape(n_rays, n_samples)
    label_weight = torch.zeros(n_rays, n_labels)
    label_weight.scatter_add_(1, labels, weights)
    total = weights.sum(dim=1)
    mask_flat = label_weight.argmax(dim=1)
    mask_flat = torch.where(total >= 0.5, mask_flat, torch.zeros_like(mask_flat))

    image = pixel.reshape(image_size, image_size, 3).clamp(0.0, 1.0).numpy()
    mask = SemanticMask(
        labels=mask_flat.reshape(image_size, image_size).numpy().astype(np.uint8),
        label_table={i: LABEL_TABLE.get(i, f"label{i}") for i in range(n_labels)},
    )
    return image, mask, pose


def scene_rng(seed: int, split: str, index: int) -> np.random.Generator:
    """Per-index derived stream: order-independent, train/test disjoint."""
    split_key = {"train": 1, "test": 2}[split]
    return np.random.default_rng([seed, split_key, index])


def build_dataset(out_dir: str | Path, cfg: DatasetConfig | None = None) -> dict:
    """Write (image, mask, pose) triples in the dataset layout; returns the manifest.

    Sample i of each split is a pure function of (cfg.seed, split, i), so
    rebuilding with the same config is byte-identical.
    """
    cfg = cfg or DatasetConfig()
    out = Path(out_dir)
    manifest: dict = {
        "version": 1,
        "seed": cfg.seed,
        "image_size": cfg.image_size,
        "splits": {},
        "labels": LABEL_TABLE,
    }
    for split, count in (("train", cfg.n_train), ("test", cfg.n_test)):
        split_dir = out / split
        poses: dict[int, CameraPose] = {}
        checksums: dict[str, str] = {}
        for i in range(count):
            rng = scene_rng(cfg.seed, split, i)
            params = sample_scene(rng, cfg.scene, seed=cfg.seed)
            pose = sample_pose(rng, cfg.pose)
            image, mask, pose = render_sample(
                params, pose, image_size=cfg.image_size, n_depth=cfg.n_depth,
                n_labels=cfg.scene.n_labels,
            )
            save_sample(split_dir, i, mask, image)
            poses[i] = pose
            for p in sample_paths_for_checksum(split_dir, i):
                checksums[str(p.relative_to(out))] = _sha256(p)
        write_poses(split_dir, poses)
        write_labels(split_dir, {i: LABEL_TABLE.get(i, f"label{i}")
                                 for i in range(cfg.scene.n_labels)})
        manifest["splits"][split] = {"count": count, "checksums": checksums}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def sample_paths_for_checksum(split_dir: Path, index: int):
    from .masks import sample_paths

    return sample_paths(split_dir, index)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def verify_manifest(root: str | Path) -> bool:
    """Re-hash every listed file; raises InputError on mismatch."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    for split, info in manifest["splits"].items():
        for rel, digest in info["checksums"].items():
            actual = _sha256(root / rel)
            if actual != digest:
                raise InputError(f"checksum mismatch for {rel}")
    return True
