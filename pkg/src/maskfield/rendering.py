"""Ray casting, region-aware sampling and volume compositing.

Conventions: right-handed world frame, camera on a sphere of radius
`distance` looking at the origin, yaw/pitch spherical angles with
(pi/2, pi/2) frontal on +z. Pixels have half-integer centers, so a region
with scale 1 and zero translation reproduces the whole-image grid exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .config import RenderOptions
from .errors import InputError, NumericError
from .fields import StyleCode

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CameraPose:
    yaw: float
    pitch: float
    roll: float = 0.0
    distance: float = 1.0
    fov_deg: float = 18.0

    def __post_init__(self) -> None:
        if not (0.0 < self.fov_deg < 180.0):
            raise InputError(f"fov must be in (0, 180) degrees, got {self.fov_deg}")
        if self.distance <= 0:
            raise InputError(f"camera distance must be positive, got {self.distance}")

    def origin(self) -> np.ndarray:
        """Camera position: spherical angles, pitch measured from +y."""
        sp, cp = math.sin(self.pitch), math.cos(self.pitch)
        sy, cy = math.sin(self.yaw), math.cos(self.yaw)
        return self.distance * np.array([sp * cy, cp, sp * sy])

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(forward, right, up) unit vectors of the camera frame."""
        origin = self.origin()
        forward = -origin / np.linalg.norm(origin)
        world_up = np.array([0.0, 1.0, 0.0])
        if abs(np.dot(forward, world_up)) > 1.0 - 1e-9:
            world_up = np.array([0.0, 0.0, 1.0])  # looking straight up/down
        right = np.cross(forward, world_up)
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        if self.roll != 0.0:
            cr, sr = math.cos(self.roll), math.sin(self.roll)
            right, up = cr * right + sr * up, -sr * right + cr * up
        return forward, right, up


@dataclass(frozen=True)
class RegionSpec:
    """Sub-window of the image plane rendered at a fixed grid size."""

    scale: float                   # alpha in (0, 1]
    dh: float                      # window top offset, pixels
    dw: float                      # window left offset, pixels
    grid_hw: tuple[int, int]       # rendered rows, cols
    image_hw: tuple[int, int]      # full image rows, cols

    def __post_init__(self) -> None:
        h, w = self.image_hw
        if not (0.0 < self.scale <= 1.0):
            raise InputError(f"region scale must be in (0, 1], got {self.scale}")
        if self.grid_hw[0] < 1 or self.grid_hw[1] < 1 or h < 1 or w < 1:
            raise InputError("grid and image sizes must be positive")
        eps = 1e-9
        if not (-eps <= self.dh <= (1.0 - self.scale) * h + eps):
            raise InputError(f"dh={self.dh} outside [0, (1-scale)*h={(1 - self.scale) * h}]")
        if not (-eps <= self.dw <= (1.0 - self.scale) * w + eps):
            raise InputError(f"dw={self.dw} outside [0, (1-scale)*w={(1 - self.scale) * w}]")

    @classmethod
    def full_frame(cls, size: int | tuple[int, int]) -> "RegionSpec":
        hw = (size, size) if isinstance(size, int) else tuple(size)
        return cls(scale=1.0, dh=0.0, dw=0.0, grid_hw=hw, image_hw=hw)


@dataclass
class RenderedImage:
    pixels: torch.Tensor                      # (h, w, 3) in [0, 1]
    transmittance: torch.Tensor | None = None  # (h, w) leftover background weight

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_uint8(self) -> np.ndarray:
        arr = self.pixels.detach().cpu().clamp(0.0, 1.0).numpy()
        return np.round(arr * 255.0).astype(np.uint8)


def sample_region(
    scale: float,
    rng: np.random.Generator,
    image_hw: tuple[int, int],
    grid_hw: tuple[int, int],
) -> RegionSpec:
    """Draw the window translation uniformly; scale=1 forces zero offset."""
    if not (0.0 < scale <= 1.0):
        raise InputError(f"region scale must be in (0, 1], got {scale}")
    h, w = image_hw
    max_dh = (1.0 - scale) * h
    max_dw = (1.0 - scale) * w
    dh = float(rng.uniform(0.0, max_dh)) if max_dh > 0 else 0.0
    dw = float(rng.uniform(0.0, max_dw)) if max_dw > 0 else 0.0
    return RegionSpec(scale=scale, dh=dh, dw=dw, grid_hw=tuple(grid_hw), image_hw=(h, w))


def region_coordinates(region: RegionSpec, dtype=torch.float32) -> torch.Tensor:
    """(r_h, r_w, 2) continuous (row, col) pixel centers spanning the window."""
    r_h, r_w = region.grid_hw
    h, w = region.image_hw
    win_h = region.scale * h
    win_w = region.scale * w
    rows = region.dh + (torch.arange(r_h, dtype=dtype) + 0.5) * (win_h / r_h)
    cols = region.dw + (torch.arange(r_w, dtype=dtype) + 0.5) * (win_w / r_w)
    grid_r, grid_c = torch.meshgrid(rows, cols, indexing="ij")
    return torch.stack([grid_r, grid_c], dim=-1)


def bilinear_crop(image: torch.Tensor, region: RegionSpec) -> torch.Tensor:
    """Sample an (h, w, C) image at the region's continuous coordinates.

    Pixel (i, j) is centered at (i + 0.5, j + 0.5); border values clamp. With
    scale 1, zero offset and matching grid this is an exact identity.
    """
    h, w = image.shape[0], image.shape[1]
    if (h, w) != tuple(region.image_hw):
        raise InputError(
            f"image size {(h, w)} does not match region image size {region.image_hw}"
        )
    coords = region_coordinates(region, dtype=image.dtype)
    r = coords[..., 0] - 0.5
    c = coords[..., 1] - 0.5
    r0 = torch.clamp(r.floor(), 0, h - 1)
    c0 = torch.clamp(c.floor(), 0, w - 1)
    r1 = torch.clamp(r0 + 1, 0, h - 1)
    c1 = torch.clamp(c0 + 1, 0, w - 1)
    fr = (r - r0).clamp(0.0, 1.0).unsqueeze(-1)
    fc = (c - c0).clamp(0.0, 1.0).unsqueeze(-1)
    r0, r1, c0, c1 = r0.long(), r1.long(), c0.long(), c1.long()
    v00 = image[r0, c0]
    v01 = image[r0, c1]
    v10 = image[r1, c0]
    v11 = image[r1, c1]
    top = v00 * (1 - fc) + v01 * fc
    bot = v10 * (1 - fc) + v11 * fc
    return top * (1 - fr) + bot * fr


def rays_from_coords(
    pose: CameraPose,
    coords: torch.Tensor,
    image_hw: tuple[int, int],
    dtype=torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pinhole rays through continuous (row, col) image-plane coordinates.

    `coords` is (..., 2); returns (origins, directions) of shape (..., 3) with
    unit-norm directions.
    """
    forward, right, up = pose.basis()
    h, w = image_hw
    # NDC in [-1, 1]; y grows upward while rows grow downward
    x = coords[..., 1] * (2.0 / w) - 1.0
    y = 1.0 - coords[..., 0] * (2.0 / h)
    t = math.tan(math.radians(pose.fov_deg) / 2.0)
    f = torch.as_tensor(forward, dtype=dtype)
    r = torch.as_tensor(right, dtype=dtype)
    u = torch.as_tensor(up, dtype=dtype)
    dirs = f + t * (x.unsqueeze(-1) * r + y.unsqueeze(-1) * u)
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    origins = torch.as_tensor(pose.origin(), dtype=dtype).expand_as(dirs).contiguous()
    return origins, dirs


def generate_rays(
    pose: CameraPose,
    region: RegionSpec,
    near: float = 0.8,
    far: float = 1.2,
    dtype=torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One ray per region grid coordinate.

    Returns (origins, directions), each (r_h, r_w, 3); directions unit-norm.
    `near`/`far` are carried by the caller (all rays share them).
    """
    if not (0.0 < near < far):
        raise InputError(f"need 0 < near < far, got near={near} far={far}")
    coords = region_coordinates(region, dtype=dtype)
    return rays_from_coords(pose, coords, region.image_hw, dtype=dtype)


def stratified_depths(
    near: float,
    far: float,
    n_steps: int,
    n_rays: int,
    rng: torch.Generator | None = None,
    deterministic: bool = False,
    dtype=torch.float32,
) -> torch.Tensor:
    """(n_rays, n_steps) per-ray depths, one uniform draw per equal-width bin.

    `deterministic` replaces the jitter with bin midpoints.
    """
    if n_steps < 2:
        raise InputError(f"n_steps must be >= 2, got {n_steps}")
    if not (0.0 < near < far):
        raise InputError(f"need 0 < near < far, got near={near} far={far}")
    edges = torch.linspace(near, far, n_steps + 1, dtype=dtype)
    width = (far - near) / n_steps
    if deterministic:
        offs = torch.full((n_rays, n_steps), 0.5, dtype=dtype)
    else:
        offs = torch.rand((n_rays, n_steps), generator=rng, dtype=dtype)
    return edges[:-1].unsqueeze(0) + offs * width


def composite(
    depths: torch.Tensor,
    densities: torch.Tensor,
    colors: torch.Tensor,
    far: float | torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Quadrature alpha compositing along rays.

    depths/densities: (..., S), colors: (..., S, 3), sorted depths. The last
    gap is `far - depths[-1]` (bounded scene, no infinite tail). Returns
    (pixel (..., 3), weights (..., S), leftover transmittance (...,)).
    """
    if densities.shape != depths.shape or colors.shape[:-1] != depths.shape:
        raise InputError(
            f"misaligned shapes: depths {tuple(depths.shape)}, densities "
            f"{tuple(densities.shape)}, colors {tuple(colors.shape)}"
        )
    if (densities < 0).any():
        raise InputError("negative density passed to composite")
    for name, t in (("depths", depths), ("densities", densities), ("colors", colors)):
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite {name} passed to composite")
    far_t = torch.as_tensor(far, dtype=depths.dtype, device=depths.device)
    last_gap = (far_t - depths[..., -1]).clamp_min(0.0).unsqueeze(-1)
    gaps = torch.cat([depths[..., 1:] - depths[..., :-1], last_gap], dim=-1)
    tau = densities * gaps
    # transmittance before each sample: exp(-cumsum of previous optical depths)
    accum = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-torch.cat([torch.zeros_like(accum[..., :1]), accum[..., :-1]], dim=-1))
    weights = trans * (1.0 - torch.exp(-tau))
    pixel = (weights.unsqueeze(-1) * colors).sum(dim=-2)
    leftover = torch.exp(-accum[..., -1])
    return pixel, weights, leftover


def hierarchical_resample(
    depths: torch.Tensor,
    weights: torch.Tensor,
    n_fine: int,
    rng: torch.Generator | None = None,
    deterministic: bool = False,
) -> torch.Tensor:
    """Importance-sample extra depths from the coarse weight profile.

    Each coarse weight governs the interval up to its next-deeper neighbor
    (the final weight has no bounded interval and is dropped). Sampling
    inverts the piecewise-constant CDF; all-zero profiles fall back to
    uniform. Returns the merged, sorted depth set (..., S + n_fine).
    """
    if n_fine <= 0:
        return depths
    if (weights < 0).any():
        raise InputError("negative weights passed to hierarchical_resample")
    masses = weights[..., :-1].clone()
    totals = masses.sum(dim=-1, keepdim=True)
    degenerate = totals <= 0
    if degenerate.any():
        log.warning(
            "hierarchical_resample: %d ray(s) with all-zero weights, uniform fallback",
            int(degenerate.sum()),
        )
        masses = torch.where(degenerate, torch.ones_like(masses), masses)
        totals = masses.sum(dim=-1, keepdim=True)
    pdf = masses / totals
    cdf = torch.cumsum(pdf, dim=-1)
    cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf], dim=-1)  # (..., S)
    if deterministic:
        u = torch.linspace(0.0, 1.0, n_fine + 2, dtype=depths.dtype)[1:-1]
        u = u.expand(*depths.shape[:-1], n_fine).contiguous()
    else:
        u = torch.rand((*depths.shape[:-1], n_fine), generator=rng, dtype=depths.dtype)
    idx = torch.searchsorted(cdf, u, right=True).clamp(1, cdf.shape[-1] - 1) - 1
    cdf_lo = torch.gather(cdf, -1, idx)
    cdf_hi = torch.gather(cdf, -1, idx + 1)
    z_lo = torch.gather(depths, -1, idx)
    z_hi = torch.gather(depths, -1, idx + 1)
    denom = (cdf_hi - cdf_lo).clamp_min(1e-12)
    frac = (u - cdf_lo) / denom
    fine = z_lo + frac * (z_hi - z_lo)
    merged, _ = torch.sort(torch.cat([depths, fine], dim=-1), dim=-1)
    return merged


def render(
    field,
    style: StyleCode | None,
    pose: CameraPose,
    region: RegionSpec,
    options: RenderOptions | None = None,
) -> RenderedImage:
    """Full pipeline: rays -> depths -> field queries -> compositing.

    `field` is a callable (positions, directions, style) -> (density, color),
    or (positions, directions) -> ... when `style` is None (analytic ground
    truth fields). Rays are processed in chunks, each ray's result
    independent of the chunking, so deterministic renders are bitwise stable
    under any partition.
    """
    opts = options or RenderOptions()
    if style is not None and style.batch_shape != ():
        raise InputError(
            f"render expects an unbatched style, got batch shape {style.batch_shape}"
        )
    origins, dirs = generate_rays(pose, region, opts.near, opts.far)
    r_h, r_w = region.grid_hw
    o_flat = origins.reshape(-1, 3)
    d_flat = dirs.reshape(-1, 3)
    n_rays = o_flat.shape[0]
    gen = None
    if not opts.deterministic:
        gen = torch.Generator().manual_seed(opts.seed)
    pixels = []
    leftovers = []
    for start in range(0, n_rays, opts.chunk_rays):
        o = o_flat[start : start + opts.chunk_rays]
        d = d_flat[start : start + opts.chunk_rays]
        depths = stratified_depths(
            opts.near, opts.far, opts.n_coarse, o.shape[0], rng=gen,
            deterministic=opts.deterministic, dtype=o.dtype,
        )
        density, color = _query_along(field, o, d, depths, style)
        pixel, weights, leftover = composite(depths, density, color, opts.far)
        if opts.hierarchical and opts.n_fine > 0:
            merged = hierarchical_resample(
                depths, weights.detach(), opts.n_fine, rng=gen,
                deterministic=opts.deterministic,
            )
            density, color = _query_along(field, o, d, merged, style)
            pixel, _, leftover = composite(merged, density, color, opts.far)
        pixels.append(pixel)
        leftovers.append(leftover)
    image = torch.cat(pixels, dim=0).reshape(r_h, r_w, 3)
    trans = torch.cat(leftovers, dim=0).reshape(r_h, r_w) if opts.keep_transmittance else None
    return RenderedImage(pixels=image, transmittance=trans)


def _query_along(field, origins, dirs, depths, style):
    """Evaluate the field at origin + depth * direction for every sample."""
    points = origins.unsqueeze(1) + depths.unsqueeze(-1) * dirs.unsqueeze(1)
    dirs_s = dirs.unsqueeze(1).expand_as(points)
    n_rays, n_samples = depths.shape
    flat_p = points.reshape(n_rays * n_samples, 3)
    flat_d = dirs_s.reshape(n_rays * n_samples, 3)
    if style is None:
        density, color = field(flat_p, flat_d)
    else:
        density, color = field(flat_p, flat_d, style)
    return (
        density.reshape(n_rays, n_samples),
        color.reshape(n_rays, n_samples, 3),
    )
