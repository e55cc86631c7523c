"""Semantic-mask preprocessing and the on-disk dataset format.

The encoder consumes one-hot label planes augmented with a contour channel
and a normalized distance-to-boundary channel, both computed directly from
the mask. Dataset layout: `masks/NNNNN.png` (8-bit, pixel value = label id),
`images/NNNNN.png` (8-bit RGB), `poses.csv`, `labels.txt`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .errors import DataError, InputError
from .rendering import CameraPose

POSE_FIELDS = ("id", "yaw", "pitch", "roll", "fov", "distance")


@dataclass
class SemanticMask:
    """Integer label grid plus the id -> name table it is valid against."""

    labels: np.ndarray                 # (h, w) small nonnegative ints
    label_table: dict[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise InputError(f"mask must be 2-D, got shape {self.labels.shape}")
        if self.labels.size == 0:
            raise InputError("mask is empty")
        if np.issubdtype(self.labels.dtype, np.floating):
            raise InputError("mask labels must be integers")
        if self.labels.min() < 0:
            raise InputError("mask labels must be nonnegative")
        if self.label_table:
            present = set(np.unique(self.labels).tolist())
            unknown = present - set(self.label_table)
            if unknown:
                raise DataError(f"mask contains labels missing from table: {sorted(unknown)}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def n_labels(self) -> int:
        return (max(self.label_table) + 1) if self.label_table else int(self.labels.max()) + 1


def one_hot(mask: SemanticMask, n_labels: int) -> np.ndarray:
    """(n_labels, h, w) uint8 planes; exactly one plane set per pixel."""
    labels = mask.labels
    if labels.max() >= n_labels:
        bad = np.argwhere(labels >= n_labels)[0]
        raise DataError(
            f"label {int(labels[bad[0], bad[1]])} at pixel ({bad[0]}, {bad[1]}) "
            f">= n_labels={n_labels}"
        )
    planes = np.zeros((n_labels, *labels.shape), dtype=np.uint8)
    rows, cols = np.indices(labels.shape)
    planes[labels, rows, cols] = 1
    return planes


def mask_from_one_hot(planes: np.ndarray, label_table: dict[int, str] | None = None) -> SemanticMask:
    return SemanticMask(labels=planes.argmax(axis=0).astype(np.uint8),
                        label_table=label_table or {})


def build_contour(planes: np.ndarray, thickness: int = 3, background: int | None = 0) -> np.ndarray:
    """Label-boundary strokes, white (255) on black, as uint8.

    A plane's boundary is its pixels 4-adjacent to a different label or to
    the image border; the `background` plane (usually label 0) is skipped so
    only object-side strokes are drawn. Thickness is applied by dilating with
    a disc of radius thickness // 2.
    """
    if planes.ndim != 3:
        raise InputError(f"expected (n_labels, h, w) planes, got shape {planes.shape}")
    if thickness < 1:
        raise InputError(f"thickness must be >= 1, got {thickness}")
    boundary = np.zeros(planes.shape[1:], dtype=bool)
    for label, plane in enumerate(planes):
        if background is not None and label == background:
            continue
        region = plane.astype(bool)
        if not region.any():
            continue
        padded = np.pad(region, 1, constant_values=False)
        interior = (
            padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
        )
        boundary |= region & ~interior
    radius = thickness // 2
    if radius > 0 and boundary.any():
        boundary = ndimage.binary_dilation(boundary, structure=_disc(radius))
    return boundary.astype(np.uint8) * 255


def _disc(radius: int) -> np.ndarray:
    span = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(span, span, indexing="ij")
    return (yy * yy + xx * xx) <= radius * radius


def build_distance_field(contour: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance to the nearest contour pixel, scaled to [0, 255].

    Zero on the contour itself; min-max normalized so the farthest pixel maps
    to 255. Requires at least one contour pixel.
    """
    on = contour > 0
    if not on.any():
        raise DataError("contour is empty; distance field is undefined")
    dist = ndimage.distance_transform_edt(~on)
    peak = dist.max()
    if peak == 0:  # the contour covers everything
        return np.zeros_like(dist)
    return dist / peak * 255.0


def assemble_input(
    mask: SemanticMask,
    resolution: int = 224,
    n_labels: int | None = None,
    thickness: int = 3,
    background: int | None = 0,
) -> torch.Tensor:
    """(n_labels + 2, resolution, resolution) float32 encoder input in [0, 1].

    Contour and distance field are computed at native mask resolution, then
    resampled bilinearly; the label planes are resampled nearest-neighbor (via
    the label map) so they stay categorical. No other augmentation.
    """
    n = n_labels if n_labels is not None else mask.n_labels
    planes = one_hot(mask, n)
    contour = build_contour(planes, thickness=thickness, background=background)
    distance = build_distance_field(contour)
    size = (resolution, resolution)
    labels_r = cv2.resize(mask.labels.astype(np.uint8), size, interpolation=cv2.INTER_NEAREST)
    planes_r = one_hot(SemanticMask(labels=labels_r), n).astype(np.float32)
    contour_r = cv2.resize(contour.astype(np.float32) / 255.0, size, interpolation=cv2.INTER_LINEAR)
    distance_r = cv2.resize((distance / 255.0).astype(np.float32), size, interpolation=cv2.INTER_LINEAR)
    stack = np.concatenate([planes_r, contour_r[None], distance_r[None]], axis=0)
    return torch.from_numpy(np.clip(stack, 0.0, 1.0))


# ---------------------------------------------------------------------------
# dataset IO


def sample_paths(root: str | Path, index: int) -> tuple[Path, Path]:
    root = Path(root)
    return root / "masks" / f"{index:05d}.png", root / "images" / f"{index:05d}.png"


def write_labels(root: str | Path, label_table: dict[int, str]) -> None:
    lines = [f"{i} {label_table[i]}" for i in sorted(label_table)]
    (Path(root) / "labels.txt").write_text("\n".join(lines) + "\n")


def read_labels(root: str | Path) -> dict[int, str]:
    path = Path(root) / "labels.txt"
    if not path.exists():
        raise FileNotFoundError(f"missing label table: {path}")
    table = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        idx, name = line.split(maxsplit=1)
        table[int(idx)] = name.strip()
    return table


def write_poses(root: str | Path, poses: dict[int, CameraPose]) -> None:
    path = Path(root) / "poses.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(POSE_FIELDS)
        for idx in sorted(poses):
            p = poses[idx]
            writer.writerow([idx, repr(p.yaw), repr(p.pitch), repr(p.roll),
                             repr(p.fov_deg), repr(p.distance)])


def read_poses(root: str | Path) -> dict[int, CameraPose]:
    path = Path(root) / "poses.csv"
    if not path.exists():
        raise FileNotFoundError(f"missing pose table: {path}")
    poses = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            for name in POSE_FIELDS:
                if row.get(name) in (None, ""):
                    raise DataError(f"poses.csv row {row!r} missing field {name!r}")
            poses[int(row["id"])] = CameraPose(
                yaw=float(row["yaw"]), pitch=float(row["pitch"]), roll=float(row["roll"]),
                distance=float(row["distance"]), fov_deg=float(row["fov"]),
            )
    return poses


def save_sample(root: str | Path, index: int, mask: SemanticMask, image: np.ndarray) -> None:
    """Write one mask/image pair; `image` is float in [0, 1] or uint8, (h, w, 3)."""
    mask_path, image_path = sample_paths(root, index)
    mask_path.parent.mkdir(parents=True, exist_ok=True)
    image_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.labels.astype(np.uint8), mode="L").save(mask_path)
    if image.dtype != np.uint8:
        image = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(image, mode="RGB").save(image_path)


def load_sample(
    root: str | Path,
    index: int,
    label_table: dict[int, str] | None = None,
    poses: dict[int, CameraPose] | None = None,
    load_size: int | None = None,
    crop_size: int | None = None,
) -> tuple[SemanticMask, np.ndarray, CameraPose]:
    """Read one (mask, image, pose) triple.

    `load_size`/`crop_size` implement the resize-then-center-crop loading
    convention (e.g. load at 640, crop to 512); both default to off.
    """
    root = Path(root)
    mask_path, image_path = sample_paths(root, index)
    for p in (mask_path, image_path):
        if not p.exists():
            raise FileNotFoundError(f"missing dataset file: {p}")
    table = label_table if label_table is not None else read_labels(root)
    pose_map = poses if poses is not None else read_poses(root)
    if index not in pose_map:
        raise DataError(f"poses.csv has no record for sample id {index}")
    try:
        mask_arr = np.asarray(Image.open(mask_path).convert("L"))
        image_arr = np.asarray(Image.open(image_path).convert("RGB"))
    except Exception as exc:  # Pillow raises a zoo of decode errors
        raise DataError(f"corrupt sample {index}: {exc}") from exc
    if mask_arr.shape != image_arr.shape[:2]:
        raise DataError(
            f"sample {index}: mask {mask_arr.shape} and image "
            f"{image_arr.shape[:2]} resolutions disagree"
        )
    if load_size is not None:
        mask_arr = cv2.resize(mask_arr, (load_size, load_size), interpolation=cv2.INTER_NEAREST)
        image_arr = cv2.resize(image_arr, (load_size, load_size), interpolation=cv2.INTER_LINEAR)
    if crop_size is not None:
        mask_arr = _center_crop(mask_arr, crop_size)
        image_arr = _center_crop(image_arr, crop_size)
    mask = SemanticMask(labels=mask_arr, label_table=table)
    image = image_arr.astype(np.float32) / 255.0
    return mask, image, pose_map[index]


def _center_crop(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape[:2]
    if h < size or w < size:
        raise DataError(f"cannot center-crop {h}x{w} to {size}")
    top = (h - size) // 2
    left = (w - size) // 2
    return arr[top : top + size, left : left + size]


def list_sample_ids(root: str | Path) -> list[int]:
    mask_dir = Path(root) / "masks"
    if not mask_dir.exists():
        raise FileNotFoundError(f"missing dataset directory: {mask_dir}")
    return sorted(int(p.stem) for p in mask_dir.glob("*.png"))
