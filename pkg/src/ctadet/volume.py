"""Volume data model, raw-file I/O, preprocessing, tiling, and augmentation.

A volume is a 3D scalar grid in Hounsfield units with per-axis spacing.
On disk a volume is a pair of files: ``<id>.vol.raw`` (x-fastest voxel
order, little-endian int16 HU) and a ``<id>.vol.json`` sidecar holding
dims, spacing, cranial direction and the volume id.  In memory, values
are indexed ``[x, y, z]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .anchors import BoundingBox

AIR_HU = -1000.0
HU_WINDOW = (-1000.0, 1000.0)
CRANIAL_MAX_EXTENT_MM = 200.0
DEFAULT_TILE_SIZE = (96, 96, 96)
DEFAULT_TILE_OVERLAP = 16

_RAW_SUFFIX = ".vol.raw"
_JSON_SUFFIX = ".vol.json"


@dataclass(frozen=True)
class Volume:
    """3D scalar grid with anisotropic voxel spacing (mm per voxel).

    ``cranial_axis`` declares which end of the z axis is the cranial side
    ("+z" or "-z"); it is carried from the file header and never inferred
    from content.
    """

    values: np.ndarray  # shape (nx, ny, nz), indexed [x, y, z]
    spacing: tuple[float, float, float]
    volume_id: str = ""
    cranial_axis: Optional[str] = None

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"volume values must be 3D, got shape {self.values.shape}")
        if any(d < 1 for d in self.values.shape):
            raise ValueError(f"volume dims must all be >= 1, got {self.values.shape}")
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        if self.cranial_axis not in (None, "+z", "-z"):
            raise ValueError(f"cranial_axis must be '+z' or '-z', got {self.cranial_axis!r}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass(frozen=True)
class PatchSpec:
    """Location of a patch inside a parent volume.

    The origin may lie outside the volume; extraction fills out-of-bounds
    voxels with ``pad_value``.
    """

    origin: tuple[int, int, int]
    size: tuple[int, int, int]
    pad_value: float = AIR_HU

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(int(o) for o in self.origin))
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))
        if any(s < 1 for s in self.size):
            raise ValueError(f"patch size must be >= 1 per axis, got {self.size}")


@dataclass(frozen=True)
class AugmentParams:
    """Deterministic augmentation: geometry (shift/zoom/flip) plus intensity
    (contrast scale, additive Gaussian noise seeded by ``seed``)."""

    shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    zoom: float = 1.0
    flip: tuple[bool, bool, bool] = (False, False, False)
    contrast_scale: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.zoom <= 0:
            raise ValueError(f"zoom must be positive, got {self.zoom}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def _volume_paths(path) -> tuple[Path, Path]:
    """Resolve a base path, raw path, or sidecar path to the (raw, json) pair."""
    p = Path(path)
    name = p.name
    if name.endswith(_RAW_SUFFIX):
        base = p.with_name(name[: -len(_RAW_SUFFIX)])
    elif name.endswith(_JSON_SUFFIX):
        base = p.with_name(name[: -len(_JSON_SUFFIX)])
    else:
        base = p
    return (
        base.with_name(base.name + _RAW_SUFFIX),
        base.with_name(base.name + _JSON_SUFFIX),
    )


def write_volume(v: Volume, path) -> None:
    """Write the raw/sidecar pair. Values must be integral and fit int16."""
    arr = np.asarray(v.values)
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.isfinite(arr)) or np.any(arr != np.rint(arr)):
            raise ValueError("raw volume files store int16 HU; values must be integral")
    lo, hi = arr.min(), arr.max()
    if lo < -32768 or hi > 32767:
        raise ValueError(f"HU values [{lo}, {hi}] exceed the int16 range")
    raw_path, json_path = _volume_paths(path)
    data = arr.astype("<i2")
    # .T serializes with x fastest for dims-ordered (nx, ny, nz) arrays
    raw_path.write_bytes(data.T.tobytes())
    header = {
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing),
        "cranial_axis": v.cranial_axis,
        "volume_id": v.volume_id,
    }
    json_path.write_text(json.dumps(header, sort_keys=True) + "\n")


def read_volume(path) -> Volume:
    """Read a raw/sidecar pair written by :func:`write_volume`."""
    raw_path, json_path = _volume_paths(path)
    if not json_path.exists():
        raise FileNotFoundError(f"missing volume header {json_path}")
    if not raw_path.exists():
        raise FileNotFoundError(f"missing volume data {raw_path}")
    header = json.loads(json_path.read_text())
    dims = tuple(int(d) for d in header["dims"])
    spacing = tuple(float(s) for s in header["spacing_mm"])
    raw = raw_path.read_bytes()
    expected = dims[0] * dims[1] * dims[2] * 2
    if len(raw) != expected:
        raise ValueError(
            f"{raw_path}: header declares dims {dims} ({expected} bytes) "
            f"but file holds {len(raw)} bytes"
        )
    values = (
        np.frombuffer(raw, dtype="<i2")
        .reshape((dims[2], dims[1], dims[0]))
        .transpose(2, 1, 0)
        .astype(np.int16)
    )
    return Volume(
        values=values,
        spacing=spacing,
        volume_id=str(header.get("volume_id", "")),
        cranial_axis=header.get("cranial_axis"),
    )


def normalize_hu(v: Volume, window: tuple[float, float] = HU_WINDOW) -> Volume:
    """Clamp HU to the window and scale into [-1, 1]."""
    lo, hi = window
    scale = max(abs(lo), abs(hi))
    values = np.clip(v.values, lo, hi).astype(np.float32) / np.float32(scale)
    return Volume(values, v.spacing, v.volume_id, v.cranial_axis)


def truncate_cranial(v: Volume, max_extent_mm: float = CRANIAL_MAX_EXTENT_MM) -> Volume:
    """Keep only the cranial-most slices up to ``max_extent_mm`` of z extent.

    Volumes already within the limit are returned unchanged.  Requires the
    cranial direction flag from the header.
    """
    if v.cranial_axis is None:
        raise ValueError(
            f"volume {v.volume_id!r} lacks the cranial-direction flag; "
            "cannot decide which end to keep"
        )
    sz = v.spacing[2]
    nz = v.dims[2]
    keep = int(math.floor(max_extent_mm / sz + 1e-9))
    if keep >= nz:
        return v
    if keep < 1:
        raise ValueError(f"max_extent_mm={max_extent_mm} keeps no slices at spacing {sz}")
    if v.cranial_axis == "+z":
        values = v.values[:, :, nz - keep :]
    else:
        values = v.values[:, :, :keep]
    return Volume(values.copy(), v.spacing, v.volume_id, v.cranial_axis)


def _axis_origins(dim: int, patch: int, overlap: int) -> list[int]:
    if dim <= patch:
        return [0]
    stride = patch - overlap
    origins = list(range(0, dim - patch + 1, stride))
    # the last patch is shifted inward so it ends exactly at the boundary
    if origins[-1] + patch < dim:
        origins.append(dim - patch)
    return origins


def tile_volume(
    v: Volume,
    patch_size=DEFAULT_TILE_SIZE,
    overlap: int = DEFAULT_TILE_OVERLAP,
    pad_value: float = AIR_HU,
) -> list[PatchSpec]:
    """Cover the volume with overlapping patches.

    Origins advance by ``patch - overlap`` per axis and the final patch per
    axis is shifted to end at the volume boundary, so interior patches
    overlap by at least ``overlap`` voxels.  Padding only occurs when the
    volume is smaller than a single patch.
    """
    if isinstance(patch_size, int):
        patch_size = (patch_size,) * 3
    patch_size = tuple(int(p) for p in patch_size)
    if any(p <= overlap for p in patch_size):
        raise ValueError(f"patch size {patch_size} must exceed overlap {overlap}")
    per_axis = [
        _axis_origins(d, p, overlap) for d, p in zip(v.dims, patch_size)
    ]
    return [
        PatchSpec((ox, oy, oz), patch_size, pad_value)
        for ox in per_axis[0]
        for oy in per_axis[1]
        for oz in per_axis[2]
    ]


def extract_patch(v: Volume, spec: PatchSpec) -> Volume:
    """Copy the voxels under ``spec``; out-of-bounds voxels get the pad value."""
    out = np.full(spec.size, spec.pad_value, dtype=v.values.dtype)
    src = []
    dst = []
    for o, s, d in zip(spec.origin, spec.size, v.dims):
        lo = max(o, 0)
        hi = min(o + s, d)
        if hi <= lo:
            return Volume(out, v.spacing, v.volume_id, v.cranial_axis)
        src.append(slice(lo, hi))
        dst.append(slice(lo - o, hi - o))
    out[tuple(dst)] = v.values[tuple(src)]
    return Volume(out, v.spacing, v.volume_id, v.cranial_axis)


def _integer_shift(arr: np.ndarray, shift: Sequence[int], pad_value: float) -> np.ndarray:
    out = np.full_like(arr, pad_value)
    src = []
    dst = []
    for s, n in zip(shift, arr.shape):
        if abs(s) >= n:
            return out
        src.append(slice(max(-s, 0), n - max(s, 0)))
        dst.append(slice(max(s, 0), n + min(s, 0)))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def _forward_point(
    c: Sequence[float],
    shape: Sequence[int],
    params: AugmentParams,
) -> tuple[float, float, float]:
    out = []
    for ax in range(3):
        x = float(c[ax])
        if params.flip[ax]:
            x = (shape[ax] - 1) - x
        m = (shape[ax] - 1) / 2.0
        x = params.zoom * (x - m) + m + params.shift[ax]
        out.append(x)
    return tuple(out)


def augment(
    patch: Volume,
    boxes: Sequence[BoundingBox],
    params: AugmentParams,
    pad_value: float = AIR_HU,
) -> tuple[Volume, list[BoundingBox]]:
    """Apply flip -> zoom (about the patch center) -> shift to voxels and
    boxes alike, then contrast scaling and seeded Gaussian noise to voxels
    only.  Identity parameters return the input unchanged; equal seeds give
    bit-equal outputs.
    """
    arr = patch.values
    shape = arr.shape
    integral_shift = all(float(s).is_integer() for s in params.shift)
    if params.zoom == 1.0 and integral_shift:
        out = arr
        for ax in range(3):
            if params.flip[ax]:
                out = np.flip(out, axis=ax)
        ishift = [int(s) for s in params.shift]
        if any(s != 0 for s in ishift):
            out = _integer_shift(out, ishift, pad_value)
    else:
        # inverse map: output voxel o samples input at flip((o - shift - m)/zoom + m)
        grids = []
        for ax in range(3):
            o = np.arange(shape[ax], dtype=np.float64)
            m = (shape[ax] - 1) / 2.0
            x = (o - params.shift[ax] - m) / params.zoom + m
            if params.flip[ax]:
                x = (shape[ax] - 1) - x
            grids.append(x)
        coords = np.meshgrid(*grids, indexing="ij")
        out = ndimage.map_coordinates(
            arr.astype(np.float32),
            coords,
            order=1,
            mode="constant",
            cval=pad_value,
        )
    if params.contrast_scale != 1.0:
        out = out * params.contrast_scale
    if params.noise_sigma > 0.0:
        rng = np.random.default_rng(params.seed)
        out = out + rng.normal(0.0, params.noise_sigma, shape)
    new_boxes = [
        BoundingBox(_forward_point(b.center, shape, params), b.diameter * params.zoom)
        for b in boxes
    ]
    return Volume(out, patch.spacing, patch.volume_id, patch.cranial_axis), new_boxes


def sample_training_patches(
    v: Volume,
    lesions: Sequence[BoundingBox],
    n: int,
    positive_fraction: float = 0.5,
    seed: int = 0,
    patch_size=DEFAULT_TILE_SIZE,
    pad_value: float = AIR_HU,
) -> list[PatchSpec]:
    """Draw patch locations, balanced between lesion-centered and uniform.

    Each spec is lesion-centered with probability ``positive_fraction``;
    those place the lesion center uniformly within the central half of the
    patch.  Uniform specs are placed fully inside the volume where it is
    large enough.
    """
    if not 0.0 <= positive_fraction <= 1.0:
        raise ValueError(f"positive_fraction must be in [0, 1], got {positive_fraction}")
    if positive_fraction > 0 and not lesions:
        raise ValueError("positive_fraction > 0 requires a nonempty lesion list")
    if isinstance(patch_size, int):
        patch_size = (patch_size,) * 3
    rng = np.random.default_rng(seed)
    specs = []
    for _ in range(int(n)):
        if positive_fraction > 0 and rng.random() < positive_fraction:
            box = lesions[int(rng.integers(len(lesions)))]
            origin = tuple(
                int(math.floor(c - rng.uniform(p / 4.0, 3.0 * p / 4.0 - 1.0)))
                for c, p in zip(box.center, patch_size)
            )
        else:
            origin = tuple(
                int(rng.integers(0, max(d - p, 0) + 1))
                for d, p in zip(v.dims, patch_size)
            )
        specs.append(PatchSpec(origin, patch_size, pad_value))
    return specs
