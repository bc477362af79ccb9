"""Volumetric data model: Volume / LabeledVolume / Slab, file IO, resampling,
and 2.5-D slab extraction.

Axis order is (slice, row, column) everywhere; spacing and origin follow the
same order in mm. Volumes are immutable after construction and safe to share
across threads.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ValidationError, VolumeIOError
from .nifti import NiftiError, read_nifti, write_nifti

KOOS_GRADES = (1, 2, 3, 4)


class Modality(enum.Enum):
    T1 = "T1"
    T2 = "T2"
    UNKNOWN = "UNKNOWN"


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Volume:
    """A 3-D scalar image with physical metadata.

    data: float32 array, axes (slice, row, column)
    spacing: mm per voxel along each axis, strictly positive
    origin: physical position (mm) of voxel (0, 0, 0)
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    modality: Modality = Modality.UNKNOWN

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValidationError(f"volume data must be 3-D, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValidationError(f"spacing must be 3 strictly positive values, got {self.spacing}")
        origin = tuple(float(o) for o in self.origin)
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Volume":
        """New volume with the same geometry and modality."""
        return Volume(data, self.spacing, self.origin, self.modality)


@dataclass(frozen=True)
class LabeledVolume:
    """Volume plus segmentation masks and an optional tumor grade.

    vs_mask: 0 background, 1 VS, 2 cochlea
    gif_mask: parcellation labels 0..L (optional)
    koos_grade: 1..4 (optional)
    """

    image: Volume
    vs_mask: np.ndarray
    gif_mask: np.ndarray | None = None
    koos_grade: int | None = None
    subject_id: str = ""

    def __post_init__(self):
        vs = np.asarray(self.vs_mask)
        if vs.shape != self.image.shape:
            raise ValidationError(f"vs_mask shape {vs.shape} != image shape {self.image.shape}")
        if vs.min() < 0 or vs.max() > 2:
            raise ValidationError(f"vs_mask values must be in 0..2, got range [{vs.min()}, {vs.max()}]")
        object.__setattr__(self, "vs_mask", _freeze(vs.astype(np.uint8)))
        if self.gif_mask is not None:
            gif = np.asarray(self.gif_mask)
            if gif.shape != self.image.shape:
                raise ValidationError(f"gif_mask shape {gif.shape} != image shape {self.image.shape}")
            if gif.min() < 0:
                raise ValidationError("gif_mask labels must be non-negative")
            object.__setattr__(self, "gif_mask", _freeze(gif.astype(np.uint16)))
        if self.koos_grade is not None and self.koos_grade not in KOOS_GRADES:
            raise ValidationError(f"koos_grade must be one of {KOOS_GRADES}, got {self.koos_grade}")


@dataclass(frozen=True)
class Slab:
    """2.5-D sample: three adjacent slices as channels.

    channels: (3, H, W) float32
    masks: optional per-channel label grids keyed by name ('vs', 'gif'), each (3, H, W)
    """

    channels: np.ndarray
    subject_id: str
    slice_index: int
    masks: dict[str, np.ndarray] = field(default_factory=dict)
    grade: int | None = None

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float32)
        if ch.ndim != 3 or ch.shape[0] != 3:
            raise ValidationError(f"slab channels must be (3, H, W), got {ch.shape}")
        object.__setattr__(self, "channels", _freeze(ch))
        for name, m in self.masks.items():
            m = np.asarray(m)
            if m.shape != ch.shape:
                raise ValidationError(f"mask '{name}' shape {m.shape} != channels shape {ch.shape}")
            self.masks[name] = _freeze(m.astype(np.uint8))

    def center_mask(self, name: str) -> np.ndarray:
        return self.masks[name][1]


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------

RAW_DTYPE = "f32"
RAW_ORDER = "slice-row-col"


def load_volume(path, modality: Modality = Modality.UNKNOWN) -> Volume:
    """Load a NIfTI-1 (.nii/.nii.gz) or raw-sidecar (.json + .bin) volume.

    Rejects volumes containing NaN/Inf voxels.
    """
    path = Path(path)
    if not path.exists():
        raise VolumeIOError(f"no such file: {path}")
    if path.suffix == ".json":
        data, spacing, origin = _read_raw_sidecar(path)
    else:
        try:
            data, spacing, origin = read_nifti(path)
        except NiftiError as e:
            raise VolumeIOError(str(e)) from e
    bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
    if bad:
        raise ValidationError(f"{path}: {bad} non-finite voxel(s)")
    return Volume(data, spacing, origin, modality)


def save_volume(vol: Volume, path) -> None:
    """Write a volume; format chosen from the extension (.json -> raw sidecar)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".json":
        _write_raw_sidecar(path, vol.data, vol.spacing, vol.origin)
    else:
        write_nifti(path, vol.data, vol.spacing, vol.origin)


def _read_raw_sidecar(path: Path):
    try:
        header = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise VolumeIOError(f"bad raw-sidecar header {path}: {e}") from e
    for key in ("shape", "spacing", "dtype", "order"):
        if key not in header:
            raise VolumeIOError(f"{path}: raw-sidecar header missing '{key}'")
    if header["dtype"] != RAW_DTYPE or header["order"] != RAW_ORDER:
        raise VolumeIOError(f"{path}: unsupported dtype/order {header['dtype']}/{header['order']}")
    shape = tuple(int(n) for n in header["shape"])
    blob_path = path.with_suffix(".bin")
    try:
        blob = blob_path.read_bytes()
    except OSError as e:
        raise VolumeIOError(f"cannot read payload {blob_path}: {e}") from e
    expected = int(np.prod(shape)) * 4
    if len(blob) != expected:
        raise VolumeIOError(f"{blob_path}: payload is {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f4").reshape(shape)
    origin = tuple(header.get("origin", (0.0, 0.0, 0.0)))
    return data, tuple(header["spacing"]), origin


def _write_raw_sidecar(path: Path, data, spacing, origin):
    header = {
        "shape": list(data.shape),
        "spacing": [float(s) for s in spacing],
        "origin": [float(o) for o in origin],
        "dtype": RAW_DTYPE,
        "order": RAW_ORDER,
    }
    path.write_text(json.dumps(header, indent=2) + "\n")
    path.with_suffix(".bin").write_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes())


# ---------------------------------------------------------------------------
# Resampling and slab extraction
# ---------------------------------------------------------------------------


def resample(vol: Volume, target_spacing, interpolation: str = "linear") -> Volume:
    """Resample onto a grid with the given spacing (physical-space interpolation).

    Output shape along each axis is round(shape * spacing / target_spacing).
    Use 'nearest' for label grids.
    """
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or any(s <= 0 for s in target):
        raise ValidationError(f"target spacing must be 3 positive values, got {target_spacing}")
    if interpolation not in ("linear", "nearest"):
        raise ValidationError(f"unknown interpolation '{interpolation}'")
    out_shape = tuple(
        max(1, int(round(n * s / t))) for n, s, t in zip(vol.shape, vol.spacing, target)
    )
    data = resample_grid(vol.data, vol.spacing, target, out_shape, interpolation)
    return Volume(data, target, vol.origin, vol.modality)


def resample_grid(data, spacing, target_spacing, out_shape, interpolation) -> np.ndarray:
    """Sample `data` on a new grid sharing the same origin."""
    coords = np.meshgrid(
        *[
            np.arange(n, dtype=np.float64) * t / s
            for n, s, t in zip(out_shape, spacing, target_spacing)
        ],
        indexing="ij",
    )
    order = 1 if interpolation == "linear" else 0
    out = ndimage.map_coordinates(
        data.astype(np.float32, copy=False), coords, order=order, mode="nearest"
    )
    if interpolation == "nearest":
        out = out.astype(data.dtype, copy=False)
    return out


def extract_slabs(lv: LabeledVolume, stride: int = 1) -> list[Slab]:
    """One slab per center slice selected with the stride; edge slices replicated."""
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    n = lv.image.shape[0]
    slabs = []
    for k in range(0, n, stride):
        idx = [min(max(k + d, 0), n - 1) for d in (-1, 0, 1)]
        masks = {"vs": lv.vs_mask[idx]}
        if lv.gif_mask is not None:
            masks["gif"] = lv.gif_mask[idx]
        slabs.append(
            Slab(
                channels=lv.image.data[idx],
                subject_id=lv.subject_id,
                slice_index=k,
                masks=masks,
                grade=lv.koos_grade,
            )
        )
    return slabs


def volume_slabs(vol: Volume, stride: int = 1, subject_id: str = "") -> list[Slab]:
    """Slabs of a bare volume (no masks), for inference paths."""
    n = vol.shape[0]
    out = []
    for k in range(0, n, stride):
        idx = [min(max(k + d, 0), n - 1) for d in (-1, 0, 1)]
        out.append(Slab(channels=vol.data[idx], subject_id=subject_id, slice_index=k))
    return out
