"""Volumes, plane slicing and slice preparation.

Voxel order is always ``(sagittal, coronal, axial)``; a :class:`Plane`
names the axis that is walked when a volume is cut into 2D slices.

Two on-disk formats are supported:

* ``"nifti"`` -- single-file NIfTI-1 (``.nii`` or ``.nii.gz``) via nibabel.
* ``"raw"`` -- a plain-text test format: a header line ``RAW <dx> <dy> <dz>``
  followed by whitespace-separated voxels in row-major (C) order.
"""
from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import nibabel as nib
import numpy as np

from .errors import (
    DimensionMismatch,
    IoFailure,
    MalformedHeader,
    NonFiniteVoxel,
    TooManySlices,
)

PathLike = Union[str, os.PathLike]


class Plane(enum.Enum):
    SAGITTAL = "sagittal"
    CORONAL = "coronal"
    AXIAL = "axial"

    @property
    def axis(self) -> int:
        return _PLANE_AXIS[self]

    @classmethod
    def coerce(cls, value: Union["Plane", str]) -> "Plane":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


_PLANE_AXIS = {Plane.SAGITTAL: 0, Plane.CORONAL: 1, Plane.AXIAL: 2}


@dataclass(frozen=True)
class Volume3D:
    """A registered 3D scalar image.

    ``data`` is stored as a read-only float64 array.
    """

    data: np.ndarray
    subject_id: str = ""
    scan_id: str = ""
    affine: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise DimensionMismatch(f"expected a non-empty 3D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteVoxel(f"volume {self.subject_id}/{self.scan_id} contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Volume3D":
        return Volume3D(data, self.subject_id, self.scan_id, self.affine)


@dataclass(frozen=True)
class SliceSequence:
    """``n`` contiguous slices cut from one plane of a volume.

    ``slices`` has shape ``(n, height, width)``.
    """

    slices: np.ndarray
    plane: Plane
    start_index: int
    source: tuple = ("", "")

    def __len__(self) -> int:
        return self.slices.shape[0]

    @property
    def indices(self) -> range:
        return range(self.start_index, self.start_index + len(self))


def infer_format(path: PathLike) -> str:
    name = str(path).lower()
    if name.endswith((".nii", ".nii.gz")):
        return "nifti"
    if name.endswith((".raw", ".txt")):
        return "raw"
    raise MalformedHeader(f"cannot infer volume format from {path!s}")


def _read_raw(path: Path) -> np.ndarray:
    text = path.read_text()
    header, _, body = text.partition("\n")
    parts = header.split()
    if len(parts) != 4 or parts[0] != "RAW":
        raise MalformedHeader(f"{path}: expected 'RAW <dx> <dy> <dz>', got {header!r}")
    try:
        shape = tuple(int(p) for p in parts[1:])
    except ValueError as exc:
        raise MalformedHeader(f"{path}: non-integer dimension in {header!r}") from exc
    if min(shape) < 1:
        raise MalformedHeader(f"{path}: dimensions must be positive, got {shape}")
    try:
        values = np.array(body.split(), dtype=np.float64)
    except ValueError as exc:
        raise MalformedHeader(f"{path}: unparsable voxel value") from exc
    expected = int(np.prod(shape))
    if values.size != expected:
        raise DimensionMismatch(f"{path}: header declares {expected} voxels, found {values.size}")
    return values.reshape(shape)


def load_volume(path: PathLike, format: Optional[str] = None, subject_id: str = "",
                scan_id: str = "") -> Volume3D:
    """Read a volume from disk.

    >>> v = load_volume("sub01.raw")  # doctest: +SKIP
    """
    path = Path(path)
    fmt = format or infer_format(path)
    if not path.exists():
        raise IoFailure(f"no such file: {path}")
    affine = None
    if fmt == "raw":
        data = _read_raw(path)
    elif fmt == "nifti":
        try:
            img = nib.load(str(path))
        except Exception as exc:  # nibabel raises a zoo of types
            raise MalformedHeader(f"{path}: {exc}") from exc
        if len(img.shape) != 3:
            raise DimensionMismatch(f"{path}: expected a 3D image, got shape {img.shape}")
        data = np.asarray(img.dataobj, dtype=np.float64)
        affine = img.affine
    else:
        raise MalformedHeader(f"unknown volume format {fmt!r}")
    if not np.all(np.isfinite(data)):
        raise NonFiniteVoxel(f"{path}: contains NaN or Inf voxels")
    return Volume3D(data, subject_id=subject_id, scan_id=scan_id, affine=affine)


def save_volume(v: Volume3D, path: PathLike, format: Optional[str] = None) -> None:
    path = Path(path)
    fmt = format or infer_format(path)
    try:
        if fmt == "raw":
            dx, dy, dz = v.shape
            # repr() round-trips float64 exactly
            body = " ".join(repr(float(x)) for x in v.data.ravel(order="C"))
            path.write_text(f"RAW {dx} {dy} {dz}\n{body}\n")
        elif fmt == "nifti":
            affine = v.affine if v.affine is not None else np.eye(4)
            img = nib.Nifti1Image(np.asarray(v.data, dtype=np.float64), affine)
            nib.save(img, str(path))
        else:
            raise MalformedHeader(f"unknown volume format {fmt!r}")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def slice_start(depth: int, n: int) -> int:
    """First index of the ``n`` centred slices along an axis of length ``depth``."""
    return depth // 2 - n // 2


def extract_slices(v: Volume3D, plane: Union[Plane, str], n: int) -> SliceSequence:
    """Cut ``n`` centred, contiguous slices along ``plane``.

    The slices cover the half-open index range ``[D//2 - n//2, D//2 - n//2 + n)``.
    """
    plane = Plane.coerce(plane)
    depth = v.shape[plane.axis]
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    if n > depth:
        raise TooManySlices(f"requested {n} slices but the {plane.value} axis has {depth}")
    start = slice_start(depth, n)
    block = np.take(v.data, np.arange(start, start + n), axis=plane.axis)
    slices = np.moveaxis(block, plane.axis, 0).copy()
    return SliceSequence(slices, plane, start, (v.subject_id, v.scan_id))


def _resize_axis(a: np.ndarray, size: int, axis: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == size:
        return a
    # half-pixel centres, edge-clamped
    src = (np.arange(size) + 0.5) * (n_in / size) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    shape = [1] * a.ndim
    shape[axis] = size
    frac = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1.0 - frac) + np.take(a, hi, axis=axis) * frac


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resampling of the last two axes (half-pixel sample centres)."""
    out = _resize_axis(np.asarray(image, dtype=np.float64), height, -2)
    return _resize_axis(out, width, -1)


def standardize(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    mean = image.mean()
    std = image.std()
    if std <= 1e-12 * max(1.0, abs(mean)):
        return np.zeros_like(image)
    return (image - mean) / std


def prepare_slice(s: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Resize a slice bilinearly and standardize it to zero mean, unit variance."""
    if target_h < 1 or target_w < 1:
        raise ValueError("target dimensions must be positive")
    return standardize(resize_bilinear(s, target_h, target_w))


def prepare_sequence(seq: SliceSequence, size: int) -> np.ndarray:
    """Prepare every slice of ``seq`` to ``size x size``; returns ``(n, size, size)``."""
    return np.stack([prepare_slice(s, size, size) for s in seq.slices])
