"""Shared 3D image data model and bit-exact binary I/O.

A Volume is an immutable (nx, ny, nz) float64 grid with millimeter voxel
spacing and a semantic kind.  2D slices are plain float64 ndarrays of shape
(nx, ny); the axial slice iz of a volume is ``vol.data[:, :, iz]``.

File format (little-endian): magic "PDIFVOL1" | nx, ny, nz as uint32 |
sx, sy, sz as float64 | kind as uint8 | payload of nx*ny*nz float64 values,
x-fastest.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

VOLUME_MAGIC = b"PDIFVOL1"
_HEADER = struct.Struct("<III dddB")  # dims, spacing, kind


class Kind(IntEnum):
    ACTIVITY = 0
    ANATOMICAL = 1
    LABEL = 2
    MASK = 3
    GENERIC = 4


class VolumeError(ValueError):
    """Invalid volume construction or use."""


class VolumeFormatError(VolumeError):
    """File does not start with the expected magic or has a bad header."""


class VolumeTruncatedError(VolumeError):
    """Payload shorter than the header promises."""


@dataclass(frozen=True)
class Volume:
    """Immutable 3D scalar grid with spacing metadata.

    Activity/anatomical volumes are clamped non-negative at creation; masks
    must be {0,1}; labels must be small non-negative integers.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: Kind = Kind.GENERIC

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise VolumeError(f"volume data must be 3D, got shape {arr.shape}")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or any(s <= 0 for s in sp):
            raise VolumeError(f"spacing must be three positive reals, got {self.spacing}")
        kind = Kind(self.kind)
        if kind in (Kind.ACTIVITY, Kind.ANATOMICAL):
            arr = np.maximum(arr, 0.0)
        elif kind == Kind.MASK:
            if not np.all((arr == 0.0) | (arr == 1.0)):
                raise VolumeError("mask volumes may contain only 0 and 1")
        elif kind == Kind.LABEL:
            if not np.all((arr >= 0) & (arr == np.rint(arr)) & (arr < 2**16)):
                raise VolumeError("label volumes may contain only small non-negative integers")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "kind", kind)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def n_voxels(self) -> int:
        return self.data.size

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def with_data(self, data: np.ndarray, kind: Kind | None = None) -> "Volume":
        """New volume on the same grid."""
        return Volume(data, self.spacing, self.kind if kind is None else kind)

    def same_grid(self, other: "Volume") -> bool:
        return self.dims == other.dims and self.spacing == other.spacing


def save_volume(vol: Volume, path: str | os.PathLike) -> None:
    """Write the binary format atomically (temp file + rename)."""
    path = os.fspath(path)
    nx, ny, nz = vol.dims
    header = VOLUME_MAGIC + _HEADER.pack(nx, ny, nz, *vol.spacing, int(vol.kind))
    payload = vol.data.ravel(order="F").tobytes()
    dirname = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(prefix=".volwrite_", dir=dirname)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_volume(path: str | os.PathLike) -> Volume:
    """Read a volume; distinct errors for bad magic, bad header, short payload."""
    with open(path, "rb") as fh:
        magic = fh.read(len(VOLUME_MAGIC))
        if magic != VOLUME_MAGIC:
            raise VolumeFormatError(
                f"{path}: expected magic {VOLUME_MAGIC!r}, found {magic!r}"
            )
        raw = fh.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise VolumeTruncatedError(f"{path}: truncated header")
        nx, ny, nz, sx, sy, sz, kind = _HEADER.unpack(raw)
        try:
            kind = Kind(kind)
        except ValueError:
            raise VolumeFormatError(f"{path}: unknown volume kind byte {kind}") from None
        payload = fh.read(nx * ny * nz * 8)
    n = len(payload) // 8
    if n != nx * ny * nz:
        raise VolumeTruncatedError(
            f"{path}: dims promise {nx * ny * nz} scalars, payload holds {n}"
        )
    flat = np.frombuffer(payload, dtype="<f8")
    data = flat.reshape((nx, ny, nz), order="F")
    return Volume(data, (sx, sy, sz), kind)


def export_pgm(vol: Volume, slice_index: int, window: tuple[float, float]) -> bytes:
    """16-bit P5 graymap of axial slice, linearly windowed to [0, 65535]."""
    nx, ny, nz = vol.dims
    if not 0 <= slice_index < nz:
        raise VolumeError(f"slice index {slice_index} outside [0, {nz})")
    lo, hi = window
    if not lo < hi:
        raise VolumeError(f"window must satisfy lo < hi, got {window}")
    sl = vol.data[:, :, slice_index]
    pix = np.rint(np.clip((sl - lo) / (hi - lo), 0.0, 1.0) * 65535.0).astype(">u2")
    header = f"P5\n{nx} {ny}\n65535\n".encode("ascii")
    return header + pix.T.tobytes()  # raster rows run along y


def relative_difference(a: Volume, b: Volume, mask: Volume, floor: float) -> Volume:
    """Per-voxel 100*(a-b)/max(b, floor) inside mask, zero outside."""
    if not (a.same_grid(b) and a.same_grid(mask)):
        raise VolumeError("relative_difference requires volumes on the same grid")
    if floor <= 0:
        raise VolumeError("floor must be positive")
    denom = np.maximum(b.data, floor)
    out = np.where(mask.data > 0, 100.0 * (a.data - b.data) / denom, 0.0)
    return Volume(out, a.spacing, Kind.GENERIC)
