"""PET system model: 2D parallel-beam projection per axial slice.

The system matrix G is built once per (geometry, image grid) pair by exact
Siddon intersection-length ray tracing and stored as a scipy CSR matrix, so
forward projection is G @ x, back projection is G.T @ y, and the pair is an
exact adjoint by construction.  All slices of a volume share the same 2D
matrix; projecting a volume is one sparse-times-dense product.

Sinogram file format (little-endian): magic "PDIFSIN1" | n_angles, n_bins,
n_slices as uint32 | bin_spacing as float64 | variant as uint8 | payload of
n_angles*n_bins*n_slices float64 values, angle-fastest.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .phantom import CSF, GM, WM
from .rng import RngStream
from .volume import Kind, Volume

SINO_MAGIC = b"PDIFSIN1"
_SINO_HEADER = struct.Struct("<III dB")

# Water-like linear attenuation at 511 keV, per mm.
MU_TISSUE_PER_MM = 0.0096
DEFAULT_MU_PER_CLASS = {CSF: MU_TISSUE_PER_MM, GM: MU_TISSUE_PER_MM, WM: MU_TISSUE_PER_MM}


class ProjectorError(ValueError):
    pass


class Variant(IntEnum):
    EXPECTED = 0
    COUNTS = 1


@dataclass(frozen=True)
class Geometry2D:
    """Parallel-beam geometry: uniform angles over [0, pi), centered bins."""

    n_angles: int
    n_bins: int
    bin_spacing: float

    def __post_init__(self):
        if self.n_angles < 1:
            raise ProjectorError("n_angles must be >= 1")
        if self.n_bins < 1 or self.n_bins % 2 == 0:
            raise ProjectorError(f"n_bins must be odd and positive, got {self.n_bins}")
        if self.bin_spacing <= 0:
            raise ProjectorError("bin_spacing must be positive")

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_angles) * (np.pi / self.n_angles)

    @property
    def bin_offsets(self) -> np.ndarray:
        return (np.arange(self.n_bins) - (self.n_bins - 1) / 2.0) * self.bin_spacing

    @property
    def n_rays(self) -> int:
        return self.n_angles * self.n_bins


@dataclass
class Sinogram:
    geometry: Geometry2D
    data: np.ndarray  # (n_angles, n_bins, n_slices)
    variant: Variant = Variant.EXPECTED

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        g = self.geometry
        if arr.ndim != 3 or arr.shape[:2] != (g.n_angles, g.n_bins):
            raise ProjectorError(
                f"sinogram shape {arr.shape} does not match geometry "
                f"({g.n_angles}, {g.n_bins}, n_slices)"
            )
        if np.any(arr < 0):
            raise ProjectorError("sinogram values must be non-negative")
        if self.variant == Variant.COUNTS and not np.all(arr == np.rint(arr)):
            raise ProjectorError("counts sinogram must hold integers")
        self.data = arr

    @property
    def n_slices(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: np.ndarray, variant: Variant | None = None) -> "Sinogram":
        return Sinogram(self.geometry, data, self.variant if variant is None else variant)


@dataclass
class SystemFactors:
    """Multiplicative normalization/attenuation and additive background."""

    attenuation: Sinogram
    normalization: Sinogram
    background: Sinogram

    def __post_init__(self):
        a, n, b = self.attenuation, self.normalization, self.background
        shapes = {a.data.shape, n.data.shape, b.data.shape}
        if len(shapes) != 1 or not (a.geometry == n.geometry == b.geometry):
            raise ProjectorError("system factors must share geometry and slice count")
        if np.any(a.data <= 0) or np.any(a.data > 1):
            raise ProjectorError("attenuation factors must lie in (0, 1]")
        if np.any(n.data <= 0):
            raise ProjectorError("normalization factors must be positive")

    @classmethod
    def identity(cls, geom: Geometry2D, n_slices: int) -> "SystemFactors":
        ones = np.ones((geom.n_angles, geom.n_bins, n_slices))
        return cls(
            Sinogram(geom, ones),
            Sinogram(geom, ones.copy()),
            Sinogram(geom, np.zeros_like(ones)),
        )

    @property
    def na(self) -> np.ndarray:
        return self.normalization.data * self.attenuation.data


def _trace_ray(p0x, p0y, dx, dy, x0, y0, nx, ny, sx, sy):
    """Siddon: voxel columns and intersection lengths for one unit-speed ray."""
    x1, y1 = x0 + nx * sx, y0 + ny * sy
    t_lo, t_hi = -np.inf, np.inf
    for p, d, lo, hi in ((p0x, dx, x0, x1), (p0y, dy, y0, y1)):
        if abs(d) > 1e-12:
            ta, tb = (lo - p) / d, (hi - p) / d
            t_lo, t_hi = max(t_lo, min(ta, tb)), min(t_hi, max(ta, tb))
        elif not lo <= p <= hi:
            return None
    if t_hi <= t_lo:
        return None
    ts = [np.array([t_lo, t_hi])]
    if abs(dx) > 1e-12:
        tx = (x0 + np.arange(nx + 1) * sx - p0x) / dx
        ts.append(tx[(tx > t_lo) & (tx < t_hi)])
    if abs(dy) > 1e-12:
        ty = (y0 + np.arange(ny + 1) * sy - p0y) / dy
        ts.append(ty[(ty > t_lo) & (ty < t_hi)])
    t = np.unique(np.concatenate(ts))
    seg = np.diff(t)
    keep = seg > 1e-12
    if not np.any(keep):
        return None
    tmid = (t[:-1] + t[1:])[keep] / 2.0
    ix = np.clip(((p0x + tmid * dx - x0) / sx).astype(np.int64), 0, nx - 1)
    iy = np.clip(((p0y + tmid * dy - y0) / sy).astype(np.int64), 0, ny - 1)
    return ix + nx * iy, seg[keep]


@lru_cache(maxsize=8)
def _system_matrix(n_angles, n_bins, bin_spacing, nx, ny, sx, sy) -> sp.csr_matrix:
    geom = Geometry2D(n_angles, n_bins, bin_spacing)
    x0, y0 = -nx * sx / 2.0, -ny * sy / 2.0
    indptr = np.zeros(geom.n_rays + 1, dtype=np.int64)
    cols, vals = [], []
    row = 0
    for theta in geom.angles:
        dx, dy = np.cos(theta), np.sin(theta)
        for u in geom.bin_offsets:
            p0x, p0y = -u * dy, u * dx
            hit = _trace_ray(p0x, p0y, dx, dy, x0, y0, nx, ny, sx, sy)
            if hit is not None:
                cols.append(hit[0])
                vals.append(hit[1])
                indptr[row + 1] = indptr[row] + hit[0].size
            else:
                indptr[row + 1] = indptr[row]
            row += 1
    data = np.concatenate(vals) if vals else np.zeros(0)
    indices = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    mat = sp.csr_matrix((data, indices, indptr), shape=(geom.n_rays, nx * ny))
    mat.sort_indices()
    return mat


def system_matrix(geom: Geometry2D, vol: Volume) -> sp.csr_matrix:
    """CSR matrix mapping an in-plane image (x-fastest) to ray integrals."""
    nx, ny, _ = vol.dims
    sx, sy, _ = vol.spacing
    fov_diag = np.hypot(nx * sx, ny * sy)
    if geom.n_bins * geom.bin_spacing < fov_diag - 1e-9:
        raise ProjectorError(
            f"detector ({geom.n_bins} bins x {geom.bin_spacing} mm) does not cover "
            f"the {fov_diag:.1f} mm field-of-view diagonal"
        )
    return _system_matrix(geom.n_angles, geom.n_bins, geom.bin_spacing, nx, ny, sx, sy)


def _image_as_columns(vol: Volume) -> np.ndarray:
    nx, ny, nz = vol.dims
    return vol.data.reshape(nx * ny, nz, order="F")


def forward_project(vol: Volume, geom: Geometry2D) -> Sinogram:
    """Per-slice line integrals y_i = sum_j g_ij u_j (lengths in mm)."""
    mat = system_matrix(geom, vol)
    flat = mat @ _image_as_columns(vol)
    return Sinogram(geom, flat.reshape(geom.n_angles, geom.n_bins, vol.dims[2]))


def back_project(sino: Sinogram, geom: Geometry2D, like: Volume) -> Volume:
    """Exact adjoint of forward_project onto the grid of `like`."""
    if sino.geometry != geom:
        raise ProjectorError("sinogram geometry does not match")
    mat = system_matrix(geom, like)
    nx, ny, nz = like.dims[0], like.dims[1], sino.n_slices
    flat = mat.T @ sino.data.reshape(geom.n_rays, nz)
    data = flat.reshape(nx, ny, nz, order="F")
    return Volume(data, like.spacing, Kind.GENERIC)


def apply_factors(expected: Sinogram, f: SystemFactors) -> Sinogram:
    """ybar_i = n_i * a_i * (G u)_i + b_i."""
    if expected.data.shape != f.attenuation.data.shape:
        raise ProjectorError("factor shapes do not match the sinogram")
    return expected.with_data(f.na * expected.data + f.background.data, Variant.EXPECTED)


def sensitivity_image(factors: SystemFactors, geom: Geometry2D, like: Volume) -> Volume:
    """Back-projection of n*a: s_j = sum_i g_ij n_i a_i."""
    return back_project(Sinogram(geom, factors.na), geom, like)


def attenuation_factors(
    labels: Volume,
    geom: Geometry2D,
    mu_per_class: dict[int, float] | None = None,
) -> SystemFactors:
    """Physically consistent factors from the phantom labels; n = 1, b = 0."""
    mu_per_class = DEFAULT_MU_PER_CLASS if mu_per_class is None else mu_per_class
    mu = np.zeros(labels.dims)
    for cls, val in mu_per_class.items():
        mu[labels.data == cls] = val
    line_integrals = forward_project(Volume(mu, labels.spacing), geom)
    atten = np.exp(-line_integrals.data)
    ones = np.ones_like(atten)
    return SystemFactors(
        Sinogram(geom, atten),
        Sinogram(geom, ones),
        Sinogram(geom, np.zeros_like(atten)),
    )


def sample_poisson(expected: Sinogram, rng: RngStream) -> Sinogram:
    """Independent Poisson draw per bin; deterministic in rng."""
    if expected.variant != Variant.EXPECTED:
        raise ProjectorError("sample_poisson needs an expected-variant sinogram")
    counts = rng.generator().poisson(expected.data).astype(np.float64)
    return expected.with_data(counts, Variant.COUNTS)


def decimate(counts: Sinogram, fraction: float, rng: RngStream) -> Sinogram:
    """Binomial thinning per bin: the sinogram-domain equivalent of listmode
    event thinning, so thinned data remain Poisson with scaled mean."""
    if not 0 < fraction <= 1:
        raise ProjectorError(f"fraction must lie in (0, 1], got {fraction}")
    if counts.variant != Variant.COUNTS:
        raise ProjectorError("decimate needs a counts-variant sinogram")
    if fraction == 1.0:
        return counts.with_data(counts.data.copy())
    n = counts.data.astype(np.int64)
    thinned = rng.generator().binomial(n, fraction).astype(np.float64)
    return counts.with_data(thinned, Variant.COUNTS)


def scale_to_counts(expected: Sinogram, total: float) -> tuple[Sinogram, float]:
    """Scale an expected sinogram so its total equals `total`; returns scale."""
    s = expected.data.sum()
    if s <= 0:
        raise ProjectorError("cannot scale an all-zero sinogram to a count total")
    scale = total / s
    return expected.with_data(expected.data * scale), scale


def save_sinogram(sino: Sinogram, path: str | os.PathLike) -> None:
    path = os.fspath(path)
    g = sino.geometry
    header = SINO_MAGIC + _SINO_HEADER.pack(
        g.n_angles, g.n_bins, sino.n_slices, g.bin_spacing, int(sino.variant)
    )
    payload = sino.data.ravel(order="F").tobytes()
    dirname = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(prefix=".sinowrite_", dir=dirname)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_sinogram(path: str | os.PathLike) -> Sinogram:
    with open(path, "rb") as fh:
        magic = fh.read(len(SINO_MAGIC))
        if magic != SINO_MAGIC:
            raise ProjectorError(f"{path}: expected magic {SINO_MAGIC!r}, found {magic!r}")
        raw = fh.read(_SINO_HEADER.size)
        if len(raw) < _SINO_HEADER.size:
            raise ProjectorError(f"{path}: truncated header")
        n_angles, n_bins, n_slices, bin_spacing, variant = _SINO_HEADER.unpack(raw)
        payload = fh.read(n_angles * n_bins * n_slices * 8)
    n = len(payload) // 8
    if n != n_angles * n_bins * n_slices:
        raise ProjectorError(f"{path}: payload holds {n} scalars, header promises more")
    data = np.frombuffer(payload, dtype="<f8").reshape(
        (n_angles, n_bins, n_slices), order="F"
    )
    return Sinogram(Geometry2D(n_angles, n_bins, bin_spacing), data, Variant(variant))
