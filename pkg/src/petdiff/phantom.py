"""Paired synthetic brain-like phantoms.

Generates a tissue-label volume (background/CSF/GM/WM), a T1w-like anatomical
volume, an FDG-like activity volume and named VOI masks on a shared grid.
Contrast relations follow the usual FDG brain picture: gray matter activity
2.5-4.1x white matter, T1w intensity WM > GM > CSF, near-cold CSF activity.
Everything is a deterministic function of the config (texture noise included).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation, gaussian_filter

from .rng import RngStream
from .volume import Kind, Volume

BACKGROUND, CSF, GM, WM = 0, 1, 2, 3

# Geometry constants (fractions of the brain ellipsoid radius).
_CSF_RIM_R = 0.95
_CORTEX_BASE_R = 0.80
_FOLD_AMP = 0.05
_FOLD_WAVES = 5
_DEEP_MARGIN = 0.01          # blobs stay below cortex by this much
_REGION_SMALLEST_FRAC = 0.02  # smallest subcortical region vs brain volume
_REGION_GROWTH = 1.15         # graded region sizes
_CSF_ACTIVITY_FRAC = 0.05     # near-cold CSF


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (64, 64, 32)
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    gm_wm_activity_ratio: float = 3.0
    mri_class_means: dict = field(
        default_factory=lambda: {CSF: 0.15, GM: 0.50, WM: 0.85}
    )
    mri_class_sd: float = 0.04
    activity_class_sd: float = 0.08
    n_subcortical_regions: int = 4
    texture_correlation_length: float = 6.0  # mm
    seed: int = 0

    def __post_init__(self):
        if not 2.5 <= self.gm_wm_activity_ratio <= 4.1:
            raise PhantomError(
                f"gm_wm_activity_ratio must lie in [2.5, 4.1], got {self.gm_wm_activity_ratio}"
            )
        m = self.mri_class_means
        if not (m[WM] > m[GM] > m[CSF] >= 0):
            raise PhantomError(f"MRI class means must satisfy WM > GM > CSF >= 0, got {m}")
        if self.mri_class_sd < 0 or self.activity_class_sd < 0:
            raise PhantomError("class sds must be non-negative")
        if self.n_subcortical_regions < 0:
            raise PhantomError("n_subcortical_regions must be non-negative")


@dataclass(frozen=True)
class PhantomPair:
    labels: Volume
    mri: Volume
    pet: Volume
    vois: dict[str, Volume]

    def __post_init__(self):
        for name, v in {"mri": self.mri, "pet": self.pet, **self.vois}.items():
            if not self.labels.same_grid(v):
                raise PhantomError(f"volume {name} not on the label grid")
        for name, v in self.vois.items():
            if not np.any(v.data):
                raise PhantomError(f"VOI {name} is empty")


def _grids(dims, spacing):
    nx, ny, nz = dims
    sx, sy, sz = spacing
    x = (np.arange(nx) - (nx - 1) / 2.0) * sx
    y = (np.arange(ny) - (ny - 1) / 2.0) * sy
    z = (np.arange(nz) - (nz - 1) / 2.0) * sz
    return np.meshgrid(x, y, z, indexing="ij")


def _ellipsoid(X, Y, Z, center, semi):
    cx, cy, cz = center
    a, b, c = semi
    return ((X - cx) / a) ** 2 + ((Y - cy) / b) ** 2 + ((Z - cz) / c) ** 2 <= 1.0


def generate_phantom(cfg: PhantomConfig) -> PhantomPair:
    """Build one phantom pair; deterministic in cfg.seed.

    Raises PhantomError when the grid is too small to host all subcortical
    regions with a one-voxel separation margin.
    """
    nx, ny, nz = cfg.dims
    if min(nx, ny) < 16 or nz < 4:
        raise PhantomError(f"dims {cfg.dims} too small for a structured phantom")
    X, Y, Z = _grids(cfg.dims, cfg.spacing)

    # Brain ellipsoid and normalized radius / angle fields.
    ax = 0.82 * nx * cfg.spacing[0] / 2.0
    ay = 0.88 * ny * cfg.spacing[1] / 2.0
    az = 0.88 * nz * cfg.spacing[2] / 2.0
    r = np.sqrt((X / ax) ** 2 + (Y / ay) ** 2 + (Z / az) ** 2)
    theta = np.arctan2(Y / ay, X / ax)
    zhat = np.clip(Z / az, -1.0, 1.0)

    # Folded cortical boundary between WM interior and the GM ribbon.
    fold = _FOLD_AMP * np.sin(_FOLD_WAVES * theta + 2.0) * np.cos(np.pi * zhat / 2.0)
    cortex_r = _CORTEX_BASE_R + fold

    labels = np.full(cfg.dims, float(BACKGROUND))
    labels[r <= 1.0] = CSF                      # outer rim
    labels[r <= _CSF_RIM_R] = GM                # cortical ribbon
    labels[r <= cortex_r] = WM                  # interior

    # Central ventricle: a compact in-brain CSF pocket (cold region).
    vent = _ellipsoid(
        X, Y, Z,
        (0.0, -0.05 * ay, 0.10 * az),
        (0.06 * ax, 0.14 * ay, 0.12 * az),
    )
    vent &= r <= cortex_r
    labels[vent] = CSF

    region_masks = _place_subcortical_regions(cfg, X, Y, Z, r, cortex_r, vent, ax, ay, az)
    for mask in region_masks:
        labels[mask] = GM

    for cls, name in ((CSF, "CSF"), (GM, "GM"), (WM, "WM")):
        if not np.any(labels == cls):
            raise PhantomError(f"dims {cfg.dims} too small: class {name} came out empty")

    # Smooth within-class textures: PET shares most of the MRI texture plus an
    # independent component, so the within-class MRI-PET correlation is
    # positive (the guidance premise) without being degenerate.
    sigma_vox = tuple(cfg.texture_correlation_length / s for s in cfg.spacing)
    stream = RngStream(cfg.seed)

    def _field(sub: int) -> np.ndarray:
        f = gaussian_filter(stream.substream(sub).normal(cfg.dims), sigma_vox, mode="nearest")
        std = f.std()
        return f / std if std > 0 else f

    tex_mri = _field(0)
    tex_pet = 0.8 * tex_mri + 0.6 * _field(1)

    act_means = {
        BACKGROUND: 0.0,
        CSF: _CSF_ACTIVITY_FRAC,
        GM: cfg.gm_wm_activity_ratio,
        WM: 1.0,
    }
    mri_means = {BACKGROUND: 0.0, **cfg.mri_class_means}
    inside = labels != BACKGROUND

    mri = np.zeros(cfg.dims)
    pet = np.zeros(cfg.dims)
    for cls in (CSF, GM, WM):
        sel = labels == cls
        mri[sel] = mri_means[cls]
        pet[sel] = act_means[cls]
    mri[inside] += cfg.mri_class_sd * tex_mri[inside]
    pet[inside] += cfg.activity_class_sd * tex_pet[inside]

    vois: dict[str, Volume] = {}
    counts = [int(m.sum()) for m in region_masks]
    order = np.argsort(counts, kind="stable")
    if len(order) > 1 and any(counts[order[i]] >= counts[order[i + 1]] for i in range(len(order) - 1)):
        raise PhantomError("subcortical region volumes are not strictly increasing")
    for rank, idx in enumerate(order):
        vois[f"region_{rank + 1:02d}"] = Volume(
            region_masks[idx].astype(float), cfg.spacing, Kind.MASK
        )
    class_masks = {name: labels == cls for cls, name in ((CSF, "csf"), (GM, "gm"), (WM, "wm"))}
    for name in sorted(class_masks, key=lambda n: class_masks[n].sum()):
        vois[name] = Volume(class_masks[name].astype(float), cfg.spacing, Kind.MASK)

    return PhantomPair(
        labels=Volume(labels, cfg.spacing, Kind.LABEL),
        mri=Volume(mri, cfg.spacing, Kind.ANATOMICAL),
        pet=Volume(pet, cfg.spacing, Kind.ACTIVITY),
        vois=vois,
    )


def _place_subcortical_regions(cfg, X, Y, Z, r, cortex_r, vent, ax, ay, az):
    """Greedy deterministic placement of compact blobs below the cortex."""
    n = cfg.n_subcortical_regions
    if n == 0:
        return []
    brain_mm3 = 4.0 / 3.0 * np.pi * ax * ay * az
    # Largest first: hardest to place.
    fracs = [_REGION_SMALLEST_FRAC * _REGION_GROWTH**i for i in range(n)][::-1]

    deep = r <= (cortex_r - _DEEP_MARGIN)
    taken = binary_dilation(vent, iterations=1)
    candidates = []
    for rho in (0.42, 0.40, 0.44, 0.46, 0.38):
        for k in range(16):
            psi = np.pi / 16 + k * np.pi / 8
            for zh in (0.0, -0.18, 0.18, -0.32, 0.32):
                candidates.append(
                    (rho * np.cos(psi) * ax, rho * np.sin(psi) * ay, zh * az)
                )

    placed = []
    for frac in fracs:
        # Brain-proportional axes: the blob is a ball in normalized coords.
        t = frac ** (1.0 / 3.0)
        semi = (t * ax, t * ay, t * az)
        ok = None
        for center in candidates:
            blob = _ellipsoid(X, Y, Z, center, semi)
            if not np.any(blob):
                continue
            if np.all(deep[blob]) and not np.any(taken & binary_dilation(blob, iterations=1)):
                ok = blob
                break
        if ok is None:
            raise PhantomError(
                f"dims {cfg.dims} too small to place {n} subcortical regions"
            )
        placed.append(ok)
        taken |= binary_dilation(ok, iterations=1)
    return placed[::-1]  # back to smallest-first


def split_dataset(pairs: list, n_train: int, n_val: int, n_test: int):
    """Deterministic order-preserving partition into train/val/test lists."""
    if min(n_train, n_val, n_test) < 0:
        raise PhantomError("split counts must be non-negative")
    if n_train + n_val + n_test != len(pairs):
        raise PhantomError(
            f"split {n_train}+{n_val}+{n_test} != {len(pairs)} available items"
        )
    return (
        list(pairs[:n_train]),
        list(pairs[n_train : n_train + n_val]),
        list(pairs[n_train + n_val :]),
    )
