"""3D pseudo-anatomical synthesis from a 3D condition volume with a 2D model.

Each reverse-diffusion step updates every axial slice independently, then an
inter-slice consistency step solves

    argmin_X ||X - Y||^2 + tau * ||D_z X||_1

by gradient descent on the smoothed objective (|d| ~ sqrt(d^2 + eps^2)), which
suppresses slice-direction artifacts of slice-by-slice synthesis.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .diffusion import NoiseSchedule, learned_sigma, reverse_step_mean
from .network import denormalize, normalize_volume
from .rng import RngStream
from .volume import Kind, Volume


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    tau: float = 0.05
    tv_steps: int = 10
    tv_step_size: float = 0.1
    tv_smooth_eps: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.tau < 0:
            raise SynthError("tau must be >= 0")
        if self.tau > 0 and self.tv_steps < 1:
            raise SynthError("tv_steps must be >= 1 when tau > 0")
        if self.tv_smooth_eps <= 0:
            raise SynthError("tv_smooth_eps must be positive")


def slice_update(
    model,
    X_t: Volume,
    C: Volume,
    t: int,
    sched: NoiseSchedule,
    rng: RngStream,
    slice_rngs: list[RngStream] | None = None,
    clip_x0: tuple[float, float] | None = None,
) -> Volume:
    """One reverse step applied to every axial slice independently.

    Slice i draws its noise from slice_rngs[i] if given, else rng.substream(i),
    so permuting slices together with their streams permutes the output.  The
    final step (t = 1) is noiseless.
    """
    if X_t.dims != C.dims:
        raise SynthError(f"volume dims differ: {X_t.dims} vs {C.dims}")
    nz = X_t.dims[2]
    stack = np.moveaxis(X_t.data, 2, 0)  # (nz, nx, ny)
    cond = np.moveaxis(C.data, 2, 0)
    eps_hat, v = model.predict_batch(stack, np.full(nz, t), cond)
    mu = reverse_step_mean(stack, t, eps_hat, sched, clip_x0)
    if t > 1:
        sigma = learned_sigma(v, t, sched)
        out = np.empty_like(mu)
        for i in range(nz):
            stream = slice_rngs[i] if slice_rngs is not None else rng.substream(i)
            out[i] = mu[i] + sigma[i] * stream.normal(mu[i].shape)
    else:
        out = mu
    return Volume(np.moveaxis(out, 0, 2), X_t.spacing, Kind.GENERIC)


def tv_objective(X: np.ndarray, Y: np.ndarray, tau: float, eps: float) -> float:
    dz = np.diff(X, axis=2)
    return float(np.sum((X - Y) ** 2) + tau * np.sum(np.sqrt(dz**2 + eps**2)))


def tv_denoise_z(Y: Volume, tau: float, cfg: SynthConfig) -> Volume:
    """Gradient descent on the smoothed slice-consistency objective.

    Accepts only steps that do not increase the objective (per-iteration step
    halving), so the objective is non-increasing; tau = 0 returns Y exactly.
    """
    if tau < 0:
        raise SynthError("tau must be >= 0")
    if tau == 0.0:
        return Y.with_data(Y.data.copy())
    eps = cfg.tv_smooth_eps
    X = Y.data.copy()
    obj = tv_objective(X, Y.data, tau, eps)
    if not np.isfinite(obj):
        raise SynthError("non-finite TV objective")
    for _ in range(cfg.tv_steps):
        dz = np.diff(X, axis=2)
        w = dz / np.sqrt(dz**2 + eps**2)
        grad = 2.0 * (X - Y.data)
        grad[:, :, :-1] -= tau * w
        grad[:, :, 1:] += tau * w
        step = cfg.tv_step_size
        accepted = False
        for _ in range(30):
            trial = X - step * grad
            trial_obj = tv_objective(trial, Y.data, tau, eps)
            if trial_obj <= obj:
                X, obj = trial, trial_obj
                accepted = True
                break
            step /= 2.0
        if not accepted:
            break  # stationary at this resolution
    return Y.with_data(X)


def synthesize_volume(
    model,
    C: Volume,
    sched: NoiseSchedule,
    cfg: SynthConfig,
    manifest: dict | None = None,
) -> Volume:
    """Full reverse trajectory: per-slice updates interleaved with the TV step.

    The condition volume is normalized per-volume onto [-1, 1]; the output is
    mapped onto the anatomical range recorded in the model manifest.  Noise
    layout: stream 0 = initial volume, stream t = step-t slice noise.
    """
    manifest = manifest if manifest is not None else getattr(model, "manifest", None)
    if manifest is None:
        raise SynthError("model carries no synthesis manifest")
    nx, ny, nz = C.dims
    sdims = tuple(manifest.get("slice_dims", (nx, ny)))
    if sdims != (nx, ny):
        raise SynthError(f"model expects slices {sdims}, condition has {(nx, ny)}")
    if "mri_lo" not in manifest or "mri_hi" not in manifest:
        raise SynthError("manifest lacks the anatomical intensity range")

    cond, _, _ = normalize_volume(C.data)
    Cn = Volume(cond, C.spacing, Kind.GENERIC)
    stream = RngStream(cfg.seed)
    init = stream.substream(0)
    data = np.empty(C.dims)
    for i in range(nz):
        data[:, :, i] = init.substream(i).normal((nx, ny))
    X = Volume(data, C.spacing, Kind.GENERIC)
    for t in range(sched.T, 0, -1):
        Y = slice_update(model, X, Cn, t, sched, stream.substream(t), clip_x0=(-1.0, 1.0))
        X = tv_denoise_z(Y, cfg.tau, cfg)
    out = denormalize(X.data, manifest["mri_lo"], manifest["mri_hi"])
    return Volume(out, C.spacing, Kind.ANATOMICAL)


def z_total_variation(vol: Volume) -> float:
    """Mean |D_z| over the volume: the slice-artifact surrogate."""
    return float(np.mean(np.abs(np.diff(vol.data, axis=2))))


def grid_search_tau(
    model,
    val_pairs: list[tuple[Volume, Volume]],
    tau_grid: list[float],
    sched: NoiseSchedule,
    cfg: SynthConfig,
    manifest: dict | None = None,
) -> tuple[float, list[tuple[float, float]]]:
    """Pick the tau minimizing mean synthesized-vs-true RMSE on validation.

    Ties and duplicates resolve to the earliest grid entry (strict improvement
    only).  Each pair keeps the same seed across taus (paired comparison).
    Returns (best_tau, [(tau, mean_rmse), ...]).
    """
    if not val_pairs or not tau_grid:
        raise SynthError("grid search needs a non-empty grid and validation set")
    rows = []
    best_tau, best = None, np.inf
    for tau in tau_grid:
        rmses = []
        for i, (pet, mri) in enumerate(val_pairs):
            pair_cfg = replace(cfg, tau=float(tau), seed=cfg.seed + 1_000_003 * i)
            synth = synthesize_volume(model, pet, sched, pair_cfg, manifest)
            rmses.append(float(np.sqrt(np.mean((synth.data - mri.data) ** 2))))
        mean_rmse = float(np.mean(rmses))
        rows.append((float(tau), mean_rmse))
        if mean_rmse < best:
            best_tau, best = float(tau), mean_rmse
    return best_tau, rows
