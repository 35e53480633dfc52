"""Denoising diffusion core: schedules, forward/reverse process, sampling.

2D slices are plain float64 ndarrays.  Timesteps t run 1..T; alpha_bar(0) = 1.
The reverse-step standard deviation interpolates geometrically between the
posterior lower bound beta_tilde_t and beta_t via a learned per-pixel v in
[0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import RngStream

ALPHA_BAR_T_MAX = 1e-4  # x_T must be near-Gaussian


class ScheduleError(ValueError):
    pass


class DiffusionError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    beta_start: float
    beta_end: float
    beta: np.ndarray        # beta[t-1] holds beta_t, t = 1..T
    alpha: np.ndarray
    alpha_bar: np.ndarray   # alpha_bar[t-1] holds cumulative product up to t
    beta_tilde: np.ndarray  # posterior variance lower bound; beta_tilde_1 = beta_1

    @property
    def T(self) -> int:
        return self.beta.size

    def beta_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def beta_tilde_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.beta_tilde[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise DiffusionError(f"timestep {t} outside [1, {self.T}]")


def make_schedule(
    T: int, kind: str = "linear", beta_start: float = 1e-4, beta_end: float = 0.1
) -> NoiseSchedule:
    """Build and validate a variance schedule.

    linear: beta_t interpolates (beta_start, beta_end).  cosine: alpha_bar
    follows the squared-cosine profile (endpoints ignored, betas clipped below
    0.999).  Fails if alpha_bar_T >= 1e-4, since sampling starts from N(0, I).
    """
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if kind == "linear":
        if not 0 < beta_start <= beta_end < 1:
            raise ScheduleError(
                f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )
        beta = np.linspace(beta_start, beta_end, T)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1) / T
        f = np.cos((steps + s) / (1 + s) * np.pi / 2.0) ** 2
        ab = f / f[0]
        beta = np.clip(1.0 - ab[1:] / ab[:-1], 1e-8, 0.999)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")

    if np.any(beta <= 0) or np.any(beta >= 1):
        raise ScheduleError("beta_t must lie in (0, 1) for all t")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if np.any(np.diff(alpha_bar) >= 0):
        raise ScheduleError("alpha_bar must be strictly decreasing")
    if alpha_bar[-1] >= ALPHA_BAR_T_MAX:
        raise ScheduleError(
            f"alpha_bar_T = {alpha_bar[-1]:.3g} >= {ALPHA_BAR_T_MAX}; "
            "increase T or beta_end so x_T is near-Gaussian"
        )
    prev = np.concatenate(([1.0], alpha_bar[:-1]))
    beta_tilde = beta * (1.0 - prev) / (1.0 - alpha_bar)
    beta_tilde[0] = beta[0]
    for arr in (beta, alpha, alpha_bar, beta_tilde):
        arr.setflags(write=False)
    return NoiseSchedule(kind, float(beta_start), float(beta_end), beta, alpha, alpha_bar, beta_tilde)


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps."""
    ab = sched.alpha_bar_at(t)
    if t < 1:
        raise DiffusionError("q_sample needs t >= 1")
    if x0.shape != eps.shape:
        raise DiffusionError("x0 and eps shapes differ")
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def posterior_mean_q(x_t: np.ndarray, x0: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Tractable reverse-posterior mean given x_0 (alpha_bar_0 = 1)."""
    a = sched.alpha_at(t)
    ab = sched.alpha_bar_at(t)
    ab_prev = sched.alpha_bar_at(t - 1)
    return (np.sqrt(a) * (1.0 - ab_prev) * x_t + np.sqrt(ab_prev) * (1.0 - a) * x0) / (1.0 - ab)


def reverse_mean_from_eps(
    x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule
) -> np.ndarray:
    """mu_theta = (x_t - (1-alpha_t)/sqrt(1-alpha_bar_t) eps_hat) / sqrt(alpha_t)."""
    a = sched.alpha_at(t)
    ab = sched.alpha_bar_at(t)
    return (x_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)


def reverse_mean(model, x_t: np.ndarray, t: int, c: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    eps_hat, _ = model.predict(x_t, t, c)
    return reverse_mean_from_eps(x_t, t, eps_hat, sched)


def learned_sigma(v: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Per-pixel std: sigma^2 = exp(v log beta_t + (1-v) log beta_tilde_t)."""
    v = np.asarray(v)
    if np.any(v < 0) or np.any(v > 1):
        raise DiffusionError("v must lie in [0, 1]")
    log_var = v * np.log(sched.beta_at(t)) + (1.0 - v) * np.log(sched.beta_tilde_at(t))
    return np.exp(0.5 * log_var)


class EpsilonModel:
    """Denoiser interface: predict(x_t, t, c) -> (eps_hat, v)."""

    def predict(self, x_t: np.ndarray, t: int, c: np.ndarray):
        raise NotImplementedError

    def predict_batch(self, x_t: np.ndarray, ts: np.ndarray, c: np.ndarray):
        eps = np.empty_like(x_t)
        v = np.empty_like(x_t)
        for i in range(x_t.shape[0]):
            eps[i], v[i] = self.predict(x_t[i], int(ts[i]), c[i])
        return eps, v


@dataclass(frozen=True)
class GaussianOracle(EpsilonModel):
    """Closed-form optimal denoiser for data ~ N(m, s^2 I); ignores the condition.

    eps*(x_t, t) = sqrt(1-ab) (x_t - sqrt(ab) m) / (ab s^2 + 1 - ab), from
    Gaussian conjugacy of the forward marginal.  The variance channel returns
    the v* whose interpolated sigma^2 equals the exact reverse-posterior
    variance beta_tilde_t + coef_x0^2 Var[x0 | x_t]; that variance lies in
    [beta_tilde_t, beta_t], hitting the endpoints at s = 0 and s = 1.
    """

    m: float
    s: float
    sched: NoiseSchedule

    def predict(self, x_t: np.ndarray, t: int, c: np.ndarray | None = None):
        sched = self.sched
        ab = sched.alpha_bar_at(t)
        s2 = self.s**2
        eps = np.sqrt(1.0 - ab) * (x_t - np.sqrt(ab) * self.m) / (ab * s2 + 1.0 - ab)

        beta, btilde = sched.beta_at(t), sched.beta_tilde_at(t)
        if beta > btilde:
            coef_x0 = np.sqrt(sched.alpha_bar_at(t - 1)) * beta / (1.0 - ab)
            var_x0 = s2 * (1.0 - ab) / (ab * s2 + 1.0 - ab)
            true_var = btilde + coef_x0**2 * var_x0
            v = (np.log(true_var) - np.log(btilde)) / (np.log(beta) - np.log(btilde))
            v = float(np.clip(v, 0.0, 1.0))
        else:
            v = 0.0  # t = 1: beta_tilde_1 = beta_1, interpolation degenerate
        return eps, np.full_like(x_t, v)


def gaussian_oracle(m: float, s: float, sched: NoiseSchedule) -> GaussianOracle:
    if s <= 0:
        raise DiffusionError("oracle needs s > 0")
    return GaussianOracle(m, s, sched)


def reverse_step_mean(
    x_t: np.ndarray,
    t: int,
    eps_hat: np.ndarray,
    sched: NoiseSchedule,
    clip_x0: tuple[float, float] | None = None,
) -> np.ndarray:
    """Reverse-step mean; optionally clamps the implied x0 to the data range.

    Without clipping this is algebraically identical to reverse_mean_from_eps;
    with it, the x0 implied by eps_hat is clipped before re-entering the
    posterior mean, which keeps the chain bounded for imperfect denoisers.
    """
    if clip_x0 is None:
        return reverse_mean_from_eps(x_t, t, eps_hat, sched)
    ab = sched.alpha_bar_at(t)
    x0_hat = (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    np.clip(x0_hat, clip_x0[0], clip_x0[1], out=x0_hat)
    return posterior_mean_q(x_t, x0_hat, t, sched)


def sample(
    model: EpsilonModel,
    c: np.ndarray,
    sched: NoiseSchedule,
    rng: RngStream,
    noise_source=None,
    clip_x0: tuple[float, float] | None = None,
) -> np.ndarray:
    """Ancestral sampling from x_T ~ N(0, I); the final step is noiseless.

    Noise layout: tag 0 is the initial x_T draw, tag t the step-t noise.
    `noise_source(tag, shape)` overrides the default rng-derived streams.
    """
    if noise_source is None:
        noise_source = lambda tag, shape: rng.substream(tag).normal(shape)
    x = noise_source(0, c.shape)
    for t in range(sched.T, 0, -1):
        eps_hat, v = model.predict(x, t, c)
        mu = reverse_step_mean(x, t, eps_hat, sched, clip_x0)
        if t > 1:
            x = mu + learned_sigma(v, t, sched) * noise_source(t, c.shape)
        else:
            x = mu
    return x
