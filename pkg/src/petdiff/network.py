"""Reference denoiser: a small conv net with analytic gradients, plus training.

Pure float64 numpy.  Input channels are {x_t, condition, sinusoidal timestep
embedding broadcast over the slice}; `depth` hidden 3x3 conv layers of `width`
channels with tanh; a zero-initialized 3x3 output conv produces the two
channels (eps_hat raw, v through a sigmoid).  Activations are kept in
(channels, batch, H, W) layout so im2col is a single big GEMM per layer.

Training: eps-matching MSE plus vlb_weight times the per-step Gaussian KL with
the mean channel detached (gradient reaches only the variance channel), Adam,
and an exponential moving average of the parameters.

Checkpoint format: magic "PDIFMDL1" | uint32 header length | JSON header
(architecture, schedule, normalization/manifest, parameter count) | parameter
vector float64 LE | EMA vector float64 LE.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .diffusion import (
    EpsilonModel,
    NoiseSchedule,
    make_schedule,
    posterior_mean_q,
    q_sample,
    reverse_mean_from_eps,
)
from .rng import RngStream

log = logging.getLogger(__name__)

MODEL_MAGIC = b"PDIFMDL1"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    n_epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 2e-3
    ema_decay: float = 0.995
    vlb_weight: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ModelError("learning_rate must be >= 0")
        if self.vlb_weight < 0:
            raise ModelError("vlb_weight must be >= 0")
        if not 0 <= self.ema_decay < 1:
            raise ModelError("ema_decay must lie in [0, 1)")


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding, sin/cos pairs over geometric frequencies."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def _im2col_into(cols: np.ndarray, pad: np.ndarray, H: int, W: int) -> np.ndarray:
    """Fill a reused (C, 9, N, H, W) buffer from a padded (C, N, H+2, W+2) one."""
    for k in range(9):
        di, dj = divmod(k, 3)
        cols[:, k] = pad[:, :, di : di + H, dj : dj + W]
    C = cols.shape[0]
    return cols.reshape(C * 9, -1)


def _col2im_into(dpad: np.ndarray, dcols: np.ndarray, H: int, W: int) -> None:
    """Adjoint scatter-add of _im2col_into; dpad is zeroed first."""
    dpad.fill(0.0)
    for k in range(9):
        di, dj = divmod(k, 3)
        dpad[:, :, di : di + H, dj : dj + W] += dcols[:, k]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class ConvDenoiser(EpsilonModel):
    """Trainable denoiser with exact parameter gradients (flat float64 vector)."""

    def __init__(self, width: int = 32, depth: int = 4, emb_dim: int = 8, seed: int = 0):
        if depth < 1 or width < 1:
            raise ModelError("width and depth must be >= 1")
        if emb_dim % 2 or emb_dim < 2:
            raise ModelError("emb_dim must be even and >= 2")
        self.width, self.depth, self.emb_dim, self.seed = width, depth, emb_dim, seed
        c_in = 2 + emb_dim
        chans = [c_in] + [width] * depth + [2]
        self._shapes = []
        for ci, co in zip(chans[:-1], chans[1:]):
            self._shapes.append(((co, ci * 9), (co,)))
        n = sum(np.prod(w) + np.prod(b) for w, b in self._shapes)
        self.params = np.zeros(int(n))
        self._views = []   # (co, ci*9) weight views + biases, flat-vector backed
        self._views3 = []  # same weights viewed as (co, ci, 9) for slab GEMMs
        self._offsets = []
        ofs = 0
        for wsh, bsh in self._shapes:
            nw, nb = int(np.prod(wsh)), int(np.prod(bsh))
            w = self.params[ofs : ofs + nw].reshape(wsh)
            b = self.params[ofs + nw : ofs + nw + nb]
            self._views.append((w, b))
            self._views3.append(w.reshape(wsh[0], wsh[1] // 9, 9))
            self._offsets.append((ofs, nw, nb))
            ofs += nw + nb
        self._init_params(seed)
        self._ema_raw = np.zeros_like(self.params)
        self._ema_decay = 0.0
        self._ema_steps = 0
        self._adam_m = np.zeros_like(self.params)
        self._adam_v = np.zeros_like(self.params)
        self._adam_t = 0
        self._ws: dict = {}  # reused work buffers keyed by (N, H, W)
        log.info("ConvDenoiser width=%d depth=%d: %d parameters", width, depth, self.n_params)

    def _workspace(self, N: int, H: int, W: int) -> dict:
        key = (N, H, W)
        ws = self._ws.get(key)
        if ws is None:
            ws = {}
            chans = [2 + self.emb_dim] + [self.width] * self.depth
            for i, C in enumerate(chans):
                ws[f"pad{i}"] = np.zeros((C, N, H + 2, W + 2))
            for C in set(chans):
                ws[f"cols{C}"] = np.empty((C, 9, N, H, W))
            ws[f"mm{self.width}"] = np.empty((self.width, N * H * W))
            ws["mm2"] = np.empty((2, N * H * W))
            ws["dpad"] = np.empty((self.width, N, H + 2, W + 2))
            self._ws[key] = ws
        return ws

    def _init_params(self, seed: int):
        stream = RngStream(seed)
        for i, (w, b) in enumerate(self._views):
            if i == len(self._views) - 1:
                w[:] = 0.0  # zero output layer: eps_hat = 0, v = 1/2 at init
            else:
                fan_in = w.shape[1]
                w[:] = stream.substream(i).normal(w.shape) / np.sqrt(fan_in)
            b[:] = 0.0

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def ema_params(self) -> np.ndarray:
        """Debiased exponential moving average (equals params before training)."""
        if self._ema_steps == 0:
            return self.params.copy()
        return self._ema_raw / (1.0 - self._ema_decay**self._ema_steps)

    def update_ema(self, decay: float) -> None:
        self._ema_decay = decay
        self._ema_steps += 1
        self._ema_raw *= decay
        self._ema_raw += (1.0 - decay) * self.params

    def set_ema(self, vec: np.ndarray) -> None:
        self._ema_raw = vec.copy()
        self._ema_decay = 0.5
        self._ema_steps = 10_000  # debias factor ~1: vec is already an average

    def set_params(self, vec: np.ndarray) -> None:
        if vec.shape != self.params.shape:
            raise ModelError("parameter vector size mismatch")
        self.params[:] = vec

    # forward / backward ---------------------------------------------------

    def forward_batch(self, x_t: np.ndarray, ts: np.ndarray, c: np.ndarray, keep_cache=False):
        """(N, H, W) inputs -> (eps_hat, v, cache).

        Work buffers are reused per input shape; a cache returned here is only
        valid until the next forward call of the same shape.
        """
        N, H, W = x_t.shape
        if x_t.shape != c.shape:
            raise ModelError("x_t and condition shapes differ")
        ws = self._workspace(N, H, W)
        pad = ws["pad0"]
        core = pad[:, :, 1 : H + 1, 1 : W + 1]
        core[0], core[1] = x_t, c
        for i in range(N):
            emb = timestep_embedding(int(ts[i]), self.emb_dim)
            core[2:, i] = emb[:, None, None]

        last = len(self._views) - 1
        for i, (w, b) in enumerate(self._views):
            C = w.shape[1] // 9
            F = w.shape[0]
            cols = _im2col_into(ws[f"cols{C}"], ws[f"pad{i}"], H, W)
            flat = ws["mm2"] if i == last else ws[f"mm{F}"]
            np.matmul(w, cols, out=flat)
            flat += b[:, None]
            if i < last:
                np.tanh(flat, out=flat)
                out_core = ws[f"pad{i + 1}"][:, :, 1 : H + 1, 1 : W + 1]
                out_core[:] = flat.reshape(F, N, H, W)
        raw_eps = flat[0].reshape(N, H, W).copy()
        v = _sigmoid(flat[1].reshape(N, H, W))
        cache = [ws[f"pad{i}"] for i in range(len(self._views))] if keep_cache else None
        return raw_eps, v, cache

    def backward_batch(self, cache, d_eps: np.ndarray, d_v_raw: np.ndarray) -> np.ndarray:
        """Gradient of a scalar loss wrt params; d_v_raw is wrt the raw v channel.

        `cache` must come from the immediately preceding forward_batch call
        with keep_cache=True (buffers are shared).
        """
        N, H, W = d_eps.shape
        ws = self._workspace(N, H, W)
        grad = np.zeros_like(self.params)
        d_flat = np.stack([d_eps, d_v_raw]).reshape(2, -1)
        for i in range(len(self._views) - 1, -1, -1):
            w, _ = self._views[i]
            C = w.shape[1] // 9
            if i < len(self._views) - 1:
                act = cache[i + 1][:, :, 1 : H + 1, 1 : W + 1].reshape(w.shape[0], -1)
                d_flat = d_flat * (1.0 - act**2)  # tanh'
            cols = _im2col_into(ws[f"cols{C}"], cache[i], H, W)
            ofs, nw, nb = self._offsets[i]
            grad[ofs : ofs + nw] = (d_flat @ cols.T).ravel()
            grad[ofs + nw : ofs + nw + nb] = d_flat.sum(axis=1)
            if i > 0:
                # reuse the cols buffer for the scattered input gradient
                d_cols = np.matmul(w.T, d_flat, out=cols)
                dpad = ws["dpad"]
                _col2im_into(dpad, d_cols.reshape(C, 9, N, H, W), H, W)
                d_flat = dpad[:, :, 1 : H + 1, 1 : W + 1].reshape(C, -1).copy()
        return grad

    def predict(self, x_t: np.ndarray, t: int, c: np.ndarray):
        eps, v, _ = self.forward_batch(x_t[None], np.array([t]), c[None])
        return eps[0], v[0]

    def predict_batch(self, x_t: np.ndarray, ts: np.ndarray, c: np.ndarray):
        eps, v, _ = self.forward_batch(x_t, np.asarray(ts), c)
        return eps, v


# training ------------------------------------------------------------------


def loss_and_grad(
    model: ConvDenoiser,
    x0s: np.ndarray,
    cs: np.ndarray,
    ts: np.ndarray,
    epss: np.ndarray,
    sched: NoiseSchedule,
    vlb_weight: float,
    frozen_eps_hat: np.ndarray | None = None,
):
    """Hybrid loss (pixel-mean eps MSE + weighted KL) and its exact gradient.

    The KL term holds the mean channel fixed: its gradient reaches only the
    raw variance output.  By default the frozen mean uses the live eps_hat
    (stop-gradient); passing `frozen_eps_hat` pins it to an explicit array,
    which makes the loss an ordinary differentiable function of the
    parameters so finite differences reproduce the analytic gradient exactly.
    Returns (loss, grad, parts) with parts = (mse, vlb).
    """
    N = x0s.shape[0]
    x_ts = np.empty_like(x0s)
    for i in range(N):
        x_ts[i] = q_sample(x0s[i], int(ts[i]), epss[i], sched)
    eps_hat, v, cache = model.forward_batch(x_ts, ts, cs, keep_cache=True)
    npix = eps_hat.size

    resid = eps_hat - epss
    mse = float(np.mean(resid**2))
    d_eps = 2.0 * resid / npix

    vlb = 0.0
    d_v_raw = np.zeros_like(v)
    if vlb_weight > 0:
        eps_for_mean = eps_hat if frozen_eps_hat is None else frozen_eps_hat
        for i in range(N):
            t = int(ts[i])
            beta, btilde = sched.beta_at(t), sched.beta_tilde_at(t)
            log_ratio = np.log(beta) - np.log(btilde)
            log_var = v[i] * np.log(beta) + (1.0 - v[i]) * np.log(btilde)
            var = np.exp(log_var)
            mu_q = posterior_mean_q(x_ts[i], x0s[i], t, sched)
            mu_th = reverse_mean_from_eps(x_ts[i], t, eps_for_mean[i], sched)
            num = btilde + (mu_q - mu_th) ** 2
            kl = 0.5 * (log_var - np.log(btilde)) + num / (2.0 * var) - 0.5
            vlb += float(kl.sum())
            d_kl_dv = 0.5 * log_ratio * (1.0 - num / var)
            d_v_raw[i] = d_kl_dv * v[i] * (1.0 - v[i])
        vlb /= npix
        d_v_raw *= vlb_weight / npix

    loss = mse + vlb_weight * vlb
    if not np.isfinite(loss):
        raise ModelError(
            f"non-finite training loss (t values {np.unique(ts)}, "
            f"|x_t| max {np.abs(x_ts).max():.3g}, |eps_hat| max {np.abs(eps_hat).max():.3g})"
        )
    grad = model.backward_batch(cache, d_eps, d_v_raw)
    return loss, grad, (mse, vlb)


def adam_step(model: ConvDenoiser, grad: np.ndarray, lr: float) -> None:
    b1, b2, eps = 0.9, 0.999, 1e-8
    model._adam_t += 1
    model._adam_m = b1 * model._adam_m + (1 - b1) * grad
    model._adam_v = b2 * model._adam_v + (1 - b2) * grad**2
    mhat = model._adam_m / (1 - b1**model._adam_t)
    vhat = model._adam_v / (1 - b2**model._adam_t)
    model.params -= lr * mhat / (np.sqrt(vhat) + eps)


def train_step(
    model: ConvDenoiser,
    batch: list,
    cfg: TrainConfig,
    sched: NoiseSchedule,
    rng: RngStream,
) -> float:
    """One optimizer step on a batch of (x0, c) slice pairs; updates EMA."""
    if not batch:
        raise ModelError("empty batch")
    x0s = np.stack([b[0] for b in batch])
    cs = np.stack([b[1] for b in batch])
    N = x0s.shape[0]
    ts = rng.substream(0).integers(1, sched.T + 1, (N,))
    epss = rng.substream(1).normal(x0s.shape)
    loss, grad, _ = loss_and_grad(model, x0s, cs, ts, epss, sched, cfg.vlb_weight)
    adam_step(model, grad, cfg.learning_rate)
    model.update_ema(cfg.ema_decay)
    return loss


def fit(
    model: ConvDenoiser,
    dataset: list,
    cfg: TrainConfig,
    sched: NoiseSchedule,
    rng: RngStream,
) -> list[float]:
    """Epoch loop over (x0, c) pairs; returns per-epoch mean losses."""
    if not dataset:
        raise ModelError("empty training dataset")
    losses = []
    for epoch in range(cfg.n_epochs):
        erng = rng.substream(epoch)
        order = erng.substream(0).permutation(len(dataset))
        epoch_losses = []
        for bstart in range(0, len(order), cfg.batch_size):
            idx = order[bstart : bstart + cfg.batch_size]
            batch = [dataset[i] for i in idx]
            brng = erng.substream(1 + bstart)
            epoch_losses.append(train_step(model, batch, cfg, sched, brng))
        losses.append(float(np.mean(epoch_losses)))
        log.info("epoch %d/%d: mean loss %.6f", epoch + 1, cfg.n_epochs, losses[-1])
    return losses


# checkpoints ----------------------------------------------------------------


def save_checkpoint(
    model: ConvDenoiser, sched: NoiseSchedule, manifest: dict, path: str | os.PathLike
) -> None:
    header = {
        "arch": {
            "width": model.width,
            "depth": model.depth,
            "emb_dim": model.emb_dim,
            "seed": model.seed,
        },
        "schedule": {
            "T": sched.T,
            "kind": sched.kind,
            "beta_start": sched.beta_start,
            "beta_end": sched.beta_end,
        },
        "n_params": model.n_params,
        "manifest": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = os.fspath(path)
    dirname = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(prefix=".mdlwrite_", dir=dirname)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(model.params.astype("<f8").tobytes())
            fh.write(model.ema_params.astype("<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike, use_ema: bool = True):
    """Returns (model, schedule, manifest); EMA weights by default."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MODEL_MAGIC))
        if magic != MODEL_MAGIC:
            raise ModelError(f"{path}: expected magic {MODEL_MAGIC!r}, found {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        n = header["n_params"]
        params = np.frombuffer(fh.read(n * 8), dtype="<f8")
        ema = np.frombuffer(fh.read(n * 8), dtype="<f8")
    if params.size != n or ema.size != n:
        raise ModelError(f"{path}: truncated parameter payload")
    arch = header["arch"]
    model = ConvDenoiser(arch["width"], arch["depth"], arch["emb_dim"], arch["seed"])
    model.set_params(np.array(ema if use_ema else params))
    model.set_ema(np.array(ema))
    s = header["schedule"]
    sched = make_schedule(s["T"], s["kind"], s["beta_start"], s["beta_end"])
    return model, sched, header["manifest"]


# data plumbing ---------------------------------------------------------------


def normalize_volume(data: np.ndarray, lo: float | None = None, hi: float | None = None):
    """Affine map of [lo, hi] (default: data range) onto [-1, 1]."""
    lo = float(data.min()) if lo is None else lo
    hi = float(data.max()) if hi is None else hi
    if hi <= lo:
        raise ModelError("degenerate intensity range")
    return 2.0 * (data - lo) / (hi - lo) - 1.0, lo, hi


def denormalize(data: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return (data + 1.0) / 2.0 * (hi - lo) + lo
