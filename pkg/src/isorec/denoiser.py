"""Noise-prediction models and their training loop.

Two implementations of the same interface: an analytic minimum-MSE denoiser
for known Gaussian data distributions (exact, used as a correctness oracle)
and a small residual convolutional network with hand-written reverse-mode
gradients (no external ML dependency, so the gradient contract is testable
against finite differences).
"""

from __future__ import annotations

import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .core import Image2D, RandomSource
from .schedule import NoiseSchedule

__all__ = [
    "DenoiserModel",
    "CallCounter",
    "GaussianDataSpec",
    "AnalyticGaussianDenoiser",
    "analytic_gaussian_denoiser",
    "TinyDenoiser",
    "TrainConfig",
    "TrainingFailure",
    "q_sample",
    "train_denoiser",
]

_FULL_COV_MAX_PIXELS = 256


class TrainingFailure(RuntimeError):
    """Raised when training cannot proceed; carries the failing step index."""

    def __init__(self, step: int, message: str):
        super().__init__(f"training failed at step {step}: {message}")
        self.step = step


def q_sample(x0: Image2D, t: int, noise: Image2D, schedule: NoiseSchedule) -> Image2D:
    """Forward-noise x0 to level t: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * noise."""
    if x0.shape != noise.shape:
        raise ValueError(f"x0 shape {x0.shape} does not match noise shape {noise.shape}")
    if not 0 <= t <= schedule.t_train:
        raise ValueError(f"timestep {t} outside [0, {schedule.t_train}]")
    ab = schedule.alpha_bars[t]
    return Image2D(np.sqrt(ab) * x0.data + np.sqrt(1.0 - ab) * noise.data)


class DenoiserModel(ABC):
    """Predicts the injected noise from a noisy image and its timestep."""

    input_range: tuple[float, float] = (-1.0, 1.0)
    schedule_id: str = ""

    @abstractmethod
    def predict_noise(self, x_t: Image2D, t: int, schedule: NoiseSchedule) -> Image2D:
        """Estimate the standard-normal noise mixed into ``x_t`` at level ``t``."""


class CallCounter(DenoiserModel):
    """Transparent wrapper counting ``predict_noise`` invocations."""

    def __init__(self, inner: DenoiserModel):
        self.inner = inner
        self.calls = 0
        self.input_range = inner.input_range
        self.schedule_id = inner.schedule_id

    def predict_noise(self, x_t, t, schedule):
        self.calls += 1
        return self.inner.predict_noise(x_t, t, schedule)


# ---------------------------------------------------------------------------
# Analytic Gaussian denoiser
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GaussianDataSpec:
    """Gaussian data distribution: per-pixel mean plus diagonal or full covariance.

    Exactly one of ``variance`` (diagonal, broadcastable to the image) and
    ``covariance`` (full, over d <= 256 flattened pixels) must be given.
    """

    mean: np.ndarray
    variance: np.ndarray | None = None
    covariance: np.ndarray | None = None

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        if (self.variance is None) == (self.covariance is None):
            raise ValueError("exactly one of variance and covariance must be given")
        if self.variance is not None:
            var = np.asarray(self.variance, dtype=np.float64)
            if np.any(var <= 0.0):
                raise ValueError("variances must be positive")
            object.__setattr__(self, "variance", var)
        else:
            cov = np.asarray(self.covariance, dtype=np.float64)
            if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
                raise ValueError(f"covariance must be square, got shape {cov.shape}")
            d = cov.shape[0]
            if d > _FULL_COV_MAX_PIXELS:
                raise ValueError(f"full covariance capped at {_FULL_COV_MAX_PIXELS} pixels, got {d}")
            if not np.allclose(cov, cov.T, atol=1e-12):
                raise ValueError("covariance must be symmetric")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                raise ValueError("covariance must be positive-definite") from None
            if mean.size not in (1, d):
                raise ValueError("mean length must match the covariance dimension")
            object.__setattr__(self, "covariance", cov)

    @property
    def is_diagonal(self) -> bool:
        return self.variance is not None


class AnalyticGaussianDenoiser(DenoiserModel):
    """Exact posterior-mean noise predictor for Gaussian data.

    With data x0 ~ N(m, S) and x_t = sqrt(ab)*x0 + sqrt(1-ab)*eps, the
    posterior mean is

        E[x0 | x_t] = m + sqrt(ab) * S (ab*S + (1-ab)*I)^-1 (x_t - sqrt(ab)*m)

    and the noise estimate follows by inverting the forward mix. The full
    covariance path caches one dense solve operator per timestep.
    """

    input_range = (-np.inf, np.inf)

    def __init__(self, spec: GaussianDataSpec):
        self.spec = spec
        self._gain_cache: dict[int, np.ndarray] = {}

    def _full_gain(self, t: int, ab: float) -> np.ndarray:
        # sqrt(ab) * S (ab*S + (1-ab)*I)^-1, dense; one per observed timestep
        gain = self._gain_cache.get(t)
        if gain is None:
            cov = self.spec.covariance
            d = cov.shape[0]
            system = ab * cov + (1.0 - ab) * np.eye(d)
            gain = np.sqrt(ab) * cov @ np.linalg.inv(system)
            self._gain_cache[t] = gain
        return gain

    def posterior_mean(self, x_t: Image2D, t: int, schedule: NoiseSchedule) -> Image2D:
        """E[x0 | x_t] under the data spec."""
        if not 1 <= t <= schedule.t_train:
            raise ValueError(f"timestep {t} outside [1, {schedule.t_train}]")
        ab = schedule.alpha_bars[t]
        s = np.sqrt(ab)
        if self.spec.is_diagonal:
            m = np.broadcast_to(self.spec.mean, x_t.shape)
            v = np.broadcast_to(self.spec.variance, x_t.shape)
            gain = s * v / (ab * v + (1.0 - ab))
            return Image2D(m + gain * (x_t.data - s * m))
        d = self.spec.covariance.shape[0]
        if x_t.data.size != d:
            raise ValueError(f"image has {x_t.data.size} pixels, covariance expects {d}")
        m = np.broadcast_to(self.spec.mean, (d,))
        centered = x_t.data.reshape(d) - s * m
        post = m + self._full_gain(t, ab) @ centered
        return Image2D(post.reshape(x_t.shape))

    def predict_noise(self, x_t: Image2D, t: int, schedule: NoiseSchedule) -> Image2D:
        if t == 0:
            raise ValueError("noise is undefined at t=0 (nothing was injected)")
        ab = schedule.alpha_bars[t]
        post = self.posterior_mean(x_t, t, schedule)
        return Image2D((x_t.data - np.sqrt(ab) * post.data) / np.sqrt(1.0 - ab))


def analytic_gaussian_denoiser(spec: GaussianDataSpec) -> AnalyticGaussianDenoiser:
    return AnalyticGaussianDenoiser(spec)


# ---------------------------------------------------------------------------
# Tiny trainable denoiser (manual reverse-mode gradients)
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # overflow-safe via tanh saturation: sigma(x) = (1 + tanh(x/2)) / 2
    half = np.asarray(0.5, dtype=x.dtype)
    return half * (1.0 + np.tanh(half * x))


def _silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def _silu_grad(x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _time_embedding(t: np.ndarray, dim: int, dtype) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (batch, dim)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


_conv_scratch = threading.local()


def _scratch_buffer(name: str, shape: tuple, dtype) -> np.ndarray:
    """Per-thread reusable work arrays; avoids page-faulting fresh megabyte
    allocations on every convolution call."""
    store = getattr(_conv_scratch, "buffers", None)
    if store is None:
        store = {}
        _conv_scratch.buffers = store
    key = (name, shape, np.dtype(dtype).str)
    buf = store.get(key)
    if buf is None:
        buf = np.empty(shape, dtype=dtype)
        store[key] = buf
    return buf


def _assemble_columns(x: np.ndarray) -> np.ndarray:
    """im2col for a 3x3 same-padding window; returns a per-thread scratch
    view of shape (batch*h*w, 9*c) that is only valid until the next call."""
    batch, h, wd, c_in = x.shape
    padded = _scratch_buffer("pad", (batch, h + 2, wd + 2, c_in), x.dtype)
    padded.fill(0)
    padded[:, 1:-1, 1:-1, :] = x
    cols = _scratch_buffer("cols", (batch, h, wd, 9, c_in), x.dtype)
    k = 0
    for i in range(3):
        for j in range(3):
            cols[:, :, :, k, :] = padded[:, i : i + h, j : j + wd, :]
            k += 1
    return cols.reshape(batch * h * wd, 9 * c_in)


def _conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-padding 3x3 convolution on (batch, h, w, c) data.

    The kernel is stored as (3, 3, c_in, c_out); neighborhoods are gathered
    with strided copies and contracted in one GEMM. The input itself is the
    backward cache (columns are re-assembled there).
    """
    batch, h, wd, c_in = x.shape
    c_out = w.shape[3]
    cols = _assemble_columns(x)
    out = cols @ w.reshape(9 * c_in, c_out) + b
    return out.reshape(batch, h, wd, c_out), x


def _conv3x3_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray, need_dx: bool):
    """Gradients of the 3x3 convolution w.r.t. weights, bias, and (optionally) input."""
    batch, h, wd, c_out = dout.shape
    c_in = w.shape[2]
    wmat = w.reshape(9 * c_in, c_out)
    dflat = dout.reshape(batch * h * wd, c_out)
    cols = _assemble_columns(x)
    dw = (cols.T @ dflat).reshape(w.shape)
    db = dflat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = _scratch_buffer("dcols", (batch * h * wd, 9 * c_in), dout.dtype)
    np.matmul(dflat, wmat.T, out=dcols)
    d6 = dcols.reshape(batch, h, wd, 9, c_in)
    dpad = _scratch_buffer("dpad", (batch, h + 2, wd + 2, c_in), dout.dtype)
    dpad.fill(0)
    k = 0
    for i in range(3):
        for j in range(3):
            dpad[:, i : i + h, j : j + wd, :] += d6[:, :, :, k, :]
            k += 1
    return dpad[:, 1:-1, 1:-1, :].copy(), dw, db


class TinyDenoiser(DenoiserModel):
    """Residual 3x3 conv network with a sinusoidal timestep embedding.

    Each block adds a learned per-channel projection of the timestep
    embedding, applies two activated convolutions, and adds the result back
    onto its input. The output convolution is zero-initialized so a fresh
    model predicts exactly zero noise. Forward/backward are hand-written;
    float32 is the working precision (and the checkpoint precision, so
    store/load round trips are bit-exact), while a float64 instance backs
    the finite-difference gradient gate.
    """

    def __init__(
        self,
        channels: int,
        blocks: int,
        emb_dim: int,
        params: dict[str, np.ndarray],
        dtype=np.float32,
    ):
        if channels < 1 or blocks < 1:
            raise ValueError("channels and blocks must be positive")
        if emb_dim < 2 or emb_dim % 2 != 0:
            raise ValueError("emb_dim must be a positive even number")
        self.channels = channels
        self.blocks = blocks
        self.emb_dim = emb_dim
        self.dtype = np.dtype(dtype)
        self.params = {name: np.asarray(p, dtype=self.dtype) for name, p in params.items()}
        self.metadata: dict = {}

    @classmethod
    def create(
        cls,
        channels: int = 16,
        blocks: int = 3,
        emb_dim: int = 32,
        rng: RandomSource | None = None,
        zero_init_output: bool = True,
        dtype=np.float32,
    ) -> "TinyDenoiser":
        rng = rng or RandomSource(0, stream=0)
        params: dict[str, np.ndarray] = {}

        def conv_init(c_in, c_out):
            std = np.sqrt(2.0 / (c_in * 9))
            return rng.normal((3, 3, c_in, c_out)) * std

        params["conv_in.w"] = conv_init(1, channels)
        params["conv_in.b"] = np.zeros(channels)
        for k in range(blocks):
            params[f"block{k}.time.w"] = rng.normal((channels, emb_dim)) / np.sqrt(emb_dim)
            params[f"block{k}.time.b"] = np.zeros(channels)
            params[f"block{k}.conv1.w"] = conv_init(channels, channels)
            params[f"block{k}.conv1.b"] = np.zeros(channels)
            params[f"block{k}.conv2.w"] = conv_init(channels, channels)
            params[f"block{k}.conv2.b"] = np.zeros(channels)
        if zero_init_output:
            params["conv_out.w"] = np.zeros((3, 3, channels, 1))
        else:
            params["conv_out.w"] = conv_init(channels, 1)
        params["conv_out.b"] = np.zeros(1)
        return cls(channels, blocks, emb_dim, params, dtype=dtype)

    @property
    def architecture(self) -> dict:
        return {"channels": self.channels, "blocks": self.blocks, "emb_dim": self.emb_dim}

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward / backward ------------------------------------------------

    def forward_batch(self, x: np.ndarray, t: np.ndarray):
        """Predict noise for a batch; returns (pred, cache) with x of shape (B, H, W)."""
        p = self.params
        x = np.asarray(x, dtype=self.dtype)
        emb = _time_embedding(t, self.emb_dim, self.dtype)
        h, in_x = _conv3x3_forward(x[:, :, :, None], p["conv_in.w"], p["conv_in.b"])
        block_caches = []
        for k in range(self.blocks):
            tb = emb @ p[f"block{k}.time.w"].T + p[f"block{k}.time.b"]
            u = h + tb[:, None, None, :]
            a = _silu(u)
            c1, _ = _conv3x3_forward(a, p[f"block{k}.conv1.w"], p[f"block{k}.conv1.b"])
            s = _silu(c1)
            c2, _ = _conv3x3_forward(s, p[f"block{k}.conv2.w"], p[f"block{k}.conv2.b"])
            block_caches.append((u, a, c1, s))
            h = h + c2
        g = _silu(h)
        y, _ = _conv3x3_forward(g, p["conv_out.w"], p["conv_out.b"])
        cache = (emb, in_x, block_caches, h, g)
        return y[:, :, :, 0], cache

    def backward_batch(self, dpred: np.ndarray, cache) -> dict[str, np.ndarray]:
        """Parameter gradients given d(loss)/d(pred); pairs with ``forward_batch``."""
        p = self.params
        emb, in_x, block_caches, h_final, g = cache
        grads: dict[str, np.ndarray] = {}

        dy = np.asarray(dpred, dtype=self.dtype)[:, :, :, None]
        dg, grads["conv_out.w"], grads["conv_out.b"] = _conv3x3_backward(
            dy, g, p["conv_out.w"], need_dx=True
        )
        dh = dg * _silu_grad(h_final)
        for k in range(self.blocks - 1, -1, -1):
            u, a, c1, s = block_caches[k]
            dc2 = dh
            ds, grads[f"block{k}.conv2.w"], grads[f"block{k}.conv2.b"] = _conv3x3_backward(
                dc2, s, p[f"block{k}.conv2.w"], need_dx=True
            )
            dc1 = ds * _silu_grad(c1)
            da, grads[f"block{k}.conv1.w"], grads[f"block{k}.conv1.b"] = _conv3x3_backward(
                dc1, a, p[f"block{k}.conv1.w"], need_dx=True
            )
            du = da * _silu_grad(u)
            dtb = du.sum(axis=(1, 2))
            grads[f"block{k}.time.w"] = dtb.T @ emb
            grads[f"block{k}.time.b"] = dtb.sum(axis=0)
            dh = dh + du
        _, grads["conv_in.w"], grads["conv_in.b"] = _conv3x3_backward(
            dh, in_x, p["conv_in.w"], need_dx=False
        )
        return grads

    def loss_and_grads(self, x_t: np.ndarray, t: np.ndarray, eps: np.ndarray):
        """Mean-squared noise-matching loss and its parameter gradients."""
        pred, cache = self.forward_batch(x_t, t)
        diff = pred - np.asarray(eps, dtype=self.dtype)
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        grads = self.backward_batch(2.0 * diff / diff.size, cache)
        return loss, grads

    def predict_noise(self, x_t: Image2D, t: int, schedule: NoiseSchedule) -> Image2D:
        if t < 1:
            raise ValueError(f"timestep must be >= 1, got {t}")
        pred, _ = self.forward_batch(x_t.data[None, :, :], np.array([t], dtype=np.float64))
        return Image2D(pred[0])


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters for the noise-matching training loop."""

    batch_size: int = 16
    steps: int = 2000
    learning_rate: float = 0.02
    seed: int = 0
    momentum: float = 0.9
    dataset_id: str = ""

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 1:
            raise ValueError("batch_size and steps must be positive")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def train_denoiser(
    model: TinyDenoiser,
    dataset: list[Image2D],
    schedule: NoiseSchedule,
    cfg: TrainConfig,
) -> tuple[TinyDenoiser, list[float]]:
    """Noise-matching training: per step, noise a batch to a uniform level and
    regress the injected noise under MSE. Updates the model in place (SGD with
    momentum) and returns it with the per-step loss trace.
    """
    if len(dataset) == 0:
        raise TrainingFailure(0, "dataset is empty")
    shape = dataset[0].shape
    if any(img.shape != shape for img in dataset):
        raise TrainingFailure(0, "dataset images must share one shape")
    images = np.stack([img.data for img in dataset]).astype(model.dtype)
    rng = RandomSource(cfg.seed, stream=1)
    velocity = {name: np.zeros_like(p) for name, p in model.params.items()}
    losses: list[float] = []
    for step in range(cfg.steps):
        idx = rng.integers(0, images.shape[0], (cfg.batch_size,))
        t = rng.integers(1, schedule.t_train + 1, (cfg.batch_size,)).astype(np.float64)
        eps = rng.normal((cfg.batch_size, *shape)).astype(model.dtype)
        ab = schedule.alpha_bars[t.astype(np.int64)][:, None, None].astype(model.dtype)
        x_t = np.sqrt(ab) * images[idx] + np.sqrt(1.0 - ab) * eps
        loss, grads = model.loss_and_grads(x_t, t, eps)
        if not np.isfinite(loss):
            raise TrainingFailure(step, f"non-finite loss {loss}")
        for name, g in grads.items():
            velocity[name] = cfg.momentum * velocity[name] - cfg.learning_rate * g
            model.params[name] += velocity[name]
        losses.append(loss)
    model.metadata.update(
        {
            "optimizer": "sgd-momentum",
            "momentum": cfg.momentum,
            "learning_rate": cfg.learning_rate,
            "batch_size": cfg.batch_size,
            "steps": cfg.steps,
            "seed": cfg.seed,
            "dataset": cfg.dataset_id,
            "dtype": model.dtype.name,
            "final_loss": losses[-1],
        }
    )
    model.schedule_id = schedule.describe()
    return model, losses
