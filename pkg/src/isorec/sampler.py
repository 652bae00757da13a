"""Reverse-time generation with sparse row conditioning and refine-in-loop.

The reconstruction loop walks the timestep plan backwards. At each plan step
it noises the padded condition to the target level once, then runs K inner
refinements: sample a reverse step, overwrite the known rows with the noised
condition, and (except on the last refinement or at the terminal level)
re-noise the composite back up one step so the next refinement can harmonize
generated and conditioned content.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .condition import pad_axial
from .core import Image2D, RandomSource, Volume3D, extract_axial_slice, gaussian_noise
from .denoiser import CallCounter, DenoiserModel, q_sample
from .schedule import NoiseSchedule, SigmaMode, TimestepPlan, sigma

__all__ = [
    "SamplerConfig",
    "SamplingFailure",
    "ReconstructionReport",
    "predict_x0",
    "ddpm_step",
    "ddim_step",
    "noise_condition",
    "sscs_compose",
    "renoise",
    "renoise_span",
    "reconstruct_slice",
    "reconstruct_volume",
]


class SamplingFailure(RuntimeError):
    """Raised on non-finite intermediates; carries the (timestep, refine) index."""

    def __init__(self, t: int, i: int, message: str = "non-finite intermediate"):
        super().__init__(f"sampling failed at step t={t}, refinement i={i}: {message}")
        self.t = t
        self.i = i


@dataclass(frozen=True)
class SamplerConfig:
    """Everything that determines a reconstruction besides data and model.

    ``sscs_period`` applies the condition composition on every n-th plan step
    (1 = every step). ``final_clamp`` overwrites the known rows of the output
    with the exact condition pixels. ``clip_x0`` clamps the per-step clean
    estimate to the canonical range; disable it for data that is not range
    bounded (e.g. unit-variance Gaussian benchmarks).
    """

    plan: TimestepPlan
    sigma_mode: SigmaMode = field(default_factory=SigmaMode.posterior)
    sscs_period: int = 1
    final_clamp: bool = True
    clip_x0: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.sscs_period < 1:
            raise ValueError(f"sscs_period must be >= 1, got {self.sscs_period}")


@dataclass
class ReconstructionReport:
    """Run record for a volume reconstruction."""

    alpha: int
    axes: tuple[str, ...]
    steps: int
    refine_count: int
    total_steps: int
    sigma_mode: str
    sscs_period: int
    final_clamp: bool
    clip_x0: bool
    seed: int
    schedule: str
    planes: int
    denoiser_calls: int
    elapsed_seconds: float
    output_shape: tuple[int, int, int]

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["axes"] = list(self.axes)
        d["output_shape"] = list(self.output_shape)
        return d


def predict_x0(x_t: Image2D, eps_hat: Image2D, t: int, schedule: NoiseSchedule) -> Image2D:
    """Invert the forward mix: (x_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t)."""
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"x_t shape {x_t.shape} does not match eps_hat shape {eps_hat.shape}")
    if not 1 <= t <= schedule.t_train:
        raise ValueError(f"timestep {t} outside [1, {schedule.t_train}]")
    ab = schedule.alpha_bars[t]
    return Image2D((x_t.data - np.sqrt(1.0 - ab) * eps_hat.data) / np.sqrt(ab))


def _clean_estimate(x_t, eps_hat, t_from, schedule, clip_x0):
    x0_hat = predict_x0(x_t, eps_hat, t_from, schedule).data
    if clip_x0:
        x0_hat = np.clip(x0_hat, -1.0, 1.0)
    return x0_hat


def _check_step_pair(schedule, t_from, t_to):
    if not 0 <= t_to < t_from <= schedule.t_train:
        raise ValueError(
            f"need 0 <= t_to < t_from <= {schedule.t_train}, got ({t_from}, {t_to})"
        )


def ddpm_step(
    x_t: Image2D,
    eps_hat: Image2D,
    t_from: int,
    t_to: int,
    sig: float,
    z: Image2D | None,
    schedule: NoiseSchedule,
    clip_x0: bool = True,
) -> Image2D:
    """Ancestral reverse step: posterior mean of the clean estimate plus sig * z.

    Consecutive plan steps are treated as adjacent, so the same formula
    drives both full-chain and accelerated sampling.
    """
    _check_step_pair(schedule, t_from, t_to)
    x0_hat = _clean_estimate(x_t, eps_hat, t_from, schedule, clip_x0)
    ab_from = schedule.alpha_bars[t_from]
    ab_to = schedule.alpha_bars[t_to]
    step_alpha = ab_from / ab_to
    step_beta = 1.0 - step_alpha
    mean = (
        np.sqrt(ab_to) * step_beta * x0_hat
        + np.sqrt(step_alpha) * (1.0 - ab_to) * x_t.data
    ) / (1.0 - ab_from)
    if z is None or sig == 0.0:
        return Image2D(mean)
    if z.shape != x_t.shape:
        raise ValueError(f"noise shape {z.shape} does not match image shape {x_t.shape}")
    return Image2D(mean + sig * z.data)


def ddim_step(
    x_t: Image2D,
    eps_hat: Image2D,
    t_from: int,
    t_to: int,
    sig: float,
    z: Image2D | None,
    schedule: NoiseSchedule,
    clip_x0: bool = True,
) -> Image2D:
    """Non-Markovian reverse step toward level t_to.

    The direction term re-derives the noise from the (possibly clipped)
    clean estimate, which keeps this step algebraically identical to
    ``ddpm_step`` when sig comes from the eta=1 schedule.
    """
    _check_step_pair(schedule, t_from, t_to)
    ab_from = schedule.alpha_bars[t_from]
    ab_to = schedule.alpha_bars[t_to]
    radicand = 1.0 - ab_to - sig * sig
    if radicand < 0.0:
        raise ValueError(f"sigma^2 = {sig * sig:g} exceeds 1 - alpha_bar[t_to] = {1.0 - ab_to:g}")
    x0_hat = _clean_estimate(x_t, eps_hat, t_from, schedule, clip_x0)
    eps_dir = (x_t.data - np.sqrt(ab_from) * x0_hat) / np.sqrt(1.0 - ab_from)
    out = np.sqrt(ab_to) * x0_hat + np.sqrt(radicand) * eps_dir
    if z is not None and sig != 0.0:
        if z.shape != x_t.shape:
            raise ValueError(f"noise shape {z.shape} does not match image shape {x_t.shape}")
        out = out + sig * z.data
    return Image2D(out)


def noise_condition(x_con_0: Image2D, t: int, schedule: NoiseSchedule, z: Image2D) -> Image2D:
    """Forward-noise the padded condition to level t (same contract as q_sample)."""
    return q_sample(x_con_0, t, z, schedule)


def sscs_compose(x_star: Image2D, x_con_t: Image2D, mask: Image2D) -> Image2D:
    """Overwrite the known rows of a sample with the noised condition rows."""
    if x_star.shape != x_con_t.shape or x_star.shape != mask.shape:
        raise ValueError("sample, condition, and mask shapes must match")
    m = mask.data
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValueError("mask entries must be 0 or 1")
    return Image2D(m * x_con_t.data + (1.0 - m) * x_star.data)


def renoise(x_prev: Image2D, t: int, schedule: NoiseSchedule, z: Image2D) -> Image2D:
    """One forward step back up: sqrt(1 - beta_t) * x_prev + sqrt(beta_t) * z."""
    if not 1 <= t <= schedule.t_train:
        raise ValueError(f"timestep {t} outside [1, {schedule.t_train}]")
    if x_prev.shape != z.shape:
        raise ValueError(f"noise shape {z.shape} does not match image shape {x_prev.shape}")
    beta = schedule.betas[t]
    return Image2D(np.sqrt(1.0 - beta) * x_prev.data + np.sqrt(beta) * z.data)


def renoise_span(x_prev: Image2D, t_from: int, t_to: int, schedule: NoiseSchedule, z: Image2D) -> Image2D:
    """Re-noise from level t_to back up to level t_from in one draw.

    Distributionally equal to chaining ``renoise`` over every training step
    in (t_to, t_from]; on adjacent steps the two coincide. This is what the
    refine loop uses so that accelerated plans re-noise back to the level
    they refine.
    """
    _check_step_pair(schedule, t_from, t_to)
    if x_prev.shape != z.shape:
        raise ValueError(f"noise shape {z.shape} does not match image shape {x_prev.shape}")
    span_alpha = schedule.alpha_bars[t_from] / schedule.alpha_bars[t_to]
    return Image2D(np.sqrt(span_alpha) * x_prev.data + np.sqrt(1.0 - span_alpha) * z.data)


def reconstruct_slice(
    x_axi: Image2D,
    alpha: int,
    model: DenoiserModel,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    rng: RandomSource | None = None,
) -> Image2D:
    """Reconstruct one axial slice to lateral resolution.

    Draw order per run: initial noise, then per plan step one condition
    draw, then per refinement a step draw (skipped at the terminal level)
    and a renoise draw (when refinement continues). Identical RandomSource
    states therefore reproduce the output bit-for-bit.
    """
    if alpha < 1:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    plan = cfg.plan
    if plan.taus[0] > schedule.t_train:
        raise ValueError(f"plan starts at {plan.taus[0]} but schedule has {schedule.t_train} steps")
    rng = rng if rng is not None else RandomSource(cfg.seed, stream=0)
    pair = pad_axial(x_axi, alpha)
    shape = pair.x_con_0.shape
    step_fn = ddim_step if cfg.sigma_mode.kind == "ddim" else ddpm_step

    x = gaussian_noise(rng, shape)
    x_prev = x
    for j, (t_from, t_to) in enumerate(plan.transitions()):
        z_con = Image2D(rng.normal(shape))
        x_con_t = noise_condition(pair.x_con_0, t_to, schedule, z_con)
        sig = sigma(schedule, cfg.sigma_mode, t_from, t_to)
        compose = j % cfg.sscs_period == 0
        for i in range(1, plan.refine_count + 1):
            try:
                eps_hat = model.predict_noise(x, t_from, schedule)
                z = None if t_to == 0 else Image2D(rng.normal(shape))
                x_star = step_fn(x, eps_hat, t_from, t_to, sig, z, schedule, cfg.clip_x0)
                x_prev = sscs_compose(x_star, x_con_t, pair.mask) if compose else x_star
                if t_to > 0 and i < plan.refine_count:
                    x = renoise_span(x_prev, t_from, t_to, schedule, Image2D(rng.normal(shape)))
            except ValueError as err:
                raise SamplingFailure(t_from, i, str(err)) from err
        x = x_prev

    if cfg.final_clamp:
        data = x.data.copy()
        rows = pair.source_rows
        data[rows] = pair.x_con_0.data[rows]
        x = Image2D(data)
    return x


_AXES = ("xz", "yz")


def _plane_stream(axis: str, index: int) -> int:
    return (_AXES.index(axis) << 32) | index


def _reconstruct_axis(vol, out_depth, alpha, axis, model, schedule, cfg, threads):
    planes = vol.height if axis == "xz" else vol.width
    out = np.empty((out_depth, vol.height, vol.width))
    calls = 0

    def work(index):
        counter = CallCounter(model)
        rng = RandomSource(cfg.seed, stream=_plane_stream(axis, index))
        src = extract_axial_slice(vol, axis, index)
        img = reconstruct_slice(src, alpha, counter, schedule, cfg, rng=rng)
        return index, img, counter.calls

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(planes)))
    else:
        results = [work(i) for i in range(planes)]
    for index, img, n in results:
        calls += n
        if axis == "xz":
            out[:, index, :] = img.data
        else:
            out[:, :, index] = img.data
    return out, planes, calls


def reconstruct_volume(
    vol: Volume3D,
    alpha: int,
    axes: tuple[str, ...],
    model: DenoiserModel,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    threads: int = 1,
) -> tuple[Volume3D, ReconstructionReport]:
    """Reconstruct every plane along the requested axes; average when both.

    Planes use independent random streams keyed by (axis, plane index), so
    the result is identical no matter how the work is scheduled.
    """
    if alpha < 1:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    axes = tuple(axes)
    if len(axes) == 0 or any(a not in _AXES for a in axes) or len(set(axes)) != len(axes):
        raise ValueError(f"axes must be a non-repeating subset of {_AXES}, got {axes}")
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    started = time.perf_counter()
    out_depth = vol.depth * alpha
    accum = np.zeros((out_depth, vol.height, vol.width))
    planes = 0
    calls = 0
    for axis in axes:
        data, n_planes, n_calls = _reconstruct_axis(
            vol, out_depth, alpha, axis, model, schedule, cfg, threads
        )
        accum += data
        planes += n_planes
        calls += n_calls
    accum /= len(axes)
    result = Volume3D(accum)
    report = ReconstructionReport(
        alpha=alpha,
        axes=axes,
        steps=cfg.plan.steps,
        refine_count=cfg.plan.refine_count,
        total_steps=cfg.plan.total_steps,
        sigma_mode=cfg.sigma_mode.describe(),
        sscs_period=cfg.sscs_period,
        final_clamp=cfg.final_clamp,
        clip_x0=cfg.clip_x0,
        seed=cfg.seed,
        schedule=schedule.describe(),
        planes=planes,
        denoiser_calls=calls,
        elapsed_seconds=time.perf_counter() - started,
        output_shape=result.shape,
    )
    return result, report
