"""Noise schedules and timestep plans for the diffusion forward/reverse chains.

All schedule arrays are indexed directly by timestep t in 0..T_train, with
the empty-product convention at t=0 (alpha_bar[0] = 1, beta[0] = 0). Step
pairs (t_from, t_to) with t_from > t_to are treated as adjacent when
evaluating transition quantities, which makes subsequence plans work without
re-normalizing beta.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NoiseSchedule",
    "SigmaMode",
    "TimestepPlan",
    "linear_schedule",
    "uniform_subsequence",
    "sigma",
]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step noise levels and their cumulative products.

    Arrays have length T_train + 1 and are indexed by t; index 0 holds the
    conventions beta=0, alpha=1, alpha_bar=1, posterior_var=0.
    """

    betas: np.ndarray
    family: str = "linear"
    beta_start: float = 0.0
    beta_end: float = 0.0
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    posterior_vars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 2:
            raise ValueError("betas must be a 1-d array with a leading t=0 slot")
        if betas[0] != 0.0:
            raise ValueError("betas[0] must be 0 (t=0 convention)")
        body = betas[1:]
        if np.any(body <= 0.0) or np.any(body >= 1.0):
            raise ValueError("each beta_t must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        posterior_vars = np.zeros_like(betas)
        # beta_tilde_t = beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t); zero at t=1
        posterior_vars[1:] = betas[1:] * (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:])
        for name, arr in (
            ("betas", betas),
            ("alphas", alphas),
            ("alpha_bars", alpha_bars),
            ("posterior_vars", posterior_vars),
        ):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def t_train(self) -> int:
        return self.betas.size - 1

    def describe(self) -> str:
        """Stable identifier recorded in checkpoints and manifests."""
        return f"{self.family}:T={self.t_train}:beta={self.beta_start:g}..{self.beta_end:g}"


def linear_schedule(t_train: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas, inclusive of both endpoints."""
    if t_train < 1:
        raise ValueError(f"t_train must be >= 1, got {t_train}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.zeros(t_train + 1)
    betas[1:] = np.linspace(beta_start, beta_end, t_train)
    return NoiseSchedule(betas, family="linear", beta_start=beta_start, beta_end=beta_end)


@dataclass(frozen=True)
class SigmaMode:
    """Reverse-step noise scale: posterior variance, full beta, or scaled DDIM.

    ``ddim(eta)`` interpolates between the deterministic sampler (eta=0) and
    the ancestral posterior-variance sampler (eta=1).
    """

    kind: str
    eta: float = 0.0

    _KINDS = ("posterior", "beta", "ddim")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"sigma mode must be one of {self._KINDS}, got {self.kind!r}")
        if self.kind == "ddim" and not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"ddim eta must lie in [0, 1], got {self.eta}")

    @classmethod
    def posterior(cls) -> "SigmaMode":
        return cls("posterior")

    @classmethod
    def beta(cls) -> "SigmaMode":
        return cls("beta")

    @classmethod
    def ddim(cls, eta: float) -> "SigmaMode":
        return cls("ddim", float(eta))

    @classmethod
    def parse(cls, text: str) -> "SigmaMode":
        """Parse 'posterior', 'beta', or 'ddim:ETA' (CLI flag syntax)."""
        if text == "posterior":
            return cls.posterior()
        if text == "beta":
            return cls.beta()
        if text.startswith("ddim:"):
            return cls.ddim(float(text.split(":", 1)[1]))
        if text == "ddim":
            return cls.ddim(0.0)
        raise ValueError(f"unknown sigma mode {text!r} (expected posterior|beta|ddim:ETA)")

    def describe(self) -> str:
        return f"ddim:{self.eta:g}" if self.kind == "ddim" else self.kind


@dataclass(frozen=True)
class TimestepPlan:
    """A strictly decreasing timestep subsequence plus the refine count K."""

    taus: tuple[int, ...]
    refine_count: int = 1

    def __post_init__(self):
        if len(self.taus) == 0:
            raise ValueError("timestep plan must be nonempty")
        taus = tuple(int(t) for t in self.taus)
        if any(t < 1 for t in taus):
            raise ValueError("plan timesteps must be >= 1")
        if any(a <= b for a, b in zip(taus, taus[1:])):
            raise ValueError("plan timesteps must be strictly decreasing")
        if self.refine_count < 1:
            raise ValueError(f"refine count must be >= 1, got {self.refine_count}")
        object.__setattr__(self, "taus", taus)

    @property
    def steps(self) -> int:
        return len(self.taus)

    @property
    def total_steps(self) -> int:
        """Total denoiser evaluations per slice: steps x refine_count."""
        return self.steps * self.refine_count

    def transitions(self) -> list[tuple[int, int]]:
        """(t_from, t_to) pairs walked by the reverse chain, ending at t_to=0."""
        targets = list(self.taus[1:]) + [0]
        return list(zip(self.taus, targets))


def uniform_subsequence(t_train: int, steps: int, refine_count: int = 1) -> TimestepPlan:
    """Evenly strided subsequence of {1..t_train}, always including t_train.

    Uses tau_i = floor(i * t_train / steps) for i = steps..1, so consecutive
    gaps differ by at most one and steps == t_train yields the full sequence.
    """
    if not 1 <= steps <= t_train:
        raise ValueError(f"steps must lie in [1, {t_train}], got {steps}")
    taus = tuple((i * t_train) // steps for i in range(steps, 0, -1))
    return TimestepPlan(taus, refine_count)


def sigma(schedule: NoiseSchedule, mode: SigmaMode, t_from: int, t_to: int) -> float:
    """Reverse-transition noise scale for the step t_from -> t_to.

    Consecutive plan steps are treated as adjacent: the transition quantities
    are derived from alpha_bar at the two endpoints, so the same formulas
    serve both the full chain and accelerated subsequences.
    """
    if not (0 <= t_to < t_from <= schedule.t_train):
        raise ValueError(
            f"need 0 <= t_to < t_from <= {schedule.t_train}, got ({t_from}, {t_to})"
        )
    ab_from = schedule.alpha_bars[t_from]
    ab_to = schedule.alpha_bars[t_to]
    step_beta = 1.0 - ab_from / ab_to
    if mode.kind == "beta":
        return float(np.sqrt(step_beta))
    if mode.kind == "posterior":
        return float(np.sqrt(step_beta * (1.0 - ab_to) / (1.0 - ab_from)))
    # ddim: eta * sqrt((1-ab_to)/(1-ab_from)) * sqrt(1 - ab_from/ab_to)
    return float(mode.eta * np.sqrt((1.0 - ab_to) / (1.0 - ab_from)) * np.sqrt(step_beta))
