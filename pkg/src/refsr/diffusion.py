"""Noise schedules, forward noising, reverse samplers, and trajectory-shortened starts.

Forward process (marginal form):

    q(z_t | z_0) = N(z_t; sqrt(a_bar_t) z_0, (1 - a_bar_t) I),
    a_bar_t = prod_{s<=t} (1 - beta_s)            (0-indexed tables)

Reverse sampling supports plain ancestral (DDPM) transitions and the
deterministic/stochastic DDIM family on an arbitrary descending step grid.
The shortened-trajectory start replaces z_T with a noised encoding of a
regression SR estimate at an intermediate step t', so only the grid
[0, t'-1] has to be traversed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .types import ImageTensor, ParameterError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances beta and cumulative products a_bar (float64 tables)."""

    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if self.beta.ndim != 1 or self.beta.shape != self.alpha_bar.shape:
            raise ParameterError("beta and alpha_bar must be 1-D arrays of equal length")
        if not ((self.beta > 0.0) & (self.beta < 1.0)).all():
            raise ParameterError("beta must lie strictly inside (0, 1)")

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    def alpha_bar_at(self, t) -> np.ndarray:
        """a_bar_t for integer t or an integer array; t = -1 denotes a_bar = 1."""
        t = np.asarray(t)
        out = np.where(t < 0, 1.0, self.alpha_bar[np.clip(t, 0, self.T - 1)])
        return out


def make_schedule(T: int, kind: str = "linear", beta_min: float = 1e-4,
                  beta_max: float = 0.02) -> NoiseSchedule:
    """Build a variance schedule; "linear" interpolates beta evenly over T steps."""
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ParameterError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    if kind != "linear":
        raise ParameterError(f"unknown schedule kind {kind!r}")
    beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar)


@dataclass(frozen=True)
class BetterStart:
    """Intermediate-start configuration: traverse [0, t_prime] only."""

    t_prime: int


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"            # "ddpm" | "ddim"
    steps: int = 10
    eta: float = 0.0              # ddim stochasticity; ignored for ddpm
    better_start: Optional[BetterStart] = None

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ParameterError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 1:
            raise ParameterError("steps must be >= 1")
        if self.eta < 0.0:
            raise ParameterError("eta must be >= 0")


def step_grid(cfg: SamplerConfig, sched: NoiseSchedule) -> list[int]:
    """Descending timestep grid the sampler walks, ending at 0.

    Spans [0, T-1] for pure-noise sampling, or [0, t'-1] under a shortened
    start.  Grid length equals cfg.steps exactly (one denoiser call each).
    """
    if cfg.steps > sched.T:
        raise ParameterError(f"steps={cfg.steps} exceeds schedule length T={sched.T}")
    hi = sched.T - 1
    if cfg.better_start is not None:
        tp = cfg.better_start.t_prime
        if not (1 <= tp <= sched.T):
            raise ParameterError(f"t_prime must lie in [1, T], got {tp}")
        hi = tp - 1
    if cfg.steps > hi + 1:
        raise ParameterError(f"steps={cfg.steps} exceeds grid span [{0}, {hi}]")
    grid = np.unique(np.round(np.linspace(hi, 0, cfg.steps)).astype(int))[::-1]
    assert len(grid) == cfg.steps
    return [int(t) for t in grid]


def _coeff(value: float, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(value, dtype=like.dtype, device=like.device)


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Forward-noise z0 to step t: sqrt(a_bar_t) z0 + sqrt(1 - a_bar_t) eps.

    t is an integer (applied to the whole tensor) or an integer array of
    length B for batched (B, C, h, w) inputs.
    """
    if eps.shape != z0.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    t_arr = np.asarray(t)
    if (t_arr < 0).any() or (t_arr >= sched.T).any():
        raise ParameterError(f"t must lie in [0, T), got {t}")
    ab = sched.alpha_bar[t_arr]
    if t_arr.ndim == 0:
        w0 = _coeff(math.sqrt(float(ab)), z0)
        w1 = _coeff(math.sqrt(1.0 - float(ab)), z0)
    else:
        if z0.ndim != 4 or t_arr.shape[0] != z0.shape[0]:
            raise ShapeError("per-sample t requires batched (B, C, h, w) input")
        w0 = torch.as_tensor(np.sqrt(ab), dtype=z0.dtype, device=z0.device).view(-1, 1, 1, 1)
        w1 = torch.as_tensor(np.sqrt(1.0 - ab), dtype=z0.dtype, device=z0.device).view(-1, 1, 1, 1)
    return w0 * z0 + w1 * eps


def predict_x0(z_t: torch.Tensor, t: int, eps_hat: torch.Tensor,
               sched: NoiseSchedule) -> torch.Tensor:
    """Invert the marginal: x0_hat = (z_t - sqrt(1-a_bar) eps_hat) / sqrt(a_bar)."""
    ab = float(sched.alpha_bar[t])
    return (z_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def _prev_on_grid(t: int, grid: Sequence[int]) -> int:
    try:
        i = list(grid).index(t)
    except ValueError:
        raise ParameterError(f"t={t} is not on the active step grid") from None
    return grid[i + 1] if i + 1 < len(grid) else -1


def reverse_step(z_t: torch.Tensor, t: int, eps_hat: torch.Tensor, sched: NoiseSchedule,
                 cfg: SamplerConfig, rng: Optional[torch.Generator] = None,
                 t_prev: Optional[int] = None) -> torch.Tensor:
    """One reverse transition from grid point t toward its successor.

    The successor is looked up on cfg's step grid unless t_prev is given
    explicitly.  At the final grid point the clean estimate (posterior mean
    with no added noise) is returned.
    """
    if eps_hat.shape != z_t.shape:
        raise ShapeError("eps_hat shape must match z_t")
    if t_prev is None:
        t_prev = _prev_on_grid(t, step_grid(cfg, sched))
    ab_t = float(sched.alpha_bar[t])
    ab_p = 1.0 if t_prev < 0 else float(sched.alpha_bar[t_prev])
    x0 = predict_x0(z_t, t, eps_hat, sched)

    if cfg.kind == "ddim":
        if t_prev < 0:
            return x0
        sigma = cfg.eta * math.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_p)
        dir_w = math.sqrt(max(1.0 - ab_p - sigma * sigma, 0.0))
        out = math.sqrt(ab_p) * x0 + dir_w * eps_hat
        if sigma > 0.0:
            noise = torch.randn(z_t.shape, generator=rng, dtype=z_t.dtype, device=z_t.device)
            out = out + sigma * noise
        return out

    # generalized ancestral step via the posterior q(z_s | z_t, x0), s = t_prev
    alpha_ts = ab_t / ab_p
    beta_ts = 1.0 - alpha_ts
    mean = (math.sqrt(ab_p) * beta_ts / (1.0 - ab_t)) * x0 \
        + (math.sqrt(alpha_ts) * (1.0 - ab_p) / (1.0 - ab_t)) * z_t
    if t_prev < 0:
        return mean
    var = beta_ts * (1.0 - ab_p) / (1.0 - ab_t)
    noise = torch.randn(z_t.shape, generator=rng, dtype=z_t.dtype, device=z_t.device)
    return mean + math.sqrt(max(var, 0.0)) * noise


def better_start(start_image: ImageTensor, t_prime: int, sched: NoiseSchedule,
                 codec, rng: Optional[torch.Generator] = None) -> torch.Tensor:
    """Noised encoding of a regression SR estimate: the reverse-process initial state.

    Encodes the HR-resolution start image and forward-noises it to step
    t' (1-based), replacing the pure-Gaussian z_T.
    """
    if not (1 <= t_prime <= sched.T):
        raise ParameterError(f"t_prime must lie in [1, T], got {t_prime}")
    z0 = codec.encode(start_image)
    eps = torch.randn(z0.shape, generator=rng, dtype=z0.dtype, device=z0.device)
    return q_sample(z0, t_prime - 1, eps, sched)


@dataclass
class SampleResult:
    image: ImageTensor
    grid: list[int] = field(default_factory=list)
    n_denoiser_evals: int = 0
    t_start: int = 0


def sample(denoiser, cond, cfg: SamplerConfig, sched: NoiseSchedule, codec,
           rng: Optional[torch.Generator] = None,
           start_image: Optional[ImageTensor] = None,
           latent_hw: Optional[tuple[int, int]] = None) -> SampleResult:
    """Run the configured reverse trajectory and decode the final latent.

    The initial state is the shortened-trajectory start when cfg.better_start
    is set (start_image required), else z_T ~ N(0, I) with spatial dims taken
    from latent_hw or the conditioning bundle.
    """
    denoiser.validate_bundle(cond)
    grid = step_grid(cfg, sched)
    if cfg.better_start is not None:
        if start_image is None:
            raise ParameterError("better_start requires a start image")
        z = better_start(start_image, cfg.better_start.t_prime, sched, codec, rng)
    else:
        if latent_hw is None:
            latent_hw = cond.latent_hw()
        shape = (1, codec.latent_channels, *latent_hw)
        z = torch.randn(shape, generator=rng)
    if z.ndim == 3:
        z = z[None]
    n_evals = 0
    for i, t in enumerate(grid):
        eps_hat = denoiser.predict_noise(z, t, cond)
        n_evals += 1
        t_prev = grid[i + 1] if i + 1 < len(grid) else -1
        z = reverse_step(z, t, eps_hat, sched, cfg, rng, t_prev=t_prev)
    img = codec.decode(z[0])
    return SampleResult(image=img, grid=grid, n_denoiser_evals=n_evals, t_start=grid[0])
