"""Noise schedules, forward noising, DDPM/DDIM reverse steps and guided sampling.

Diffusion steps are 1-based (``n = 1..N``); ``n = 0`` denotes clean data with
``alpha_bar_0 = 1``. Schedule tables are float64 numpy arrays indexed ``n - 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch


class ScheduleError(ValueError):
    pass


class SamplerStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray

    @property
    def N(self) -> int:
        return len(self.beta)

    def abar(self, n: int) -> float:
        """``alpha_bar_n`` with ``alpha_bar_0 = 1``."""
        if n == 0:
            return 1.0
        self._check(n)
        return float(self.alpha_bar[n - 1])

    def _check(self, n: int) -> None:
        if not 1 <= n <= self.N:
            raise ScheduleError(f"diffusion step {n} outside [1, {self.N}]")


def schedule_from_betas(beta: Sequence[float]) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 1:
        raise ScheduleError("beta must be a non-empty 1-D sequence")
    if np.any(beta <= 0) or np.any(beta >= 1) or np.any(np.diff(beta) < 0):
        raise ScheduleError("beta must be non-decreasing inside (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = beta * (1.0 - prev) / (1.0 - alpha_bar)
    for name, arr in (("beta", beta), ("alpha", alpha), ("alpha_bar", alpha_bar), ("beta_tilde", beta_tilde)):
        arr.setflags(write=False)
    return NoiseSchedule(beta, alpha, alpha_bar, beta_tilde)


def make_schedule(N: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with the derived alpha, alpha_bar and posterior-variance tables."""
    if N < 1:
        raise ScheduleError(f"N must be >= 1, got {N}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, N, dtype=np.float64) if N > 1 else np.array([beta_start])
    return schedule_from_betas(beta)


def q_sample(x0, n: int, noise, schedule: NoiseSchedule):
    """Closed-form forward noising ``sqrt(abar_n) x0 + sqrt(1 - abar_n) eps``."""
    if tuple(x0.shape) != tuple(noise.shape):
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs noise {tuple(noise.shape)}")
    ab = schedule.abar(n)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def cfg_epsilon(eps_cond, eps_uncond, w: float):
    if tuple(eps_cond.shape) != tuple(eps_uncond.shape):
        raise ValueError("conditional and unconditional predictions differ in shape")
    if w == 0:
        return eps_cond
    return (1.0 + w) * eps_cond - w * eps_uncond


def ddpm_mean(x_n, n: int, eps, schedule: NoiseSchedule):
    schedule._check(n)
    a = float(schedule.alpha[n - 1])
    ab = float(schedule.alpha_bar[n - 1])
    return (x_n - ((1.0 - a) / math.sqrt(1.0 - ab)) * eps) / math.sqrt(a)


def ddpm_step(x_n: torch.Tensor, n: int, eps_guided: torch.Tensor, schedule: NoiseSchedule,
              rng: torch.Generator | None = None, noise: torch.Tensor | None = None) -> torch.Tensor:
    """Ancestral step ``x_{n-1} ~ N(mu, beta_tilde_n I)``; exactly ``mu`` at ``n = 1``."""
    mu = ddpm_mean(x_n, n, eps_guided, schedule)
    if n == 1:
        return mu
    if noise is None:
        noise = torch.randn(x_n.shape, generator=rng, dtype=x_n.dtype)
    return mu + math.sqrt(float(schedule.beta_tilde[n - 1])) * noise


def predict_x0(x_n, n: int, eps, schedule: NoiseSchedule):
    ab = schedule.abar(n)
    return (x_n - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)


def ddim_step(x_n, n: int, n_prev: int, eps_guided, schedule: NoiseSchedule):
    """Deterministic DDIM update from step ``n`` to ``n_prev < n``."""
    if not 0 <= n_prev < n:
        raise ScheduleError(f"need 0 <= n_prev < n, got n={n}, n_prev={n_prev}")
    x0_hat = predict_x0(x_n, n, eps_guided, schedule)
    ab_prev = schedule.abar(n_prev)
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_guided


def ddim_timesteps(N: int, steps: int) -> list[int]:
    """Descending grid of ``steps`` roughly uniform timesteps spanning ``[1, N]``."""
    if not 1 <= steps <= N:
        raise ScheduleError(f"DDIM steps must be in [1, {N}], got {steps}")
    grid = np.unique(np.round(np.linspace(1, N, steps)).astype(int))
    return [int(v) for v in grid[::-1]]


# --- conditional sampling ----------------------------------------------------

@dataclass(frozen=True)
class Sampler:
    kind: str = "ddim"  # "ddim" | "ddpm"
    steps: int = 20

    @classmethod
    def parse(cls, text: str) -> "Sampler":
        text = text.strip().lower()
        if text == "ddpm":
            return cls("ddpm", 0)
        if text.startswith("ddim"):
            _, _, steps = text.partition(":")
            return cls("ddim", int(steps) if steps else 20)
        raise ValueError(f"unknown sampler {text!r}; use ddpm or ddim[:steps]")

    def __str__(self) -> str:
        return "ddpm" if self.kind == "ddpm" else f"ddim:{self.steps}"


@dataclass
class Condition:
    """Observed voxel values in tensor space plus the observation mask, channels-last."""

    observed: np.ndarray  # (K, K, K, 3), zero off-mask
    mask: np.ndarray  # (K, K, K) bool
    null_flag: bool = False

    def __post_init__(self):
        self.observed = np.asarray(self.observed, np.float32)
        self.mask = np.asarray(self.mask, bool)
        if self.observed.shape != self.mask.shape + (3,):
            raise ValueError("observed must be mask.shape + (3,)")
        if np.any(self.observed[~self.mask] != 0):
            raise ValueError("observed must be zero wherever the mask is unset")

    @classmethod
    def null(cls, K: int) -> "Condition":
        return cls(np.zeros((K, K, K, 3), np.float32), np.zeros((K, K, K), bool), True)

    @classmethod
    def from_truth(cls, x0: np.ndarray, mask: np.ndarray) -> "Condition":
        return cls(np.where(mask[..., None], x0, 0.0), mask, False)


@dataclass
class SampleBatch:
    samples: np.ndarray  # (M, K, K, K, 3)
    seed: int
    w: float
    sampler: Sampler

    def __len__(self) -> int:
        return len(self.samples)


EpsFn = Callable[[torch.Tensor, int, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def _trajectory_generators(seed: int, M: int) -> list[torch.Generator]:
    gens = []
    for m in range(M):
        g = torch.Generator()
        g.manual_seed(int(np.random.SeedSequence([seed, m]).generate_state(1, np.uint64)[0] >> 1))
        gens.append(g)
    return gens


def _randn(gens: list[torch.Generator], shape: tuple) -> torch.Tensor:
    return torch.stack([torch.randn(shape, generator=g) for g in gens])


def sample_conditional(denoiser, condition: Condition, M: int, w: float = 0.2,
                       sampler: Sampler = Sampler(), seed: int = 0, schedule: NoiseSchedule | None = None,
                       replacement: bool = True) -> SampleBatch:
    """Draw ``M`` reverse trajectories from ``N(0, I)`` guided by ``condition``.

    ``denoiser`` must provide ``predict(x, n, observed, mask, null) -> eps`` on
    channels-last batches and a ``schedule`` attribute (or pass ``schedule``).
    With ``replacement`` the observed voxels are overwritten at every step by
    the observation noised to the matching level.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if denoiser is None or not getattr(denoiser, "fitted", True):
        raise SamplerStateError("denoiser has not been trained or loaded")
    schedule = schedule or denoiser.schedule
    shape = condition.observed.shape
    gens = _trajectory_generators(seed, M)
    obs = torch.from_numpy(condition.observed).expand(M, *shape)
    mask = torch.from_numpy(condition.mask).expand(M, *shape[:3])
    mask3 = mask[..., None]
    use_cond = not condition.null_flag
    guided = use_cond and w != 0
    replace = replacement and use_cond and bool(condition.mask.any())

    def eps_at(x, n):
        if not use_cond:
            return denoiser.predict(x, n, torch.zeros_like(x), torch.zeros_like(mask), True)
        if not guided:
            return denoiser.predict(x, n, obs, mask, False)
        e_c, e_u = denoiser.predict_pair(x, n, obs, mask)
        return cfg_epsilon(e_c, e_u, w)

    def impose(x, n):
        if not replace:
            return x
        known = obs if n == 0 else q_sample(obs, n, _randn(gens, shape), schedule)
        return torch.where(mask3, known, x)

    N = schedule.N
    x = impose(_randn(gens, shape), N)
    with torch.no_grad():
        if sampler.kind == "ddim":
            ts = ddim_timesteps(N, sampler.steps)
            for k, n in enumerate(ts):
                n_prev = ts[k + 1] if k + 1 < len(ts) else 0
                x = impose(ddim_step(x, n, n_prev, eps_at(x, n), schedule), n_prev)
        else:
            for n in range(N, 0, -1):
                z = _randn(gens, shape) if n > 1 else None
                x = impose(ddpm_step(x, n, eps_at(x, n), schedule, noise=z), n - 1)
    out = x.numpy().astype(np.float32)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("sampler produced non-finite values")
    return SampleBatch(out, seed, w, sampler)
