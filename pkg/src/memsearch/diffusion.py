"""Noise schedule, forward corruption and deterministic reverse process.

Timesteps are schedule indices ``k`` in ``[0, T)``: the noise level at index
``k`` is ``alphas_bar[k]``. A reverse step from ``k`` lands on ``k - 1``; the
final denoise from ``k = 0`` uses ``alphas_bar[-1] := 1`` (clean data).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, SingularScheduleError, TerminalStepError

CONVENTIONS = ("as_printed", "ddim")

# (x_t batch (N, D), timestep index, prompt embeddings (N, E)) -> eps_hat (N, D)
NoiseModel = Callable[[np.ndarray, int, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar_prev(self, k: int) -> float:
        """Cumulative product one step closer to the data (1.0 before index 0)."""
        return 1.0 if k == 0 else float(self.alphas_bar[k - 1])


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule with its running product of ``1 - beta``."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigError("schedule.T", f"must be a positive integer, got {T!r}")
    if not 0.0 < beta_start < 1.0:
        raise ConfigError("schedule.beta_start", f"must lie in (0, 1), got {beta_start}")
    if not beta_start <= beta_end < 1.0:
        raise ConfigError("schedule.beta_end", f"must lie in [beta_start, 1), got {beta_end}")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return schedule_from_betas(betas)


def schedule_from_betas(betas: Sequence[float], allow_zero: bool = False) -> NoiseSchedule:
    """Build a schedule from explicit betas.

    ``allow_zero`` admits the degenerate ``beta = 0`` schedule used in tests.
    """
    betas = np.asarray(betas, dtype=np.float64).copy()
    lo_ok = betas >= 0.0 if allow_zero else betas > 0.0
    if betas.ndim != 1 or len(betas) == 0 or not np.all(lo_ok & (betas < 1.0)):
        raise ConfigError("schedule.betas", "every beta must lie in (0, 1)")
    alphas_bar = np.cumprod(1.0 - betas)
    betas.setflags(write=False)
    alphas_bar.setflags(write=False)
    return NoiseSchedule(betas=betas, alphas_bar=alphas_bar)


def _check_index(k: int, sched: NoiseSchedule) -> None:
    if not 0 <= k < sched.T:
        raise ShapeError(f"timestep {k} outside [0, {sched.T})")


def q_sample(x0: np.ndarray, k: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form forward corruption ``sqrt(ab) * x0 + sqrt(1 - ab) * eps``."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    _check_index(k, sched)
    ab = sched.alphas_bar[k]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def q_sample_batch(x0: np.ndarray, ks: np.ndarray, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Row-wise q_sample with a per-row timestep index."""
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    ab = sched.alphas_bar[np.asarray(ks)][:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(x_t, eps_hat, k: int, sched: NoiseSchedule, convention: str = "ddim"):
    """Estimate the clean sample from ``x_t`` and the predicted noise.

    ``as_printed`` subtracts ``sqrt(1 - ab[k-1]) * eps_hat``; ``ddim`` uses
    ``sqrt(1 - ab[k])``, the coefficient that inverts :func:`q_sample`.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise ShapeError(f"x_t shape {x_t.shape} != eps_hat shape {eps_hat.shape}")
    _check_index(k, sched)
    ab = float(sched.alphas_bar[k])
    if ab <= 0.0:
        raise SingularScheduleError(f"alphas_bar[{k}] = 0")
    if convention == "as_printed":
        noise_coef = np.sqrt(1.0 - sched.alpha_bar_prev(k))
    elif convention == "ddim":
        noise_coef = np.sqrt(1.0 - ab)
    else:
        raise ConfigError("schedule.reverse_convention", f"unknown convention {convention!r}")
    return (x_t - noise_coef * eps_hat) / np.sqrt(ab)


def reverse_step(x_t, eps_hat, k: int, sched: NoiseSchedule, convention: str = "ddim"):
    """Deterministic update from index ``k`` to ``k - 1``."""
    if k < 1:
        raise TerminalStepError(f"cannot step below timestep {k}")
    x0_hat = predict_x0(x_t, eps_hat, k, sched, convention)
    ab_prev = float(sched.alphas_bar[k - 1])
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * np.asarray(eps_hat, dtype=np.float64)


def initial_noise(seeds: Sequence[int], dim: int) -> np.ndarray:
    """One standard-normal x_T row per seed; each row depends only on its seed."""
    return np.stack([np.random.default_rng(int(s)).standard_normal(dim) for s in seeds])


def generate_batch(
    model: NoiseModel,
    prompt_embs: np.ndarray,
    sched: NoiseSchedule,
    seeds: Sequence[int],
    dim: int,
    convention: str = "ddim",
) -> np.ndarray:
    """Run the full deterministic sampler for a batch of prompts.

    Row ``i`` starts from ``initial_noise([seeds[i]])`` and is conditioned on
    ``prompt_embs[i]``. Intermediate states are unclamped; the output is
    clamped to ``[-1, 1]``.
    """
    prompt_embs = np.atleast_2d(np.asarray(prompt_embs, dtype=np.float64))
    if len(seeds) != len(prompt_embs):
        raise ShapeError(f"{len(seeds)} seeds for {len(prompt_embs)} prompts")
    x = initial_noise(seeds, dim)
    for k in range(sched.T - 1, 0, -1):
        x = reverse_step(x, model(x, k, prompt_embs), k, sched, convention)
    x = predict_x0(x, model(x, 0, prompt_embs), 0, sched, convention)
    return np.clip(x, -1.0, 1.0)


def generate(model: NoiseModel, prompt_emb, sched: NoiseSchedule, rng_seed: int, dim: int,
             convention: str = "ddim") -> np.ndarray:
    """Generate a single image; a pure function of model, prompt and seed."""
    return generate_batch(model, np.atleast_2d(prompt_emb), sched, [rng_seed], dim, convention)[0]
