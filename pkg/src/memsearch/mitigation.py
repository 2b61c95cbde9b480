"""Training-time memorization mitigations: random word addition and threshold filtering."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, q_sample_batch
from .errors import ConfigError

log = logging.getLogger(__name__)

KINDS = ("none", "rwa", "threshold")
ACTIONS = ("skip", "reembed")


@dataclass(frozen=True)
class MitigationConfig:
    kind: str = "none"
    rwa_insertions: int = 2
    rwa_prob: float = 0.5
    tau: float | None = None  # None: recalibrate from clean validation captions
    tau_percentile: float = 90.0
    tau_refresh: int = 100
    action: str = "skip"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError("mitigation.kind", f"expected one of {KINDS}, got {self.kind!r}")
        if self.action not in ACTIONS:
            raise ConfigError("mitigation.action", f"expected one of {ACTIONS}, got {self.action!r}")
        if self.rwa_insertions < 1:
            raise ConfigError("mitigation.rwa_insertions", "must be >= 1")
        if not 0.0 <= self.rwa_prob <= 1.0:
            raise ConfigError("mitigation.rwa_prob", "must lie in [0, 1]")
        if self.tau is not None and not self.tau > 0:
            raise ConfigError("mitigation.tau", "must be > 0")
        if not 0.0 <= self.tau_percentile <= 100.0:
            raise ConfigError("mitigation.tau_percentile", "must lie in [0, 100]")
        if self.tau_refresh < 1:
            raise ConfigError("mitigation.tau_refresh", "must be >= 1")


def rwa(caption, vocab_size: int, rng: np.random.Generator, insertions: int = 1, prob: float = 1.0) -> tuple:
    """Random word addition: with probability ``prob`` insert uniformly drawn tokens at random positions.

    Returns a new tuple; original tokens keep their relative order.
    """
    if vocab_size < 1:
        raise ValueError("vocabulary is empty")
    out = list(caption)
    if prob <= 0.0 or rng.random() >= prob:
        return tuple(out)
    for _ in range(insertions):
        tok = int(rng.integers(vocab_size))
        out.insert(int(rng.integers(len(out) + 1)), tok)
    return tuple(out)


def single_draw_scores(model, images, embs, sched: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """One-timestep, one-noise estimate of the denoising-strength score per sample."""
    images = np.atleast_2d(images)
    ks = rng.integers(sched.T, size=len(images))
    eps = rng.standard_normal(images.shape)
    x_t = q_sample_batch(images, ks, eps, sched)
    cond = model(x_t, ks, embs)
    uncond = model(x_t, ks, np.zeros_like(embs))
    return np.linalg.norm(cond - uncond, axis=1)


@dataclass
class FilterResult:
    kept: np.ndarray
    flagged: np.ndarray
    scores: np.ndarray


def threshold_filter(model, images, embs, sched: NoiseSchedule, tau: float, rng: np.random.Generator) -> FilterResult:
    """Partition a batch into kept and flagged samples by single-draw score > tau.

    The returned index arrays are disjoint and cover the batch. Acting on the
    flagged samples (skip or re-prompt) is left to the caller.
    """
    scores = single_draw_scores(model, images, embs, sched, rng)
    flagged = scores > tau
    return FilterResult(kept=np.flatnonzero(~flagged), flagged=np.flatnonzero(flagged), scores=scores)


def calibrate_tau(model, images, embs, sched: NoiseSchedule, rng: np.random.Generator, percentile: float) -> float:
    return float(np.percentile(single_draw_scores(model, images, embs, sched, rng), percentile))
