"""Adam fine-tuning of masked deltas and full-parameter pretraining."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import Dataset, Vocab, embed_caption, embed_captions
from .denoiser import (
    BASE_GROUPS, SPACE_DELTAS, DenoiserParams, Effective, as_masks, base_view, delta_grads,
    effective_params, init_params, mse_and_effective_grads, svd_decompose,
)
from .diffusion import NoiseSchedule, q_sample_batch
from .errors import ConfigError, DivergenceError
from .mitigation import MitigationConfig, calibrate_tau, rwa, threshold_filter

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 400
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    cond_dropout: float = 0.1
    mitigation: MitigationConfig = field(default_factory=MitigationConfig)

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("train.steps", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("train.learning_rate", "must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("train.beta1", "Adam betas must lie in [0, 1)")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ConfigError("train.cond_dropout", "must lie in [0, 1)")


class Adam:
    """Adam over a dict of arrays; state is created fresh per instance."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    flagged: list = field(default_factory=list)
    tau: list = field(default_factory=list)

    def rows(self):
        for i, loss in enumerate(self.loss):
            yield {"step": i, "loss": loss, "flagged": self.flagged[i] if self.flagged else 0}


def _streams(seed: int):
    """Independent RNG streams: batches/noise, caption dropout, mitigation."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


def _sample_batch(data: Dataset, cfg: TrainConfig, T: int, rng):
    idx = rng.integers(len(data), size=cfg.batch_size)
    ks = rng.integers(T, size=cfg.batch_size)
    eps = rng.standard_normal((cfg.batch_size, data.images.shape[1]))
    return idx, ks, eps


def _apply_dropout(embs: np.ndarray, p: float, rng) -> np.ndarray:
    if p <= 0.0:
        return embs
    drop = rng.random(len(embs)) < p
    if drop.any():
        embs = embs.copy()
        embs[drop] = 0.0
    return embs


class _Mitigator:
    """Per-batch caption rewriting / filtering hook."""

    def __init__(self, cfg: MitigationConfig, vocab: Vocab, sched: NoiseSchedule, rng, calib: Dataset | None):
        self.cfg, self.vocab, self.sched, self.rng, self.calib = cfg, vocab, sched, rng, calib
        self.tau = cfg.tau

    def __call__(self, step: int, model, images, captions, embs, ks, eps):
        cfg = self.cfg
        if cfg.kind == "rwa":
            captions = [rwa(c, self.vocab.size, self.rng, cfg.rwa_insertions, cfg.rwa_prob) for c in captions]
            return captions, embed_captions(captions, self.vocab), ks, eps, images, 0
        if cfg.kind != "threshold":
            return captions, embs, ks, eps, images, 0
        if cfg.tau is None and step % cfg.tau_refresh == 0:
            ref = self.calib
            ref_embs = embed_captions(ref.captions, self.vocab)
            self.tau = calibrate_tau(model, ref.images, ref_embs, self.sched, self.rng, cfg.tau_percentile)
        res = threshold_filter(model, images, embs, self.sched, self.tau, self.rng)
        n_flag = len(res.flagged)
        if n_flag == 0:
            return captions, embs, ks, eps, images, 0
        if cfg.action == "skip":
            if len(res.kept) == 0:
                log.info("step %d: every sample flagged, using the unfiltered batch", step)
                return captions, embs, ks, eps, images, n_flag
            keep = res.kept
            return [captions[i] for i in keep], embs[keep], ks[keep], eps[keep], images[keep], n_flag
        captions = list(captions)
        embs = embs.copy()
        for i in res.flagged:
            captions[i] = rwa(captions[i], self.vocab.size, self.rng, cfg.rwa_insertions, 1.0)
            embs[i] = embed_caption(captions[i], self.vocab)
        return captions, embs, ks, eps, images, n_flag


def train_inner(theta0: DenoiserParams, masks, data: Dataset, vocab: Vocab, sched: NoiseSchedule,
                cfg: TrainConfig, calib: Dataset | None = None) -> tuple:
    """Fine-tune the deltas selected by ``masks`` from zero with Adam.

    ``theta0`` is never modified; the returned params share no mutable state
    with it. Deltas of unselected units stay exactly zero. ``calib`` supplies
    the clean captions used to set the threshold-mitigation tau (defaults to
    the training data).
    """
    masks = as_masks(masks)
    params = DenoiserParams(theta0.arch, {k: v.copy() for k, v in theta0.base.items()},
                            {k: np.zeros_like(v) for k, v in theta0.deltas.items()},
                            None if theta0.svd is None else {k: v.copy() for k, v in theta0.svd.items()})
    history = TrainHistory()
    active = [m for m in masks if m.popcount() > 0]
    batch_rng, drop_rng, mit_rng = _streams(cfg.seed)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    mitigator = None
    if cfg.mitigation.kind != "none":
        mitigator = _Mitigator(cfg.mitigation, vocab, sched, mit_rng, calib if calib is not None else data)
    base_embs = embed_captions(data.captions, vocab)

    for step in range(cfg.steps):
        idx, ks, eps = _sample_batch(data, cfg, sched.T, batch_rng)
        images = data.images[idx]
        embs = base_embs[idx]
        n_flag = 0
        eff = effective_params(params, masks)
        if mitigator is not None:
            captions = [data.captions[i] for i in idx]
            _, embs, ks, eps, images, n_flag = mitigator(step, eff, images, captions, embs, ks, eps)
        embs = _apply_dropout(embs, cfg.cond_dropout, drop_rng)
        x_t = q_sample_batch(images, ks, eps, sched)
        loss, g = mse_and_effective_grads(eff, x_t, ks, embs, eps)
        if not np.isfinite(loss):
            raise DivergenceError(step)
        history.loss.append(loss)
        history.flagged.append(n_flag)
        if mitigator is not None:
            history.tau.append(mitigator.tau)
        if active:
            opt.step(params.deltas, delta_grads(params, active, g))
    return params, history


def pretrain(arch, data: Dataset, vocab: Vocab, sched: NoiseSchedule, cfg: TrainConfig,
             init_seed: int | None = None) -> tuple:
    """Full-parameter training of a fresh model; returns (theta0 with SVD factors, history)."""
    params = init_params(arch, cfg.seed if init_seed is None else init_seed)
    history = TrainHistory()
    batch_rng, drop_rng, _ = _streams(cfg.seed)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    embs_all = embed_captions(data.captions, vocab)
    key = dict(zip(Effective.NAMES, BASE_GROUPS))
    for step in range(cfg.steps):
        idx, ks, eps = _sample_batch(data, cfg, sched.T, batch_rng)
        embs = _apply_dropout(embs_all[idx], cfg.cond_dropout, drop_rng)
        x_t = q_sample_batch(data.images[idx], ks, eps, sched)
        loss, g = mse_and_effective_grads(base_view(params), x_t, ks, embs, eps, need_time=True)
        if not np.isfinite(loss):
            raise DivergenceError(step)
        history.loss.append(loss)
        history.flagged.append(0)
        opt.step(params.base, {key[name]: grad for name, grad in g.items()})
    svd_decompose(params)
    return params, history


def validation_mse(eff, data: Dataset, vocab: Vocab, sched: NoiseSchedule, seed: int = 0) -> float:
    """Denoising MSE on a fixed draw of timesteps and noise."""
    rng = np.random.default_rng(seed)
    ks = rng.integers(sched.T, size=len(data))
    eps = rng.standard_normal(data.images.shape)
    x_t = q_sample_batch(data.images, ks, eps, sched)
    pred = eff(x_t, ks, embed_captions(data.captions, vocab))
    return float(np.mean((pred - eps) ** 2))


def trainable_delta_names(masks) -> list:
    return [name for m in as_masks(masks) for name in SPACE_DELTAS[m.space]]
