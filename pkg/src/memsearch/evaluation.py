"""Metric evaluation of a trained model against a corpus."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, Dataset, embed_captions
from .diffusion import NoiseSchedule, generate_batch
from .errors import ConfigError
from .metrics import FeatureMap, Objectives, amd, calibrate_delta, d_mem_values, extraction_attack, fid, prompt_fidelity

METRICS_COLUMNS = ("run_id", "mask_space", "mask_bits", "d_mem", "d_fid", "amd", "extracted_count",
                   "prompt_fidelity", "seed")
METRICS_VERSION = 1


@dataclass(frozen=True)
class MetricsConfig:
    n_noise_draws: int = 4
    attack_samples: int = 16
    tile: int = 4
    attack_k: int = 6
    delta_percentile: float = 1.0
    delta: float | None = None
    fid_mode: str = "random_projection"
    fid_k: int = 16
    fid_seed: int = 0
    seed: int = 0
    convention: str = "ddim"

    def __post_init__(self):
        if self.n_noise_draws < 1:
            raise ConfigError("metrics.n_noise_draws", "must be >= 1")
        if self.attack_samples < self.attack_k:
            raise ConfigError("metrics.attack_samples", "must be >= metrics.attack_k")
        if self.attack_k < 2:
            raise ConfigError("metrics.attack_k", "must be >= 2")
        if self.fid_mode not in ("identity", "random_projection"):
            raise ConfigError("metrics.fid_mode", f"unknown mode {self.fid_mode!r}")
        if self.convention not in ("as_printed", "ddim"):
            raise ConfigError("metrics.convention", f"unknown convention {self.convention!r}")

    @property
    def features(self) -> FeatureMap:
        return FeatureMap(self.fid_mode, self.fid_k, self.fid_seed)


def prompt_refs(corpus: Corpus, samples) -> tuple:
    """Prompt embeddings and per-prompt class-template reference images."""
    embs = embed_captions([s.caption for s in samples], corpus.vocab)
    refs = corpus.templates[[s.class_id for s in samples]]
    return embs, refs


def mean_d_mem(model, corpus: Corpus, samples, sched: NoiseSchedule, cfg: MetricsConfig) -> float:
    embs, refs = prompt_refs(corpus, samples)
    return float(d_mem_values(model, embs, refs, sched, cfg.seed, cfg.n_noise_draws).mean())


def generate_for(model, corpus: Corpus, samples, sched: NoiseSchedule, seed: int, convention: str = "ddim"):
    embs = embed_captions([s.caption for s in samples], corpus.vocab)
    seeds = [seed * 7919 + i for i in range(len(samples))]
    return generate_batch(model, embs, sched, seeds, corpus.D, convention)


def quality(model, corpus: Corpus, samples, sched: NoiseSchedule, cfg: MetricsConfig) -> float:
    gen = generate_for(model, corpus, samples, sched, cfg.seed, cfg.convention)
    return fid(np.stack([s.image for s in samples]), gen, cfg.features)


def objectives(model, corpus: Corpus, sched: NoiseSchedule, cfg: MetricsConfig) -> Objectives:
    """Search objectives: d_mem over the duplicated prompts, FID on the validation split."""
    return Objectives(d_mem=mean_d_mem(model, corpus, corpus.mem_subset, sched, cfg),
                      d_fid=quality(model, corpus, corpus.val, sched, cfg))


def attack_delta(corpus: Corpus, cfg: MetricsConfig) -> float:
    if cfg.delta is not None:
        return cfg.delta
    images = np.stack([s.image for s in corpus.train])
    return calibrate_delta(images, corpus.image_shape, cfg.tile, cfg.delta_percentile, seed=cfg.seed)


def attack(model, corpus: Corpus, samples, sched: NoiseSchedule, cfg: MetricsConfig, delta: float | None = None):
    embs, _ = prompt_refs(corpus, samples)
    delta = attack_delta(corpus, cfg) if delta is None else delta
    return extraction_attack(model, embs, cfg.attack_samples, delta, cfg.attack_k, cfg.seed, sched,
                             corpus.image_shape, cfg.tile, cfg.convention)


def memorization_metrics(model, corpus: Corpus, samples, sched: NoiseSchedule, cfg: MetricsConfig,
                         delta: float | None = None) -> tuple:
    """d_mem, AMD and extraction count for one prompt set, plus the attack report.

    AMD is taken over every attack sample so that it shares the generations
    used for extraction.
    """
    report = attack(model, corpus, samples, sched, cfg, delta)
    train_images = np.stack([s.image for s in corpus.train])
    values = {
        "d_mem": mean_d_mem(model, corpus, samples, sched, cfg),
        "amd": amd(report.images, train_images),
        "extracted_count": report.extracted_count,
    }
    return values, report


def full_metrics(model, corpus: Corpus, sched: NoiseSchedule, cfg: MetricsConfig, split: str = "test",
                 return_report: bool = False):
    """All five metrics.

    Memorization metrics (d_mem, amd, extracted_count) use the duplicated
    prompts; quality metrics (d_fid, prompt_fidelity) use ``split``.
    """
    samples = getattr(corpus, split)
    values, report = memorization_metrics(model, corpus, corpus.mem_subset, sched, cfg)
    gen_split = generate_for(model, corpus, samples, sched, cfg.seed + 1, cfg.convention)
    values["d_fid"] = fid(np.stack([s.image for s in samples]), gen_split, cfg.features)
    values["prompt_fidelity"] = prompt_fidelity(gen_split, [s.class_id for s in samples], corpus.templates)
    return (values, report) if return_report else values


class MaskEvaluator:
    """Inner-loop trial: fine-tune ``theta0`` under a mask, then score it.

    Picklable so it can be shipped to worker processes.
    """

    def __init__(self, theta0, data: Dataset, corpus: Corpus, sched: NoiseSchedule, train_cfg, metrics_cfg: MetricsConfig,
                 extra_masks=()):
        self.theta0, self.data, self.corpus, self.sched = theta0, data, corpus, sched
        self.train_cfg, self.metrics_cfg, self.extra_masks = train_cfg, metrics_cfg, tuple(extra_masks)

    def __call__(self, mask, seed: int) -> Objectives:
        from dataclasses import replace

        from .denoiser import effective_params
        from .training import train_inner

        masks = (mask,) + self.extra_masks
        checksum = self.theta0.base_checksum()
        params, _ = train_inner(self.theta0, masks, self.data, self.corpus.vocab, self.sched,
                                replace(self.train_cfg, seed=seed))
        if self.theta0.base_checksum() != checksum:
            raise RuntimeError("inner training mutated the base parameters")
        return objectives(effective_params(params, masks), self.corpus, self.sched, self.metrics_cfg)


def metrics_row(run_id: str, masks, metrics: dict, seed: int) -> dict:
    masks = tuple(masks)
    if not masks:
        space, bits = "none", ""
    elif len(masks) == 1:
        space, bits = masks[0].space, masks[0].bitstring()
    else:
        space = "+".join(m.space for m in masks)
        bits = "+".join(m.bitstring() for m in masks)
    row = {"run_id": run_id, "mask_space": space, "mask_bits": bits, "seed": seed}
    row.update({k: metrics[k] for k in ("d_mem", "d_fid", "amd", "extracted_count", "prompt_fidelity")})
    return row


def write_metrics_csv(path, rows, append: bool = False) -> None:
    """Metrics CSV: a ``# memsearch-metrics v1`` line, the header, then rows."""
    new = not (append and os.path.exists(path))
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        if new:
            fh.write(f"# memsearch-metrics v{METRICS_VERSION}\n")
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in METRICS_COLUMNS})


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def read_metrics_csv(path) -> list:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for r in csv.DictReader(lines):
        for k in ("d_mem", "d_fid", "amd", "prompt_fidelity"):
            r[k] = float(r[k])
        r["extracted_count"] = int(r["extracted_count"])
        r["seed"] = int(r["seed"])
        rows.append(r)
    return rows


def dataset(samples) -> Dataset:
    return Dataset.from_samples(samples)
