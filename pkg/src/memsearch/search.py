"""NSGA-II search over fine-tuning masks, Pareto bookkeeping and trial persistence."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Sequence

import numpy as np

from .denoiser import MASK_LENGTH, SPACES, UNIT_NAMES, ArchConfig, Mask, total_param_count, trainable_count
from .errors import ConfigError, DivergenceError, EmptyResultError, MaskError, TransferError
from .metrics import Objectives

log = logging.getLogger(__name__)

LOG_FORMAT = "memsearch-trials"
LOG_VERSION = 1
MASK_FORMAT_VERSION = 1
STATUSES = ("ok", "diverged", "error")
IMPROVE_TOL = 1e-6
_EXHAUSTIVE_BITS = 20


@dataclass(frozen=True)
class SearchConfig:
    space: str = "spectral"
    population: int = 6
    generations: int = 5
    trial_budget: int = 30
    crossover_prob: float = 0.9
    mutation_prob: float | None = None  # None: 1 / mask length
    seed: int = 0
    patience: int = 12
    normalize: bool = False
    inner_seed: int = 0
    n_bits: int | None = None  # toy space only

    def __post_init__(self):
        if self.space == "toy":
            if not self.n_bits or self.n_bits < 1:
                raise ConfigError("search.n_bits", "toy space needs n_bits >= 1")
        elif self.space not in SPACES:
            raise ConfigError("search.space", f"expected one of {SPACES}, got {self.space!r}")
        if self.population < 2:
            raise ConfigError("search.population", "must be >= 2")
        if self.trial_budget < self.population:
            raise ConfigError("search.trial_budget", "must be >= search.population")
        if self.generations < 1:
            raise ConfigError("search.generations", "must be >= 1")
        if not 0.0 <= self.crossover_prob <= 1.0:
            raise ConfigError("search.crossover_prob", "must lie in [0, 1]")
        if self.mutation_prob is not None and not 0.0 <= self.mutation_prob <= 1.0:
            raise ConfigError("search.mutation_prob", "must lie in [0, 1]")
        if self.patience < 1:
            raise ConfigError("search.patience", "must be >= 1")

    @property
    def length(self) -> int:
        return self.n_bits if self.space == "toy" else MASK_LENGTH[self.space]

    @property
    def pm(self) -> float:
        return 1.0 / self.length if self.mutation_prob is None else self.mutation_prob


@dataclass
class TrialRecord:
    trial_id: int
    mask: Mask
    objectives: Objectives | None
    seed: int
    status: str = "ok"
    wall_seconds: float = 0.0
    generation: int = 0

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown trial status {self.status!r}")
        if self.status == "ok" and self.objectives is None:
            raise ValueError("ok trial without objectives")

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def point(self) -> tuple:
        """Objective pair used for ranking; failed trials sit at +inf."""
        return self.objectives.as_tuple() if self.ok else (math.inf, math.inf)

    def scalarized(self) -> float:
        d_mem, d_fid = self.point()
        return (d_mem + d_fid) / 2.0

    def to_dict(self, reproducible: bool = True) -> dict:
        return {
            "trial_id": self.trial_id,
            "generation": self.generation,
            "space": self.mask.space,
            "bits": list(self.mask.bits),
            "objectives": None if self.objectives is None else
            {"d_mem": self.objectives.d_mem, "d_fid": self.objectives.d_fid},
            "seed": self.seed,
            "status": self.status,
            "wall_seconds": 0.0 if reproducible else self.wall_seconds,
            "timestamp": _timestamp(reproducible),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        obj = d["objectives"]
        return cls(
            trial_id=d["trial_id"], mask=Mask(d["space"], tuple(d["bits"])),
            objectives=None if obj is None else Objectives(obj["d_mem"], obj["d_fid"]),
            seed=d["seed"], status=d["status"], wall_seconds=d["wall_seconds"], generation=d["generation"],
        )


def _timestamp(reproducible: bool) -> str:
    if reproducible:
        t = datetime.fromtimestamp(int(os.environ.get("SOURCE_DATE_EPOCH", "0")), tz=timezone.utc)
    else:
        t = datetime.now(timezone.utc)
    return t.isoformat(timespec="seconds")


# ------------------------------------------------------------------ dominance


def dominates(a, b) -> bool:
    """True iff ``a`` is no worse in both objectives and strictly better in one (minimisation)."""
    a = a.as_tuple() if isinstance(a, Objectives) else tuple(a)
    b = b.as_tuple() if isinstance(b, Objectives) else tuple(b)
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def fast_non_dominated_sort(points: Sequence) -> list:
    """Deb's O(M N^2) sort; fronts hold indices into ``points`` in ascending order."""
    n = len(points)
    pts = [tuple(p) for p in points]
    dominated_by = [[] for _ in range(n)]
    counts = [0] * n
    for i in range(n):
        for j in range(i + 1, n):
            if dominates(pts[i], pts[j]):
                dominated_by[i].append(j)
                counts[j] += 1
            elif dominates(pts[j], pts[i]):
                dominated_by[j].append(i)
                counts[i] += 1
    fronts = []
    current = [i for i in range(n) if counts[i] == 0]
    while current:
        fronts.append(sorted(current))
        nxt = []
        for i in current:
            for j in dominated_by[i]:
                counts[j] -= 1
                if counts[j] == 0:
                    nxt.append(j)
        current = nxt
    return fronts


def crowding_distance(points: Sequence) -> np.ndarray:
    """NSGA-II crowding distance; boundary members get +inf, flat objectives add 0."""
    pts = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    n, m = pts.shape
    if n == 0:
        raise ValueError("empty front")
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = np.inf
        return dist
    for j in range(m):
        order = np.argsort(pts[:, j], kind="stable")
        col = pts[order, j]
        span = col[-1] - col[0]
        dist[order[0]] = dist[order[-1]] = np.inf
        if span <= 0 or not np.isfinite(span):
            continue
        dist[order[1:-1]] += (col[2:] - col[:-2]) / span
    return dist


def pareto_front(trials: Sequence[TrialRecord]) -> list:
    """Exact non-dominated filter over the ok trials, in trial_id order."""
    ok = [t for t in trials if t.ok]
    if not ok:
        raise EmptyResultError("no successful trials")
    front = [t for t in ok if not any(dominates(o.point(), t.point()) for o in ok)]
    return sorted(front, key=lambda t: t.trial_id)


def merge_fronts(*fronts) -> list:
    """Dominance filter over the union of several fronts."""
    pool = [t for f in fronts for t in f]
    return [t for t in pool if not any(dominates(o.point(), t.point()) for o in pool)]


def _normalised(front: Sequence[TrialRecord]) -> list:
    pts = np.array([t.point() for t in front])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return [tuple(r) for r in (pts - lo) / span]


def select_scalarized(front: Sequence[TrialRecord], normalize: bool = False) -> TrialRecord:
    """Member minimising the mean of the two objectives; ties by d_mem, then trial_id."""
    if not front:
        raise EmptyResultError("empty front")
    pts = _normalised(front) if normalize else [t.point() for t in front]
    best = min(range(len(front)), key=lambda i: ((pts[i][0] + pts[i][1]) / 2.0, pts[i][0], front[i].trial_id))
    return front[best]


def best_scalarized_trace(trials: Sequence[TrialRecord]) -> list:
    """Running best (d_mem + d_fid) / 2 after each trial (inf until the first ok trial)."""
    best, out = math.inf, []
    for t in trials:
        if t.ok:
            best = min(best, t.scalarized())
        out.append(best)
    return out


def _last_improvement(values: Sequence[float]) -> int:
    best, last = math.inf, 0
    for i, v in enumerate(values, start=1):
        if math.isfinite(v) and (not math.isfinite(best) or v < best - IMPROVE_TOL):
            best, last = v, i
    return last


def converged(trials: Sequence, patience: int) -> bool:
    """True once the best scalarized value has not improved for ``patience`` trials.

    ``trials`` is either a trial log or a sequence of per-trial scalar scores.
    An improvement must beat the running best by more than 1e-6.
    """
    values = [t.scalarized() if t.ok else math.inf for t in trials] if trials and isinstance(trials[0], TrialRecord) \
        else [float(v) for v in trials]
    return len(values) - _last_improvement(values) >= patience


def convergence_trial(trials: Sequence, patience: int) -> int | None:
    """1-based trial count at which :func:`converged` first fires, or None."""
    for n in range(1, len(trials) + 1):
        if converged(trials[:n], patience):
            return n
    return None


# ------------------------------------------------------------------ variation


def _rank_and_crowding(records: Sequence[TrialRecord]) -> tuple:
    """Front rank and crowding per record; failed trials form a trailing front."""
    ok = [i for i, r in enumerate(records) if r.ok]
    bad = [i for i, r in enumerate(records) if not r.ok]
    fronts = [[ok[i] for i in f] for f in fast_non_dominated_sort([records[i].point() for i in ok])]
    if bad:
        fronts.append(bad)
    rank = np.zeros(len(records), dtype=int)
    crowd = np.zeros(len(records))
    for r, front in enumerate(fronts):
        rank[front] = r
        crowd[front] = crowding_distance([records[i].point() if records[i].ok else (0.0, 0.0) for i in front])
    return fronts, rank, crowd


def select_survivors(records: Sequence[TrialRecord], size: int) -> list:
    """Elitist truncation by (rank, crowding); the best scalarized ok member is always kept."""
    records = list(records)
    if len(records) <= size:
        return records
    fronts, rank, crowd = _rank_and_crowding(records)
    keep = []
    for front in fronts:
        if len(keep) + len(front) <= size:
            keep.extend(front)
            continue
        ordered = sorted(front, key=lambda i: (-crowd[i], records[i].trial_id))
        keep.extend(ordered[: size - len(keep)])
        break
    ok = [i for i, r in enumerate(records) if r.ok]
    if ok:
        elite = min(ok, key=lambda i: (records[i].scalarized(), records[i].point()[0], records[i].trial_id))
        if elite not in keep:
            worst = max(keep, key=lambda i: (rank[i], -crowd[i], records[i].trial_id))
            keep[keep.index(worst)] = elite
    return [records[i] for i in sorted(keep, key=lambda i: records[i].trial_id)]


def binary_tournament(archive: Sequence[TrialRecord], rank, crowd, rng) -> TrialRecord:
    i, j = rng.integers(len(archive), size=2)
    ki = (rank[i], -crowd[i], archive[i].trial_id)
    kj = (rank[j], -crowd[j], archive[j].trial_id)
    return archive[i] if ki <= kj else archive[j]


def initial_masks(cfg: SearchConfig, n: int, rng) -> list:
    """Uniformly random masks; small spaces are sampled without replacement."""
    L = cfg.length
    if L <= _EXHAUSTIVE_BITS and n <= 2 ** L:
        codes = rng.choice(2 ** L, size=n, replace=False)
        return [Mask(cfg.space, tuple((int(c) >> (L - 1 - b)) & 1 for b in range(L))) for c in codes]
    return [Mask(cfg.space, tuple(rng.integers(2, size=L))) for _ in range(n)]


def propose_offspring(archive: Sequence[TrialRecord], evaluated, cfg: SearchConfig, n: int, rng) -> list:
    """Tournament, uniform crossover and bit-flip mutation, deduplicated against ``evaluated``.

    A child that repeats an evaluated (or already proposed) mask has one
    random bit flipped, up to 10 times; after that it is admitted as is.
    """
    if not archive:
        return initial_masks(cfg, n, rng)
    _, rank, crowd = _rank_and_crowding(archive)
    seen = {tuple(m.bits) for m in evaluated}
    out = []
    while len(out) < n:
        a = np.array(binary_tournament(archive, rank, crowd, rng).mask.bits)
        b = np.array(binary_tournament(archive, rank, crowd, rng).mask.bits)
        child = np.where(rng.random(cfg.length) < 0.5, a, b) if rng.random() < cfg.crossover_prob else a.copy()
        child = np.where(rng.random(cfg.length) < cfg.pm, 1 - child, child)
        for _ in range(10):
            if tuple(child) not in seen:
                break
            child = child.copy()
            child[rng.integers(cfg.length)] ^= 1
        seen.add(tuple(child))
        out.append(Mask(cfg.space, tuple(int(v) for v in child)))
    return out


# ------------------------------------------------------------------ driver


def _run_trial(evaluator, mask: Mask, seed: int) -> tuple:
    t0 = time.perf_counter()
    try:
        obj = evaluator(mask, seed)
        status = "ok"
    except (DivergenceError, FloatingPointError) as exc:
        log.warning("trial with mask %s diverged: %s", mask.bitstring(), exc)
        obj, status = None, "diverged"
    except Exception:  # noqa: BLE001 - a failed trial must not abort the search
        log.exception("trial with mask %s failed", mask.bitstring())
        obj, status = None, "error"
    if obj is not None and not isinstance(obj, Objectives):
        obj = Objectives(*obj)
    return obj, status, time.perf_counter() - t0


def _evaluate_batch(evaluator, jobs, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [_run_trial(evaluator, m, s) for m, s in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_trial, [evaluator] * len(jobs), *zip(*jobs)))


@dataclass
class SearchResult:
    trials: list
    front: list
    archive: list = field(default_factory=list)


def run_search(cfg: SearchConfig, evaluator: Callable[[Mask, int], Objectives], workers: int = 1,
               on_trial: Callable[[TrialRecord], None] | None = None) -> SearchResult:
    """Generational NSGA-II until ``trial_budget`` trials are logged.

    ``evaluator(mask, seed)`` trains and scores one mask. The first evaluation
    of a mask uses ``cfg.inner_seed``; re-evaluations of a duplicate mask get
    a fresh seed. Results are merged in trial_id order whatever ``workers`` is.
    """
    rng = np.random.default_rng(cfg.seed)
    trials, archive = [], []
    counts: dict = {}
    generation = 0
    while len(trials) < cfg.trial_budget:
        n = min(cfg.population, cfg.trial_budget - len(trials))
        masks = propose_offspring(archive, [t.mask for t in trials], cfg, n, rng)
        jobs = []
        for m in masks:
            k = counts.get(m.bits, 0)
            counts[m.bits] = k + 1
            jobs.append((m, cfg.inner_seed + k * 1_000_003))
        batch = []
        for (m, seed), (obj, status, wall) in zip(jobs, _evaluate_batch(evaluator, jobs, workers)):
            rec = TrialRecord(len(trials), m, obj, seed, status, wall, generation)
            trials.append(rec)
            batch.append(rec)
            if on_trial is not None:
                on_trial(rec)
        archive = select_survivors(archive + batch, cfg.population)
        generation += 1
    front = pareto_front(trials) if any(t.ok for t in trials) else []
    return SearchResult(trials=trials, front=front, archive=archive)


# ------------------------------------------------------------------ persistence


class TrialLog:
    """Append-only JSONL trial log with a versioned header line."""

    def __init__(self, path, cfg: SearchConfig | None = None, reproducible: bool = True):
        self.path, self.reproducible = path, reproducible
        header = {"format": LOG_FORMAT, "version": LOG_VERSION}
        if cfg is not None:
            header["config"] = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")

    def append(self, rec: TrialRecord) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec.to_dict(self.reproducible), sort_keys=True) + "\n")


def read_trial_log(path) -> tuple:
    """Return ``(header, trials)``."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise EmptyResultError(f"{path} is empty")
    header = json.loads(lines[0])
    if header.get("format") != LOG_FORMAT:
        raise ValueError(f"{path} is not a trial log")
    return header, [TrialRecord.from_dict(json.loads(ln)) for ln in lines[1:]]


def save_mask(path, mask: Mask, source_run: str, scalarized_score: float | None) -> None:
    data = {"version": MASK_FORMAT_VERSION, "space": mask.space, "bits": list(mask.bits),
            "source_run": source_run, "scalarized_score": scalarized_score}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_mask(path) -> tuple:
    """Return ``(mask, metadata dict)``."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if data.get("version") != MASK_FORMAT_VERSION:
        raise MaskError(f"unsupported mask file version {data.get('version')!r}")
    return Mask(data["space"], tuple(data["bits"])), data


def check_transferable(mask: Mask, arch: ArchConfig) -> None:
    """Raise TransferError unless the mask addresses units the target layout has."""
    if mask.space not in MASK_LENGTH:
        raise TransferError(f"mask space {mask.space!r} does not exist in the target model")
    if len(mask.bits) != MASK_LENGTH[mask.space]:
        raise TransferError(f"{mask.space} mask has {len(mask.bits)} bits, target expects {MASK_LENGTH[mask.space]}")
    if arch.n_blocks + (3 if mask.space == "attention" else 0) != len(mask.bits):
        raise TransferError("target block layout does not match the mask")


def analyze_mask(mask: Mask, arch: ArchConfig = ArchConfig()) -> dict:
    """Named units selected by a mask and its trainable-parameter share."""
    units = [UNIT_NAMES[i] for i, b in enumerate(mask.bits) if b]
    count = trainable_count(arch, mask)
    total = total_param_count(arch)
    return {"space": mask.space, "bits": mask.bitstring(), "units": units, "trainable": count,
            "total": total, "fraction": count / total}


def format_analysis(info: dict) -> str:
    units = ", ".join(info["units"]) or "(none)"
    return (f"{info['space']} mask {info['bits']}: {units}; "
            f"{info['trainable']} of {info['total']} parameters ({100 * info['fraction']:.3f}%)")
