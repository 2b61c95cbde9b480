"""Memorization and quality metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, generate_batch, q_sample_batch
from .errors import MatrixError

# ---------------------------------------------------------------- objectives


@dataclass(frozen=True)
class Objectives:
    d_mem: float
    d_fid: float

    def __post_init__(self):
        for name in ("d_mem", "d_fid"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    def as_tuple(self) -> tuple:
        return (self.d_mem, self.d_fid)


# ----------------------------------------------------------------- distances


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cosine distance is undefined for a zero vector")
    return x / norms


def cosine_distance(a, b) -> float:
    """``1 - cos(a, b)``, evaluated as half the squared distance of the unit vectors."""
    ua, ub = _unit_rows(a)[0], _unit_rows(b)[0]
    d = ua - ub
    return float(min(2.0, 0.5 * (d @ d)))


def min_cosine_distances(generated, train, chunk: int = 1 << 22) -> np.ndarray:
    """Per generated row, the minimum cosine distance to any train row."""
    g, t = _unit_rows(generated), _unit_rows(train)
    rows = max(1, chunk // max(1, t.size))
    out = np.empty(len(g))
    for start in range(0, len(g), rows):
        diff = g[start:start + rows, None, :] - t[None, :, :]
        out[start:start + rows] = 0.5 * np.einsum("ijk,ijk->ij", diff, diff).min(axis=1)
    return out


def amd(generated, train) -> float:
    """Average over generated samples of the minimum cosine distance to the training set."""
    generated = np.atleast_2d(np.asarray(generated, dtype=np.float64))
    train = np.atleast_2d(np.asarray(train, dtype=np.float64))
    if generated.size == 0 or train.size == 0:
        raise ValueError("amd needs at least one generated and one training vector")
    return float(min_cosine_distances(generated, train).mean())


# ------------------------------------------------------- denoising strength


def d_mem_values(model, prompt_embs, ref_images, sched: NoiseSchedule, seed: int, n_noise_draws: int = 4):
    """Denoising-strength score per prompt.

    For every draw and every timestep ``k`` the reference image is forward
    noised and the norm of ``eps(x_k, e_p) - eps(x_k, 0)`` is taken; values are
    averaged over timesteps and draws. Every prompt sees the same noise draws.
    """
    prompt_embs = np.atleast_2d(np.asarray(prompt_embs, dtype=np.float64))
    ref_images = np.atleast_2d(np.asarray(ref_images, dtype=np.float64))
    P, D = ref_images.shape
    T = sched.T
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n_noise_draws, T, D))
    ks = np.tile(np.arange(T), n_noise_draws)
    eps_flat = eps.reshape(n_noise_draws * T, D)
    out = np.empty(P)
    for p in range(P):
        x0 = np.broadcast_to(ref_images[p], eps_flat.shape)
        x_t = q_sample_batch(x0, ks, eps_flat, sched)
        cond = model(x_t, ks, prompt_embs[p])
        uncond = model(x_t, ks, np.zeros_like(prompt_embs[p]))
        out[p] = np.linalg.norm(cond - uncond, axis=1).mean()
    return out


def d_mem(model, prompt_emb, ref_image, sched: NoiseSchedule, seed: int, n_noise_draws: int = 4) -> float:
    return float(d_mem_values(model, prompt_emb, ref_image, sched, seed, n_noise_draws)[0])


# ----------------------------------------------------------------- fréchet


def _check_cov(c: np.ndarray, name: str) -> np.ndarray:
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    if c.shape[0] != c.shape[1]:
        raise MatrixError(f"{name} is not square: {c.shape}")
    scale = max(1.0, float(np.abs(c).max(initial=0.0)))
    if np.abs(c - c.T).max(initial=0.0) > 1e-8 * scale:
        raise MatrixError(f"{name} is not symmetric")
    return 0.5 * (c + c.T)


def _psd_eigvals(m: np.ndarray, name: str) -> tuple:
    w, v = np.linalg.eigh(m)
    if w.size and w.min() < -1e-8:
        raise MatrixError(f"{name} is indefinite (eigenvalue {w.min():.3g})")
    return np.clip(w, 0.0, None), v


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """Fréchet distance between two Gaussians.

    ``tr sqrt(cov1 cov2)`` is computed from the eigenvalues of the symmetric
    matrix ``sqrt(cov1) cov2 sqrt(cov1)``, which shares its spectrum.
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    cov1, cov2 = _check_cov(cov1, "cov1"), _check_cov(cov2, "cov2")
    if not (mu1.shape == mu2.shape and cov1.shape == cov2.shape == (len(mu1), len(mu1))):
        raise MatrixError("mean/covariance shapes disagree")
    w1, v1 = _psd_eigvals(cov1, "cov1")
    _psd_eigvals(cov2, "cov2")
    root1 = (v1 * np.sqrt(w1)) @ v1.T
    inner = root1 @ cov2 @ root1
    w, _ = _psd_eigvals(0.5 * (inner + inner.T), "sqrt(cov1) cov2 sqrt(cov1)")
    diff = mu1 - mu2
    value = diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.sqrt(w).sum()
    return float(max(value, 0.0))


@dataclass(frozen=True)
class FeatureMap:
    """``identity`` or a seeded projection onto ``k`` orthonormal directions."""

    mode: str = "random_projection"
    k: int = 16
    seed: int = 0
    matrix: np.ndarray | None = field(default=None, compare=False)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.atleast_2d(np.asarray(images, dtype=np.float64))
        if self.mode == "identity":
            return images
        if self.mode != "random_projection":
            raise ValueError(f"unknown feature mode {self.mode!r}")
        return images @ self.projection(images.shape[1]).T

    def projection(self, dim: int) -> np.ndarray:
        if self.matrix is not None:
            return self.matrix
        if self.k > dim:
            raise ValueError(f"projection width {self.k} exceeds input dimension {dim}")
        g = np.random.default_rng(self.seed).standard_normal((dim, self.k))
        q, r = np.linalg.qr(g)
        return (q * np.sign(np.diag(r))).T


def fid(real, generated, features: FeatureMap | None = None) -> float:
    """Fréchet distance between Gaussian fits of real and generated features."""
    features = features or FeatureMap()
    real, generated = np.atleast_2d(real), np.atleast_2d(generated)
    if len(real) < 2 or len(generated) < 2:
        raise ValueError("fid needs at least two samples per side")
    fr, fg = features(real), features(generated)
    return frechet_distance(fr.mean(axis=0), np.cov(fr, rowvar=False, ddof=1).reshape(fr.shape[1], -1),
                            fg.mean(axis=0), np.cov(fg, rowvar=False, ddof=1).reshape(fg.shape[1], -1))


# ----------------------------------------------------------- tile distance


def _tiles(images: np.ndarray, shape: tuple, tile: int) -> np.ndarray:
    H, W = shape
    if H % tile or W % tile or tile < 1:
        raise ValueError(f"{H}x{W} image cannot be split into {tile}x{tile} tiles")
    x = np.asarray(images, dtype=np.float64).reshape(-1, H // tile, tile, W // tile, tile)
    return x.transpose(0, 1, 3, 2, 4).reshape(len(x), (H // tile) * (W // tile), tile * tile)


def tile_l2(a, b, shape: tuple, tile: int) -> float:
    """Maximum over corresponding tiles of the Euclidean distance between patches."""
    ta, tb = _tiles(a, shape, tile), _tiles(b, shape, tile)
    return float(np.linalg.norm(ta[0] - tb[0], axis=1).max())


def tile_l2_matrix(images, shape: tuple, tile: int) -> np.ndarray:
    t = _tiles(images, shape, tile)
    diff = t[:, None] - t[None, :]
    return np.sqrt(np.einsum("ijtk,ijtk->ijt", diff, diff)).max(axis=2)


def calibrate_delta(images, shape: tuple, tile: int, percentile: float = 1.0,
                    n_pairs: int = 4000, seed: int = 0) -> float:
    """Percentile of tile_l2 over random pairs of distinct images."""
    images = np.atleast_2d(images)
    rng = np.random.default_rng(seed)
    i = rng.integers(len(images), size=n_pairs)
    j = (i + rng.integers(1, len(images), size=n_pairs)) % len(images)
    ti, tj = _tiles(images[i], shape, tile), _tiles(images[j], shape, tile)
    dists = np.linalg.norm(ti - tj, axis=2).max(axis=1)
    return float(np.percentile(dists, percentile))


# ---------------------------------------------------------------- cliques


def greedy_cliques(adj: np.ndarray, min_size: int) -> list:
    """Greedy maximal-clique cover, largest remaining degree first.

    Seeds a clique at the highest-degree remaining node (ties by index), grows
    it with candidate neighbours in descending degree order, removes it, and
    repeats. Returns the cliques of at least ``min_size`` nodes, each sorted.
    """
    adj = np.asarray(adj, dtype=bool).copy()
    np.fill_diagonal(adj, False)
    remaining = np.ones(len(adj), dtype=bool)
    found = []
    while remaining.any():
        sub = adj & remaining[None, :] & remaining[:, None]
        deg = sub.sum(axis=1)
        deg[~remaining] = -1
        seed = int(np.argmax(deg))
        if deg[seed] + 1 < min_size:
            break
        clique = [seed]
        cands = np.flatnonzero(sub[seed])
        for c in sorted(cands, key=lambda n: (-deg[n], n)):
            if all(adj[c, m] for m in clique):
                clique.append(int(c))
        remaining[clique] = False
        if len(clique) >= min_size:
            found.append(sorted(clique))
    return found


@dataclass
class AttackReport:
    extracted_count: int
    cliques: list
    clique_prompts: list
    threshold: float
    min_clique: int
    samples_per_prompt: int
    n_prompts: int
    images: np.ndarray | None = field(default=None, repr=False)

    def extracted_prompts(self) -> list:
        return sorted(set(self.clique_prompts))

    def validate(self, shape: tuple, tile: int, images: np.ndarray | None = None) -> None:
        """Re-check every clique's size and pairwise tile distance bound."""
        images = self.images if images is None else images
        for members in self.cliques:
            if len(members) < self.min_clique:
                raise AssertionError(f"clique {members} smaller than {self.min_clique}")
            if images is not None:
                dist = tile_l2_matrix(images[members], shape, tile)
                if dist.max() > self.threshold:
                    raise AssertionError(f"clique {members} violates the distance bound")

    def to_dict(self, include_images: bool = True) -> dict:
        out = {
            "extracted_count": self.extracted_count,
            "threshold": self.threshold,
            "min_clique": self.min_clique,
            "samples_per_prompt": self.samples_per_prompt,
            "n_prompts": self.n_prompts,
            "cliques": [{"prompt": p, "members": m} for p, m in zip(self.clique_prompts, self.cliques)],
        }
        if include_images and self.images is not None:
            out["clique_samples"] = {str(i): self.images[i].tolist() for m in self.cliques for i in m}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "AttackReport":
        n = data["n_prompts"] * data["samples_per_prompt"]
        images = None
        if "clique_samples" in data:
            samples = {int(k): np.asarray(v) for k, v in data["clique_samples"].items()}
            if samples:
                dim = len(next(iter(samples.values())))
                images = np.full((n, dim), np.nan)
                for i, v in samples.items():
                    images[i] = v
        return cls(
            extracted_count=data["extracted_count"],
            cliques=[c["members"] for c in data["cliques"]],
            clique_prompts=[c["prompt"] for c in data["cliques"]],
            threshold=data["threshold"], min_clique=data["min_clique"],
            samples_per_prompt=data["samples_per_prompt"], n_prompts=n // data["samples_per_prompt"],
            images=images,
        )


def attack_images(images: np.ndarray, n_prompts: int, samples_per_prompt: int, shape: tuple, tile: int,
                  delta: float, min_clique: int) -> AttackReport:
    """Clique-based membership inference over pre-generated images (prompt-major order)."""
    cliques, prompts = [], []
    for p in range(n_prompts):
        lo = p * samples_per_prompt
        block = images[lo:lo + samples_per_prompt]
        adj = tile_l2_matrix(block, shape, tile) <= delta
        for c in greedy_cliques(adj, min_clique):
            cliques.append([lo + i for i in c])
            prompts.append(p)
    return AttackReport(
        extracted_count=len(set(prompts)), cliques=cliques, clique_prompts=prompts, threshold=float(delta),
        min_clique=min_clique, samples_per_prompt=samples_per_prompt, n_prompts=n_prompts, images=images,
    )


def extraction_attack(model, prompt_embs, samples_per_prompt: int, delta: float, min_clique: int, seed: int,
                      sched: NoiseSchedule, shape: tuple, tile: int = 4, convention: str = "ddim") -> AttackReport:
    """Generate ``samples_per_prompt`` images per prompt and report memorized cliques."""
    if samples_per_prompt < min_clique:
        raise ValueError("need at least min_clique samples per prompt")
    prompt_embs = np.atleast_2d(prompt_embs)
    P, S = len(prompt_embs), samples_per_prompt
    embs = np.repeat(prompt_embs, S, axis=0)
    seeds = [seed * 1_000_003 + i for i in range(P * S)]
    images = generate_batch(model, embs, sched, seeds, int(np.prod(shape)), convention)
    return attack_images(images, P, S, shape, tile, delta, min_clique)


# ----------------------------------------------------------------- fidelity


def prompt_fidelity(generated, class_ids, templates) -> float:
    """Fraction of generations whose nearest template (cosine) is their conditioning class."""
    generated = np.atleast_2d(generated)
    class_ids = np.asarray(class_ids)
    g, t = _unit_rows(generated), _unit_rows(templates)
    if class_ids.max(initial=0) >= len(t):
        raise ValueError("templates do not cover every class")
    nearest = np.argmax(g @ t.T, axis=1)
    return float(np.mean(nearest == class_ids))
