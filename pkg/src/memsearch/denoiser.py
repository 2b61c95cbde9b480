"""Conditional residual-MLP noise predictor with maskable PEFT deltas.

Layout: conditioning ``c = time[k] + W_p e`` enters the stream
``h = W_in x + b_in + c`` and every one of the 13 residual blocks
``h += gamma_b * tanh(W_b h + b_b + c)`` (6 down, 1 mid, 6 up, in that order).
The head mixes a per-timestep skip with the network output:
``eps = skip[k] * x + out[k] * (W_out h + b_out)``. The time groups
(``time``, ``time.skip``, ``time.out``) train only during pretraining.

Mask bit order follows the search-space convention: bits 0-5 are the down
blocks, bits 6-11 the up blocks, bit 12 the mid block. The attention space
appends three extra units: 13 input projection, 14 prompt projection,
15 output head.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, MaskError, ShapeError
from .linalg import jacobi_svd

N_BLOCKS = 13
SPACES = ("spectral", "scale_shift", "attention")
MASK_LENGTH = {"spectral": 13, "scale_shift": 13, "attention": 16}

# forward-order block j -> mask bit
BLOCK_BIT = np.array([0, 1, 2, 3, 4, 5, 12, 6, 7, 8, 9, 10, 11])
UNIT_NAMES = tuple(
    [f"down-{i}" for i in range(1, 7)]
    + [f"up-{i}" for i in range(1, 7)]
    + ["mid", "in-proj", "prompt-proj", "out-head"]
)
BIT_IN, BIT_PROMPT, BIT_OUT = 13, 14, 15

SPACE_DELTAS = {
    "spectral": ("spectral",),
    "scale_shift": ("scale", "shift"),
    "attention": ("attn.blocks.W", "attn.in.W", "attn.in.b", "attn.prompt.W", "attn.out.W", "attn.out.b"),
}
BASE_GROUPS = ("in.W", "in.b", "prompt.W", "time", "time.skip", "time.out", "blocks.W", "blocks.b", "blocks.gamma", "out.W", "out.b")


@dataclass(frozen=True)
class ArchConfig:
    D: int = 64
    E: int = 16
    hidden: int = 64
    T: int = 50

    def __post_init__(self):
        for name in ("D", "E", "hidden", "T"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"arch.{name}", f"must be a positive integer, got {value!r}")

    @property
    def n_blocks(self) -> int:
        return N_BLOCKS

    @property
    def n_attention_units(self) -> int:
        return N_BLOCKS + 3


@dataclass(frozen=True)
class Mask:
    """Binary selection of fine-tuned units within one PEFT space.

    The ``toy`` space accepts any length and is only meant for stubbed
    search objectives.
    """

    space: str
    bits: tuple

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        object.__setattr__(self, "bits", bits)
        if self.space == "toy":
            if not bits:
                raise MaskError("toy mask needs at least one bit")
        elif self.space not in MASK_LENGTH:
            raise MaskError(f"unknown mask space {self.space!r}")
        elif len(bits) != MASK_LENGTH[self.space]:
            raise MaskError(f"{self.space} mask needs {MASK_LENGTH[self.space]} bits, got {len(bits)}")
        if any(b not in (0, 1) for b in bits):
            raise MaskError(f"mask bits must be 0/1, got {bits}")

    @classmethod
    def zeros(cls, space: str, n: int | None = None) -> "Mask":
        return cls(space, (0,) * (MASK_LENGTH.get(space, 0) if n is None else n))

    @classmethod
    def ones(cls, space: str, n: int | None = None) -> "Mask":
        return cls(space, (1,) * (MASK_LENGTH.get(space, 0) if n is None else n))

    @property
    def array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.float64)

    def block_bits(self) -> np.ndarray:
        """Per-block 0/1 weights in forward (down, mid, up) order."""
        return self.array[BLOCK_BIT]

    def popcount(self) -> int:
        return sum(self.bits)

    def bitstring(self) -> str:
        return "".join(map(str, self.bits))

    def __le__(self, other: "Mask") -> bool:
        return self.space == other.space and all(a <= b for a, b in zip(self.bits, other.bits))


def as_masks(masks) -> tuple:
    """Normalise a Mask, a sequence of Masks, or None into a tuple (one per space)."""
    if masks is None:
        return ()
    if isinstance(masks, Mask):
        masks = (masks,)
    masks = tuple(masks)
    spaces = [m.space for m in masks]
    if len(set(spaces)) != len(spaces):
        raise MaskError(f"duplicate mask spaces {spaces}")
    for m in masks:
        if m.space not in MASK_LENGTH:
            raise MaskError(f"cannot apply a {m.space!r} mask to the denoiser")
    return masks


FULL_FT = (Mask.ones("attention"), Mask.ones("scale_shift"))


@dataclass
class DenoiserParams:
    """Frozen base parameters, optional SVD factors, and PEFT deltas."""

    arch: ArchConfig
    base: dict
    deltas: dict = field(default_factory=dict)
    svd: dict | None = None

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            arch=self.arch,
            base={k: v.copy() for k, v in self.base.items()},
            deltas={k: v.copy() for k, v in self.deltas.items()},
            svd=None if self.svd is None else {k: v.copy() for k, v in self.svd.items()},
        )

    def with_zero_deltas(self) -> "DenoiserParams":
        """Shallow view sharing base/SVD arrays with fresh zero deltas."""
        return DenoiserParams(self.arch, self.base, zero_deltas(self.arch), self.svd)

    def base_checksum(self) -> str:
        return array_checksum(self.base, BASE_GROUPS)


def array_checksum(arrays: dict, names: Iterable[str]) -> str:
    h = hashlib.sha256()
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def zero_deltas(arch: ArchConfig) -> dict:
    H, D, E = arch.hidden, arch.D, arch.E
    return {
        "spectral": np.zeros((N_BLOCKS, H)),
        "scale": np.zeros((N_BLOCKS, H)),
        "shift": np.zeros((N_BLOCKS, H)),
        "attn.blocks.W": np.zeros((N_BLOCKS, H, H)),
        "attn.in.W": np.zeros((H, D)),
        "attn.in.b": np.zeros(H),
        "attn.prompt.W": np.zeros((H, E)),
        "attn.out.W": np.zeros((D, H)),
        "attn.out.b": np.zeros(D),
    }


def init_params(arch: ArchConfig, seed: int) -> DenoiserParams:
    """Seeded initialisation: orthonormal in/out projections, Gaussian elsewhere; gamma = 1, biases and deltas = 0."""
    rng = np.random.default_rng(seed)
    H, D, E, T = arch.hidden, arch.D, arch.E, arch.T
    base = {
        "in.W": rng.standard_normal((H, D)) / np.sqrt(D),
        "in.b": np.zeros(H),
        "prompt.W": rng.standard_normal((H, E)) / np.sqrt(E),
        "time": 0.5 * rng.standard_normal((T, H)),
        "time.skip": np.ones(T),
        "time.out": np.ones(T),
        "blocks.W": rng.standard_normal((N_BLOCKS, H, H)) / np.sqrt(H),
        "blocks.b": np.zeros((N_BLOCKS, H)),
        "blocks.gamma": np.ones((N_BLOCKS, H)),
        "out.W": 0.1 * rng.standard_normal((D, H)) / np.sqrt(H),
        "out.b": np.zeros(D),
    }
    return DenoiserParams(arch=arch, base=base, deltas=zero_deltas(arch))


def svd_decompose(params: DenoiserParams) -> DenoiserParams:
    """Populate per-block SVD factors of the frozen block weights (in place)."""
    U, S, Vt = [], [], []
    for j in range(N_BLOCKS):
        u, s, vt = jacobi_svd(params.base["blocks.W"][j], block=j)
        U.append(u)
        S.append(s)
        Vt.append(vt)
    params.svd = {"U": np.stack(U), "S": np.stack(S), "Vt": np.stack(Vt)}
    return params


@dataclass
class Effective:
    """Concrete parameter set used by the forward pass; callable as a noise model."""

    W_in: np.ndarray
    b_in: np.ndarray
    W_p: np.ndarray
    time: np.ndarray
    skip: np.ndarray
    oscale: np.ndarray
    W: np.ndarray
    b: np.ndarray
    gamma: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray

    NAMES = ("W_in", "b_in", "W_p", "time", "skip", "oscale", "W", "b", "gamma", "W_out", "b_out")

    def __call__(self, x, k, emb):
        return forward(self, x, k, emb)

    def arrays(self) -> dict:
        return {name: getattr(self, name) for name in self.NAMES}

    def checksum(self) -> str:
        return array_checksum(self.arrays(), self.NAMES)


def base_view(params: DenoiserParams) -> Effective:
    p = params.base
    return Effective(p["in.W"], p["in.b"], p["prompt.W"], p["time"], p["time.skip"], p["time.out"], p["blocks.W"], p["blocks.b"],
                     p["blocks.gamma"], p["out.W"], p["out.b"])


def effective_params(params: DenoiserParams, masks) -> Effective:
    """Apply ``theta0 + mask * delta`` for every mask given.

    The spectral update ``U diag(sigma + bit * delta) V^T`` is evaluated as
    ``W0 + U diag(bit * delta) V^T`` so masked-off or zero-delta blocks are
    exactly the frozen weights.
    """
    masks = as_masks(masks)
    eff = base_view(params)
    d = params.deltas
    for mask in masks:
        bits = mask.array
        blk = mask.block_bits()
        on = blk > 0
        if mask.space == "spectral":
            if params.svd is None:
                raise MaskError("spectral mask requires svd_decompose() first")
            if np.any(on):
                U, Vt = params.svd["U"], params.svd["Vt"]
                W = eff.W.copy()
                idx = np.flatnonzero(on)
                W[idx] = W[idx] + np.matmul(U[idx] * d["spectral"][idx][:, None, :], Vt[idx])
                eff.W = W
        elif mask.space == "scale_shift":
            if np.any(on):
                eff.gamma = eff.gamma + blk[:, None] * d["scale"]
                eff.b = eff.b + blk[:, None] * d["shift"]
        elif mask.space == "attention":
            if np.any(on):
                W = eff.W.copy()
                W[on] = W[on] + d["attn.blocks.W"][on]
                eff.W = W
            if bits[BIT_IN]:
                eff.W_in = eff.W_in + d["attn.in.W"]
                eff.b_in = eff.b_in + d["attn.in.b"]
            if bits[BIT_PROMPT]:
                eff.W_p = eff.W_p + d["attn.prompt.W"]
            if bits[BIT_OUT]:
                eff.W_out = eff.W_out + d["attn.out.W"]
                eff.b_out = eff.b_out + d["attn.out.b"]
    return eff


def _prep_inputs(eff: Effective, x, k, emb):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    emb = np.asarray(emb, dtype=np.float64)
    if x.shape[1] != eff.W_in.shape[1]:
        raise ShapeError(f"x has {x.shape[1]} pixels, model expects {eff.W_in.shape[1]}")
    if emb.shape[-1] != eff.W_p.shape[1]:
        raise ShapeError(f"embedding width {emb.shape[-1]}, model expects {eff.W_p.shape[1]}")
    if emb.ndim == 1:
        emb = np.broadcast_to(emb, (len(x), emb.shape[0]))
    elif len(emb) != len(x):
        raise ShapeError(f"{len(emb)} embeddings for {len(x)} inputs")
    ks = np.broadcast_to(np.asarray(k, dtype=np.intp), (len(x),))
    return x, ks, emb


def _forward_cache(eff: Effective, x, ks, emb):
    c = eff.time[ks] + emb @ eff.W_p.T
    h = x @ eff.W_in.T + eff.b_in + c
    hs, acts = [h], []
    for j in range(N_BLOCKS):
        s = np.tanh(h @ eff.W[j].T + eff.b[j] + c)
        h = h + eff.gamma[j] * s
        hs.append(h)
        acts.append(s)
    net = h @ eff.W_out.T + eff.b_out
    return eff.skip[ks, None] * x + eff.oscale[ks, None] * net, (hs, acts, net)


def forward(eff: Effective, x, k, emb) -> np.ndarray:
    """Predict noise for a batch ``x (N, D)`` at timestep(s) ``k`` with prompt embedding(s)."""
    x, ks, emb = _prep_inputs(eff, x, k, emb)
    return _forward_cache(eff, x, ks, emb)[0]


def _backward(eff: Effective, x, ks, emb, cache, dy, need_time=False) -> dict:
    """Reverse-mode sweep returning gradients w.r.t. every effective group."""
    hs, acts, net = cache
    dnet = eff.oscale[ks, None] * dy
    g = {
        "W_out": dnet.T @ hs[-1],
        "b_out": dnet.sum(axis=0),
    }
    dh = dnet @ eff.W_out
    dc = np.zeros_like(dh)
    gW = np.empty_like(eff.W)
    gb = np.empty_like(eff.b)
    ggamma = np.empty_like(eff.gamma)
    for j in range(N_BLOCKS - 1, -1, -1):
        s = acts[j]
        ggamma[j] = np.einsum("ij,ij->j", dh, s)
        dz = dh * eff.gamma[j] * (1.0 - s * s)
        gW[j] = dz.T @ hs[j]
        gb[j] = dz.sum(axis=0)
        dc += dz
        dh = dh + dz @ eff.W[j]
    dc += dh
    g.update(W=gW, b=gb, gamma=ggamma, W_in=dh.T @ x, b_in=dh.sum(axis=0), W_p=dc.T @ emb)
    if need_time:
        T = len(eff.skip)
        gt = np.zeros_like(eff.time)
        np.add.at(gt, ks, dc)
        g["time"] = gt
        g["skip"] = np.bincount(ks, weights=np.einsum("ij,ij->i", dy, x), minlength=T)
        g["oscale"] = np.bincount(ks, weights=np.einsum("ij,ij->i", dy, net), minlength=T)
    return g


def mse_and_effective_grads(eff: Effective, x_t, ks, emb, eps, need_time=False):
    """Loss ``mean ||eps - eps_hat||^2 / D`` and its gradient w.r.t. effective params."""
    x_t, ks, emb = _prep_inputs(eff, x_t, ks, emb)
    if len(x_t) == 0:
        raise ValueError("empty batch")
    y, cache = _forward_cache(eff, x_t, ks, emb)
    resid = y - eps
    n, D = resid.shape
    loss = float(np.sum(resid * resid) / (n * D))
    dy = (2.0 / (n * D)) * resid
    return loss, _backward(eff, x_t, ks, emb, cache, dy, need_time)


def delta_grads(params: DenoiserParams, masks, g: dict) -> dict:
    """Chain effective-parameter gradients onto the deltas of the active masks."""
    out = {}
    for mask in as_masks(masks):
        bits = mask.array
        blk = mask.block_bits()
        if mask.space == "spectral":
            U, Vt = params.svd["U"], params.svd["Vt"]
            # dL/d delta_i = u_i^T (dL/dW) v_i
            out["spectral"] = np.einsum("bij,bik,bjk->bj", U, g["W"], Vt) * blk[:, None]
        elif mask.space == "scale_shift":
            out["scale"] = g["gamma"] * blk[:, None]
            out["shift"] = g["b"] * blk[:, None]
        elif mask.space == "attention":
            out["attn.blocks.W"] = g["W"] * blk[:, None, None]
            out["attn.in.W"] = g["W_in"] * bits[BIT_IN]
            out["attn.in.b"] = g["b_in"] * bits[BIT_IN]
            out["attn.prompt.W"] = g["W_p"] * bits[BIT_PROMPT]
            out["attn.out.W"] = g["W_out"] * bits[BIT_OUT]
            out["attn.out.b"] = g["b_out"] * bits[BIT_OUT]
    return out


def loss_and_grad(params: DenoiserParams, masks, x0, emb, ks, eps, sched):
    """MSE denoising loss on one batch and gradients over the masked deltas.

    Deltas of the given spaces whose mask bit is 0 receive exactly-zero
    gradients; deltas of spaces not in ``masks`` are omitted.
    """
    from .diffusion import q_sample_batch

    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if len(x0) == 0:
        raise ValueError("empty batch")
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    ks = np.asarray(ks, dtype=np.intp)
    x_t = q_sample_batch(x0, ks, eps, sched)
    eff = effective_params(params, masks)
    loss, g = mse_and_effective_grads(eff, x_t, ks, emb, eps)
    return loss, delta_grads(params, masks, g)


def trainable_count(arch: ArchConfig, masks) -> int:
    """Number of scalars a mask set exposes to fine-tuning."""
    H, D, E = arch.hidden, arch.D, arch.E
    total = 0
    for mask in as_masks(masks):
        blocks = int(mask.block_bits().sum())
        if mask.space == "spectral":
            total += blocks * H
        elif mask.space == "scale_shift":
            total += blocks * 2 * H
        elif mask.space == "attention":
            bits = mask.bits
            total += blocks * H * H
            total += bits[BIT_IN] * (H * D + H) + bits[BIT_PROMPT] * H * E + bits[BIT_OUT] * (D * H + D)
    return total


def total_param_count(arch: ArchConfig) -> int:
    H, D, E, T = arch.hidden, arch.D, arch.E, arch.T
    return H * D + H + H * E + T * (H + 2) + N_BLOCKS * (H * H + 2 * H) + D * H + D


def parse_masks(spec: Sequence[dict]) -> tuple:
    return tuple(Mask(m["space"], tuple(m["bits"])) for m in spec)
