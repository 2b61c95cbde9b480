"""Synthetic captioned image corpora.

Each class owns a bar-pattern template on an ``height x width`` grid.
A sample is its class template plus a brightness offset set by the caption's
descriptor tokens plus Gaussian pixel noise, clipped to ``[-1, 1]``.
Captions hold exactly one class token and 2-7 descriptor tokens.
"""

from __future__ import annotations

import base64
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, VocabError

FORMAT = "memsearch-corpus"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Vocab:
    """Token ids ``[0, size)``; the first ``n_classes`` ids are class tokens.

    ``embedding`` is the frozen per-token table standing in for a text encoder.
    """

    size: int
    n_classes: int
    embedding: np.ndarray

    @property
    def tokens(self) -> list:
        return [f"class_{i}" if i < self.n_classes else f"desc_{i - self.n_classes}" for i in range(self.size)]

    @property
    def class_tokens(self) -> range:
        return range(self.n_classes)

    @property
    def descriptor_tokens(self) -> range:
        return range(self.n_classes, self.size)

    @property
    def embed_dim(self) -> int:
        return self.embedding.shape[1]


def build_vocab(size: int = 64, n_classes: int = 8, embed_dim: int = 16, seed: int = 0,
                class_scale: float = 3.0) -> Vocab:
    """Frozen Gaussian token table; class-token rows are scaled by ``class_scale``."""
    if n_classes < 1 or size - n_classes < 7:
        raise ConfigError("corpus.vocab_size", "need at least 7 descriptor tokens beyond the class tokens")
    if not class_scale > 0:
        raise ConfigError("corpus.class_scale", "must be > 0")
    table = np.random.default_rng(seed).standard_normal((size, embed_dim))
    table[:n_classes] *= class_scale
    table.setflags(write=False)
    return Vocab(size=size, n_classes=n_classes, embedding=table)


def embed_caption(caption: Sequence[int], vocab: Vocab) -> np.ndarray:
    """Bag-of-tokens mean embedding; the empty caption maps to the zero vector."""
    if len(caption) == 0:
        return np.zeros(vocab.embed_dim)
    ids = np.asarray(caption, dtype=np.intp)
    if ids.min() < 0 or ids.max() >= vocab.size:
        raise VocabError(f"token id outside [0, {vocab.size}): {list(caption)}")
    return vocab.embedding[ids].mean(axis=0)


def embed_captions(captions: Sequence[Sequence[int]], vocab: Vocab) -> np.ndarray:
    return np.stack([embed_caption(c, vocab) for c in captions]) if captions else np.zeros((0, vocab.embed_dim))


@dataclass(frozen=True)
class CaptionedSample:
    id: int
    image: np.ndarray
    caption: tuple
    class_id: int
    is_dup: bool = False


@dataclass(frozen=True)
class Corpus:
    train: tuple
    val: tuple
    test: tuple
    vocab: Vocab
    templates: np.ndarray
    image_shape: tuple
    config: dict
    mem_subset: tuple = ()
    train_augmented: tuple = ()

    @property
    def D(self) -> int:
        return int(np.prod(self.image_shape))


@dataclass
class Dataset:
    """Array view of a sample list, the unit consumed by the trainers."""

    images: np.ndarray
    captions: list
    class_ids: np.ndarray
    ids: np.ndarray
    is_dup: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.images)

    @classmethod
    def from_samples(cls, samples: Sequence[CaptionedSample]) -> "Dataset":
        return cls(
            images=np.stack([s.image for s in samples]),
            captions=[tuple(s.caption) for s in samples],
            class_ids=np.array([s.class_id for s in samples], dtype=np.intp),
            ids=np.array([s.id for s in samples], dtype=np.int64),
            is_dup=np.array([s.is_dup for s in samples], dtype=bool),
        )


def _bar_templates(rng: np.random.Generator, n: int, height: int, width: int, min_sep: float) -> np.ndarray:
    """Random two-bar patterns (rows, columns, diagonals), pairwise separated in L2."""
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 10000:
            raise ConfigError("corpus.n_classes", "cannot draw enough distinct templates")
        img = np.full((height, width), -0.6)
        for _ in range(2):
            kind = rng.integers(4)
            off = int(rng.integers(max(height, width)))
            if kind == 0:
                img[off % height, :] = 0.8
            elif kind == 1:
                img[:, off % width] = 0.8
            else:
                for r in range(height):
                    c = (r + off) % width if kind == 2 else (off - r) % width
                    img[r, c] = 0.8
        flat = img.ravel()
        if all(np.linalg.norm(flat - t) >= min_sep for t in out):
            out.append(flat)
    return np.stack(out)


def generate_corpus(
    seed: int,
    n_train: int = 2000,
    n_val: int = 250,
    n_test: int = 250,
    n_classes: int = 8,
    height: int = 8,
    width: int = 8,
    vocab: Vocab | None = None,
    template_seed: int | None = None,
    noise_std: float = 0.25,
    brightness: float = 0.2,
    class_shift: int = 0,
) -> Corpus:
    """Deterministic synthetic corpus.

    ``template_seed`` selects the class-template stream (defaults to ``seed``).
    ``class_shift`` rotates the class-to-template assignment: class ``c`` is
    drawn from template ``(c + class_shift) mod n_classes``. Two corpora with
    the same templates and different shifts share an image family but have
    disjoint class structure.
    """
    for name, value in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test), ("n_classes", n_classes)):
        if value < 1:
            raise ConfigError(f"corpus.{name}", f"must be >= 1, got {value}")
    vocab = vocab or build_vocab(n_classes=n_classes)
    if vocab.n_classes != n_classes:
        raise ConfigError("corpus.n_classes", f"vocab has {vocab.n_classes} class tokens, corpus wants {n_classes}")
    tseed = seed if template_seed is None else template_seed
    trng = np.random.default_rng([tseed, 1])
    templates = np.roll(_bar_templates(trng, n_classes, height, width, min_sep=2.0), -class_shift, axis=0)
    n_desc = vocab.size - vocab.n_classes
    desc_offset = trng.uniform(-brightness, brightness, n_desc)
    zipf = 1.0 / np.arange(1, n_desc + 1)
    desc_weights = np.empty(n_desc)
    desc_weights[trng.permutation(n_desc)] = zipf / zipf.sum()

    rng = np.random.default_rng([seed, 2])
    samples = []
    for i in range(n_train + n_val + n_test):
        c = int(rng.integers(n_classes))
        k = int(rng.integers(2, 8))
        desc = rng.choice(n_desc, size=k, replace=False, p=desc_weights)
        tokens = [int(d) + vocab.n_classes for d in desc]
        tokens.insert(int(rng.integers(k + 1)), c)
        img = templates[c] + desc_offset[desc].mean() + noise_std * rng.standard_normal(height * width)
        samples.append(CaptionedSample(id=i, image=np.clip(img, -1.0, 1.0), caption=tuple(tokens), class_id=c))
    config = dict(seed=seed, template_seed=tseed, n_train=n_train, n_val=n_val, n_test=n_test,
                  n_classes=n_classes, height=height, width=width, noise_std=noise_std,
                  brightness=brightness, vocab_size=vocab.size, class_shift=class_shift)
    return Corpus(
        train=tuple(samples[:n_train]),
        val=tuple(samples[n_train:n_train + n_val]),
        test=tuple(samples[n_train + n_val:]),
        vocab=vocab,
        templates=templates,
        image_shape=(height, width),
        config=config,
    )


def token_frequency(captions: Sequence[Sequence[int]]) -> list:
    """``(token, count)`` pairs by descending count, ties by ascending token id."""
    counts = Counter(tok for cap in captions for tok in cap)
    return sorted(counts.items(), key=lambda tc: (-tc[1], tc[0]))


def caption_scores(captions: Sequence[Sequence[int]], top_k: int) -> np.ndarray:
    """Per-caption occurrence count of the global top-k tokens."""
    top = {tok for tok, _ in token_frequency(captions)[:top_k]}
    return np.array([sum(tok in top for tok in cap) for cap in captions], dtype=np.int64)


def build_mem_subset(corpus: Corpus, n: int = 10, dup: int = 50, top_k: int = 10) -> Corpus:
    """Select the ``n`` top-scoring training pairs and append ``dup`` copies of each.

    Returns a new corpus with ``mem_subset`` and ``train_augmented`` populated;
    the chosen originals and their copies carry ``is_dup=True`` and keep their id.
    """
    if n > len(corpus.train):
        raise ValueError(f"memorization subset size {n} exceeds train size {len(corpus.train)}")
    if n < 0 or dup < 0:
        raise ValueError("n and dup must be non-negative")
    scores = caption_scores([s.caption for s in corpus.train], top_k)
    order = sorted(range(len(corpus.train)), key=lambda i: (-scores[i], corpus.train[i].id))
    chosen = set(order[:n])
    originals = [replace(s, is_dup=True) if i in chosen else s for i, s in enumerate(corpus.train)]
    mem = tuple(originals[i] for i in order[:n])
    copies = [s for s in mem for _ in range(dup)]
    return replace(corpus, train=tuple(originals), mem_subset=mem, train_augmented=tuple(originals + copies))


def hpo_subsample(corpus: Corpus, fraction: float = 0.01, seed: int = 0, dup: int | None = None) -> tuple:
    """Uniform subsample of the base train set plus ``dup`` copies of each mem-subset pair.

    ``dup`` defaults to the duplication factor used to build ``train_augmented``.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("corpus.hpo_fraction", f"must lie in (0, 1], got {fraction}")
    if dup is None:
        dup = (len(corpus.train_augmented) - len(corpus.train)) // max(len(corpus.mem_subset), 1)
    n_base = max(1, int(round(fraction * len(corpus.train))))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(corpus.train), size=n_base, replace=False))
    base = [corpus.train[i] for i in idx]
    return tuple(base + [s for s in corpus.mem_subset for _ in range(dup)])


def _encode_image(img: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(img, dtype="<f8").tobytes()).decode("ascii")


def _decode_image(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f8").astype(np.float64)


def export_corpus(corpus: Corpus, path) -> None:
    """Write one JSON header line then one JSON record per sample (pixels base64 float64)."""
    mem_ids = [s.id for s in corpus.mem_subset]
    dup = (len(corpus.train_augmented) - len(corpus.train)) // len(mem_ids) if mem_ids else 0
    header = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "config": corpus.config,
        "image_shape": list(corpus.image_shape),
        "vocab": {"size": corpus.vocab.size, "n_classes": corpus.vocab.n_classes,
                  "embedding": _encode_image(corpus.vocab.embedding.ravel()),
                  "embed_dim": corpus.vocab.embed_dim},
        "templates": [_encode_image(t) for t in corpus.templates],
        "mem_ids": mem_ids,
        "dup": dup,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for split in ("train", "val", "test"):
            for s in getattr(corpus, split):
                rec = {"split": split, "id": s.id, "class": s.class_id, "caption": list(s.caption),
                       "pixels": _encode_image(s.image), "is_dup": s.is_dup}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def import_corpus(path) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != FORMAT or header.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: not a {FORMAT} v{FORMAT_VERSION} file")
        splits = {"train": [], "val": [], "test": []}
        for line in fh:
            rec = json.loads(line)
            splits[rec["split"]].append(CaptionedSample(
                id=rec["id"], image=_decode_image(rec["pixels"]), caption=tuple(rec["caption"]),
                class_id=rec["class"], is_dup=rec["is_dup"]))
    v = header["vocab"]
    table = _decode_image(v["embedding"]).reshape(v["size"], v["embed_dim"])
    table.setflags(write=False)
    vocab = Vocab(size=v["size"], n_classes=v["n_classes"], embedding=table)
    corpus = Corpus(
        train=tuple(splits["train"]), val=tuple(splits["val"]), test=tuple(splits["test"]),
        vocab=vocab, templates=np.stack([_decode_image(t) for t in header["templates"]]),
        image_shape=tuple(header["image_shape"]), config=header["config"],
    )
    if header["mem_ids"]:
        by_id = {s.id: s for s in corpus.train}
        mem = tuple(by_id[i] for i in header["mem_ids"])
        copies = [s for s in mem for _ in range(header["dup"])]
        corpus = replace(corpus, mem_subset=mem, train_augmented=corpus.train + tuple(copies))
    return corpus
