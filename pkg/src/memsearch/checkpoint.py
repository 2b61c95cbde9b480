"""Parameter checkpoints.

Layout: a magic line ``MEMSEARCH-CKPT\\n``, one line of sorted-key JSON
header, then the payload: every group as contiguous little-endian float64
in header order. The header lists each group's name, shape and byte offset,
the architecture, the masks the deltas were trained under, a sha256 of the
payload and a sha256 of the effective parameters.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .denoiser import ArchConfig, DenoiserParams, Mask, as_masks, effective_params
from .errors import CheckpointError

MAGIC = b"MEMSEARCH-CKPT\n"
VERSION = 1


def _groups(params: DenoiserParams) -> list:
    out = [("base/" + k, v) for k, v in sorted(params.base.items())]
    out += [("delta/" + k, v) for k, v in sorted(params.deltas.items())]
    if params.svd is not None:
        out += [("svd/" + k, v) for k, v in sorted(params.svd.items())]
    return out


def save_checkpoint(path, params: DenoiserParams, masks=()) -> str:
    """Write ``params`` and return the payload sha256."""
    masks = as_masks(masks)
    groups, offset, chunks = [], 0, []
    for name, arr in _groups(params):
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        groups.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": "<f8"})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    digest = hashlib.sha256(payload).hexdigest()
    header = {
        "version": VERSION,
        "arch": {"D": params.arch.D, "E": params.arch.E, "hidden": params.arch.hidden, "T": params.arch.T},
        "groups": groups,
        "masks": [{"space": m.space, "bits": list(m.bits)} for m in masks],
        "payload_sha256": digest,
        "effective_sha256": effective_params(params, masks).checksum(),
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload)
    return digest


def load_checkpoint(path, arch: ArchConfig | None = None) -> tuple:
    """Return ``(params, masks, header)``; verifies magic, version, checksum and arch."""
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt header") from exc
        payload = fh.read()
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')!r}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    ckpt_arch = ArchConfig(**header["arch"])
    if arch is not None and arch != ckpt_arch:
        raise CheckpointError(f"{path}: checkpoint arch {ckpt_arch} does not match config {arch}")
    parts = {"base": {}, "delta": {}, "svd": {}}
    for g in header["groups"]:
        n = int(np.prod(g["shape"], dtype=np.int64)) * 8
        arr = np.frombuffer(payload, dtype="<f8", count=n // 8, offset=g["offset"]).astype(np.float64)
        kind, name = g["name"].split("/", 1)
        parts[kind][name] = arr.reshape(g["shape"])
    params = DenoiserParams(ckpt_arch, parts["base"], parts["delta"], parts["svd"] or None)
    masks = tuple(Mask(m["space"], tuple(m["bits"])) for m in header["masks"])
    return params, masks, header


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
