"""Benchmark artifact files: binary world container and JSONL records.

Every file opens with provenance (format version, generator seed, config
hash) and every byte is determined by its inputs: JSON is emitted with
sorted keys and repr floats, arrays as raw little-endian float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from typing import Iterable

import numpy as np

from focalcir.benchgen.world import SyntheticWorld, WorldConfig
from focalcir.encoders import ContextDescriptor, SyntheticImage
from focalcir.errors import DataError

_WORLD_MAGIC = b"FCWORLD1\n"


def _canon(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


def save_world(path, world: SyntheticWorld, config_hash: str = "") -> None:
    images = list(world.images) + list(world.reserve_images)
    header = {
        "version": 1,
        "seed": world.seed,
        "config_hash": config_hash,
        "configs": {name: asdict(cfg) for name, cfg in world.configs.items()},
        "context_ids": sorted(world.contexts),
        "identity_ids": sorted(world.identities),
        "category_ids": sorted(world.categories),
        "n_reserve": len(world.reserve_images),
        "images": [
            {
                "image_id": im.image_id,
                "instance_id": im.instance_id,
                "category_id": im.category_id,
                "context_id": im.context_id,
                "subset": im.subset,
                "bbox": [float(v) for v in im.bbox],
                "grid_shape": list(im.grid.shape),
                "reserve": i >= len(world.images),
            }
            for i, im in enumerate(images)
        ],
    }
    blob = _canon(header)
    with open(path, "wb") as fh:
        fh.write(_WORLD_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for cid in header["context_ids"]:
            fh.write(np.ascontiguousarray(world.contexts[cid].latent, dtype="<f8").tobytes())
        for iid in header["identity_ids"]:
            fh.write(np.ascontiguousarray(world.identities[iid], dtype="<f8").tobytes())
        for cat in header["category_ids"]:
            fh.write(np.ascontiguousarray(world.categories[cat], dtype="<f8").tobytes())
        for im in images:
            fh.write(np.ascontiguousarray(im.grid, dtype="<f8").tobytes())


def _read_block(fh, shape) -> np.ndarray:
    count = int(np.prod(shape))
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise DataError("world file truncated")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def load_world(path) -> tuple[SyntheticWorld, str]:
    """Returns (world, stored config hash)."""
    with open(path, "rb") as fh:
        if fh.read(len(_WORLD_MAGIC)) != _WORLD_MAGIC:
            raise DataError(f"{path} is not a world file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        if header.get("version") != 1:
            raise DataError(f"unsupported world file version {header.get('version')}")
        configs = {
            name: WorldConfig(**{**raw, "grid": tuple(raw["grid"]),
                                 "bbox_size_range": tuple(raw["bbox_size_range"])})
            for name, raw in header["configs"].items()
        }
        world = SyntheticWorld(seed=header["seed"], configs=configs)
        d_of = {name: cfg.d_latent for name, cfg in configs.items()}
        for cid in header["context_ids"]:
            latent = _read_block(fh, (d_of[cid.split("/")[0]],))
            world.contexts[cid] = ContextDescriptor(context_id=cid, latent=latent)
        for iid in header["identity_ids"]:
            world.identities[iid] = _read_block(fh, (d_of[iid.split("/")[0]],))
        for cat in header["category_ids"]:
            world.categories[cat] = _read_block(fh, (d_of[cat.split("/")[0]],))
        for rec in header["images"]:
            grid = _read_block(fh, tuple(rec["grid_shape"]))
            image = SyntheticImage(
                image_id=rec["image_id"],
                instance_id=rec["instance_id"],
                category_id=rec["category_id"],
                context_id=rec["context_id"],
                subset=rec["subset"],
                bbox=tuple(rec["bbox"]),
                grid=grid,
            )
            (world.reserve_images if rec["reserve"] else world.images).append(image)
    return world, header.get("config_hash", "")


def write_jsonl(path, kind: str, records: Iterable[dict], seed: int, config_hash: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        head = {"kind": kind, "version": 1, "seed": int(seed), "config_hash": config_hash}
        fh.write(json.dumps(head, sort_keys=True, separators=(",", ":")) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def read_jsonl(path, expect_kind: str | None = None) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path} is empty")
    header = json.loads(lines[0])
    if "kind" not in header:
        raise DataError(f"{path} has no header line")
    if expect_kind is not None and header["kind"] != expect_kind:
        raise DataError(f"{path} holds {header['kind']!r} records, expected {expect_kind!r}")
    return header, [json.loads(ln) for ln in lines[1:]]
