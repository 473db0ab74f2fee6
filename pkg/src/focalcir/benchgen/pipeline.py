"""End-to-end benchmark assembly and the on-disk layout.

build_benchmark runs world generation, per-instance pair filtering with the
subset's threshold preset, the 8:2 instance split, and per-subset gallery
construction, returning everything in memory with lazy embedding caches.
save/load round-trip the same structure through the artifact files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from focalcir.benchgen.filtering import PRESETS, FilterThresholds, filter_pairs
from focalcir.benchgen.gallery import GalleryManifest, GalleryEntry, build_gallery
from focalcir.benchgen.io import load_world, read_jsonl, save_world, write_jsonl
from focalcir.benchgen.quadruples import Quadruple, make_quadruples
from focalcir.benchgen.world import SyntheticWorld, WorldConfig, generate_world
from focalcir.encoders import (
    EncoderParams,
    SyntheticImage,
    TextEmbedding,
    embed_text,
    encode_image,
    pooled_image_embedding,
)
from focalcir.errors import ConfigError, DataError


def default_world_configs() -> list[WorldConfig]:
    """Three dense subsets and one broad one, each sized to clear its
    tau_valid preset by one image."""
    return [
        WorldConfig(subset="fashion", instances_per_category=12, images_per_instance=9,
                    n_contexts=10),
        WorldConfig(subset="car", instances_per_category=12, images_per_instance=11,
                    n_contexts=10),
        WorldConfig(subset="product", instances_per_category=16, images_per_instance=21,
                    n_contexts=14),
        WorldConfig(subset="landmark", instances_per_category=12, images_per_instance=16,
                    n_contexts=12),
    ]


@dataclass
class Benchmark:
    """A fully assembled benchmark plus lazy feature caches."""

    world: SyntheticWorld
    encoders: EncoderParams
    thresholds: dict[str, FilterThresholds]
    train_quads: list[Quadruple]
    eval_quads: list[Quadruple]
    galleries: dict[str, GalleryManifest]
    settings: dict
    stats: dict
    _by_id: dict[str, SyntheticImage] = field(default_factory=dict, repr=False)
    _patches: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _texts: dict[str, TextEmbedding] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for im in list(self.world.images) + list(self.world.reserve_images):
            self._by_id[im.image_id] = im

    @property
    def subsets(self) -> list[str]:
        return sorted(self.world.configs)

    def image(self, image_id: str) -> SyntheticImage:
        try:
            return self._by_id[image_id]
        except KeyError:
            raise DataError(f"unknown image id {image_id!r}") from None

    def patches(self, image_id: str) -> np.ndarray:
        if image_id not in self._patches:
            self._patches[image_id] = encode_image(self.image(image_id), self.encoders)
        return self._patches[image_id]

    def text(self, context_id: str) -> TextEmbedding:
        if context_id not in self._texts:
            try:
                descriptor = self.world.contexts[context_id]
            except KeyError:
                raise DataError(f"unknown context id {context_id!r}") from None
            self._texts[context_id] = embed_text(descriptor, self.encoders)
        return self._texts[context_id]

    def eval_quads_of(self, subset: str) -> list[Quadruple]:
        return [q for q in self.eval_quads if q.subset == subset]


def build_benchmark(
    configs: list[WorldConfig] | None = None,
    seed: int = 0,
    d_model: int = 32,
    l_text: int = 4,
    train_cap: int = 8,
    eval_cap: int = 20,
    n_distractors: int = 320,
    thresholds: dict[str, FilterThresholds] | None = None,
) -> Benchmark:
    configs = default_world_configs() if configs is None else configs
    d_latents = {c.d_latent for c in configs}
    if len(d_latents) != 1:
        raise ConfigError(f"subsets disagree on d_latent: {sorted(d_latents)}")
    thresholds = dict(thresholds) if thresholds else {}
    for cfg in configs:
        if cfg.subset not in thresholds:
            if cfg.subset not in PRESETS:
                raise ConfigError(
                    f"no filter thresholds for subset {cfg.subset!r}; pass them explicitly"
                )
            thresholds[cfg.subset] = PRESETS[cfg.subset]

    world = generate_world(configs, seed)
    enc = EncoderParams(
        seed=world.encoder_seed, d_latent=d_latents.pop(), d_model=d_model, l_text=l_text
    )

    by_instance: dict[str, list[SyntheticImage]] = {}
    for im in world.images:
        by_instance.setdefault(im.instance_id, []).append(im)
    pairs_by_instance: dict[str, list[tuple[str, str]]] = {}
    pair_counts: dict[str, int] = {}
    for iid in sorted(by_instance):
        subset = iid.split("/")[0]
        pairs = filter_pairs(
            by_instance[iid], thresholds[subset], lambda im: pooled_image_embedding(im, enc)
        )
        pair_counts[subset] = pair_counts.get(subset, 0) + len(pairs)
        if pairs:
            pairs_by_instance[iid] = pairs

    train_quads, eval_quads = make_quadruples(
        pairs_by_instance, world, seed=seed, train_cap=train_cap, eval_cap=eval_cap
    )
    galleries = {
        cfg.subset: build_gallery(
            [q for q in eval_quads if q.subset == cfg.subset],
            world.reserve_images, seed=seed, n_distractors=n_distractors,
        )
        for cfg in configs
    }

    settings = {
        "seed": int(seed), "d_model": d_model, "l_text": l_text,
        "train_cap": train_cap, "eval_cap": eval_cap, "n_distractors": n_distractors,
    }
    stats = {}
    for cfg in configs:
        s = cfg.subset
        stats[s] = {
            "images": sum(1 for im in world.images if im.subset == s),
            "reserve_images": sum(1 for im in world.reserve_images if im.subset == s),
            "instances_with_pairs": sum(1 for i in pairs_by_instance if i.split("/")[0] == s),
            "admissible_pairs": pair_counts.get(s, 0),
            "train_quadruples": sum(1 for q in train_quads if q.subset == s),
            "eval_quadruples": sum(1 for q in eval_quads if q.subset == s),
            "gallery_size": len(galleries[s].entries),
            "gallery_targets": galleries[s].n_targets,
        }
    return Benchmark(
        world=world, encoders=enc, thresholds=thresholds,
        train_quads=train_quads, eval_quads=eval_quads, galleries=galleries,
        settings=settings, stats=stats,
    )


# ---------------------------------------------------------------------------
# on-disk layout


def _quad_record(q: Quadruple) -> dict:
    return {
        "ref_image_id": q.ref_image_id,
        "bbox": [float(v) for v in q.bbox],
        "text_context_id": q.text_context_id,
        "target_image_id": q.target_image_id,
        "instance_id": q.instance_id,
        "category_id": q.category_id,
        "subset": q.subset,
    }


def _quad_from_record(rec: dict) -> Quadruple:
    return Quadruple(
        ref_image_id=rec["ref_image_id"],
        bbox=tuple(rec["bbox"]),
        text_context_id=rec["text_context_id"],
        target_image_id=rec["target_image_id"],
        instance_id=rec["instance_id"],
        category_id=rec["category_id"],
        subset=rec["subset"],
    )


def save_benchmark(out_dir, bench: Benchmark, config_hash: str = "") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = bench.settings["seed"]
    save_world(out / "world.bin", bench.world, config_hash=config_hash)
    write_jsonl(out / "quadruples_train.jsonl", "quadruples",
                [_quad_record(q) for q in bench.train_quads], seed, config_hash)
    write_jsonl(out / "quadruples_eval.jsonl", "quadruples",
                [_quad_record(q) for q in bench.eval_quads], seed, config_hash)
    for subset, manifest in sorted(bench.galleries.items()):
        write_jsonl(
            out / f"gallery_{subset}.jsonl", "gallery",
            [
                {"image_id": e.image_id, "instance_id": e.instance_id,
                 "category_id": e.category_id, "is_target": e.is_target}
                for e in manifest.entries
            ],
            seed, config_hash,
        )
    summary = {
        "config_hash": config_hash,
        "settings": bench.settings,
        "thresholds": {
            s: {"tau_valid": t.tau_valid, "tau_high": t.tau_high,
                "tau_centric": t.tau_centric, "tau_count": t.tau_count}
            for s, t in sorted(bench.thresholds.items())
        },
        "stats": bench.stats,
    }
    (out / "stats.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def load_benchmark(in_dir) -> Benchmark:
    src = Path(in_dir)
    if not (src / "stats.json").exists():
        raise DataError(f"{src} does not contain a benchmark (missing stats.json)")
    summary = json.loads((src / "stats.json").read_text(encoding="utf-8"))
    settings = summary["settings"]
    world, _ = load_world(src / "world.bin")
    enc = EncoderParams(
        seed=world.encoder_seed,
        d_latent=next(iter(world.configs.values())).d_latent,
        d_model=settings["d_model"], l_text=settings["l_text"],
    )
    _, train_recs = read_jsonl(src / "quadruples_train.jsonl", expect_kind="quadruples")
    _, eval_recs = read_jsonl(src / "quadruples_eval.jsonl", expect_kind="quadruples")
    galleries = {}
    for subset in sorted(world.configs):
        header, entries = read_jsonl(src / f"gallery_{subset}.jsonl", expect_kind="gallery")
        galleries[subset] = GalleryManifest(
            subset=subset, seed=header["seed"],
            entries=[
                GalleryEntry(r["image_id"], r["instance_id"], r["category_id"],
                             bool(r["is_target"]))
                for r in entries
            ],
        )
    thresholds = {s: FilterThresholds(**raw) for s, raw in summary["thresholds"].items()}
    return Benchmark(
        world=world, encoders=enc, thresholds=thresholds,
        train_quads=[_quad_from_record(r) for r in train_recs],
        eval_quads=[_quad_from_record(r) for r in eval_recs],
        galleries=galleries, settings=settings, stats=summary["stats"],
    )
