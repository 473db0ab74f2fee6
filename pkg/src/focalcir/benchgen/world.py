"""Synthetic world generation: instances, contexts, and planted-region images.

Every image is a latent patch grid holding exactly one planted instance
region: patches whose centers fall inside the box carry the instance
identity plus noise, all others carry the image's context plus noise.
Identities cluster around a category prototype, so same-category instances
are genuinely confusable, and a held-out reserve pool of extra instances per
category supplies gallery distractors that never appear in any quadruple.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from focalcir.encoders import ContextDescriptor, SyntheticImage
from focalcir.errors import ConfigError
from focalcir.geometry import center_inside, patch_center, validate_bbox


@dataclass
class WorldConfig:
    """Per-subset generation knobs."""

    subset: str
    n_categories: int = 5
    instances_per_category: int = 12
    images_per_instance: int = 9
    n_contexts: int = 10
    grid: tuple[int, int] = (8, 8)
    d_latent: int = 16
    noise_sigma: float = 0.1
    bbox_size_range: tuple[float, float] = (0.25, 0.5)
    identity_delta: float = 0.35  # spread of instances around their category prototype
    reserve_instances_per_category: int = 12
    reserve_images_per_instance: int = 8

    def validate(self) -> None:
        if self.images_per_instance < 2:
            raise ConfigError("images_per_instance must be >= 2 (a quadruple needs distinct ref/target)")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be >= 0")
        for name in ("n_categories", "instances_per_category", "n_contexts"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        lo, hi = self.bbox_size_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError(f"bbox size range {self.bbox_size_range} must satisfy 0 < lo <= hi <= 1")
        h, w = self.grid
        if lo <= max(1.0 / h, 1.0 / w):
            raise ConfigError(
                "minimum bbox side must exceed one patch spacing so the planted region "
                "always covers at least one patch center"
            )
        if self.d_latent < 2:
            raise ConfigError("d_latent must be >= 2")
        if self.reserve_instances_per_category < 0 or self.reserve_images_per_instance < 0:
            raise ConfigError("reserve pool sizes must be >= 0")


@dataclass
class SyntheticWorld:
    """One generated benchmark world (all subsets)."""

    seed: int
    configs: dict[str, WorldConfig]
    images: list[SyntheticImage] = field(default_factory=list)
    reserve_images: list[SyntheticImage] = field(default_factory=list)
    contexts: dict[str, ContextDescriptor] = field(default_factory=dict)
    identities: dict[str, np.ndarray] = field(default_factory=dict)
    categories: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def encoder_seed(self) -> int:
        # the frozen feature encoder is pinned to the world so filtering,
        # training, and evaluation all share one projection
        return self.seed

    def images_of_instance(self, instance_id: str) -> list[SyntheticImage]:
        return [im for im in self.images if im.instance_id == instance_id]


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def _instance_latent(rng: np.random.Generator, proto: np.ndarray, delta: float) -> np.ndarray:
    # delta scales a unit direction, so the cluster radius (and the
    # within-category cosine ~ 1/(1+delta^2)) is dimension-independent
    v = proto + delta * _unit(rng, proto.shape[0])
    return v / np.linalg.norm(v)


def _sample_bbox(rng: np.random.Generator, cfg: WorldConfig):
    lo, hi = cfg.bbox_size_range
    w = rng.uniform(lo, hi)
    h = rng.uniform(lo, hi)
    x0 = rng.uniform(0.0, 1.0 - w)
    y0 = rng.uniform(0.0, 1.0 - h)
    bbox = (x0, y0, x0 + w, y0 + h)
    validate_bbox(bbox)
    return bbox


def _render_grid(
    rng: np.random.Generator,
    cfg: WorldConfig,
    identity: np.ndarray,
    context: np.ndarray,
    bbox,
) -> np.ndarray:
    h, w = cfg.grid
    grid = np.empty((h, w, cfg.d_latent))
    for r in range(h):
        for c in range(w):
            cx, cy = patch_center(r, c, cfg.grid)
            base = identity if center_inside(bbox, cx, cy) else context
            grid[r, c] = base + cfg.noise_sigma * rng.normal(size=cfg.d_latent)
    return grid


def _context_schedule(rng: np.random.Generator, n_images: int, n_contexts: int) -> list[int]:
    # round-robin over a shuffled context order: context reuse within an
    # instance is as even as possible, so no image accumulates enough
    # near-duplicates to trip the centric filter on default worlds
    perm = rng.permutation(n_contexts)
    return [int(perm[i % n_contexts]) for i in range(n_images)]


def _generate_subset(world: SyntheticWorld, cfg: WorldConfig, ss: np.random.SeedSequence) -> None:
    cfg.validate()
    rng = np.random.default_rng(ss)
    s = cfg.subset
    context_ids = [f"{s}/ctx{i:02d}" for i in range(cfg.n_contexts)]
    for cid in context_ids:
        world.contexts[cid] = ContextDescriptor(context_id=cid, latent=_unit(rng, cfg.d_latent))
    for cat in range(cfg.n_categories):
        category_id = f"{s}/cat{cat}"
        proto = _unit(rng, cfg.d_latent)
        world.categories[category_id] = proto
        pools = (
            ("inst", cfg.instances_per_category, cfg.images_per_instance, world.images),
            ("res", cfg.reserve_instances_per_category, cfg.reserve_images_per_instance, world.reserve_images),
        )
        for tag, n_instances, n_images, sink in pools:
            for k in range(n_instances):
                instance_id = f"{category_id}/{tag}{k:02d}"
                world.identities[instance_id] = _instance_latent(rng, proto, cfg.identity_delta)
                schedule = _context_schedule(rng, n_images, cfg.n_contexts)
                for i, ctx_idx in enumerate(schedule):
                    ctx_id = context_ids[ctx_idx]
                    bbox = _sample_bbox(rng, cfg)
                    grid = _render_grid(
                        rng, cfg, world.identities[instance_id],
                        world.contexts[ctx_id].latent, bbox,
                    )
                    sink.append(
                        SyntheticImage(
                            image_id=f"{instance_id}/img{i:02d}",
                            instance_id=instance_id,
                            category_id=category_id,
                            context_id=ctx_id,
                            subset=s,
                            bbox=bbox,
                            grid=grid,
                        )
                    )


def generate_world(configs: list[WorldConfig], seed: int) -> SyntheticWorld:
    """Deterministic multi-subset world; each subset draws from its own stream."""
    names = [c.subset for c in configs]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate subset labels in world configs: {names}")
    world = SyntheticWorld(seed=int(seed), configs={c.subset: c for c in configs})
    children = np.random.SeedSequence(int(seed)).spawn(len(configs))
    for cfg, child in zip(configs, children):
        _generate_subset(world, cfg, child)
    return world
