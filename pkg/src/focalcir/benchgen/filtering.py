"""Pair admissibility filtering over the images of one instance.

Three rules, applied to one instance's image set:
  1. sets smaller than tau_valid yield no pairs at all;
  2. an image is dropped when at least tau_count other images of the set are
     more similar to it than tau_centric (near-duplicate cluster);
  3. an ordered pair is dropped when its similarity exceeds tau_high.
Similarity is cosine over caller-supplied features; the benchmark uses
mean-pooled frozen-encoder patch embeddings. Rules 2 and 3 are stable under
re-application: surviving images never gain duplicate neighbours by removal,
so re-filtering the survivors returns the same pairs whenever the survivor
count still clears tau_valid (rule 1 gates on the input set size each call).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from focalcir.encoders import SyntheticImage
from focalcir.errors import ConfigError
from focalcir.numerics.similarity import cosine_sim_matrix


@dataclass(frozen=True)
class FilterThresholds:
    tau_valid: int
    tau_high: float
    tau_centric: float
    tau_count: int

    def validate(self) -> None:
        if not (0.0 < self.tau_centric <= self.tau_high < 1.0):
            raise ConfigError(
                f"need 0 < tau_centric <= tau_high < 1, got {self.tau_centric}, {self.tau_high}"
            )
        if self.tau_valid < 2:
            raise ConfigError("tau_valid must be >= 2")
        if self.tau_count < 1:
            raise ConfigError("tau_count must be >= 1")


# per-subset presets
PRESETS: dict[str, FilterThresholds] = {
    "fashion": FilterThresholds(tau_valid=8, tau_high=0.92, tau_centric=0.88, tau_count=3),
    "car": FilterThresholds(tau_valid=10, tau_high=0.88, tau_centric=0.85, tau_count=2),
    "product": FilterThresholds(tau_valid=20, tau_high=0.88, tau_centric=0.85, tau_count=2),
    "landmark": FilterThresholds(tau_valid=15, tau_high=0.90, tau_centric=0.88, tau_count=3),
}


def filter_pairs(
    images: Sequence[SyntheticImage],
    thresholds: FilterThresholds,
    embed: Callable[[SyntheticImage], np.ndarray],
) -> list[tuple[str, str]]:
    """Admissible ordered (ref_image_id, target_image_id) pairs of one set."""
    thresholds.validate()
    if len(images) < thresholds.tau_valid:
        return []
    feats = np.stack([np.asarray(embed(im), dtype=np.float64).reshape(-1) for im in images])
    sims = cosine_sim_matrix(feats, feats)
    n = len(images)
    close = sims > thresholds.tau_centric
    np.fill_diagonal(close, False)
    kept = [i for i in range(n) if int(close[i].sum()) < thresholds.tau_count]
    pairs: list[tuple[str, str]] = []
    for i in kept:
        for j in kept:
            if i != j and sims[i, j] <= thresholds.tau_high:
                pairs.append((images[i].image_id, images[j].image_id))
    return pairs
