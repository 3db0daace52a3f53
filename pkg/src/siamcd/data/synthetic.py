"""Procedural urban-growth sites for desk-scale runs.

Buildings are axis-aligned boxes that appear at a random timestamp and persist,
so change between any earlier and later timestamp is construction only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from siamcd.data.core import BuildingFootprintSet, SiteTimeSeries, Split, rasterize_footprints
from siamcd.errors import ConfigurationError

BACKGROUND_LEVEL = 0.25
BUILDING_LEVEL = 0.75


@dataclass
class SyntheticSiteConfig:
    height: int = 128
    width: int = 128
    channels: int = 3
    n_timestamps: int = 6
    initial_buildings: int = 6
    growth_rate: float = 3.0  # expected new buildings per timestamp
    min_size: int = 4
    max_size: int = 14
    noise_level: float = 0.05
    labeled: bool = True
    start: tuple = (2018, 1)

    def validate(self):
        if self.height <= 0 or self.width <= 0:
            raise ConfigurationError(f"synthetic dims must be positive, got {self.height}x{self.width}")
        if self.channels < 1:
            raise ConfigurationError("channels must be >= 1")
        if self.n_timestamps < 1:
            raise ConfigurationError("n_timestamps must be >= 1")
        if not 1 <= self.min_size <= self.max_size:
            raise ConfigurationError("need 1 <= min_size <= max_size")
        if self.max_size > min(self.height, self.width):
            raise ConfigurationError("max_size exceeds site dims")
        if self.growth_rate < 0 or self.noise_level < 0:
            raise ConfigurationError("growth_rate and noise_level must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["start"] = list(self.start)
        return d


def _monthly(start, n):
    y, m = start
    out = []
    for _ in range(n):
        out.append((y, m))
        m += 1
        if m > 12:
            y, m = y + 1, 1
    return out


def generate_synthetic_site(seed, config: SyntheticSiteConfig | None = None, site_id=None, split=None):
    config = config or SyntheticSiteConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    h, w, c = config.height, config.width, config.channels
    site_id = site_id or f"synth_{seed}"
    if split is None:
        split = Split.train if config.labeled else Split.unlabeled

    counts = [config.initial_buildings] + list(rng.poisson(config.growth_rate, config.n_timestamps - 1))
    rects, born = [], []
    for t, k in enumerate(counts):
        for _ in range(int(k)):
            bh, bw = rng.integers(config.min_size, config.max_size + 1, size=2)
            r0 = int(rng.integers(0, h - bh + 1))
            c0 = int(rng.integers(0, w - bw + 1))
            rects.append((c0, r0, c0 + int(bw), r0 + int(bh)))
            born.append(t)
    # brightness stays on its side of the midpoint so noise-free labels are recoverable
    background = BACKGROUND_LEVEL + rng.uniform(-0.05, 0.05, size=c)
    roof = BUILDING_LEVEL + rng.uniform(-0.05, 0.05, size=(len(rects), c))

    images, footprints = [], []
    for t in range(config.n_timestamps):
        present = [i for i in range(len(rects)) if born[i] <= t]
        fps = BuildingFootprintSet.from_rectangles([rects[i] for i in present])
        img = np.empty((c, h, w), dtype=np.float64)
        img[:] = (background + rng.uniform(-0.03, 0.03))[:, None, None]
        for i in present:
            c0, r0, c1, r1 = rects[i]
            img[:, r0:r1, c0:c1] = roof[i][:, None, None]
        if config.noise_level > 0:
            img += rng.normal(0.0, config.noise_level, size=img.shape)
        images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
        # footprint ids follow creation order so they are stable across timestamps
        footprints.append(
            BuildingFootprintSet(tuple(fp.__class__(f"b{i}", fp.rings) for i, fp in zip(present, fps)))
        )

    labeled = Split(split) is not Split.unlabeled
    labels = tuple(rasterize_footprints(fp, h, w) for fp in footprints) if labeled else None
    return SiteTimeSeries(
        site_id=site_id,
        timestamps=tuple(_monthly(config.start, config.n_timestamps)),
        images=tuple(images),
        split=split,
        footprints=tuple(footprints) if labeled else None,
        labels=labels,
    )
