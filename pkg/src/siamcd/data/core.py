"""Site time series, building footprints, label rasters and split assignment."""

from __future__ import annotations

import dataclasses
import enum
import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from siamcd import kernels
from siamcd.errors import ConfigurationError, ShapeError, ValidationError

log = logging.getLogger(__name__)


class Split(str, enum.Enum):
    train = "train"
    val = "val"
    test = "test"
    unlabeled = "unlabeled"


@dataclass(frozen=True)
class Footprint:
    id: str
    # exterior ring first, then holes; each an (n, 2) array of (x, y) pixel coordinates
    rings: tuple

    def __post_init__(self):
        closed = []
        for ring in self.rings:
            ring = np.asarray(ring, dtype=np.float64).reshape(-1, 2)
            if len(ring) and not np.array_equal(ring[0], ring[-1]):
                ring = np.vstack([ring, ring[:1]])
            if len(np.unique(ring, axis=0)) < 3:
                raise ValidationError(f"footprint {self.id!r} has a ring with fewer than 3 distinct vertices")
            closed.append(ring)
        if not closed:
            raise ValidationError(f"footprint {self.id!r} has no rings")
        object.__setattr__(self, "rings", tuple(closed))


@dataclass(frozen=True)
class BuildingFootprintSet:
    footprints: tuple = ()

    def __len__(self):
        return len(self.footprints)

    def __iter__(self):
        return iter(self.footprints)

    @classmethod
    def from_rectangles(cls, rects, prefix="b"):
        """Axis-aligned boxes given as (col0, row0, col1, row1) pixel-edge coordinates."""
        fps = []
        for i, (c0, r0, c1, r1) in enumerate(rects):
            ring = [(c0, r0), (c1, r0), (c1, r1), (c0, r1), (c0, r0)]
            fps.append(Footprint(f"{prefix}{i}", (ring,)))
        return cls(tuple(fps))


def rasterize_footprints(footprints: BuildingFootprintSet, height: int, width: int) -> np.ndarray:
    """Binary (height, width) uint8 mask; a pixel is set iff its center lies inside a footprint.

    Inside-ness within a footprint uses the even-odd rule over all of its rings, so holes
    cut out; overlapping footprints union.
    """
    if height <= 0 or width <= 0:
        raise ShapeError(f"raster dims must be positive, got {height}x{width}")
    polys = [[np.ascontiguousarray(r) for r in fp.rings] for fp in footprints]
    return kernels.rasterize_polygons(polys, int(height), int(width))


def derive_change_label(y_t1, y_t2, mode: str = "xor") -> np.ndarray:
    """Change between two building masks: any difference (xor) or new buildings only (construction)."""
    a = np.asarray(y_t1)
    b = np.asarray(y_t2)
    if a.shape != b.shape:
        raise ShapeError(f"label shapes differ: {a.shape} vs {b.shape}")
    a = a != 0
    b = b != 0
    if mode == "xor":
        out = a ^ b
    elif mode == "construction":
        out = b & ~a
    else:
        raise ConfigurationError(f"unknown change mode {mode!r}")
    return out.astype(np.uint8)


@dataclass(frozen=True)
class SiteTimeSeries:
    site_id: str
    timestamps: tuple
    # per timestamp a (C, H, W) float32 raster in [0, 1]; may be a lazy sequence
    images: Sequence
    split: Split = Split.train
    footprints: tuple | None = None
    cloud_excluded: tuple = ()
    # per timestamp (H, W) uint8 building masks; derived from footprints when omitted
    labels: tuple | None = None
    height: int = 0
    width: int = 0
    channels: int = 0

    def __post_init__(self):
        ts = tuple(tuple(int(v) for v in t) for t in self.timestamps)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "split", Split(self.split))
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValidationError(f"site {self.site_id}: timestamps are not strictly increasing")
        if len(self.images) != len(ts):
            raise ValidationError(f"site {self.site_id}: {len(self.images)} images for {len(ts)} timestamps")
        if not self.cloud_excluded:
            object.__setattr__(self, "cloud_excluded", (False,) * len(ts))
        elif len(self.cloud_excluded) != len(ts):
            raise ValidationError(f"site {self.site_id}: cloud flags do not match timestamps")
        else:
            object.__setattr__(self, "cloud_excluded", tuple(bool(c) for c in self.cloud_excluded))
        if not (self.height and self.width and self.channels) and len(self.images):
            c, h, w = np.shape(self.images[0])
            object.__setattr__(self, "channels", c)
            object.__setattr__(self, "height", h)
            object.__setattr__(self, "width", w)
        if self.split is Split.unlabeled:
            if self.footprints is not None or self.labels is not None:
                raise ValidationError(f"site {self.site_id} is unlabeled but carries footprints or labels")
            return
        if self.labels is None:
            if self.footprints is None:
                raise ValidationError(f"labeled site {self.site_id} has no footprints")
            missing = [
                ts[i] for i, fp in enumerate(self.footprints) if fp is None and not self.cloud_excluded[i]
            ]
            if missing:
                raise ValidationError(f"labeled site {self.site_id} lacks footprints for timestamps {missing}")
            labels = tuple(
                None if fp is None else rasterize_footprints(fp, self.height, self.width)
                for fp in self.footprints
            )
            object.__setattr__(self, "labels", labels)
        elif len(self.labels) != len(ts):
            raise ValidationError(f"site {self.site_id}: {len(self.labels)} label rasters for {len(ts)} timestamps")

    @property
    def labeled(self) -> bool:
        return self.split is not Split.unlabeled

    def usable_indices(self) -> list[int]:
        return [i for i, c in enumerate(self.cloud_excluded) if not c]

    def image(self, i) -> np.ndarray:
        return np.asarray(self.images[i], dtype=np.float32)

    def label(self, i) -> np.ndarray:
        if self.labels is None or self.labels[i] is None:
            raise ValidationError(f"site {self.site_id} has no label for timestamp {self.timestamps[i]}")
        return np.asarray(self.labels[i], dtype=np.uint8)

    def change_label(self, i, j, mode="xor") -> np.ndarray:
        return derive_change_label(self.label(i), self.label(j), mode)

    def replace(self, **changes) -> "SiteTimeSeries":
        return dataclasses.replace(self, **changes)


def apply_cloud_exclusions(series: SiteTimeSeries, exclusion_list) -> SiteTimeSeries:
    """Flag ``(site_id, year, month)`` entries of this site as cloud-excluded.

    Entries naming a timestamp the site does not have are logged and ignored.
    """
    flags = list(series.cloud_excluded)
    index = {t: i for i, t in enumerate(series.timestamps)}
    changed = False
    for site_id, year, month in exclusion_list:
        if site_id != series.site_id:
            continue
        i = index.get((int(year), int(month)))
        if i is None:
            log.warning("cloud exclusion %s %04d-%02d matches no timestamp", site_id, int(year), int(month))
            continue
        if not flags[i]:
            flags[i] = True
            changed = True
    return series.replace(cloud_excluded=tuple(flags)) if changed else series


def assign_splits(site_ids, labeled_counts, seed, unlabeled_ids=()) -> dict:
    """Random partition of labeled sites into train/val/test; unlabeled ids map to ``unlabeled``."""
    n_train, n_val, n_test = (int(c) for c in labeled_counts)
    ids = sorted(site_ids)
    if min(n_train, n_val, n_test) < 0 or n_train + n_val + n_test != len(ids):
        raise ConfigurationError(
            f"split counts {labeled_counts} do not partition {len(ids)} labeled sites"
        )
    overlap = set(ids) & set(unlabeled_ids)
    if overlap:
        raise ConfigurationError(f"sites listed as both labeled and unlabeled: {sorted(overlap)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    mapping = {}
    for rank, idx in enumerate(order):
        if rank < n_train:
            mapping[ids[idx]] = Split.train
        elif rank < n_train + n_val:
            mapping[ids[idx]] = Split.val
        else:
            mapping[ids[idx]] = Split.test
    for sid in unlabeled_ids:
        mapping[sid] = Split.unlabeled
    return mapping


def default_split_counts(n_labeled: int) -> tuple[int, int, int]:
    """(40, 10, 10) for 60 sites, scaled proportionally otherwise."""
    n_val = n_test = n_labeled // 6
    return n_labeled - n_val - n_test, n_val, n_test
