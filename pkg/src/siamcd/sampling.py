"""Training-sample protocol: timestamp pairs, change-weighted patch choice, flips and rotations."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from siamcd import kernels
from siamcd.data.core import SiteTimeSeries, derive_change_label
from siamcd.errors import ConfigurationError, ContractError, SamplingError, ShapeError


@dataclass
class SamplerConfig:
    patch_size: int = 256
    candidates_per_draw: int = 20
    base_probability: float = 0.02
    samples_per_site: int = 100
    oversample: bool = True
    augment: bool = True
    change_mode: str = "xor"
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1:
            raise ConfigurationError("patch_size must be >= 1")
        if self.candidates_per_draw < 1:
            raise ConfigurationError("candidates_per_draw must be >= 1")
        if not self.base_probability > 0:
            raise ConfigurationError("base_probability must be > 0")
        if self.samples_per_site < 1:
            raise ConfigurationError("samples_per_site must be >= 1")

    def to_dict(self):
        return asdict(self)


class Transform(NamedTuple):
    hflip: bool = False
    vflip: bool = False
    k: int = 0

    @property
    def code(self) -> str:
        return f"h{int(self.hflip)}v{int(self.vflip)}r{self.k}"

    @classmethod
    def from_code(cls, code: str) -> "Transform":
        return cls(code[1] == "1", code[3] == "1", int(code[5]))


IDENTITY = Transform()


class Patch(NamedTuple):
    site_id: str
    t1: tuple
    t2: tuple
    origin: tuple
    size: int
    labeled: bool
    transform: Transform = IDENTITY


def select_timestamp_pair(series: SiteTimeSeries, rng) -> tuple[int, int]:
    """Indices of two distinct usable timestamps, earlier first, uniform over unordered pairs."""
    usable = series.usable_indices()
    if len(usable) < 2:
        raise SamplingError(
            f"site {series.site_id} has {len(usable)} usable timestamps; at least 2 are needed"
        )
    a, b = rng.choice(len(usable), size=2, replace=False)
    a, b = sorted((int(a), int(b)))
    return usable[a], usable[b]


def propose_patches(change_label, n: int, size: int, rng) -> np.ndarray:
    """``n`` crop origins (row, col), uniform over valid positions, with replacement."""
    h, w = np.shape(change_label)[-2:]
    if size > h or size > w:
        raise SamplingError(f"patch size {size} exceeds raster dims {h}x{w}")
    rows = rng.integers(0, h - size + 1, size=n)
    cols = rng.integers(0, w - size + 1, size=n)
    return np.stack([rows, cols], axis=1)


def patch_weights(change_label, origins, size: int, base_probability: float) -> np.ndarray:
    """Selection probabilities proportional to change fraction + ``base_probability``."""
    origins = np.asarray(origins).reshape(-1, 2)
    if len(origins) == 0:
        raise SamplingError("patch_weights needs at least one candidate origin")
    counts = kernels.window_sums(np.asarray(change_label), origins, int(size))
    raw = counts / float(size * size) + base_probability
    return raw / raw.sum()


def draw_patch(weights, rng) -> int:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or len(w) == 0 or (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
        raise ContractError("draw_patch needs a non-negative weight vector summing to 1")
    return int(rng.choice(len(w), p=w))


def sample_transform(rng) -> Transform:
    hflip, vflip = (bool(b) for b in rng.integers(0, 2, size=2))
    return Transform(hflip, vflip, int(rng.integers(0, 4)))


def apply_transform(raster, transform: Transform):
    """Flip/rotate the last two axes of ``raster``."""
    a = np.asarray(raster)
    if transform.k % 2 and a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"odd quarter-turns need square crops, got {a.shape[-2]}x{a.shape[-1]}")
    if transform.hflip:
        a = a[..., :, ::-1]
    if transform.vflip:
        a = a[..., ::-1, :]
    if transform.k:
        a = np.rot90(a, transform.k, axes=(-2, -1))
    return np.ascontiguousarray(a)


def augment(images, labels, rng, transform: Transform | None = None):
    """Apply one sampled (or given) transform to both images and every label raster.

    ``labels`` is a tuple of rasters or None. Returns (images, labels, transform).
    """
    transform = sample_transform(rng) if transform is None else transform
    images = tuple(apply_transform(im, transform) for im in images)
    if labels is not None:
        labels = tuple(apply_transform(y, transform) for y in labels)
    return images, labels, transform


def _site_patches(site: SiteTimeSeries, config: SamplerConfig, rng) -> list[Patch]:
    size = config.patch_size
    if size > site.height or size > site.width:
        raise SamplingError(f"site {site.site_id}: patch size {size} exceeds {site.height}x{site.width}")
    patches = []
    for _ in range(config.samples_per_site):
        i, j = select_timestamp_pair(site, rng)
        grid = np.zeros((site.height, site.width), dtype=np.uint8)
        if site.labeled and config.oversample:
            grid = site.change_label(i, j, config.change_mode)
        origins = propose_patches(grid, config.candidates_per_draw, size, rng)
        # unlabeled sites (and oversample=False) see an all-zero grid, i.e. uniform weights
        weights = patch_weights(grid, origins, size, config.base_probability)
        r, c = origins[draw_patch(weights, rng)]
        tf = sample_transform(rng) if config.augment else IDENTITY
        patches.append(
            Patch(site.site_id, site.timestamps[i], site.timestamps[j], (int(r), int(c)), size, site.labeled, tf)
        )
    return patches


def epoch_plan(sites, config: SamplerConfig, epoch_seed) -> list[Patch]:
    """``samples_per_site`` patches from every site, globally shuffled, deterministic per seed."""
    bad = [s.site_id for s in sites if len(s.usable_indices()) < 2]
    if bad:
        raise SamplingError(f"sites with fewer than 2 usable timestamps: {bad}")
    seq = np.random.SeedSequence([int(config.seed), int(epoch_seed)])
    children = seq.spawn(len(sites) + 1)
    plan = []
    for site, child in zip(sites, children):
        plan.extend(_site_patches(site, config, np.random.default_rng(child)))
    order = np.random.default_rng(children[-1]).permutation(len(plan))
    return [plan[k] for k in order]


def materialize(site: SiteTimeSeries, patch: Patch, change_mode="xor"):
    """Crop and transform one planned patch: (image_t1, image_t2, labels-or-None).

    ``labels`` is (y_s_t1, y_s_t2, y_c) as uint8 rasters.
    """
    index = {t: k for k, t in enumerate(site.timestamps)}
    i, j = index[patch.t1], index[patch.t2]
    r, c = patch.origin
    s = patch.size
    window = (slice(r, r + s), slice(c, c + s))
    images = (site.image(i)[(slice(None), *window)], site.image(j)[(slice(None), *window)])
    labels = None
    if patch.labeled:
        y1 = site.label(i)[window]
        y2 = site.label(j)[window]
        labels = (y1, y2, derive_change_label(y1, y2, change_mode))
    images, labels, _ = augment(images, labels, None, patch.transform)
    return images[0], images[1], labels


def write_plan_csv(plan, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site", "t1", "t2", "row", "col", "labeled", "transform"])
        for p in plan:
            w.writerow(
                [
                    p.site_id,
                    f"{p.t1[0]:04d}-{p.t1[1]:02d}",
                    f"{p.t2[0]:04d}-{p.t2[1]:02d}",
                    p.origin[0],
                    p.origin[1],
                    int(p.labeled),
                    p.transform.code,
                ]
            )
