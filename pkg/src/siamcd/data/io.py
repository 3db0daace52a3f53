"""Site manifests, rasters and footprint files on disk.

A site directory holds ``manifest.json``::

    {
      "format": "siamcd-site", "version": 1,
      "site_id": "...", "split": "train|val|test|unlabeled",
      "height": H, "width": W, "channels": C,
      "footprint_coords": "pixel" | "geo",
      "transform": [a, b, c, d, e, f] | null,   # x = a*col + b*row + c, y = d*col + e*row + f
      "timestamps": [
        {"year": 2018, "month": 1, "image": "images/...png", "footprints": "...geojson" | null,
         "label": "labels/...png" | null, "cloud_excluded": false}, ...
      ]
    }

Relative paths resolve against the manifest's directory. A dataset directory
lists its sites in ``dataset.json``.
"""

from __future__ import annotations

import json
import os
from collections.abc import Sequence
from functools import lru_cache, partial
from pathlib import Path

import numpy as np
from PIL import Image

from siamcd.data.core import BuildingFootprintSet, Footprint, SiteTimeSeries, Split
from siamcd.errors import ConfigurationError, ValidationError

SITE_FORMAT = "siamcd-site"
DATASET_FORMAT = "siamcd-dataset"
MANIFEST_VERSION = 1


def dump_json(obj, path):
    """Deterministic JSON (sorted keys, fixed indent, trailing newline)."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_image(path, channels=None) -> np.ndarray:
    """PNG or TIFF as a (C, H, W) float32 raster scaled to [0, 1], keeping the first ``channels`` bands."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype == np.uint16:
        scale = 65535.0
    else:
        scale = 1.0
    if channels is not None:
        if arr.shape[2] < channels:
            raise ValidationError(f"{path}: has {arr.shape[2]} bands, manifest expects {channels}")
        arr = arr[:, :, :channels]
    return (arr.astype(np.float32) / scale).transpose(2, 0, 1).copy()


def write_image(path, image):
    arr = np.asarray(image, dtype=np.float64)
    c = arr.shape[0]
    if c not in (1, 3, 4):
        raise ConfigurationError(f"PNG imagery supports 1, 3 or 4 channels, got {c}")
    data = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(data[:, :, 0] if c == 1 else data).save(path, format="PNG")


def read_label(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    return (arr > 127).astype(np.uint8)


def write_label(path, label):
    Image.fromarray((np.asarray(label) != 0).astype(np.uint8) * 255).save(path, format="PNG")


def write_footprints(path, footprints: BuildingFootprintSet):
    features = []
    for fp in footprints:
        features.append(
            {
                "type": "Feature",
                "properties": {"id": fp.id},
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[[float(x), float(y)] for x, y in ring] for ring in fp.rings],
                },
            }
        )
    dump_json({"type": "FeatureCollection", "features": features}, path)


def pixel_from_geo(transform):
    """Map (x, y) geographic coordinates to (col, row) pixel coordinates."""
    a, b, c, d, e, f = transform
    m = np.array([[a, b], [d, e]], dtype=np.float64)
    inv = np.linalg.inv(m)
    off = np.array([c, f], dtype=np.float64)
    return lambda xy: (np.asarray(xy, dtype=np.float64) - off) @ inv.T


def read_footprints(path, transform=None) -> BuildingFootprintSet:
    """GeoJSON Polygon/MultiPolygon features; coordinates converted with ``transform`` when given."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    to_pixel = pixel_from_geo(transform) if transform is not None else None
    fps = []
    for i, feat in enumerate(doc.get("features", [])):
        geom = feat.get("geometry") or {}
        props = feat.get("properties") or {}
        fid = str(props.get("id", props.get("Id", i)))
        if geom.get("type") == "Polygon":
            polys = [geom["coordinates"]]
        elif geom.get("type") == "MultiPolygon":
            polys = geom["coordinates"]
        elif not geom:
            continue
        else:
            raise ValidationError(f"{path}: feature {fid} has unsupported geometry {geom.get('type')!r}")
        for k, poly in enumerate(polys):
            rings = []
            for ring in poly:
                xy = np.asarray(ring, dtype=np.float64)[:, :2]
                rings.append(to_pixel(xy) if to_pixel else xy)
            fps.append(Footprint(fid if len(polys) == 1 else f"{fid}.{k}", tuple(rings)))
    return BuildingFootprintSet(tuple(fps))


class LazyRasters(Sequence):
    """Read-only sequence of image files loaded on access, with a small cache."""

    def __init__(self, paths, channels=None, cache_size=8):
        self.paths = tuple(paths)
        self._load = lru_cache(maxsize=cache_size)(partial(read_image, channels=channels))

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i):
        return self._load(self.paths[i])


def _stamp(site_id, t):
    return f"{site_id}_{t[0]:04d}_{t[1]:02d}"


def write_site(series: SiteTimeSeries, directory, write_labels=True) -> Path:
    """Write imagery, footprints, label cache and manifest; returns the manifest path."""
    directory = Path(directory)
    for sub in ("images", "footprints", "labels"):
        (directory / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for i, t in enumerate(series.timestamps):
        stem = _stamp(series.site_id, t)
        image_rel = f"images/{stem}.png"
        write_image(directory / image_rel, series.image(i))
        entry = {
            "year": t[0],
            "month": t[1],
            "image": image_rel,
            "footprints": None,
            "label": None,
            "cloud_excluded": bool(series.cloud_excluded[i]),
        }
        if series.labeled:
            if series.footprints is not None and series.footprints[i] is not None:
                entry["footprints"] = f"footprints/{stem}.geojson"
                write_footprints(directory / entry["footprints"], series.footprints[i])
            if write_labels and series.labels[i] is not None:
                entry["label"] = f"labels/{stem}.png"
                write_label(directory / entry["label"], series.labels[i])
        entries.append(entry)
    manifest = {
        "format": SITE_FORMAT,
        "version": MANIFEST_VERSION,
        "site_id": series.site_id,
        "split": series.split.value,
        "height": series.height,
        "width": series.width,
        "channels": series.channels,
        "footprint_coords": "pixel",
        "transform": None,
        "timestamps": entries,
    }
    path = directory / "manifest.json"
    dump_json(manifest, path)
    return path


def _resolve(base: Path, p):
    return p if os.path.isabs(p) else str(base / p)


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read site manifest {path}: {exc}") from exc
    if doc.get("format") != SITE_FORMAT:
        raise ValidationError(f"{path}: not a site manifest (format={doc.get('format')!r})")
    if doc.get("version") != MANIFEST_VERSION:
        raise ValidationError(f"{path}: manifest version {doc.get('version')} unsupported (expected {MANIFEST_VERSION})")
    doc["_base"] = str(path.parent)
    return doc


def load_site(path, lazy=False) -> SiteTimeSeries:
    doc = load_manifest(path)
    base = Path(doc["_base"])
    entries = doc["timestamps"]
    image_paths = [_resolve(base, e["image"]) for e in entries]
    channels = doc["channels"]
    if lazy:
        images = LazyRasters(image_paths, channels)
    else:
        images = tuple(read_image(p, channels) for p in image_paths)
    split = Split(doc["split"])
    labels = footprints = None
    if split is not Split.unlabeled:
        transform = doc.get("transform") if doc.get("footprint_coords") == "geo" else None
        footprints = tuple(
            read_footprints(_resolve(base, e["footprints"]), transform) if e.get("footprints") else None
            for e in entries
        )
        if all(e.get("label") or e.get("cloud_excluded") for e in entries):
            labels = tuple(read_label(_resolve(base, e["label"])) if e.get("label") else None for e in entries)
    return SiteTimeSeries(
        site_id=doc["site_id"],
        timestamps=tuple((e["year"], e["month"]) for e in entries),
        images=images,
        split=split,
        footprints=footprints,
        labels=labels,
        cloud_excluded=tuple(bool(e.get("cloud_excluded", False)) for e in entries),
        height=doc["height"],
        width=doc["width"],
        channels=doc["channels"],
    )


def write_dataset_index(directory, site_entries, extra=None):
    doc = {"format": DATASET_FORMAT, "version": MANIFEST_VERSION, "sites": site_entries}
    if extra:
        doc.update(extra)
    dump_json(doc, Path(directory) / "dataset.json")


def load_dataset(directory, splits=None, lazy=False) -> list[SiteTimeSeries]:
    """All sites of a dataset directory, optionally filtered to the given splits."""
    directory = Path(directory)
    index = directory / "dataset.json"
    if index.exists():
        doc = json.loads(index.read_text())
        manifests = [directory / s["manifest"] for s in doc["sites"]]
    else:
        manifests = sorted(directory.glob("sites/*/manifest.json"))
    if not manifests:
        raise ValidationError(f"no site manifests under {directory}")
    wanted = None if splits is None else {Split(s) for s in splits}
    sites = []
    for m in manifests:
        if wanted is not None and Split(load_manifest(m)["split"]) not in wanted:
            continue
        sites.append(load_site(m, lazy=lazy))
    return sites
