"""Ingestion of the SpaceNet7 directory layout into site manifests.

Expected layout (as distributed)::

    <root>/train/<AOI>/images/global_monthly_YYYY_MM_mosaic_<AOI>.tif
    <root>/train/<AOI>/labels_match_pix/global_monthly_YYYY_MM_mosaic_<AOI>_Buildings.geojson
    <root>/test_public/<AOI>/images/global_monthly_YYYY_MM_mosaic_<AOI>.tif

Training AOIs are labeled; ``test_public`` AOIs have no footprints and become
unlabeled sites. Footprints come from ``labels_match_pix`` (pixel coordinates).
"""

from __future__ import annotations

import csv
import logging
import re
from pathlib import Path

from PIL import Image

from siamcd.data.core import Split, assign_splits, default_split_counts, rasterize_footprints
from siamcd.data.io import (
    MANIFEST_VERSION,
    SITE_FORMAT,
    dump_json,
    read_footprints,
    write_dataset_index,
    write_label,
)
from siamcd.errors import ValidationError

log = logging.getLogger(__name__)

STAMP = re.compile(r"global_monthly_(\d{4})_(\d{2})_mosaic_")


def read_exclusions(path) -> list[tuple[str, int, int]]:
    """Cloud exclusion list: CSV rows ``site_id,year,month`` (header optional)."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#") or row[0] == "site_id":
                continue
            try:
                rows.append((row[0].strip(), int(row[1]), int(row[2])))
            except (IndexError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: expected site_id,year,month ({exc})") from exc
    return rows


def _scan(aoi_dir: Path):
    images = {}
    for p in sorted((aoi_dir / "images").glob("*.tif")):
        m = STAMP.search(p.name)
        if m:
            images[(int(m.group(1)), int(m.group(2)))] = p
    labels = {}
    for p in sorted((aoi_dir / "labels_match_pix").glob("*.geojson")):
        m = STAMP.search(p.name)
        if m:
            labels[(int(m.group(1)), int(m.group(2)))] = p
    return images, labels


def prepare_spacenet7(root, out, split_counts=None, seed=0, exclusions=(), channels=3):
    """Write one manifest per AOI plus rasterized label caches; returns the manifest paths."""
    root, out = Path(root), Path(out)
    labeled_dirs = sorted(p for p in (root / "train").glob("*") if p.is_dir())
    unlabeled_dirs = sorted(p for p in (root / "test_public").glob("*") if p.is_dir())
    if not labeled_dirs and not unlabeled_dirs:
        raise ValidationError(f"no SpaceNet7 AOIs found under {root} (expected train/ and test_public/)")
    counts = split_counts or default_split_counts(len(labeled_dirs))
    splits = assign_splits(
        [p.name for p in labeled_dirs], counts, seed, unlabeled_ids=[p.name for p in unlabeled_dirs]
    )
    excluded = {(s, y, m) for s, y, m in exclusions}
    known = set()
    manifests, index = [], []
    for aoi_dir in labeled_dirs + unlabeled_dirs:
        site_id = aoi_dir.name
        split = splits[site_id]
        images, labels = _scan(aoi_dir)
        if not images:
            raise ValidationError(f"{site_id}: no monthly mosaics in {aoi_dir / 'images'}")
        stamps = sorted(images)
        with Image.open(images[stamps[0]]) as im:
            width, height = im.size
        site_dir = out / "sites" / site_id
        entries = []
        missing = []
        for t in stamps:
            known.add((site_id, *t))
            cloudy = (site_id, *t) in excluded
            entry = {
                "year": t[0],
                "month": t[1],
                "image": str(images[t].resolve()),
                "footprints": None,
                "label": None,
                "cloud_excluded": cloudy,
            }
            if split is not Split.unlabeled:
                if t not in labels:
                    if not cloudy:
                        missing.append(f"{t[0]:04d}-{t[1]:02d}")
                else:
                    entry["footprints"] = str(labels[t].resolve())
                    mask = rasterize_footprints(read_footprints(labels[t]), height, width)
                    rel = f"labels/{site_id}_{t[0]:04d}_{t[1]:02d}.png"
                    (site_dir / "labels").mkdir(parents=True, exist_ok=True)
                    write_label(site_dir / rel, mask)
                    entry["label"] = rel
            entries.append(entry)
        if missing:
            raise ValidationError(f"labeled site {site_id} lacks footprints for timestamps {missing}")
        site_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format": SITE_FORMAT,
            "version": MANIFEST_VERSION,
            "site_id": site_id,
            "split": split.value,
            "height": height,
            "width": width,
            "channels": channels,
            "footprint_coords": "pixel",
            "transform": None,
            "timestamps": entries,
        }
        dump_json(manifest, site_dir / "manifest.json")
        manifests.append(site_dir / "manifest.json")
        index.append({"site_id": site_id, "split": split.value, "manifest": f"sites/{site_id}/manifest.json"})
    for entry in sorted(excluded - known):
        log.warning("cloud exclusion %s %04d-%02d matches no timestamp", *entry)
    write_dataset_index(out, index, {"source": "spacenet7", "split_counts": list(counts), "seed": seed})
    return manifests
