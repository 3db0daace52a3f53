from siamcd.data.core import (
    BuildingFootprintSet,
    Footprint,
    SiteTimeSeries,
    Split,
    apply_cloud_exclusions,
    assign_splits,
    default_split_counts,
    derive_change_label,
    rasterize_footprints,
)
from siamcd.data.io import load_dataset, load_site, write_site
from siamcd.data.synthetic import SyntheticSiteConfig, generate_synthetic_site

__all__ = [
    "BuildingFootprintSet",
    "Footprint",
    "SiteTimeSeries",
    "Split",
    "SyntheticSiteConfig",
    "apply_cloud_exclusions",
    "assign_splits",
    "default_split_counts",
    "derive_change_label",
    "generate_synthetic_site",
    "load_dataset",
    "load_site",
    "rasterize_footprints",
    "write_site",
]
