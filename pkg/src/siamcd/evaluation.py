"""Change-detection metrics, qualitative maps, comparison tables and loss-curve plots."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from siamcd import kernels
from siamcd.data.core import SiteTimeSeries, Split, derive_change_label
from siamcd.errors import ContractError, DomainError, ParseError, ShapeError

COLORS = {
    "tp": (255, 255, 255),
    "tn": (0, 0, 0),
    "fp": (0, 255, 0),
    "fn": (128, 0, 128),
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _check_pair(pred, label):
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ShapeError(f"prediction {pred.shape} and label {label.shape} differ in shape")
    return pred, label


def accumulate_confusion(pred, label, threshold=0.5) -> ConfusionCounts:
    """Pixel counts with ``pred >= threshold`` as the positive call."""
    if not 0.0 < threshold < 1.0:
        raise DomainError(f"threshold must lie in (0, 1), got {threshold}")
    pred, label = _check_pair(pred, label)
    return ConfusionCounts(*kernels.confusion_counts(pred, label, float(threshold)))


def precision_recall_f1(counts: ConfusionCounts) -> tuple[float, float, float]:
    """Precision, recall and F1; any zero denominator yields 0."""
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def render_qualitative_map(pred, label, threshold=0.5) -> np.ndarray:
    """(H, W, 3) uint8: TP white, TN black, FP green, FN purple."""
    pred, label = _check_pair(pred, label)
    pos = pred >= threshold
    truth = label != 0
    out = np.zeros(pred.shape + (3,), dtype=np.uint8)
    out[pos & truth] = COLORS["tp"]
    out[pos & ~truth] = COLORS["fp"]
    out[~pos & truth] = COLORS["fn"]
    return out


@dataclass
class MetricsRow:
    name: str
    f1: float
    precision: float
    recall: float


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    dataset: str = ""
    threshold: float = 0.5


def evaluation_pairs(site: SiteTimeSeries, mode="first_last"):
    usable = site.usable_indices()
    if len(usable) < 2:
        return []
    if mode == "first_last":
        return [(usable[0], usable[-1])]
    if mode == "all_pairs":
        return [(a, b) for k, a in enumerate(usable) for b in usable[k + 1 :]]
    raise ValueError(f"unknown eval_pairs mode {mode!r}")


@torch.no_grad()
def predict_change(model, image_t1, image_t2, tile=256, device="cpu") -> np.ndarray:
    """Change probabilities for a full (C, H, W) pair.

    The pair is reflect-padded to the network's divisor and processed in
    non-overlapping tiles of at most ``tile`` pixels.
    """
    was_training = model.training
    model.eval()
    d = model.config.divisor
    c, h, w = np.shape(image_t1)
    ph, pw = -h % d, -w % d
    x1 = torch.as_tensor(np.asarray(image_t1, dtype=np.float32))[None]
    x2 = torch.as_tensor(np.asarray(image_t2, dtype=np.float32))[None]
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x1 = torch.nn.functional.pad(x1, (0, pw, 0, ph), mode=mode)
        x2 = torch.nn.functional.pad(x2, (0, pw, 0, ph), mode=mode)
    tile = max(d, tile - tile % d)
    H, W = x1.shape[-2:]
    out = torch.empty(H, W)
    for r in range(0, H, tile):
        for col in range(0, W, tile):
            win = (..., slice(r, r + tile), slice(col, col + tile))
            p = model(x1[win].to(device), x2[win].to(device)).p_c
            out[r : r + tile, col : col + tile] = p[0].cpu()
    model.train(was_training)
    return out[:h, :w].numpy()


def evaluate_model(
    model,
    sites,
    split=None,
    threshold=0.5,
    eval_pairs="first_last",
    tile=256,
    device="cpu",
    name=None,
    change_mode="xor",
    map_dir=None,
):
    """Micro-averaged change metrics over all evaluation pairs of ``sites``.

    Returns ``(counts, row, per_site)`` where ``per_site`` maps site ids to their counts.
    When ``map_dir`` is given, a qualitative map PNG is written per pair.
    """
    if split is not None:
        split = Split(split)
        if split is Split.unlabeled:
            raise ContractError("cannot evaluate on the unlabeled split")
        sites = [s for s in sites if s.split is split]
    total = ConfusionCounts()
    per_site = {}
    for site in sites:
        if not site.labeled:
            raise ContractError(f"site {site.site_id} has no labels to evaluate against")
        site_counts = ConfusionCounts()
        for i, j in evaluation_pairs(site, eval_pairs):
            prob = predict_change(model, site.image(i), site.image(j), tile=tile, device=device)
            truth = derive_change_label(site.label(i), site.label(j), change_mode)
            site_counts = site_counts + accumulate_confusion(prob, truth, threshold)
            if map_dir is not None:
                save_qualitative_map(prob, truth, threshold, map_dir, site.site_id, site.timestamps[i], site.timestamps[j])
        per_site[site.site_id] = site_counts
        total = total + site_counts
    p, r, f1 = precision_recall_f1(total)
    row = MetricsRow(name or model.variant.value, f1, p, r)
    return total, row, per_site


def map_filename(site_id, t1, t2):
    return f"{site_id}_{t1[0]:04d}-{t1[1]:02d}_{t2[0]:04d}-{t2[1]:02d}.png"


def save_qualitative_map(prob, truth, threshold, directory, site_id, t1, t2):
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / map_filename(site_id, t1, t2)
    Image.fromarray(render_qualitative_map(prob, truth, threshold)).save(path, format="PNG")
    return path


METRICS_FIELDS = ["model", "split", "tp", "fp", "fn", "tn", "precision", "recall", "f1", "threshold"]


def write_metrics_csv(path, model, split, counts: ConfusionCounts, threshold, append=False):
    p, r, f1 = precision_recall_f1(counts)
    path = Path(path)
    new = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRICS_FIELDS)
        w.writerow([model, split, counts.tp, counts.fp, counts.fn, counts.tn, f"{p:.6f}", f"{r:.6f}", f"{f1:.6f}", threshold])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- comparison table -------------------------------------------------------

COLUMNS = (("F1 score", "f1"), ("Precision", "precision"), ("Recall", "recall"))


@dataclass
class ComparisonTable:
    rows: list
    best: dict  # column attr -> set of row indices

    def to_text(self, digits=3) -> str:
        """Fixed-width table; best value(s) per column carry a trailing ``*``."""
        name_w = max(len("Model"), *(len(r.name) for r in self.rows))
        header = f"{'Model':<{name_w}}" + "".join(f"  {title:>10}" for title, _ in COLUMNS)
        lines = [header, "-" * len(header)]
        for i, row in enumerate(self.rows):
            cells = []
            for _, attr in COLUMNS:
                mark = "*" if i in self.best[attr] else " "
                cells.append(f"  {getattr(row, attr):>9.{digits}f}{mark}")
            lines.append((f"{row.name:<{name_w}}" + "".join(cells)).rstrip())
        return "\n".join(lines) + "\n"

    def to_csv(self, digits=3) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "f1", "precision", "recall", "best_f1", "best_precision", "best_recall"])
        for i, row in enumerate(self.rows):
            w.writerow(
                [row.name]
                + [f"{getattr(row, a):.{digits}f}" for _, a in COLUMNS]
                + [int(i in self.best[a]) for _, a in COLUMNS]
            )
        return buf.getvalue()


def compare_models(rows, digits=3) -> ComparisonTable:
    """Mark the best value per column; ties (at display precision) mark every tied row."""
    rows = list(rows)
    if not rows:
        raise DomainError("compare_models needs at least one row")
    best = {}
    for _, attr in COLUMNS:
        vals = [round(getattr(r, attr), digits) for r in rows]
        top = max(vals)
        best[attr] = {i for i, v in enumerate(vals) if v == top}
    return ComparisonTable(rows, best)


def read_rows_csv(path) -> list[MetricsRow]:
    """Rows from a CSV with columns model/name, f1, precision, recall."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, rec in enumerate(reader, start=2):
            try:
                name = rec.get("model") or rec.get("name")
                rows.append(MetricsRow(name, float(rec["f1"]), float(rec["precision"]), float(rec["recall"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed metrics row ({exc})") from exc
    return rows


# --- loss curves ------------------------------------------------------------

LOSS_FIELDS = ["epoch", "step", "L_s", "L_c", "L_cons", "total"]


def epoch_means(losses_csv) -> dict:
    """Per-epoch means of the step rows: {"epoch": [...], "L_s": [...], ...}."""
    sums = defaultdict(lambda: np.zeros(4))
    counts = defaultdict(int)
    with open(losses_csv, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LOSS_FIELDS:
            raise ParseError(f"{losses_csv}:1: expected header {','.join(LOSS_FIELDS)}, got {header}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                if len(rec) != len(LOSS_FIELDS):
                    raise ValueError(f"expected {len(LOSS_FIELDS)} fields, got {len(rec)}")
                epoch = int(rec[0])
                int(rec[1])
                vals = np.array([float(v) for v in rec[2:]])
            except ValueError as exc:
                raise ParseError(f"{losses_csv}:{lineno}: {exc}") from exc
            sums[epoch] += vals
            counts[epoch] += 1
    epochs = sorted(sums)
    out = {"epoch": epochs}
    for k, name in enumerate(LOSS_FIELDS[2:]):
        out[name] = [float(sums[e][k] / counts[e]) for e in epochs]
    return out


def plot_loss_curves(losses_csv, out_path, title=None):
    """One curve per loss term over epochs; returns the per-epoch means that were plotted."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    means = epoch_means(losses_csv)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key, label in (("L_c", "change"), ("L_s", "semantics"), ("L_cons", "consistency")):
        ax.plot(means["epoch"], means[key], label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return means
