"""Command-line entry point: ``siamcd <command> [options]``.

Commands: synth, prepare, train, eval, predict, compare, plot-losses, benchmark.
Configuration is layered: built-in defaults, then each ``--config`` file in order
(YAML or JSON), then ``--set key.path=value`` overrides, then dedicated flags.
The resolved tree is written to the output directory before any work starts.

Exit codes: 0 success, 2 configuration error, 3 data validation error,
4 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import yaml

from siamcd import __version__
from siamcd.backbone import VARIANT_LABELS, Variant
from siamcd.data.core import Split, assign_splits, default_split_counts
from siamcd.data.io import dump_json, load_dataset, write_dataset_index, write_label, write_site
from siamcd.data.synthetic import SyntheticSiteConfig, generate_synthetic_site
from siamcd.errors import ConfigurationError, SiamCDError, ValidationError
from siamcd.evaluation import (
    MetricsRow,
    compare_models,
    evaluate_model,
    evaluation_pairs,
    plot_loss_curves,
    predict_change,
    read_metrics_csv,
    read_rows_csv,
    save_qualitative_map,
    write_metrics_csv,
)
from siamcd.trainer import BENCHMARK_ORDER, TrainConfig, load_model, selected_checkpoint, train

log = logging.getLogger("siamcd")

SYNTH_DEFAULTS = {
    "n_labeled": 8,
    "n_unlabeled": 8,
    "split_counts": None,
    "seed": 0,
    "site": SyntheticSiteConfig().to_dict(),
}


# --- configuration ----------------------------------------------------------


def deep_update(base: dict, other: dict) -> dict:
    for k, v in other.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            deep_update(base[k], v)
        else:
            base[k] = copy.deepcopy(v)
    return base


def load_config_file(path) -> dict:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigurationError(f"config {path} must hold a mapping")
    return doc


def apply_override(tree: dict, expr: str):
    if "=" not in expr:
        raise ConfigurationError(f"override {expr!r} must look like key.path=value")
    key, raw = expr.split("=", 1)
    node = tree
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"override {expr!r} descends into a non-mapping")
    node[parts[-1]] = yaml.safe_load(raw)


def resolve(defaults: dict, args) -> dict:
    tree = copy.deepcopy(defaults)
    for path in args.config or []:
        deep_update(tree, load_config_file(path))
    for expr in args.set or []:
        apply_override(tree, expr)
    return tree


def prepare_out(out, force):
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigurationError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run_manifest(out, command, config, inputs, seed):
    dump_json(
        {
            "command": command,
            "config": config,
            "inputs": [str(Path(p).resolve()) for p in inputs],
            "output": str(Path(out).resolve()),
            "seed": seed,
            "version": __version__,
        },
        Path(out) / "run_manifest.json",
    )


# --- synth / prepare --------------------------------------------------------


def synth_dataset(cfg: dict, out) -> list[str]:
    site_cfg = SyntheticSiteConfig(**{**cfg["site"], "start": tuple(cfg["site"].get("start", (2018, 1)))})
    site_cfg.validate()
    n_lab, n_unl = int(cfg["n_labeled"]), int(cfg["n_unlabeled"])
    if n_lab < 0 or n_unl < 0:
        raise ConfigurationError("site counts must be non-negative")
    seed = int(cfg["seed"])
    labeled_ids = [f"synth_L{i:03d}" for i in range(n_lab)]
    unlabeled_ids = [f"synth_U{i:03d}" for i in range(n_unl)]
    counts = cfg.get("split_counts") or default_split_counts(n_lab)
    splits = assign_splits(labeled_ids, counts, seed, unlabeled_ids)
    site_seeds = np.random.SeedSequence(seed).generate_state(n_lab + n_unl)
    index = []
    for sid, s in zip(labeled_ids + unlabeled_ids, site_seeds):
        site = generate_synthetic_site(int(s), site_cfg, site_id=sid, split=splits[sid])
        write_site(site, Path(out) / "sites" / sid)
        index.append({"site_id": sid, "split": splits[sid].value, "manifest": f"sites/{sid}/manifest.json"})
    write_dataset_index(out, index, {"source": "synthetic", "generator": {**cfg, "split_counts": list(counts)}})
    return [e["site_id"] for e in index]


def cmd_synth(args):
    cfg = resolve(SYNTH_DEFAULTS, args)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = prepare_out(args.out, args.force)
    write_run_manifest(out, "synth", cfg, [], cfg["seed"])
    ids = synth_dataset(cfg, out)
    print(f"wrote {len(ids)} synthetic sites to {out}")


def cmd_prepare(args):
    from siamcd.data.spacenet7 import prepare_spacenet7, read_exclusions

    exclusions = read_exclusions(args.exclusions) if args.exclusions else []
    counts = tuple(int(c) for c in args.split_counts.split(",")) if args.split_counts else None
    out = prepare_out(args.out, args.force)
    seed = args.seed or 0
    write_run_manifest(out, "prepare", {"split_counts": counts, "exclusions": args.exclusions}, [args.root], seed)
    manifests = prepare_spacenet7(args.root, out, counts, seed, exclusions, args.channels)
    print(f"wrote {len(manifests)} site manifests to {out}")


# --- train ------------------------------------------------------------------


def train_config_from(args, extra=None) -> tuple[TrainConfig, dict]:
    tree = resolve(TrainConfig().to_dict(), args)
    if extra:
        deep_update(tree, extra)
    if getattr(args, "variant", None):
        tree["network"]["variant"] = args.variant
    if args.seed is not None:
        tree["seed"] = args.seed
        tree["network"]["seed"] = args.seed
        tree["sampler"]["seed"] = args.seed
    if args.device:
        tree["device"] = args.device
    if args.workers:
        tree["workers"] = args.workers
    try:
        config = TrainConfig.from_dict(tree)
    except TypeError as exc:
        raise ConfigurationError(f"invalid training config: {exc}") from exc
    return config, config.to_dict()


def split_sites(data_dir, variant: Variant, require_unlabeled=True):
    sites = load_dataset(data_dir)
    train_sites = [s for s in sites if s.split is Split.train]
    val_sites = [s for s in sites if s.split is Split.val]
    unlabeled = [s for s in sites if s.split is Split.unlabeled]
    if variant.ssl and require_unlabeled and not unlabeled:
        raise ConfigurationError(
            f"variant {variant.value} trains on unlabeled sites but {data_dir} has none (split 'unlabeled')"
        )
    if not variant.ssl:
        unlabeled = []
    if not train_sites:
        raise ValidationError(f"{data_dir} has no sites in the train split")
    return train_sites, unlabeled, val_sites


def cmd_train(args):
    config, tree = train_config_from(args)
    if args.resume:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    else:
        out = prepare_out(args.out, args.force)
    write_run_manifest(out, "train", tree, [args.data], config.seed)
    tr, unl, val = split_sites(args.data, config.network.variant)
    train(config, tr, unl, val, run_dir=out, resume=args.resume)
    print(f"trained {config.network.variant.value}; run directory {out}")


# --- eval / predict ---------------------------------------------------------


def _model_for(run_dir, selection, device):
    return load_model(selected_checkpoint(run_dir, selection), device)


def _run_variant(run_dir) -> str:
    cfg = json.loads((Path(run_dir) / "config.json").read_text())
    return cfg["network"]["variant"]


def evaluate_run(run_dir, data_dir, split="test", selection="best", threshold=0.5, eval_pairs="first_last",
                 maps=True, device="cpu", tile=256):
    run_dir = Path(run_dir)
    model = _model_for(run_dir, selection, device)
    sites = load_dataset(data_dir, splits=[split])
    if not sites:
        raise ValidationError(f"{data_dir} has no sites in split {split!r}")
    out = run_dir / f"eval_{split}"
    out.mkdir(exist_ok=True)
    counts, row, per_site = evaluate_model(
        model, sites, split=split, threshold=threshold, eval_pairs=eval_pairs, tile=tile, device=device,
        map_dir=out / "maps" if maps else None,
    )
    write_metrics_csv(out / "metrics.csv", model.variant.value, split, counts, threshold)
    for sid in sorted(per_site):
        write_metrics_csv(out / "per_site.csv", sid, split, per_site[sid], threshold, append=True)
    return counts, row


def cmd_eval(args):
    counts, row = evaluate_run(
        args.run, args.data, args.split, args.checkpoint, args.threshold, args.eval_pairs, not args.no_maps,
        args.device or "cpu",
    )
    print(f"{row.name} [{args.split}] P={row.precision:.4f} R={row.recall:.4f} F1={row.f1:.4f} "
          f"(tp={counts.tp} fp={counts.fp} fn={counts.fn} tn={counts.tn})")


def cmd_predict(args):
    model = _model_for(args.run, args.checkpoint, args.device or "cpu")
    out = prepare_out(args.out, args.force)
    sites = load_dataset(args.data, splits=[args.split])
    n = 0
    for site in sites:
        for i, j in evaluation_pairs(site, args.eval_pairs):
            prob = predict_change(model, site.image(i), site.image(j), device=args.device or "cpu")
            t1, t2 = site.timestamps[i], site.timestamps[j]
            stem = f"{site.site_id}_{t1[0]:04d}-{t1[1]:02d}_{t2[0]:04d}-{t2[1]:02d}"
            np.save(out / f"{stem}_prob.npy", prob.astype(np.float32))
            write_label(out / f"{stem}_mask.png", prob >= args.threshold)
            if site.labeled:
                truth = site.change_label(i, j)
                save_qualitative_map(prob, truth, args.threshold, out / "maps", site.site_id, t1, t2)
            n += 1
    print(f"wrote predictions for {n} pairs to {out}")


# --- compare / plot ---------------------------------------------------------


def rows_from_runs(run_dirs, split="test"):
    rows = []
    for run in run_dirs:
        path = Path(run) / f"eval_{split}" / "metrics.csv"
        if not path.exists():
            raise ValidationError(f"{run} has no {split} evaluation; run `siamcd eval` first")
        rec = read_metrics_csv(path)[0]
        name = VARIANT_LABELS[Variant(rec["model"])] if rec["model"] in Variant.__members__ else rec["model"]
        rows.append(MetricsRow(name, float(rec["f1"]), float(rec["precision"]), float(rec["recall"])))
    return rows


def write_comparison(rows, out):
    table = compare_models(rows)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.txt").write_text(table.to_text())
    (out / "comparison.csv").write_text(table.to_csv())
    return table


def cmd_compare(args):
    rows = read_rows_csv(args.rows) if args.rows else []
    rows += rows_from_runs(args.runs, args.split)
    table = write_comparison(rows, args.out or ".")
    sys.stdout.write(table.to_text())


def cmd_plot(args):
    for run in args.runs:
        path = Path(run) / "losses.csv"
        out = Path(run) / "losses.png"
        plot_loss_curves(path, out, title=_run_variant(run) if (Path(run) / "config.json").exists() else None)
        print(f"wrote {out}")


# --- benchmark --------------------------------------------------------------


def cmd_benchmark(args):
    """Synthesize (unless --data is given), train all four variants, evaluate, compare and plot."""
    tree = resolve({"synth": SYNTH_DEFAULTS, "train": TrainConfig().to_dict(), "eval": {"split": "test"}}, args)
    if args.seed is not None:
        tree["synth"]["seed"] = args.seed
    out = prepare_out(args.out, args.force)
    data = Path(args.data) if args.data else out / "data"
    if not args.data:
        data.mkdir()
        synth_dataset(tree["synth"], data)
    ns = argparse.Namespace(config=None, set=None, variant=None, seed=args.seed, device=args.device, workers=args.workers)
    config, resolved = train_config_from(ns, tree["train"])
    tree["train"] = resolved
    write_run_manifest(out, "benchmark", tree, [data], config.seed)
    run_dirs = []
    for variant in BENCHMARK_ORDER:
        cfg = copy.deepcopy(config)
        cfg.network.variant = variant
        tr, unl, val = split_sites(data, variant)
        run = out / "runs" / variant.value
        train(cfg, tr, unl, val, run_dir=run)
        split = tree["eval"]["split"]
        evaluate_run(run, data, split, cfg.selection, cfg.eval_threshold, cfg.eval_pairs, True, cfg.device, cfg.eval_tile)
        plot_loss_curves(run / "losses.csv", run / "losses.png", title=VARIANT_LABELS[variant])
        run_dirs.append(run)
    table = write_comparison(rows_from_runs(run_dirs, tree["eval"]["split"]), out)
    sys.stdout.write(table.to_text())


# --- parser -----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="siamcd", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"siamcd {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", action="append", help="layered config file (YAML/JSON); repeatable")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, e.g. network.depth=4")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required)
        p.add_argument("--workers", type=int, default=0, help="patch-loading threads")
        p.add_argument("--device", help="cpu or accelerator id; SIAMCD_DEVICE also applies")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="ingest a SpaceNet7 directory into site manifests")
    p.add_argument("root")
    p.add_argument("--exclusions", help="CSV of site_id,year,month cloud exclusions")
    p.add_argument("--split-counts", help="train,val,test counts over labeled sites (default 2/3, 1/6, 1/6)")
    p.add_argument("--channels", type=int, default=3)
    common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--resume", help="checkpoint to continue from")
    common(p)
    p.set_defaults(func=cmd_train)

    def eval_args(p):
        p.add_argument("--run", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="test", choices=["train", "val", "test"])
        p.add_argument("--checkpoint", default="best", choices=["best", "final"])
        p.add_argument("--threshold", type=float, default=0.5)
        p.add_argument("--eval-pairs", default="first_last", choices=["first_last", "all_pairs"])

    p = sub.add_parser("eval", help="evaluate a trained run")
    eval_args(p)
    p.add_argument("--no-maps", action="store_true")
    common(p, out_required=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write change probabilities and masks")
    eval_args(p)
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("compare", help="F1/precision/recall comparison table across runs")
    p.add_argument("runs", nargs="*")
    p.add_argument("--rows", help="CSV of extra rows (model,f1,precision,recall)")
    p.add_argument("--split", default="test")
    common(p, out_required=False)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("plot-losses", help="plot per-epoch loss terms of runs")
    p.add_argument("runs", nargs="+")
    common(p, out_required=False)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("benchmark", help="train and compare all four variants")
    p.add_argument("--data", help="existing dataset; synthesized when omitted")
    common(p)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except SiamCDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
