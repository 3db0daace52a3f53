"""Semi-supervised training loop, checkpoints and the four-variant benchmark runner.

Run directory layout::

    config.json              resolved TrainConfig
    losses.csv               epoch, step, L_s, L_c, L_cons, total (one row per optimizer step)
    metrics.csv              per-epoch validation metrics
    checkpoints/epoch_NNN.ckpt
    best.ckpt                best validation F1 so far (final weights when there is no validation set)
    final.ckpt               weights after the last epoch
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from siamcd.backbone import NetworkConfig, Variant, build_network
from siamcd.errors import CheckpointError, ConfigurationError, NumericalError
from siamcd.evaluation import LOSS_FIELDS, evaluate_model
from siamcd.losses import LossConfig, batched_sample_losses
from siamcd.sampling import SamplerConfig, epoch_plan, materialize, write_plan_csv

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "siamcd-checkpoint"
CHECKPOINT_VERSION = 1
VAL_FIELDS = ["epoch", "split", "tp", "fp", "fn", "tn", "precision", "recall", "f1", "threshold"]


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    checkpoint_every: int = 0  # epochs; 0 disables periodic checkpoints
    early_stop_patience: int | None = None  # epochs without validation F1 improvement
    eval_threshold: float = 0.5
    eval_tile: int = 256
    eval_pairs: str = "first_last"
    selection: str = "best"  # which weights evaluation uses: best | final
    device: str = "cpu"
    workers: int = 1
    dump_plans: bool = False

    def __post_init__(self):
        if isinstance(self.network, dict):
            self.network = NetworkConfig.from_dict(self.network)
        if isinstance(self.sampler, dict):
            self.sampler = SamplerConfig(**self.sampler)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.selection not in ("best", "final"):
            raise ConfigurationError(f"selection must be 'best' or 'final', got {self.selection!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = self.network.to_dict()
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainState:
    epoch: int = 0  # completed epochs
    global_step: int = 0
    history: list = field(default_factory=list)  # [epoch, step, L_s, L_c, L_cons, total]
    val_history: list = field(default_factory=list)  # [epoch, precision, recall, f1]
    best_f1: float = -1.0
    best_epoch: int = -1


def device_from_env(default="cpu") -> str:
    """``SIAMCD_DEVICE`` overrides the configured device (e.g. ``cpu``, ``cuda:0``)."""
    return os.environ.get("SIAMCD_DEVICE", default)


# --- checkpoints --------------------------------------------------------------


def checkpoint(path, model, optimizer=None, state: TrainState | None = None, config: TrainConfig | None = None):
    """Write a checkpoint atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "network_config": model.config.to_dict(),
        "train_config": config.to_dict() if config is not None else None,
        "parameters": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "train_state": asdict(state) if state is not None else None,
        "rng": {"torch": torch.get_rng_state()},
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


@dataclass
class Checkpoint:
    network_config: NetworkConfig
    parameters: dict
    optimizer: dict | None
    train_state: TrainState | None
    train_config: TrainConfig | None
    rng: dict

    def build_model(self):
        model = build_network(self.network_config)
        model.load_state_dict(self.parameters)
        return model


def restore(path) -> Checkpoint:
    """Load a checkpoint; raises ``CheckpointError`` on unreadable, foreign or version-mismatched files."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {payload.get('version')} is not supported (expected {CHECKPOINT_VERSION})"
        )
    try:
        ts = payload.get("train_state")
        tc = payload.get("train_config")
        return Checkpoint(
            network_config=NetworkConfig.from_dict(payload["network_config"]),
            parameters=payload["parameters"],
            optimizer=payload.get("optimizer"),
            train_state=TrainState(**ts) if ts is not None else None,
            train_config=TrainConfig.from_dict(tc) if tc is not None else None,
            rng=payload.get("rng") or {},
        )
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: incomplete checkpoint ({exc})") from exc


def load_model(path, device="cpu"):
    model = restore(path).build_model().to(device)
    model.eval()
    return model


# --- training -------------------------------------------------------------------


def collate(patches, sites_by_id, change_mode="xor", workers=1):
    """Materialize planned patches into a batch dict of tensors."""

    def one(p):
        return materialize(sites_by_id[p.site_id], p, change_mode)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            items = list(pool.map(one, patches))
    else:
        items = [one(p) for p in patches]
    x1 = torch.from_numpy(np.stack([it[0] for it in items]))
    x2 = torch.from_numpy(np.stack([it[1] for it in items]))
    labeled = torch.tensor([it[2] is not None for it in items])
    size = x1.shape[-2:]
    zeros = np.zeros(tuple(size), dtype=np.uint8)
    ys = []
    for k in range(3):
        ys.append(torch.from_numpy(np.stack([it[2][k] if it[2] is not None else zeros for it in items])).float())
    return {"x1": x1, "x2": x2, "labeled": labeled, "y_s_t1": ys[0], "y_s_t2": ys[1], "y_c": ys[2]}


def train_step(model, optimizer, batch, loss_config: LossConfig, device="cpu"):
    """One optimizer step on a collated batch; returns per-column batch means (L_s, L_c, L_cons, total)."""
    model.train()
    outputs = model(batch["x1"].to(device), batch["x2"].to(device))
    labels = {k: batch[k].to(device) for k in ("y_s_t1", "y_s_t2", "y_c")}
    l_s, l_c, l_cons, total = batched_sample_losses(outputs, labels, batch["labeled"].to(device), loss_config)
    loss = total.mean()
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return tuple(float(t.detach().mean()) for t in (l_s, l_c, l_cons, total))


def make_optimizer(model, config: TrainConfig):
    return torch.optim.AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)


def _write_losses(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_FIELDS)
        for row in history:
            w.writerow([int(row[0]), int(row[1])] + [f"{v:.8g}" for v in row[2:]])


def _append_val(path, row):
    new = not Path(path).exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(VAL_FIELDS)
        w.writerow(row)


def train(
    config: TrainConfig,
    labeled_sites,
    unlabeled_sites=(),
    val_sites=(),
    run_dir=None,
    resume=None,
    max_steps=None,
):
    """Train one variant; returns ``(model, state)``.

    ``resume`` is a checkpoint path; training continues after its last completed epoch.
    ``max_steps`` stops after that many optimizer steps in total (used for resume checks).
    """
    labeled_sites, unlabeled_sites, val_sites = list(labeled_sites), list(unlabeled_sites), list(val_sites)
    if unlabeled_sites and not config.network.variant.ssl:
        raise ConfigurationError(
            f"variant {config.network.variant.value} cannot use unlabeled sites; only SiamDiffDualTaskSSL can"
        )
    if not labeled_sites and not unlabeled_sites:
        raise ConfigurationError("no training sites given")
    device = device_from_env(config.device)
    torch.manual_seed(config.seed)
    model = build_network(config.network).to(device)
    optimizer = make_optimizer(model, config)
    state = TrainState()
    if resume is not None:
        ck = restore(resume)
        model.load_state_dict(ck.parameters)
        if ck.optimizer is not None:
            optimizer.load_state_dict(ck.optimizer)
        state = ck.train_state or TrainState()
        if "torch" in ck.rng:
            torch.set_rng_state(ck.rng["torch"])

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
        if resume is None and (run_dir / "metrics.csv").exists():
            (run_dir / "metrics.csv").unlink()

    sites = labeled_sites + unlabeled_sites
    by_id = {s.site_id: s for s in sites}
    if len(by_id) != len(sites):
        raise ConfigurationError("site ids must be unique across labeled and unlabeled sites")
    patience_left = config.early_stop_patience
    for epoch in range(state.epoch, config.epochs):
        t0 = time.time()
        plan = epoch_plan(sites, config.sampler, epoch_seed=epoch)
        if run_dir is not None and config.dump_plans:
            write_plan_csv(plan, run_dir / f"plan_epoch_{epoch:03d}.csv")
        for start in range(0, len(plan), config.batch_size):
            patches = plan[start : start + config.batch_size]
            batch = collate(patches, by_id, config.sampler.change_mode, config.workers)
            parts = train_step(model, optimizer, batch, config.loss, device)
            if not all(math.isfinite(v) for v in parts):
                desc = [p._replace(transform=p.transform.code)._asdict() for p in patches]
                if run_dir is not None:
                    (run_dir / "nonfinite_batch.json").write_text(json.dumps(desc, indent=2, default=list))
                raise NumericalError(f"non-finite loss {parts} at epoch {epoch} step {state.global_step}: {desc}")
            state.history.append([epoch, state.global_step, *parts])
            state.global_step += 1
            if max_steps is not None and state.global_step >= max_steps:
                return model, state
        state.epoch = epoch + 1

        improved = False
        if val_sites:
            counts, row, _ = evaluate_model(
                model,
                val_sites,
                threshold=config.eval_threshold,
                eval_pairs=config.eval_pairs,
                tile=config.eval_tile,
                device=device,
                change_mode=config.sampler.change_mode,
            )
            state.val_history.append([epoch, row.precision, row.recall, row.f1])
            if row.f1 > state.best_f1:
                state.best_f1, state.best_epoch = row.f1, epoch
                improved = True
            if run_dir is not None:
                _append_val(
                    run_dir / "metrics.csv",
                    [epoch, "val", counts.tp, counts.fp, counts.fn, counts.tn,
                     f"{row.precision:.6f}", f"{row.recall:.6f}", f"{row.f1:.6f}", config.eval_threshold],
                )
        log.info(
            "epoch %d: loss %.4f (%.1fs)%s",
            epoch,
            float(np.mean([r[5] for r in state.history if r[0] == epoch])),
            time.time() - t0,
            f", val F1 {state.val_history[-1][3]:.3f}" if val_sites else "",
        )
        if run_dir is not None:
            _write_losses(run_dir / "losses.csv", state.history)
            if improved or not val_sites:
                checkpoint(run_dir / "best.ckpt", model, optimizer, state, config)
            if config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
                checkpoint(run_dir / "checkpoints" / f"epoch_{state.epoch:03d}.ckpt", model, optimizer, state, config)
        if val_sites and patience_left is not None:
            patience_left = config.early_stop_patience if improved else patience_left - 1
            if patience_left <= 0:
                log.info("early stop after epoch %d (best F1 %.3f at epoch %d)", epoch, state.best_f1, state.best_epoch)
                break
    if run_dir is not None:
        checkpoint(run_dir / "final.ckpt", model, optimizer, state, config)
    return model, state


def selected_checkpoint(run_dir, selection="best") -> Path:
    run_dir = Path(run_dir)
    path = run_dir / ("best.ckpt" if selection == "best" else "final.ckpt")
    if not path.exists():
        raise CheckpointError(f"no {path.name} in {run_dir}")
    return path


BENCHMARK_ORDER = (
    Variant.EarlyFusionUNet,
    Variant.SiamDiff,
    Variant.SiamDiffDualTask,
    Variant.SiamDiffDualTaskSSL,
)


def train_benchmarks(config: TrainConfig, labeled_sites, unlabeled_sites=(), val_sites=(), out_dir=None, variants=BENCHMARK_ORDER):
    """Train every variant with identical blocks, data and hyperparameters.

    Only the SSL variant sees the unlabeled sites. Returns {variant: (model, state)}.
    """
    results = {}
    for variant in variants:
        cfg = copy.deepcopy(config)
        cfg.network.variant = Variant(variant)
        unl = unlabeled_sites if cfg.network.variant.ssl else ()
        run_dir = Path(out_dir) / cfg.network.variant.value if out_dir is not None else None
        log.info("training %s", cfg.network.variant.value)
        results[cfg.network.variant] = train(cfg, labeled_sites, unl, val_sites, run_dir=run_dir)
    return results
