"""Acceptance criteria 1-10, one test each.

Every test records a single PASS/FAIL line (shown in the terminal summary and
printed with ``-s``). Criterion 8 trains two networks on synthetic data and
takes several minutes; it is marked ``slow``.
"""

import contextlib
import json
import time
from collections import Counter
from itertools import combinations

import numpy as np
import pytest
import torch
import yaml

import conftest
from oracles import (
    binomial_sigma,
    central_differences,
    confusion_brute,
    metrics_brute,
    power_jaccard_scalar,
    random_polygons,
    rasterize_brute,
)
from siamcd.backbone import DualTaskOutputs, NetworkConfig, Variant, build_network
from siamcd.cli import main
from siamcd.data import (
    BuildingFootprintSet,
    Footprint,
    Split,
    SyntheticSiteConfig,
    assign_splits,
    generate_synthetic_site,
    rasterize_footprints,
)
from siamcd.evaluation import (
    MetricsRow,
    accumulate_confusion,
    compare_models,
    epoch_means,
    evaluate_model,
    precision_recall_f1,
)
from siamcd.kernels import available_backends
from siamcd.losses import (
    LabelSet,
    LossConfig,
    change_loss,
    consistency_loss,
    power_jaccard,
    power_jaccard_grad,
    sample_loss,
    semantics_loss,
)
from siamcd.sampling import SamplerConfig, draw_patch, patch_weights, select_timestamp_pair
from siamcd.trainer import TrainConfig, load_model, train


@contextlib.contextmanager
def criterion(n, title):
    notes = []
    t0 = time.time()
    try:
        yield notes
    except BaseException:
        verdict = "FAIL"
        raise
    else:
        verdict = "PASS"
    finally:
        detail = "; ".join(notes)
        line = f"criterion {n:>2} {verdict}: {title} ({time.time() - t0:.1f}s){' - ' + detail if detail else ''}"
        conftest.ACCEPTANCE[n] = line
        print(line)


# 1 ---------------------------------------------------------------------------

PUBLISHED_ROWS = [
    MetricsRow("EF U-Net", 0.525, 0.440, 0.651),
    MetricsRow("Siam-Diff", 0.484, 0.368, 0.704),
    MetricsRow("Siam-Diff + Dual-Task", 0.529, 0.440, 0.664),
    MetricsRow("Siam-Diff + Dual-Task + SSL", 0.559, 0.490, 0.651),
]

PUBLISHED_TABLE = (
    "Model                          F1 score   Precision      Recall\n"
    "---------------------------------------------------------------\n"
    "EF U-Net                         0.525       0.440       0.651\n"
    "Siam-Diff                        0.484       0.368       0.704*\n"
    "Siam-Diff + Dual-Task            0.529       0.440       0.664\n"
    "Siam-Diff + Dual-Task + SSL      0.559*      0.490*      0.651\n"
)


def test_criterion_01_published_table(tmp_path):
    with criterion(1, "published comparison rows render with best-per-column marks") as notes:
        rows = tmp_path / "rows.csv"
        rows.write_text("model,f1,precision,recall\n" + "".join(f"{r.name},{r.f1:.3f},{r.precision:.3f},{r.recall:.3f}\n" for r in PUBLISHED_ROWS))
        assert main(["compare", "--rows", str(rows), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "comparison.txt").read_text() == PUBLISHED_TABLE
        assert compare_models(PUBLISHED_ROWS).best == {"f1": {3}, "precision": {3}, "recall": {1}}
        notes.append("exact text match; SSL best F1/P, Siam-Diff best R")


# 2 ---------------------------------------------------------------------------


def test_criterion_02_loss_suite():
    with criterion(2, "power Jaccard range, identity and gradient") as notes:
        t0 = time.time()
        rng = np.random.default_rng(2)
        lo, hi = np.inf, -np.inf
        for _ in range(1000):
            shape = tuple(rng.integers(1, 17, 2))
            p = torch.tensor(rng.random(shape))
            y = torch.tensor((rng.random(shape) < rng.random()).astype(float))
            v = float(power_jaccard(p, y, LossConfig(power_q=float(rng.uniform(1.01, 2.0)))))
            lo, hi = min(lo, v), max(hi, v)
        assert 0.0 <= lo and hi <= 1.0
        worst_identity = 0.0
        for _ in range(100):
            y = torch.tensor((rng.random((16, 16)) < 0.5).astype(float))
            worst_identity = max(worst_identity, float(power_jaccard(y, y)))
        assert worst_identity <= 1e-5
        worst_rel = 0.0
        for q in (1.1, 1.5, 2.0):
            for _ in range(5):
                p = rng.uniform(0.05, 0.95, (8, 8))
                y = (rng.random((8, 8)) < 0.5).astype(float)
                fd = central_differences(lambda x: power_jaccard_scalar(x.ravel(), y.ravel(), q, 1e-6), p, h=1e-4)
                analytic = power_jaccard_grad(p, y, q, 1e-6)
                pt = torch.tensor(p, requires_grad=True)
                power_jaccard(pt, torch.tensor(y), LossConfig(power_q=q)).backward()
                for g in (analytic, pt.grad.numpy()):
                    worst_rel = max(worst_rel, np.abs(g - fd).max() / np.abs(fd).max())
        assert worst_rel <= 1e-3
        elapsed = time.time() - t0
        assert elapsed < 30
        notes.append(f"range [{lo:.3g}, {hi:.3g}], identity max {worst_identity:.2g}, grad rel err {worst_rel:.2g}")


# 3 ---------------------------------------------------------------------------


def random_outputs(rng, n=1, size=8):
    def r():
        return torch.tensor(rng.random((n, size, size)))

    return DualTaskOutputs(p_c=r(), p_s_t1=r(), p_s_t2=r(), p_cs=r())


def random_labels(rng, size=8):
    def r():
        return torch.tensor((rng.random((size, size)) < 0.4).astype(float))

    return LabelSet(r(), r(), r())


def test_criterion_03_loss_composition():
    with criterion(3, "labeled/unlabeled loss composition and phi=0") as notes:
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(50):
            out, y = random_outputs(rng), random_labels(rng)
            cfg = LossConfig(phi=float(rng.uniform(0, 3)))
            labeled = float(sample_loss(out, y, cfg)[0])
            worst = max(worst, abs(labeled - float(semantics_loss(out, y, cfg) + change_loss(out, y, cfg))))
            unlabeled = float(sample_loss(out, None, cfg)[0])
            worst = max(worst, abs(unlabeled - cfg.phi * float(consistency_loss(out, cfg))))
        assert worst <= 1e-9
        net = build_network(NetworkConfig(Variant.SiamDiffDualTaskSSL, depth=3, base_channels=8))
        x1, x2 = torch.rand(4, 3, 32, 32), torch.rand(4, 3, 32, 32)
        out = net(x1, x2)
        loss = torch.stack([sample_loss(out.select(i), None, LossConfig(phi=0.0))[0] for i in range(4)]).mean()
        loss.backward()
        grads = [p.grad for p in net.parameters()]
        max_grad = max(float(g.abs().max()) if g is not None else 0.0 for g in grads)
        assert max_grad <= 1e-12
        notes.append(f"max composition error {worst:.2g}, phi=0 max |grad| {max_grad:.2g}")


# 4 ---------------------------------------------------------------------------


def test_criterion_04_architecture_invariants():
    with criterion(4, "SSL network symmetry, range and shape") as notes:
        t0 = time.time()
        net = build_network(NetworkConfig(Variant.SiamDiffDualTaskSSL, depth=5, base_channels=16, seed=4))
        net.eval()
        gen = torch.Generator().manual_seed(4)
        worst = 0.0
        with torch.no_grad():
            for _ in range(10):
                a = torch.rand(1, 3, 64, 64, generator=gen)
                b = torch.rand(1, 3, 64, 64, generator=gen)
                ab, ba = net(a, b), net(b, a)
                worst = max(worst, float((ab.p_c - ba.p_c).abs().max()))
                assert torch.equal(ab.p_s_t1, ba.p_s_t2) and torch.equal(ab.p_s_t2, ba.p_s_t1)
                for t in ab:
                    assert t.shape == (1, 64, 64)
                    assert float(t.min()) >= 0.0 and float(t.max()) <= 1.0
        assert worst <= 1e-6
        assert time.time() - t0 < 60
        notes.append(f"p_c swap max diff {worst:.2g}")


# 5 ---------------------------------------------------------------------------


def test_criterion_05_metric_oracle():
    with criterion(5, "confusion counts and metrics vs pixel loop") as notes:
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(100):
            p = rng.random((16, 16))
            y = (rng.random((16, 16)) < rng.random()).astype(np.uint8)
            want = confusion_brute(p, y, 0.5)
            for impl in available_backends().values():
                assert tuple(impl.confusion_counts(p, y, 0.5)) == tuple(want)
            c = accumulate_confusion(p, y, 0.5)
            assert (c.tp, c.fp, c.fn, c.tn) == tuple(want)
            for a, b in zip(precision_recall_f1(c), metrics_brute(*want[:3])):
                worst = max(worst, abs(a - b))
        assert worst <= 1e-12
        notes.append(f"counts exact on all backends, metric diff {worst:.2g}")


# 6 ---------------------------------------------------------------------------


def test_criterion_06_sampler_statistics():
    with criterion(6, "pair uniformity, draw frequencies, weighting example") as notes:
        rng = np.random.default_rng(6)
        site = generate_synthetic_site(6, SyntheticSiteConfig(height=16, width=16, n_timestamps=5))
        n = 10_000
        pairs = Counter(select_timestamp_pair(site, rng) for _ in range(n))
        expected = list(combinations(range(5), 2))
        assert set(pairs) == set(expected)
        p = 1 / len(expected)
        pair_z = max(abs(pairs[k] / n - p) / binomial_sigma(p, n) for k in expected)
        w = np.array([0.1, 0.2, 0.3, 0.4])
        draws = Counter(draw_patch(w, rng) for _ in range(n))
        draw_z = max(abs(draws[k] / n - w[k]) / binomial_sigma(w[k], n) for k in range(4))
        assert pair_z <= 3 and draw_z <= 3
        y = np.zeros((4, 8), np.uint8)
        y[:2, :4] = 1
        got = patch_weights(y, [(0, 0), (0, 4)], 4, 0.02)
        assert abs(got[0] - 26 / 27) <= 1e-12 and abs(got[1] - 1 / 27) <= 1e-12
        notes.append(f"max |z| pairs {pair_z:.2f}, draws {draw_z:.2f}")


# 7 ---------------------------------------------------------------------------


def test_criterion_07_rasterization_oracle():
    with criterion(7, "rasterization vs pixel-center point-in-polygon") as notes:
        rng = np.random.default_rng(7)
        pixels = 0
        for k in range(50):
            polys = random_polygons(rng, int(rng.integers(1, 6)), 32)
            fps = BuildingFootprintSet([Footprint(f"b{k}_{i}", tuple(rings)) for i, rings in enumerate(polys)])
            got = rasterize_footprints(fps, 32, 32)
            assert got.tolist() == rasterize_brute([list(fp.rings) for fp in fps], 32, 32)
            pixels += int(got.sum())
        notes.append(f"50 sets exact, {pixels} building pixels")


# 8 ---------------------------------------------------------------------------

E2E_SITE = SyntheticSiteConfig(height=128, width=128, noise_level=0.05)
E2E_SPLITS = (4, 2, 2)


def e2e_sites():
    labeled = [f"synth_L{i:03d}" for i in range(8)]
    unlabeled = [f"synth_U{i:03d}" for i in range(8)]
    splits = assign_splits(labeled, E2E_SPLITS, 0, unlabeled)
    seeds = np.random.SeedSequence(8).generate_state(16)
    return [generate_synthetic_site(int(s), E2E_SITE, site_id=sid, split=splits[sid]) for s, sid in zip(seeds, labeled + unlabeled)]


def e2e_config(variant):
    return TrainConfig(
        epochs=20,
        batch_size=8,
        learning_rate=1e-3,
        seed=8,
        network=NetworkConfig(variant, depth=4, base_channels=16, seed=8),
        sampler=SamplerConfig(patch_size=64, samples_per_site=32, seed=8),
        eval_tile=128,
    )


def run_e2e(variant, sites, run_dir):
    by = {s: [x for x in sites if x.split is s] for s in Split}
    cfg = e2e_config(variant)
    unl = by[Split.unlabeled] if cfg.network.variant.ssl else []
    t0 = time.time()
    _, state = train(cfg, by[Split.train], unl, by[Split.val], run_dir=run_dir)
    elapsed = time.time() - t0
    model = load_model(run_dir / "best.ckpt")
    counts, row, _ = evaluate_model(model, by[Split.test], split="test", tile=128)
    return {"f1": row.f1, "precision": row.precision, "recall": row.recall, "train_seconds": elapsed,
            "best_epoch": state.best_epoch, "best_val_f1": state.best_f1}


@pytest.mark.slow
def test_criterion_08_end_to_end(tmp_path):
    with criterion(8, "synthetic SSL run reaches the F1 floor in time") as notes:
        sites = e2e_sites()
        baseline = run_e2e(Variant.SiamDiffDualTask, sites, tmp_path / "baseline")
        floor = 0.70 if baseline["f1"] >= 0.70 else baseline["f1"] - 0.05
        ssl = run_e2e(Variant.SiamDiffDualTaskSSL, sites, tmp_path / "ssl")
        report = {"baseline": baseline, "ssl": ssl, "floor": floor, "time_limit_seconds": 1200,
                  "torch_threads": torch.get_num_threads()}
        (tmp_path / "run_report.json").write_text(json.dumps(report, indent=2))
        notes.append(
            f"baseline F1 {baseline['f1']:.3f}, floor {floor:.2f}, SSL F1 {ssl['f1']:.3f} "
            f"(P {ssl['precision']:.3f} R {ssl['recall']:.3f}), SSL train {ssl['train_seconds']:.0f}s "
            f"on {torch.get_num_threads()} thread(s)"
        )
        assert ssl["train_seconds"] < 1200
        assert ssl["f1"] >= floor


# 9 ---------------------------------------------------------------------------


def test_criterion_09_overfit_oracle():
    with criterion(9, "single labeled patch overfits in 200 steps") as notes:
        site = generate_synthetic_site(9, SyntheticSiteConfig(height=64, width=64, noise_level=0.05))
        last = len(site.timestamps) - 1
        x1 = torch.tensor(site.image(0))[None]
        x2 = torch.tensor(site.image(last))[None]
        y1 = torch.tensor(site.label(0)).float()
        y2 = torch.tensor(site.label(last)).float()
        labels = LabelSet(y1, y2, (y1 != y2).float())
        assert float(labels.y_c.sum()) > 0
        net = build_network(NetworkConfig(Variant.SiamDiffDualTaskSSL, depth=4, base_channels=16, seed=0))
        opt = torch.optim.AdamW(net.parameters(), lr=1e-3, weight_decay=0.01)
        for _ in range(200):
            opt.zero_grad()
            loss, parts = sample_loss(net(x1, x2).select(0), labels)
            loss.backward()
            opt.step()
        notes.append(f"final supervised loss {parts.total:.4f} (L_s {parts.semantics:.4f}, L_c {parts.change:.4f})")
        assert parts.total < 0.1


# 10 --------------------------------------------------------------------------


def test_criterion_10_benchmark_harness(tmp_path):
    with criterion(10, "one command trains, evaluates and compares all four variants") as notes:
        cfg = {
            "synth": {"n_labeled": 4, "n_unlabeled": 2, "split_counts": [2, 1, 1],
                      "site": {"height": 32, "width": 32, "n_timestamps": 3, "initial_buildings": 2,
                               "min_size": 3, "max_size": 8}},
            "train": {"epochs": 2, "batch_size": 4, "learning_rate": 1e-3, "eval_tile": 32,
                      "network": {"depth": 3, "base_channels": 4}, "sampler": {"patch_size": 16, "samples_per_site": 4}},
        }
        path = tmp_path / "bench.yaml"
        path.write_text(yaml.safe_dump(cfg))
        out = tmp_path / "bench"
        assert main(["benchmark", "--config", str(path), "--seed", "10", "--out", str(out)]) == 0
        lines = (out / "comparison.txt").read_text().splitlines()
        assert len(lines) == 2 + 4
        assert [line.split("  ")[0] for line in lines[2:]] == [
            "EF U-Net", "Siam-Diff", "Siam-Diff + Dual-Task", "Siam-Diff + Dual-Task + SSL"
        ]
        for variant in Variant:
            run = out / "runs" / variant.value
            assert (run / "losses.png").stat().st_size > 0
            assert list((run / "eval_test" / "maps").glob("*.png"))
            cons = epoch_means(run / "losses.csv")["L_cons"]
            if variant.ssl:
                assert any(v > 0 for v in cons)
            else:
                assert all(v == 0.0 for v in cons)
        notes.append("4-row table, loss plots, qualitative maps; consistency curve zero for supervised runs")
