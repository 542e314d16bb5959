"""Acceptance suite: one recorded PASS/FAIL line per criterion (see the summary at the end of the run).

The benchmark criteria (6-8) train all four models on the bundled ``benchmark``
config, which takes a while on one CPU. Set THERMAD_BENCH_DIR to a finished
``thermad all -c benchmark`` run directory to reuse it instead.
"""
import csv
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from oracles import brute_frame_score, central_difference_grads, flood_fill_regions, mc_kl, pairwise_auc, region_pixel_sets
from thermad.cli import main
from thermad.config import bundled_config, validate_config
from thermad.contour import contour_regions
from thermad.detector import frame_score_detail
from thermad.evaluation import Report, f_measure, roc_curve
from thermad.model import (
    DEFAULT_VARIANTS,
    Architecture,
    LatentGaussian,
    ModelVariant,
    build_model,
    gaussian_log_likelihood,
    kl_divergence,
    step_losses,
    total_loss,
)
from thermad.trainer import EarlyStopping, stopping_point

VARIANTS = ("PCVAE", "CVAE", "0.01CVAE", "AE")


def test_criterion_01_contour_regions_match_flood_fill(verdict):
    rng = np.random.default_rng(20240601)
    t0 = time.perf_counter()
    worst, mismatched, n = 0.0, 0, 1200
    for i in range(n):
        h, w = rng.integers(1, 17, 2)
        density = rng.uniform(0.05, 0.95)
        if i % 2:
            img = rng.random((h, w)) < density
            regions = contour_regions(img)
            mismatched += region_pixel_sets([r.mask for r in regions]) != region_pixel_sets(flood_fill_regions(img))
            continue
        r = rng.random((h, w)) * (rng.random((h, w)) < density)
        k = int(rng.integers(1, 30))
        res, res_high, _ = brute_frame_score(r, k)
        d = frame_score_detail(r, k)
        worst = max(worst, abs(d.res - res), abs(d.res_high - res_high))
        regions = contour_regions(r > 0)
        mismatched += region_pixel_sets([g.mask for g in regions]) != region_pixel_sets(flood_fill_regions(r > 0))
    elapsed = time.perf_counter() - t0
    ok = mismatched == 0 and worst < 1e-9 and elapsed < 60
    verdict(1, ok, f"{n} images, region mismatches {mismatched}, max sum error {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_02_kl_closed_form_vs_monte_carlo(verdict):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    errors = []
    for _ in range(100):
        mean = rng.normal(0.0, 2.0, 8)
        log_var = rng.uniform(-4.0, 2.0, 8)
        closed = kl_divergence(LatentGaussian(torch.tensor(mean), torch.tensor(log_var))).item()
        errors.append(abs(closed - mc_kl(mean, log_var, 100_000, rng)))
    elapsed = time.perf_counter() - t0
    ok = max(errors) < 0.01 and elapsed < 60
    verdict(2, ok, f"100 latents, max |closed - MC| {max(errors):.2e}, {elapsed:.1f}s")
    assert ok


def _norm_rel_err(a, b):
    a = torch.cat([t.flatten() for t in a])
    b = torch.cat([t.flatten() for t in b])
    return ((a - b).norm() / torch.clamp(torch.maximum(a.norm(), b.norm()), min=1e-12)).item()


def test_criterion_03_gradient_check_all_losses(verdict):
    arch = Architecture(frame_shape=(8, 8), channels=(2, 4, 4), hidden=8)
    g = torch.Generator().manual_seed(3)
    frames = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    cmap = torch.rand(2, 2, 8, 8, generator=g, dtype=torch.float64)
    cvec = torch.rand(2, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(2, 3, arch.latent, generator=g, dtype=torch.float64)
    t0 = time.perf_counter()
    errs, sizes = {}, {}
    for name in VARIANTS:
        model = build_model(DEFAULT_VARIANTS[name], arch, seed=11, dtype=torch.float64)
        params = list(model.parameters())
        sizes[name] = sum(p.numel() for p in params)

        def loss(model=model):
            return total_loss(model.variant, frames, model(frames, cmap, cvec, eps=eps))

        model.zero_grad()
        loss().backward()
        analytic = [p.grad.clone() for p in params]
        errs[name] = _norm_rel_err(analytic, central_difference_grads(loss, params))
    elapsed = time.perf_counter() - t0
    ok = all(e < 1e-3 for e in errs.values()) and max(sizes.values()) <= 5000 and elapsed < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    verdict(3, ok, f"relative error {detail}; <= {max(sizes.values())} params, {elapsed:.1f}s")
    assert ok


def test_criterion_04_beta_sigma_equivalence(verdict):
    arch = Architecture(frame_shape=(8, 8), channels=(2, 4, 4), hidden=8)
    g = torch.Generator().manual_seed(5)
    worst = 0.0
    for beta in (1.0, 0.01, 1e-4):
        variant = ModelVariant("b", "BetaCVAE", beta)
        model = build_model(variant, arch, seed=2, dtype=torch.float64)
        frames = torch.rand(3, 4, 8, 8, generator=g, dtype=torch.float64)
        cmap = torch.rand(3, 2, 8, 8, generator=g, dtype=torch.float64)
        cvec = torch.rand(3, 8, generator=g, dtype=torch.float64)
        eps = torch.randn(3, 4, arch.latent, generator=g, dtype=torch.float64)

        def grads(loss_fn):
            model.zero_grad()
            loss_fn(model(frames, cmap, cvec, eps=eps)).backward()
            return [p.grad.clone() for p in model.parameters()]

        beta_grads = grads(lambda out: step_losses(variant, frames, out).mean())
        sigma_grads = grads(lambda out: (-gaussian_log_likelihood(frames, out.reconstruction.mean, sigma=math.sqrt(beta))
                                         + kl_divergence(out.latent)).mean())
        for a, b in zip(beta_grads, sigma_grads):
            worst = max(worst, ((a - b).abs() / torch.clamp(a.abs(), min=1.0)).max().item())
    ok = worst < 1e-9
    verdict(4, ok, f"max gradient difference {worst:.2e} (absolute, relative above magnitude 1)")
    assert ok


def test_criterion_05_early_stopping_trace(verdict):
    trace = [1.00, 0.80, 0.70, 0.72, 0.70, 0.69, 0.71, 0.75, 0.73, 0.70, 0.60]
    stop, best = stopping_point(trace, patience=4)
    stopper = EarlyStopping(patience=4)
    walked = next(i for i, v in enumerate(trace, 1) if stopper.step(v))
    ok = (stop, best) == (10, 6) and walked == 10 and stopper.best_epoch == 6
    verdict(5, ok, f"stop epoch {stop}, best epoch {best} (expected 10, 6)")
    assert ok


@pytest.fixture(scope="session")
def benchmark_run(tmp_path_factory):
    reuse = os.environ.get("THERMAD_BENCH_DIR")
    if reuse and (Path(reuse) / "evaluation" / "report.json").exists():
        root = Path(reuse)
    else:
        root = tmp_path_factory.mktemp("benchmark") / "run"
        assert main(["all", "-c", "benchmark", "-o", str(root)]) == 0
    report = Report.from_dict(json.loads((root / "evaluation" / "report.json").read_text()))
    train_seconds = 0.0
    for name in VARIANTS:
        with open(root / "models" / f"{name}_timing.csv") as fh:
            train_seconds += sum(float(r["seconds"]) for r in csv.DictReader(fh))
    return root, report, train_seconds


@pytest.mark.slow
def test_criterion_06_benchmark_quality(benchmark_run, verdict):
    _, report, seconds = benchmark_run
    auc = report.auc("0.01CVAE", "contour")
    fm = report.row("0.01CVAE").fm
    ok = auc >= 0.85 and fm >= 0.80 and seconds < 30 * 60
    verdict(6, ok, f"0.01CVAE contour AUC {auc:.3f}, F-M {fm:.3f}, training {seconds / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_07_contour_benefit(benchmark_run, verdict):
    _, report, _ = benchmark_run
    best = max(VARIANTS, key=lambda m: report.row(m).fm)
    full, plain = report.row(best).fm, report.row(best, "w/o contour").fm
    ok = full - plain >= 0.15
    verdict(7, ok, f"best model {best}: Row I F-M {full:.3f} vs w/o contour {plain:.3f} ({100 * (full - plain):+.1f} pp)")
    assert ok


@pytest.mark.slow
def test_criterion_08_variance_modelling_ordering(benchmark_run, verdict):
    _, report, _ = benchmark_run
    low_noise = report.auc("0.01CVAE", "contour")
    learned = report.auc("PCVAE", "contour")
    recon_prob = report.auc("PCVAE", "recon_prob")
    ok = low_noise >= learned and recon_prob < learned
    verdict(8, ok, f"contour AUC 0.01CVAE {low_noise:.3f} vs PCVAE {learned:.3f}; "
                   f"PCVAE recon-prob AUC {recon_prob:.3f}")
    assert ok


def test_criterion_09_metric_arithmetic(verdict):
    fm = f_measure(0.911, 0.925)
    rng = np.random.default_rng(9)
    worst = 0.0
    for n in (2, 10, 57, 200):
        for coarse in (False, True):
            labels = np.arange(n) % 3 == 0
            rng.shuffle(labels)
            scores = rng.integers(0, 6, n).astype(float) if coarse else rng.random(n) + 0.2 * labels
            worst = max(worst, abs(roc_curve(scores, labels).auc - pairwise_auc(scores, labels)))
    ok = round(fm, 3) == 0.918 and worst < 1e-9
    verdict(9, ok, f"F-M(0.911, 0.925) = {fm:.4f}; max |AUC - pairwise| {worst:.1e}")
    assert ok


@pytest.mark.slow
def test_criterion_10_pipeline_determinism(tmp_path, verdict):
    for name in ("a", "b"):
        assert main(["all", "-c", "demo", "-o", str(tmp_path / name)]) == 0
    cfg = validate_config(bundled_config("demo"))
    files = ["data/manifest.jsonl", "data/calibration.jsonl"]
    files += [f"models/{m}_trainlog.csv" for m in cfg.model.variants]
    files += [f"report/{f}" for f in ("metrics.csv", "roc.csv", "auc.csv", "score_over_time.csv")]
    differing = [f for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = not differing
    verdict(10, ok, f"{len(files)} artefacts compared, differing: {differing or 'none'}")
    assert ok
