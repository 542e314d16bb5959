"""Contour-based anomaly scoring of reconstruction residuals, plus baselines."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch

from .contour import contour_regions, region_union
from .model import reconstruction_probability

RESIDUAL_FLOOR = 1e-3
NATIVE_K = 5000
NATIVE_PIXELS = 640 * 480


def compute_residuals(x, x_hat, floor=RESIDUAL_FLOOR):
    """|x - x_hat| with values below ``floor`` set to exactly zero."""
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    r = np.abs(x - x_hat)
    r[r < floor] = 0.0
    return r


def effective_k(n_pixels, k=NATIVE_K, native_pixels=NATIVE_PIXELS):
    """Top-k count scaled to keep the native-resolution fraction k / native_pixels."""
    if n_pixels == native_pixels:
        return min(k, n_pixels)
    return int(min(n_pixels, max(1, round(k * n_pixels / native_pixels))))


def top_k_mean(r, k):
    flat = np.asarray(r, dtype=np.float64).ravel()
    k = min(max(int(k), 1), flat.size)
    return float(np.partition(flat, flat.size - k)[flat.size - k:].mean())


def region_sum(r, binary):
    mask = region_union(contour_regions(binary), r.shape)
    return float(r[mask].sum())


@dataclass
class FrameScore:
    res: float
    res_high: float
    threshold: float
    score: float


def frame_score_detail(r, k):
    r = np.asarray(r, dtype=np.float64)
    res = region_sum(r, r > 0)
    if res == 0.0:
        return FrameScore(0.0, 0.0, 0.0, 0.0)
    threshold = top_k_mean(r, k)
    res_high = region_sum(r, r >= threshold)
    return FrameScore(res, res_high, threshold, res_high / res)


def frame_score(r, k):
    """res_high / res for one floored residual frame (0 when nothing is left)."""
    return frame_score_detail(r, k).score


def contour_scores(residuals, k=None):
    """Score every frame of a (T, H, W) residual stack."""
    residuals = np.asarray(residuals)
    if k is None:
        k = effective_k(residuals.shape[-2] * residuals.shape[-1])
    return np.array([frame_score(r, k) for r in residuals])


def mean_residual_score(r):
    return float(np.mean(r))


def mean_residual_scores(residuals):
    return np.asarray(residuals, dtype=np.float64).mean(axis=(-2, -1))


@dataclass
class AnomalyScoreSeries:
    scores: np.ndarray
    votes: int
    anomalous: bool
    epsilon: float

    @property
    def verdict(self):
        return "Anomaly" if self.anomalous else "NotAnomaly"


def sequence_verdict(scores, epsilon):
    """Majority vote: anomalous iff more than half of the steps score above ``epsilon``."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("no scores to vote on")
    votes = int((scores > epsilon).sum())
    return AnomalyScoreSeries(scores, votes, votes > scores.size / 2, float(epsilon))


def reconstruction_probability_score(model, frames, condition_map, condition_vector, n_samples=10, generator=None):
    """Negated reconstruction probability per step; higher means more anomalous."""
    dtype = next(model.parameters()).dtype
    args = [torch.as_tensor(np.asarray(a), dtype=dtype) for a in (frames, condition_map, condition_vector)]
    lp = reconstruction_probability(model, *args, n_samples=n_samples, generator=generator)
    return -lp.numpy().astype(np.float64)


SCORE_DUMP_FIELDS = ("sequence_id", "time_step", "score", "vote", "verdict", "epsilon", "scorer")


def write_score_dump(path, series_by_id, scorer):
    """One row per (sequence, time step); ``series_by_id`` maps id -> AnomalyScoreSeries."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_DUMP_FIELDS)
        for seq_id in sorted(series_by_id):
            s = series_by_id[seq_id]
            for t, score in enumerate(s.scores):
                w.writerow([seq_id, t, repr(float(score)), int(score > s.epsilon), s.verdict, repr(s.epsilon), scorer])
