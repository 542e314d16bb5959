"""Experiment stages wired over one run directory.

Layout under the run root::

    config.resolved.json  VERSION  logs/run.log
    data/manifest.jsonl  data/calibration.jsonl  data/raw/<id>/frame_NNN.tif
    processed/<id>.tseq  processed/splits.json
    models/<variant>.ckpt  models/<variant>_trainlog.csv  models/<variant>_timing.csv
    scores/<variant>.npz  scores/index.json
    evaluation/report.json  evaluation/<variant>_<scorer>_scores.csv
    report/metrics.csv  roc.csv  auc.csv  score_over_time.csv  summary.json  *.png
"""
from __future__ import annotations

import json
import logging
import os
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import VARIANT_KINDS, dump_config
from .dataset import (
    covering_starts,
    load,
    load_raw_record,
    make_windows,
    read_split,
    split,
    stack_windows,
    store,
    write_split,
)
from .detector import (
    compute_residuals,
    contour_scores,
    effective_k,
    mean_residual_scores,
    reconstruction_probability_score,
    sequence_verdict,
    write_score_dump,
)
from .evaluation import Report, ScoreSet, emit_report, run_ablations
from .model import Architecture, ModelVariant, load_checkpoint, reconstruct, save_checkpoint
from .simulator import DatasetSpec, ThermalConstants, file_sha256, generate_dataset, read_manifest
from .trainer import TrainConfig, check_no_test_windows, train

log = logging.getLogger("thermad")

STAGES = ("simulate", "preprocess", "train", "score", "evaluate", "report")
OUTPUT_ROOT_ENV = "THERMAD_OUTPUT_ROOT"


class StageError(RuntimeError):
    pass


def default_output_dir(cfg):
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / cfg.name


class Run:
    def __init__(self, cfg, root=None):
        self.cfg = cfg
        self.root = Path(root) if root is not None else default_output_dir(cfg)
        self.data = self.root / "data"
        self.processed = self.root / "processed"
        self.models = self.root / "models"
        self.scores = self.root / "scores"
        self.evaluation = self.root / "evaluation"
        self.report_dir = self.root / "report"

    def init(self):
        (self.root / "logs").mkdir(parents=True, exist_ok=True)
        (self.root / "config.resolved.json").write_text(dump_config(self.cfg))
        (self.root / "VERSION").write_text(f"thermad {__version__}\n")
        handler = logging.FileHandler(self.root / "logs" / "run.log", mode="a")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)
        self._handler = handler
        return self

    def close(self):
        handler = getattr(self, "_handler", None)
        if handler is not None:
            log.removeHandler(handler)
            handler.close()

    # -- helpers -------------------------------------------------------------
    def dataset_spec(self):
        s, d = self.cfg.simulator, self.cfg.dataset
        return DatasetSpec(
            n_normal=d.n_normal, n_anomalous=d.n_anomalous, n_calibration=d.n_calibration,
            shape=tuple(s.shape), n_frames=s.n_frames, kernel_width=s.kernel_width,
            constants=ThermalConstants(**s.constants.model_dump()),
            attenuation_db=tuple(d.attenuation_db), ratios=tuple(d.ratios),
            gain_values=tuple(d.gain_values), phase_values=tuple(d.phase_values), seed=self.cfg.seed,
        )

    def variant(self, name):
        return ModelVariant(name, VARIANT_KINDS[name], self.cfg.beta(name))

    def architecture(self):
        m = self.cfg.model
        return Architecture(tuple(self.cfg.simulator.shape), tuple(m.channels), m.kernel, m.hidden, m.latent)

    def _require(self, path, stage):
        if not Path(path).exists():
            raise StageError(f"{path} is missing; run the '{stage}' stage first")

    def manifest(self):
        self._require(self.data / "manifest.jsonl", "simulate")
        return read_manifest(self.data / "manifest.jsonl")

    def calibration_manifest(self):
        self._require(self.data / "calibration.jsonl", "simulate")
        return read_manifest(self.data / "calibration.jsonl")

    def load_seq(self, seq_id):
        return load(self.processed / f"{seq_id}.tseq")

    def splits(self):
        self._require(self.processed / "splits.json", "preprocess")
        return read_split(self.processed / "splits.json")

    # -- stages ----------------------------------------------------------------
    def simulate(self):
        digest = generate_dataset(self.dataset_spec(), self.data)
        log.info("simulate: manifest sha256 %s", digest)
        return digest

    def preprocess(self):
        records = self.manifest()
        calibration = self.calibration_manifest()
        self.processed.mkdir(parents=True, exist_ok=True)
        assignment = split(records, tuple(self.cfg.dataset.ratios), self.cfg.seed)
        write_split(assignment, self.processed / "splits.json")
        for rec in records + calibration:
            store(load_raw_record(rec, self.data), self.processed / f"{rec['id']}.tseq")
        counts = {s: sum(v == s for v in assignment.values()) for s in ("train", "val", "test")}
        log.info("preprocess: %d sequences, split %s, %d calibration", len(records), counts, len(calibration))
        return assignment

    def _window_arrays(self, ids, assignment):
        d = self.cfg.dataset
        windows = []
        for seq_id in ids:
            windows += make_windows(self.load_seq(seq_id), d.window_length, d.window_offset)
        check_no_test_windows([w.parent for w in windows], assignment)
        return stack_windows(windows)

    def train(self):
        assignment = self.splits()
        train_ids = sorted(i for i, s in assignment.items() if s == "train")
        val_ids = sorted(i for i, s in assignment.items() if s == "val")
        train_arrays = self._window_arrays(train_ids, assignment)
        val_arrays = self._window_arrays(val_ids, assignment)
        self.models.mkdir(parents=True, exist_ok=True)
        t = self.cfg.trainer
        tc = TrainConfig(t.learning_rate, t.batch_size, t.max_epochs, t.patience, t.clip_norm, self.cfg.seed)
        logs = {}
        for name in self.cfg.model.variants:
            variant = self.variant(name)
            log.info("train: %s on %d windows (val %d)", name, len(train_arrays[0]), len(val_arrays[0]))
            model, trainlog = train(variant, train_arrays, val_arrays, tc, self.architecture())
            save_checkpoint(model, self.models / f"{name}.ckpt", {"best_epoch": trainlog.best_epoch})
            trainlog.write_csv(self.models / f"{name}_trainlog.csv")
            trainlog.write_timing_csv(self.models / f"{name}_timing.csv")
            logs[name] = trainlog
        return logs

    def score_groups(self):
        """Calibration group (val normals + calibration anomalies) and test group, id -> label."""
        assignment = self.splits()
        calib = {i: False for i, s in assignment.items() if s == "val"}
        calib.update({r["id"]: True for r in self.calibration_manifest()})
        labels = {r["id"]: r["label"] == "anomalous" for r in self.manifest()}
        test = {i: labels[i] for i, s in assignment.items() if s == "test"}
        return calib, test

    def score_sequence(self, model, seq, generator=None):
        """Per-frame scores for every scorer the model supports."""
        d, det = self.cfg.dataset, self.cfg.detector
        n = len(seq)
        starts = covering_starts(n, d.window_length, d.window_offset)
        frames, cmap, cvec = stack_windows(make_windows(seq, d.window_length, starts=starts))
        dtype = next(model.parameters()).dtype
        rec = reconstruct(model, *(torch.as_tensor(a, dtype=dtype) for a in (frames, cmap, cvec)))
        x_hat = np.zeros(seq.frames.shape)
        cover = np.zeros(n)
        for s, win in zip(starts, rec.mean.numpy()):
            x_hat[s:s + d.window_length] += win
            cover[s:s + d.window_length] += 1
        x_hat /= cover[:, None, None]
        residuals = compute_residuals(seq.frames, x_hat, det.residual_floor)
        k = effective_k(residuals.shape[1] * residuals.shape[2], det.k, det.native_pixels)
        out = {"contour": contour_scores(residuals, k), "mean_residual": mean_residual_scores(residuals)}
        if model.variant.learns_noise:
            per_win = reconstruction_probability_score(model, frames, cmap, cvec, det.recon_samples, generator)
            rp = np.zeros(n)
            for s, win in zip(starts, per_win):
                rp[s:s + d.window_length] += win
            out["recon_prob"] = rp / cover
        return out

    def score(self):
        calib, test = self.score_groups()
        self.scores.mkdir(parents=True, exist_ok=True)
        (self.scores / "index.json").write_text(json.dumps(
            {"calib": dict(sorted(calib.items())), "test": dict(sorted(test.items()))}, indent=1, sort_keys=True))
        for name in self.cfg.model.variants:
            self._require(self.models / f"{name}.ckpt", "train")
            model, _ = load_checkpoint(self.models / f"{name}.ckpt", self.variant(name), self.architecture())
            gen = torch.Generator().manual_seed(self.cfg.seed)
            arrays = {}
            for seq_id in sorted(calib) + sorted(test):
                for scorer, series in self.score_sequence(model, self.load_seq(seq_id), gen).items():
                    arrays[f"{scorer}/{seq_id}"] = series
            np.savez(self.scores / f"{name}.npz", **arrays)
            log.info("score: %s scored %d sequences", name, len(calib) + len(test))

    def load_scores(self):
        self._require(self.scores / "index.json", "score")
        index = json.loads((self.scores / "index.json").read_text())
        out = {}
        for name in self.cfg.model.variants:
            self._require(self.scores / f"{name}.npz", "score")
            with np.load(self.scores / f"{name}.npz") as data:
                per = {}
                for key in data.files:
                    scorer, seq_id = key.split("/", 1)
                    per.setdefault(scorer, {})[seq_id] = data[key]
            out[name] = {
                scorer: ScoreSet(
                    {i: s[i] for i in index["calib"]}, {i: bool(v) for i, v in index["calib"].items()},
                    {i: s[i] for i in index["test"]}, {i: bool(v) for i, v in index["test"].items()},
                )
                for scorer, s in per.items()
            }
        return out

    def evaluate(self):
        scores = self.load_scores()
        d, det = self.cfg.dataset, self.cfg.detector
        report = run_ablations(
            scores, det.epsilon, det.vote_scope, self.cfg.evaluation.roc_statistic,
            window_starts=lambda n: covering_starts(n, d.window_length, d.window_offset),
            window_length=d.window_length, config=self.cfg.model_dump(mode="json"),
        )
        self.evaluation.mkdir(parents=True, exist_ok=True)
        (self.evaluation / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
        eps = {(r.model, r.scorer): r.epsilon for r in report.metrics + report.baselines if r.row != "w/o voting"}
        for name, per in scores.items():
            for scorer, ss in per.items():
                series = {i: sequence_verdict(s, eps[(name, scorer)]) for i, s in ss.test.items()}
                write_score_dump(self.evaluation / f"{name}_{scorer}_scores.csv", series, scorer)
        for r in report.metrics:
            log.info("evaluate: %s %-11s Sn %.3f Pr %.3f F-M %.3f", r.model, r.row, r.sn, r.pr, r.fm)
        for (m, s), c in sorted(report.roc.items()):
            log.info("evaluate: %s %s AUC %.4f", m, s, c.auc)
        return report

    def report(self):
        self._require(self.evaluation / "report.json", "evaluate")
        rep = Report.from_dict(json.loads((self.evaluation / "report.json").read_text()))
        files = emit_report(rep, self.report_dir, plots=self.cfg.evaluation.plots)
        log.info("report: wrote %s", ", ".join(files))
        return rep


def run_stage(run, name):
    if name == "all":
        result = None
        for stage in STAGES:
            result = getattr(run, stage)()
        return result
    if name not in STAGES:
        raise StageError(f"unknown stage {name!r}")
    return getattr(run, name)()


def manifest_hash(run):
    return file_sha256(run.data / "manifest.jsonl")
