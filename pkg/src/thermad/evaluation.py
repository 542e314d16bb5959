"""Classification metrics, ROC/AUC, threshold calibration, ablations and reports."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .detector import sequence_verdict

log = logging.getLogger(__name__)

ROW_NAMES = ("full", "w/o voting", "w/o contour")


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class Metrics:
    sn: float
    pr: float
    fm: float
    counts: ConfusionCounts


def f_measure(sn, pr):
    return 0.0 if sn + pr == 0 else 2.0 * sn * pr / (sn + pr)


def metrics_from_counts(counts):
    sn = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    pr = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    return Metrics(sn, pr, f_measure(sn, pr), counts)


def classification_metrics(verdicts, labels):
    """Sn/Pr/F-M for id-keyed boolean verdicts against id-keyed boolean labels (True = anomalous)."""
    if set(verdicts) != set(labels):
        missing = sorted(set(verdicts) ^ set(labels))
        raise KeyError(f"verdicts and labels disagree on ids: {missing[:5]}")
    c = ConfusionCounts()
    for key, pred in verdicts.items():
        truth = labels[key]
        if pred and truth:
            c.tp += 1
        elif pred:
            c.fp += 1
        elif truth:
            c.fn += 1
        else:
            c.tn += 1
    return metrics_from_counts(c)


@dataclass
class RocCurve:
    fpr: list
    tpr: list
    thresholds: list
    auc: float


def roc_curve(scores, labels):
    """Sweep every distinct score (descending) as a ``score >= t`` threshold.

    Tied scores enter at the same step, so the trapezoidal area equals
    P(s_anom > s_norm) + 0.5 * P(s_anom == s_norm).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both anomalous and normal samples")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    distinct = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[distinct]
    fp = np.cumsum(~y)[distinct]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[distinct]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr.tolist(), tpr.tolist(), thresholds.tolist(), auc)


def roc_auc(scores, labels):
    return roc_curve(scores, labels).auc


def sequence_statistic(series, how="median", epsilon=None):
    """Scalar per sequence for ROC: median of step scores, or fraction voting above epsilon."""
    series = np.asarray(series, dtype=np.float64)
    if how == "median":
        return float(np.median(series))
    if how == "vote_fraction":
        if epsilon is None:
            raise ValueError("vote_fraction needs epsilon")
        return float((series > epsilon).mean())
    raise ValueError(f"unknown sequence statistic {how!r}")


def score_over_time(series_list, labels):
    """Per-class, per-step mean and population SD; series must share one length."""
    out = {}
    for cls in (False, True):
        rows = [np.asarray(s, dtype=np.float64) for s, lab in zip(series_list, labels) if bool(lab) == cls]
        if not rows:
            raise ValueError(f"no {'anomalous' if cls else 'normal'} series")
        if len({len(r) for r in rows}) != 1:
            raise ValueError("series lengths differ")
        mat = np.stack(rows)
        out["anomalous" if cls else "normal"] = (mat.mean(0), mat.std(0))
    return out


def _vote_decisions(mat, eps):
    return (mat > eps).sum(1) > mat.shape[1] / 2


def window_vote(series, epsilon, starts, length):
    """Window-scoped voting: each window votes by majority of its steps; sequence by majority of windows."""
    series = np.asarray(series)
    wins = [sequence_verdict(series[s:s + length], epsilon).anomalous for s in starts]
    return sum(wins) > len(wins) / 2


def _fm_for(pred, truth):
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    return metrics_from_counts(ConfusionCounts(tp, fp, 0, fn)).fm


def calibrate_epsilon(series_list, labels, mode="vote"):
    """Threshold that maximises F-M on a labelled calibration set.

    ``mode="vote"`` judges sequences by majority vote, ``mode="image"`` judges
    every step on its own against its sequence label.  Candidates are 0 and
    every observed score; among equally good candidates the median one wins.
    """
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        raise ValueError("calibration needs both classes")
    if mode not in ("vote", "image"):
        raise ValueError(f"unknown calibration mode {mode!r}")
    cands = np.unique(np.r_[0.0, np.concatenate([np.asarray(s, dtype=np.float64) for s in series_list])])
    fms = np.empty(len(cands))
    if mode == "image":
        flat = np.concatenate([np.asarray(s, dtype=np.float64) for s in series_list])
        truth = np.concatenate([np.full(len(s), lab) for s, lab in zip(series_list, labels)])
        for i, eps in enumerate(cands):
            fms[i] = _fm_for(flat > eps, truth)
    else:
        lengths = {len(s) for s in series_list}
        if len(lengths) == 1:
            mat = np.stack([np.asarray(s, dtype=np.float64) for s in series_list])
            for i, eps in enumerate(cands):
                fms[i] = _fm_for(_vote_decisions(mat, eps), labels)
        else:
            for i, eps in enumerate(cands):
                pred = np.array([sequence_verdict(s, eps).anomalous for s in series_list])
                fms[i] = _fm_for(pred, labels)
    best = np.flatnonzero(fms == fms.max())
    return float(cands[best[len(best) // 2]]), float(fms.max())


@dataclass
class MetricRow:
    model: str
    row: str
    scorer: str
    sn: float
    pr: float
    fm: float
    tp: int
    fp: int
    tn: int
    fn: int
    n_items: int
    epsilon: float


@dataclass
class Report:
    metrics: list = field(default_factory=list)  # MetricRow
    baselines: list = field(default_factory=list)  # MetricRow
    roc: dict = field(default_factory=dict)  # (model, scorer) -> RocCurve
    score_over_time: dict = field(default_factory=dict)  # (model, scorer) -> {class: (mean, sd)}
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "metrics": [asdict(r) for r in self.metrics],
            "baselines": [asdict(r) for r in self.baselines],
            "roc": [
                {"model": m, "scorer": s, "auc": c.auc, "fpr": c.fpr, "tpr": c.tpr,
                 "thresholds": [t if np.isfinite(t) else None for t in c.thresholds]}
                for (m, s), c in sorted(self.roc.items())
            ],
            "score_over_time": [
                {"model": m, "scorer": s, "class": cls, "mean": mean.tolist(), "sd": sd.tolist()}
                for (m, s), d in sorted(self.score_over_time.items())
                for cls, (mean, sd) in sorted(d.items())
            ],
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d):
        rep = cls(config=d.get("config", {}))
        rep.metrics = [MetricRow(**r) for r in d["metrics"]]
        rep.baselines = [MetricRow(**r) for r in d.get("baselines", [])]
        for r in d["roc"]:
            th = [np.inf if t is None else t for t in r["thresholds"]]
            rep.roc[(r["model"], r["scorer"])] = RocCurve(r["fpr"], r["tpr"], th, r["auc"])
        for r in d["score_over_time"]:
            rep.score_over_time.setdefault((r["model"], r["scorer"]), {})[r["class"]] = (
                np.asarray(r["mean"]), np.asarray(r["sd"]))
        return rep

    def auc(self, model, scorer="contour"):
        return self.roc[(model, scorer)].auc

    def row(self, model, row="full"):
        for r in self.metrics:
            if r.model == model and r.row == row:
                return r
        raise KeyError((model, row))


def _metric_row(model, row, scorer, pred, truth, eps):
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    c = ConfusionCounts(
        int((pred & truth).sum()), int((pred & ~truth).sum()),
        int((~pred & ~truth).sum()), int((~pred & truth).sum()),
    )
    m = metrics_from_counts(c)
    return MetricRow(model, row, scorer, m.sn, m.pr, m.fm, c.tp, c.fp, c.tn, c.fn, c.total, float(eps))


@dataclass
class ScoreSet:
    """Per-step score series for one model and scorer on the calibration and test groups."""

    calib: dict  # id -> array
    calib_labels: dict  # id -> bool
    test: dict
    test_labels: dict

    def arrays(self, group):
        series, labels = getattr(self, group), getattr(self, f"{group}_labels")
        ids = sorted(series)
        return ids, [series[i] for i in ids], np.array([labels[i] for i in ids], dtype=bool)


def sequence_decisions(series_list, eps, vote_scope="sequence", window_starts=None, window_length=10):
    if vote_scope == "window":
        return np.array([window_vote(s, eps, window_starts(len(s)), window_length) for s in series_list])
    return np.array([sequence_verdict(s, eps).anomalous for s in series_list])


def evaluate_model(model_name, scores, epsilon="calibrate", vote_scope="sequence",
                   window_starts=None, window_length=10):
    """Rows I-III for one model.  ``scores`` maps scorer name -> ScoreSet.

    Returns ``(metric_rows, epsilons)`` where ``epsilons`` maps row -> threshold.
    """
    rows, eps_used = [], {}
    plan = (("full", "contour", "vote"), ("w/o voting", "contour", "image"), ("w/o contour", "mean_residual", "vote"))
    for row, scorer, mode in plan:
        ss = scores[scorer]
        if epsilon == "calibrate" or scorer != "contour":
            _, cal_series, cal_labels = ss.arrays("calib")
            eps, _ = calibrate_epsilon(cal_series, cal_labels, mode)
        else:
            eps = float(epsilon)
        eps_used[row] = eps
        _, test_series, test_labels = ss.arrays("test")
        if mode == "vote":
            pred = sequence_decisions(test_series, eps, vote_scope, window_starts, window_length)
            rows.append(_metric_row(model_name, row, scorer, pred, test_labels, eps))
        else:
            pred = np.concatenate([np.asarray(s) > eps for s in test_series])
            truth = np.concatenate([np.full(len(s), lab) for s, lab in zip(test_series, test_labels)])
            rows.append(_metric_row(model_name, row, scorer, pred, truth, eps))
    return rows, eps_used


def run_ablations(scores_by_model, epsilon="calibrate", vote_scope="sequence", roc_statistic="median",
                  window_starts=None, window_length=10, config=None):
    """Assemble a :class:`Report` from per-model score sets.

    ``scores_by_model[model][scorer]`` is a :class:`ScoreSet`; scorers are
    ``contour``, ``mean_residual`` and, for models with a variance head,
    ``recon_prob``.
    """
    report = Report(config=config or {})
    for model_name in sorted(scores_by_model):
        scorers = scores_by_model[model_name]
        for name in ("contour", "mean_residual"):
            if name not in scorers:
                raise KeyError(f"{model_name}: missing {name} scores")
        rows, eps = evaluate_model(model_name, scorers, epsilon, vote_scope, window_starts, window_length)
        report.metrics.extend(rows)
        if "recon_prob" in scorers:
            ss = scorers["recon_prob"]
            _, cal_series, cal_labels = ss.arrays("calib")
            rp_eps, _ = calibrate_epsilon(cal_series, cal_labels, "vote")
            _, test_series, test_labels = ss.arrays("test")
            pred = sequence_decisions(test_series, rp_eps, vote_scope, window_starts, window_length)
            report.baselines.append(_metric_row(model_name, "reconstruction probability", "recon_prob",
                                                pred, test_labels, rp_eps))
            eps["recon_prob"] = rp_eps
        for scorer, ss in sorted(scorers.items()):
            _, test_series, test_labels = ss.arrays("test")
            row_eps = eps["recon_prob"] if scorer == "recon_prob" else eps["full" if scorer == "contour" else "w/o contour"]
            stats = [sequence_statistic(s, roc_statistic, row_eps) for s in test_series]
            report.roc[(model_name, scorer)] = roc_curve(stats, test_labels)
            try:
                report.score_over_time[(model_name, scorer)] = score_over_time(test_series, test_labels)
            except ValueError as exc:
                log.warning("%s/%s: no score-over-time bands (%s)", model_name, scorer, exc)
    return report


def _fmt(x):
    return repr(float(x))


def emit_report(report, out_dir, plots=True):
    """Write metrics/ROC/score-over-time CSVs, a JSON summary and optional PNG plots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fields = list(MetricRow.__dataclass_fields__)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in report.metrics + report.baselines:
            w.writerow([_fmt(v) if isinstance(v, float) else v for v in (getattr(r, f) for f in fields)])
    with open(out / "roc.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "scorer", "point", "fpr", "tpr", "threshold"])
        for (m, s), c in sorted(report.roc.items()):
            for i, (f, t, th) in enumerate(zip(c.fpr, c.tpr, c.thresholds)):
                w.writerow([m, s, i, _fmt(f), _fmt(t), _fmt(th)])
    with open(out / "auc.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "scorer", "auc"])
        for (m, s), c in sorted(report.roc.items()):
            w.writerow([m, s, _fmt(c.auc)])
    with open(out / "score_over_time.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "scorer", "class", "time_step", "mean", "sd"])
        for (m, s), d in sorted(report.score_over_time.items()):
            for cls, (mean, sd) in sorted(d.items()):
                for t, (a, b) in enumerate(zip(mean, sd)):
                    w.writerow([m, s, cls, t, _fmt(a), _fmt(b)])
    (out / "summary.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    written = ["metrics.csv", "roc.csv", "auc.csv", "score_over_time.csv", "summary.json"]
    if plots:
        written += _plot(report, out)
    return written


def _plot(report, out):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except Exception as exc:  # noqa: BLE001 - any backend failure just skips plots
        log.warning("plotting unavailable (%s); CSV files written without figures", exc)
        return []
    files = []
    models = sorted({m for m, _ in report.roc})
    for m in models:
        bands = report.score_over_time.get((m, "contour"))
        if bands:
            fig, ax = plt.subplots(figsize=(5, 3))
            for cls, color in (("normal", "tab:blue"), ("anomalous", "tab:red")):
                mean, sd = bands[cls]
                t = np.arange(len(mean))
                ax.plot(t, mean, color=color, label=cls)
                ax.fill_between(t, mean - sd, mean + sd, color=color, alpha=0.25)
            ax.set_xlabel("time step")
            ax.set_ylabel("res_high / res")
            ax.set_title(m)
            ax.legend()
            fig.tight_layout()
            name = f"{m}_score_over_time.png"
            fig.savefig(out / name, dpi=100)
            plt.close(fig)
            files.append(name)
        fig, ax = plt.subplots(figsize=(4, 4))
        for (mm, s), c in sorted(report.roc.items()):
            if mm == m:
                ax.plot(c.fpr, c.tpr, label=f"{s} (AUC {c.auc:.3f})")
        ax.plot([0, 1], [0, 1], "k:", lw=0.8)
        ax.set_xlabel("FPR")
        ax.set_ylabel("TPR")
        ax.set_title(m)
        ax.legend(fontsize=7)
        fig.tight_layout()
        name = f"{m}_roc.png"
        fig.savefig(out / name, dpi=100)
        plt.close(fig)
        files.append(name)
    return files
