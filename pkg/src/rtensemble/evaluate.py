"""Evaluation protocols: RMSE, leave-one-session-out comparison of the three
predictor modes, and the cross-cluster RMSE matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .clustering import SessionRecord, recursive_cluster, session_rmse_matrix, train_cluster_svrs
from .ensemble import (EnsembleConfig, FeaturizedSession, align_trace_to_trials,
                       predict_trace, train_ensemble)
from .errors import ValidationError
from .io_utils import atomic_write_text, fmt_float, provenance_comment, write_json
from .svr import TrainConfig, predict_batch, train
from .spectral import FeatureConfig

log = logging.getLogger(__name__)

MODES = ("single", "fixed", "dynamic")


def rmse(pred, rec) -> float:
    """Root mean squared error between two equal-length vectors."""
    pred = np.asarray(pred, dtype=np.float64)
    rec = np.asarray(rec, dtype=np.float64)
    if pred.shape != rec.shape or pred.ndim != 1 or pred.size == 0:
        raise ValidationError(
            f"rmse needs equal nonzero-length vectors, got {pred.shape} and {rec.shape}"
        )
    return float(np.sqrt(np.mean((pred - rec) ** 2)))


def record_from_featurized(fs: FeaturizedSession) -> SessionRecord:
    """Trial-aligned regression record derived from per-second frames."""
    X, rt = fs.trial_training_pairs()
    return SessionRecord(
        session_id=fs.session_id, subject_id=fs.subject_id,
        trial_t_s=np.empty(0, dtype=np.int64), X=X, rt=rt,
    )


@dataclass
class EvalConfig:
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    label_mode: str = "cluster"  # "cluster": re-cluster each fold; "fixed": use given labels
    subject_loso: bool = False  # hold out whole subjects instead of sessions
    modes: tuple[str, ...] = MODES
    cluster_max_iter: int = 50

    def to_dict(self) -> dict:
        return {
            "ensemble": self.ensemble.to_dict(), "label_mode": self.label_mode,
            "subject_loso": self.subject_loso, "modes": list(self.modes),
            "cluster_max_iter": self.cluster_max_iter,
        }


@dataclass
class EvalReport:
    per_session: dict[str, dict[str, float]]  # session -> mode -> rmse
    session_cluster: dict[str, int]  # reporting cluster of each session
    per_cluster: dict[str, list[dict]]  # mode -> [{cluster, mean, std, count}]
    fold_manifests: dict[str, list[str]]  # holdout -> training session ids
    excluded_trials: dict[str, int]
    skipped_folds: list[str]
    n_sessions: int
    provenance: dict = field(default_factory=dict)


def _fold_groups(sessions: list[FeaturizedSession], by_subject: bool) -> list[list[int]]:
    if not by_subject:
        return [[i] for i in range(len(sessions))]
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(sessions):
        groups.setdefault(s.subject_id, []).append(i)
    return [groups[k] for k in sorted(groups)]


def loso_evaluate(sessions: list[FeaturizedSession], labels: dict[str, int],
                  cfg: EvalConfig | None = None) -> EvalReport:
    """Hold out each session (or subject), train on the rest, score all modes.

    ``labels`` provides the reporting cluster of every session and, in
    ``label_mode="fixed"``, also the training labels inside each fold. In
    ``label_mode="cluster"`` each fold re-runs the recursive clustering on
    its training sessions only, so the holdout never influences cluster
    assignment. Folds whose training side would leave a cluster empty are
    skipped with a warning.
    """
    cfg = cfg or EvalConfig()
    if len(sessions) < 2:
        raise ValidationError("need at least two sessions")
    ids = [s.session_id for s in sessions]
    missing = [i for i in ids if i not in labels]
    if missing:
        raise ValidationError(f"labels missing for sessions {missing}")
    k = cfg.ensemble.k
    counts = np.bincount([labels[i] for i in ids], minlength=k)
    if (counts < 2).any():
        raise ValidationError(
            f"every cluster needs at least 2 sessions, got counts {counts.tolist()}"
        )

    records = {s.session_id: record_from_featurized(s) for s in sessions}
    per_session: dict[str, dict[str, float]] = {}
    fold_manifests: dict[str, list[str]] = {}
    excluded: dict[str, int] = {}
    skipped: list[str] = []

    for fold_idx, holdout_group in enumerate(_fold_groups(sessions, cfg.subject_loso)):
        held = [sessions[i] for i in holdout_group]
        train_sessions = [s for i, s in enumerate(sessions) if i not in holdout_group]
        train_ids = [s.session_id for s in train_sessions]
        held_ids = [s.session_id for s in held]
        assert not set(held_ids) & set(train_ids), "fold leakage"

        train_counts = np.bincount([labels[i] for i in train_ids], minlength=k)
        if (train_counts == 0).any():
            log.warning("skipping fold %s: training side would empty a cluster", held_ids)
            skipped.extend(held_ids)
            continue

        if cfg.label_mode == "fixed":
            fold_labels = {i: labels[i] for i in train_ids}
        else:
            train_records = [records[i] for i in train_ids]
            result = recursive_cluster(
                train_records, k=k, svr_cfg=cfg.ensemble.svr,
                max_iter=cfg.cluster_max_iter,
            )
            fold_labels = result.labels
            if result.n_clusters != k:
                log.warning("skipping fold %s: clustering collapsed to %d clusters",
                            held_ids, result.n_clusters)
                skipped.extend(held_ids)
                continue

        fold_seed = int(np.random.SeedSequence(
            cfg.ensemble.seed, spawn_key=(fold_idx,)).generate_state(1)[0])
        fold_cfg = EnsembleConfig(**{**cfg.ensemble.__dict__, "seed": fold_seed})
        model = train_ensemble(train_sessions, fold_labels, fold_cfg)

        for fs in held:
            scores = {}
            for mode in cfg.modes:
                trace = predict_trace(model, fs, mode)
                rec, pred, n_excl = align_trace_to_trials(trace, fs.events)
                scores[mode] = rmse(pred, rec)
                excluded[fs.session_id] = n_excl
            per_session[fs.session_id] = scores
            fold_manifests[fs.session_id] = sorted(train_ids)

    per_cluster: dict[str, list[dict]] = {}
    for mode in cfg.modes:
        rows = []
        for c in range(k):
            vals = np.array([per_session[i][mode] for i in per_session
                             if labels[i] == c])
            rows.append({
                "cluster": c,
                "mean": float(vals.mean()) if vals.size else float("nan"),
                "std": float(vals.std()) if vals.size else float("nan"),
                "count": int(vals.size),
            })
        per_cluster[mode] = rows

    report = EvalReport(
        per_session=per_session,
        session_cluster={i: int(labels[i]) for i in per_session},
        per_cluster=per_cluster,
        fold_manifests=fold_manifests,
        excluded_trials=excluded,
        skipped_folds=skipped,
        n_sessions=len(sessions),
        provenance={"eval_config": cfg.to_dict()},
    )
    counted = sum(r["count"] for r in report.per_cluster[cfg.modes[0]])
    assert counted == len(sessions) - len(skipped), "report conservation violated"
    return report


def cross_model_matrix(records: list[SessionRecord], labels: dict[str, int],
                       svr_cfg: TrainConfig | None = None,
                       k: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std RMSE of the cluster-i model on cluster-j sessions, [k, k].

    Off-diagonal entries train on all of cluster i and score each cluster-j
    session; diagonal entries are leave-one-session-out within the cluster,
    so a model never scores a session it trained on.
    """
    svr_cfg = svr_cfg or TrainConfig()
    lab = np.array([labels[r.session_id] for r in records])
    kk = k or int(lab.max()) + 1
    counts = np.bincount(lab, minlength=kk)
    if (counts < 2).any():
        raise ValidationError(
            f"every cluster needs at least 2 sessions, got counts {counts.tolist()}"
        )
    mean = np.empty((kk, kk))
    std = np.empty((kk, kk))
    for i in range(kk):
        members = [r for r, l in zip(records, lab) if l == i]
        model_full = train(
            np.vstack([r.X for r in members]), np.concatenate([r.rt for r in members]),
            svr_cfg,
        )
        for j in range(kk):
            targets = [r for r, l in zip(records, lab) if l == j]
            if i == j:
                vals = []
                for held in members:
                    rest = [r for r in members if r is not held]
                    m = train(np.vstack([r.X for r in rest]),
                              np.concatenate([r.rt for r in rest]), svr_cfg)
                    vals.append(rmse(predict_batch(m, held.X), held.rt))
            else:
                vals = [rmse(predict_batch(model_full, r.X), r.rt) for r in targets]
            vals = np.asarray(vals)
            mean[i, j] = float(vals.mean())
            std[i, j] = float(vals.std())
    return mean, std


# ---------------------------------------------------------------------------
# report artifacts


def write_report(path, report: EvalReport, provenance: dict) -> None:
    write_json(path, {
        "provenance": {**report.provenance, **provenance},
        "n_sessions": report.n_sessions,
        "skipped_folds": report.skipped_folds,
        "per_session_rmse": report.per_session,
        "session_cluster": report.session_cluster,
        "per_cluster_rmse": report.per_cluster,
        "excluded_trials": report.excluded_trials,
        "fold_manifests": report.fold_manifests,
    })


def write_cluster_rmse_csv(path, report: EvalReport, provenance: dict) -> None:
    """Per-cluster mean+-std of each mode (rows: clusters, columns: modes)."""
    modes = list(report.per_cluster)
    lines = [provenance_comment(provenance).rstrip("\n")]
    lines.append("cluster," + ",".join(f"{m}_mean,{m}_std,{m}_count" for m in modes))
    k = len(report.per_cluster[modes[0]])
    for c in range(k):
        row = [str(c)]
        for m in modes:
            cell = report.per_cluster[m][c]
            row += [fmt_float(cell["mean"]), fmt_float(cell["std"]), str(cell["count"])]
        lines.append(",".join(row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_cross_model_csv(path, mean: np.ndarray, std: np.ndarray, provenance: dict) -> None:
    """Cross-cluster RMSE matrix (rows: training cluster, cols: test cluster)."""
    k = mean.shape[0]
    lines = [provenance_comment(provenance).rstrip("\n")]
    lines.append("train_cluster," + ",".join(
        f"test{j}_mean,test{j}_std" for j in range(k)))
    for i in range(k):
        row = [str(i)]
        for j in range(k):
            row += [fmt_float(mean[i, j]), fmt_float(std[i, j])]
        lines.append(",".join(row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_confusion_csv(path, cell, provenance: dict) -> None:
    """Confusion rows of one accuracy-grid cell (true cluster per row)."""
    k = cell.confusion_mean.shape[0]
    lines = [provenance_comment(provenance).rstrip("\n")]
    lines.append("true_cluster," + ",".join(
        f"pred{j}_mean,pred{j}_std" for j in range(k)))
    for i in range(k):
        row = [str(i)]
        for j in range(k):
            row += [fmt_float(cell.confusion_mean[i, j]), fmt_float(cell.confusion_std[i, j])]
        lines.append(",".join(row))
    atomic_write_text(path, "\n".join(lines) + "\n")
