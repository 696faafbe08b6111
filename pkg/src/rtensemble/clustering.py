"""Recursive clustering of sessions by the similarity of their EEG-RT maps.

Sessions start in performance buckets derived from per-trial RT ratios
(each trial's RT over the session's mean of its fastest 10% of RTs). One
regression sub-model is then trained per cluster, every session is scored
against every sub-model, and each session moves to the cluster whose model
fits it best; training and relabeling repeat until the labels stop
changing. Ties keep the current label so fixpoints are stable, label
vectors are hashed to detect cycles, and the visited labeling with the
smallest total within-cluster error wins.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .io_utils import read_json, write_json
from .session import ANALYSIS_WINDOW_S, EegSession
from .spectral import FeatureConfig, oz_spectra_at
from .svr import SvrModel, TrainConfig, grid_search, predict_batch, train

log = logging.getLogger(__name__)

MIN_TRIALS = 10


@dataclass
class SessionRecord:
    """Trial-aligned regression data of one session."""

    session_id: str
    subject_id: str
    trial_t_s: np.ndarray  # [n] window-end second of each kept trial
    X: np.ndarray  # [n, d] Oz log spectra at those seconds
    rt: np.ndarray  # [n] recorded reaction times
    n_excluded: int = 0  # trials with no covering analysis window

    def validate(self) -> None:
        if self.rt.size < MIN_TRIALS:
            raise ValidationError(
                f"session {self.session_id}: {self.rt.size} usable trials, "
                f"need at least {MIN_TRIALS}"
            )
        if self.X.shape[0] != self.rt.size:
            raise ValidationError(f"session {self.session_id}: misaligned trials")


@dataclass
class ClusteringResult:
    session_ids: list[str]
    labels: dict[str, int]  # 0-based cluster index per session
    n_clusters: int
    iterations: int
    history: list[np.ndarray]  # label vector per iteration, initial first
    per_session_rmse: np.ndarray  # [N, k] for the winning labeling
    rmse_history: list[np.ndarray]
    total_rmse: float
    converged: bool
    repairs: list[dict] = field(default_factory=list)

    def label_vector(self) -> np.ndarray:
        return np.array([self.labels[s] for s in self.session_ids])


def trial_frame_times(events, window_s: int, duration_s: float):
    """Window-end seconds covering each trial (floor of deviation onset).

    Trials whose onset second has no completed analysis window are
    excluded and counted.
    """
    last_t = int(math.floor(duration_s))
    kept, times = [], []
    for i, ev in enumerate(events):
        t = int(math.floor(ev.deviation_onset_s))
        if window_s <= t <= last_t:
            kept.append(i)
            times.append(t)
    return np.asarray(times, dtype=np.int64), kept, len(events) - len(kept)


def build_session_record(session: EegSession, cfg: FeatureConfig | None = None,
                         validate_session: bool = True) -> SessionRecord:
    """Regression data for one session, computed only at trial seconds.

    ``validate_session=False`` admits partial renders (e.g. an Oz-only
    session) that cannot satisfy the full-montage invariant.
    """
    cfg = cfg or FeatureConfig()
    if validate_session:
        session.validate()
    times, kept, n_excluded = trial_frame_times(
        session.events, cfg.window_s, session.duration_s
    )
    X = oz_spectra_at(session, times, cfg) if times.size else np.empty((0, 0))
    rt = np.array([session.events[i].rt_s for i in kept])
    rec = SessionRecord(
        session_id=session.session_id,
        subject_id=session.subject_id,
        trial_t_s=times,
        X=X,
        rt=rt,
        n_excluded=n_excluded,
    )
    rec.validate()
    return rec


def _rts_of(session) -> np.ndarray:
    if isinstance(session, SessionRecord):
        return session.rt
    if isinstance(session, EegSession):
        return np.array([ev.rt_s for ev in session.events])
    return np.asarray(session, dtype=np.float64)


def rt_ratio(session) -> np.ndarray:
    """Per-trial RT over the mean of the session's fastest 10% of RTs.

    Accepts a `SessionRecord`, an `EegSession`, or a plain RT array.
    """
    rts = _rts_of(session)
    n = rts.size
    if n < MIN_TRIALS:
        raise ValidationError(f"need at least {MIN_TRIALS} trials, got {n}")
    n_fast = math.ceil(0.1 * n)
    baseline = float(np.sort(rts)[:n_fast].mean())
    return rts / baseline


def initial_labels(sessions: list[SessionRecord],
                   thresholds: tuple[float, ...] = (2.0, 3.0)) -> np.ndarray:
    """Bucket each session by the modal performance level of its trials.

    A trial with ratio <= thresholds[0] is level 0, between the first and
    second threshold level 1, and so on. Ties between buckets go to the
    better-performance one.
    """
    edges = np.asarray(thresholds, dtype=np.float64)
    n_buckets = edges.size + 1
    labels = np.empty(len(sessions), dtype=np.int64)
    for i, rec in enumerate(sessions):
        buckets = np.searchsorted(edges, rt_ratio(rec), side="left")
        labels[i] = int(np.argmax(np.bincount(buckets, minlength=n_buckets)))
    return labels


def _merge_empty_clusters(labels: np.ndarray, k: int) -> tuple[np.ndarray, int]:
    """Collapse empty initial clusters into their better-performance neighbor."""
    labels = labels.copy()
    while k > 1:
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            break
        c = int(empty[0])
        log.warning("initial cluster %d is empty; merging its threshold away", c)
        labels[labels > c] -= 1
        k -= 1
    return labels, k


def _cluster_svr_cfg(sessions: list[SessionRecord], cfg: TrainConfig | None) -> TrainConfig:
    cfg = cfg or TrainConfig()
    has_grid = any(isinstance(getattr(cfg, name), (list, tuple))
                   for name in ("C", "epsilon", "gamma"))
    if has_grid:
        X = np.vstack([r.X for r in sessions])
        rt = np.concatenate([r.rt for r in sessions])
        cfg = grid_search(X, rt, cfg)
        log.info("pooled grid search fixed SVR hyperparameters: C=%g epsilon=%g gamma=%g",
                 cfg.C, cfg.epsilon, cfg.gamma)
    return cfg


def train_cluster_svrs(sessions: list[SessionRecord], labels: np.ndarray, k: int,
                       cfg: TrainConfig) -> list[SvrModel]:
    models = []
    for c in range(k):
        members = [r for r, lab in zip(sessions, labels) if lab == c]
        if not members:
            raise ValidationError(f"cluster {c} has no member sessions")
        X = np.vstack([r.X for r in members])
        rt = np.concatenate([r.rt for r in members])
        models.append(train(X, rt, cfg))
    return models


def session_rmse_matrix(sessions: list[SessionRecord], models: list[SvrModel]) -> np.ndarray:
    """RMSE of each cluster's model on each session's trials, [N, k]."""
    X_all = np.vstack([r.X for r in sessions])
    splits = np.cumsum([r.rt.size for r in sessions])[:-1]
    out = np.empty((len(sessions), len(models)))
    for c, model in enumerate(models):
        preds = np.split(predict_batch(model, X_all), splits)
        for j, (rec, pred) in enumerate(zip(sessions, preds)):
            out[j, c] = float(np.sqrt(np.mean((pred - rec.rt) ** 2)))
    return out


def recursive_cluster(sessions: list[SessionRecord], k: int = 3,
                      svr_cfg: TrainConfig | None = None, max_iter: int = 50,
                      init_labels: np.ndarray | None = None,
                      thresholds: tuple[float, ...] = (2.0, 3.0),
                      tie_tol: float = 1e-12) -> ClusteringResult:
    """Iterate train-per-cluster / relabel-to-best-model until a fixpoint.

    Terminates on unchanged labels, on a previously seen labeling (cycle),
    or ``max_iter``; the returned labeling is the visited one with minimal
    total assigned-model RMSE. A relabeling step that would empty a cluster
    is repaired by keeping the member with the smallest best-vs-second-best
    margin, and the repair is recorded.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if not sessions:
        raise ValidationError("no sessions to cluster")
    for rec in sessions:
        rec.validate()

    if init_labels is not None:
        labels = np.asarray(init_labels, dtype=np.int64).copy()
        if labels.size != len(sessions) or labels.min() < 0 or labels.max() >= k:
            raise ValidationError("init_labels inconsistent with sessions/k")
    else:
        labels = initial_labels(sessions, thresholds[:k - 1])
    labels, k = _merge_empty_clusters(labels, k)

    cfg = _cluster_svr_cfg(sessions, svr_cfg)

    history = [labels.copy()]
    rmse_history: list[np.ndarray] = []
    totals: list[float] = []
    repairs: list[dict] = []
    seen = {labels.tobytes()}
    converged = False
    iterations = 0

    for it in range(max_iter):
        models = train_cluster_svrs(sessions, labels, k, cfg)
        rmse = session_rmse_matrix(sessions, models)
        rmse_history.append(rmse)
        totals.append(float(rmse[np.arange(len(sessions)), labels].sum()))
        iterations = it + 1

        best = np.argmin(rmse, axis=1)
        cur_err = rmse[np.arange(len(sessions)), labels]
        best_err = rmse[np.arange(len(sessions)), best]
        new_labels = np.where(cur_err - best_err > tie_tol, best, labels)
        # by construction the assigned-model error never increases
        assert (rmse[np.arange(len(sessions)), new_labels] <= cur_err + 1e-12).all()

        repaired: set[int] = set()
        for c in range(k):
            if (new_labels == c).any():
                continue
            leavers = [j for j in range(len(sessions))
                       if labels[j] == c and j not in repaired]
            if not leavers:
                raise ValidationError(f"cluster {c} empty and has no repair candidate")
            margins = []
            for j in leavers:
                row = np.sort(rmse[j])
                margins.append(row[1] - row[0] if row.size > 1 else 0.0)
            j = leavers[int(np.argmin(margins))]
            new_labels[j] = c
            repaired.add(j)
            repairs.append({"iteration": it, "session": sessions[j].session_id,
                            "kept_in_cluster": int(c)})
            log.warning("kept session %s in cluster %d to avoid emptying it",
                        sessions[j].session_id, c)

        if np.array_equal(new_labels, labels):
            converged = True
            history.append(new_labels.copy())
            break
        key = new_labels.tobytes()
        labels = new_labels
        history.append(labels.copy())
        if key in seen:
            log.warning("labeling cycle detected after %d iterations", it + 1)
            break
        seen.add(key)

    win = int(np.argmin(totals))
    win_labels = history[win]
    result = ClusteringResult(
        session_ids=[r.session_id for r in sessions],
        labels={r.session_id: int(l) for r, l in zip(sessions, win_labels)},
        n_clusters=k,
        iterations=iterations,
        history=history,
        per_session_rmse=rmse_history[win],
        rmse_history=rmse_history,
        total_rmse=totals[win],
        converged=converged,
    )
    result.repairs = repairs
    return result


# ---------------------------------------------------------------------------
# clusters.json


def write_clusters_json(path, result: ClusteringResult, provenance: dict) -> None:
    write_json(path, {
        "provenance": provenance,
        "n_clusters": result.n_clusters,
        "labels": result.labels,
        "iterations": result.iterations,
        "converged": result.converged,
        "total_rmse": result.total_rmse,
        "session_ids": result.session_ids,
        "history": [h.tolist() for h in result.history],
        "per_session_rmse": result.per_session_rmse.tolist(),
        "repairs": result.repairs,
    })


def read_clusters_json(path) -> dict:
    doc = read_json(path)
    for key in ("labels", "n_clusters", "session_ids"):
        if key not in doc:
            raise ValidationError(f"clusters file missing key {key!r}")
    return doc
