"""The three reaction-time predictors built from per-cluster sub-models.

``single`` applies one pooled regression model; ``fixed`` combines the
per-cluster models with weights averaged over the session's first five
minutes; ``dynamic`` recomputes the posterior weights every second from
the current theta-power + alpha-coherence frame. All three emit a
per-second trace of predictions and weights.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .gmm import (ClusterWeightModel, batch_cluster_weights, fit_cluster_weight_model,
                  weight_model_from_dict, weight_model_to_dict)
from .io_utils import atomic_write_text, fmt_float, provenance_comment, read_csv_rows, read_json, write_json
from .clustering import trial_frame_times
from .session import ANALYSIS_WINDOW_S, EegSession, TrialEvent
from .spectral import FeatureConfig, FeatureFrame, extract_features
from .svr import SvrModel, TrainConfig, predict_batch, svr_from_dict, svr_to_dict, train

log = logging.getLogger(__name__)

#: Inclusive frame-time range used to fit the weighting mixtures: the first
#: five minutes of signal, observed through windows ending at 90..300 s.
BASELINE_RANGE_S = (ANALYSIS_WINDOW_S, 300)


@dataclass
class FeaturizedSession:
    """Per-second feature frames of one session plus its trial events."""

    session_id: str
    subject_id: str
    frames: list[FeatureFrame]
    events: list[TrialEvent]
    duration_s: float

    def frame_times(self) -> np.ndarray:
        return np.array([f.t_s for f in self.frames], dtype=np.int64)

    def oz_matrix(self) -> np.ndarray:
        return np.vstack([f.oz_spectrum for f in self.frames])

    def weighting_matrix(self) -> np.ndarray:
        return np.vstack([f.weighting_vector() for f in self.frames])

    def baseline_weighting_matrix(self) -> np.ndarray:
        rows = [f.weighting_vector() for f in self.frames
                if BASELINE_RANGE_S[0] <= f.t_s <= BASELINE_RANGE_S[1]]
        if not rows:
            raise ValidationError(
                f"session {self.session_id} has no frames in the baseline window"
            )
        return np.vstack(rows)

    def trial_training_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Trial-aligned (oz spectrum, recorded RT) training pairs."""
        times = self.frame_times()
        index_of = {int(t): i for i, t in enumerate(times)}
        X, rt = [], []
        for ev in self.events:
            t = int(math.floor(ev.deviation_onset_s))
            i = index_of.get(t)
            if i is not None:
                X.append(self.frames[i].oz_spectrum)
                rt.append(ev.rt_s)
        if not X:
            raise ValidationError(f"session {self.session_id} has no usable trials")
        return np.vstack(X), np.asarray(rt)


def featurize_session(session: EegSession, cfg: FeatureConfig | None = None) -> FeaturizedSession:
    frames = extract_features(session, cfg)
    return FeaturizedSession(
        session_id=session.session_id,
        subject_id=session.subject_id,
        frames=frames,
        events=list(session.events),
        duration_s=session.duration_s,
    )


@dataclass
class EnsembleConfig:
    k: int = 3
    m: int = 15  # mixture components per cluster
    svr: TrainConfig = field(default_factory=TrainConfig)
    equal_priors: bool = False
    gmm_max_iter: int = 500
    gmm_rel_tol: float = 1e-7
    gmm_variance_floor: float = 1e-6
    gmm_n_init: int = 3
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "k": self.k, "m": self.m, "svr": self.svr.to_dict(),
            "equal_priors": self.equal_priors, "gmm_max_iter": self.gmm_max_iter,
            "gmm_rel_tol": self.gmm_rel_tol, "gmm_variance_floor": self.gmm_variance_floor,
            "gmm_n_init": self.gmm_n_init, "seed": self.seed,
        }


@dataclass
class EnsembleModel:
    """Per-cluster SVRs, the weighting mixtures, and the pooled model."""

    svrs: list[SvrModel]
    weight_model: ClusterWeightModel
    single_svr: SvrModel
    k: int
    fixed_weights: np.ndarray | None = None  # optional preset for fixed mode
    provenance: dict = field(default_factory=dict)

    def validate(self) -> None:
        if len(self.svrs) != self.k or self.weight_model.n_clusters != self.k:
            raise ValidationError("ensemble member count does not match k")
        if self.fixed_weights is not None:
            if self.fixed_weights.size != self.k or abs(self.fixed_weights.sum() - 1.0) > 1e-9:
                raise ValidationError("fixed_weights must have k entries summing to 1")


@dataclass
class PredictionTrace:
    """Per-second predictions with the weights that produced them."""

    session_id: str
    mode: str
    t_s: np.ndarray  # [n]
    rt_pred_s: np.ndarray  # [n]
    weights: np.ndarray  # [n, n_weight_cols]
    rt_rec_s: np.ndarray  # [n], NaN where no trial starts in that second


def train_ensemble(sessions: list[FeaturizedSession], labels, cfg: EnsembleConfig) -> EnsembleModel:
    """Train all three predictor modes from labeled, featurized sessions.

    ``labels`` maps session_id to a 0-based cluster index (or is an array
    aligned with ``sessions``). Each cluster's SVR sees that cluster's
    trial pairs; its weighting mixture sees the first-five-minute frames
    of the same sessions; the pooled model sees everything.
    """
    if isinstance(labels, dict):
        lab = np.array([labels[s.session_id] for s in sessions], dtype=np.int64)
    else:
        lab = np.asarray(labels, dtype=np.int64)
    if lab.size != len(sessions):
        raise ValidationError("labels do not align with sessions")
    k = cfg.k
    if lab.min() < 0 or lab.max() >= k:
        raise ValidationError(f"labels outside 0..{k - 1}")

    pairs = [s.trial_training_pairs() for s in sessions]
    svrs = []
    frames_by_cluster = []
    for c in range(k):
        members = np.flatnonzero(lab == c)
        if members.size == 0:
            raise ValidationError(f"cluster {c} has no training sessions")
        X = np.vstack([pairs[i][0] for i in members])
        rt = np.concatenate([pairs[i][1] for i in members])
        svrs.append(train(X, rt, cfg.svr))
        frames_by_cluster.append(
            np.vstack([sessions[i].baseline_weighting_matrix() for i in members])
        )
    X_all = np.vstack([p[0] for p in pairs])
    rt_all = np.concatenate([p[1] for p in pairs])
    single = train(X_all, rt_all, cfg.svr)

    weight_model = fit_cluster_weight_model(
        frames_by_cluster, m=cfg.m, seed=cfg.seed, equal_priors=cfg.equal_priors,
        max_iter=cfg.gmm_max_iter, rel_tol=cfg.gmm_rel_tol,
        variance_floor=cfg.gmm_variance_floor, n_init=cfg.gmm_n_init,
    )
    model = EnsembleModel(svrs=svrs, weight_model=weight_model, single_svr=single,
                          k=k, provenance={"config": cfg.to_dict()})
    model.validate()
    return model


def _recorded_rt_column(fs: FeaturizedSession, times: np.ndarray) -> np.ndarray:
    rec = np.full(times.size, np.nan)
    index_of = {int(t): i for i, t in enumerate(times)}
    for ev in fs.events:
        i = index_of.get(int(math.floor(ev.deviation_onset_s)))
        if i is not None:
            rec[i] = ev.rt_s
    return rec


def _combine(model: EnsembleModel, fs: FeaturizedSession, W: np.ndarray,
             mode: str) -> PredictionTrace:
    times = fs.frame_times()
    X = fs.oz_matrix()
    preds = np.column_stack([predict_batch(svr, X) for svr in model.svrs])
    rt_pred = np.sum(preds * W, axis=1)
    return PredictionTrace(
        session_id=fs.session_id, mode=mode, t_s=times, rt_pred_s=rt_pred,
        weights=W, rt_rec_s=_recorded_rt_column(fs, times),
    )


def predict_dynamic(model: EnsembleModel, fs: FeaturizedSession) -> PredictionTrace:
    """Per-second ensemble prediction with posterior weights updated each second."""
    W = batch_cluster_weights(model.weight_model, fs.weighting_matrix())
    return _combine(model, fs, W, "dynamic")


def predict_fixed(model: EnsembleModel, fs: FeaturizedSession) -> PredictionTrace:
    """Ensemble prediction with weights frozen to the first-five-minute average."""
    if fs.duration_s < BASELINE_RANGE_S[1]:
        raise ValidationError(
            f"fixed-weight prediction needs at least {BASELINE_RANGE_S[1]} s of "
            f"signal, session {fs.session_id} has {fs.duration_s:.0f} s"
        )
    if model.fixed_weights is not None:
        w = model.fixed_weights
    else:
        W_base = batch_cluster_weights(model.weight_model, fs.baseline_weighting_matrix())
        w = W_base.mean(axis=0)
        w = w / w.sum()
    W = np.tile(w, (len(fs.frames), 1))
    return _combine(model, fs, W, "fixed")


def predict_single(model: EnsembleModel, fs: FeaturizedSession) -> PredictionTrace:
    """Pooled-model prediction; the weight column is a single pseudo-cluster."""
    times = fs.frame_times()
    rt_pred = predict_batch(model.single_svr, fs.oz_matrix())
    return PredictionTrace(
        session_id=fs.session_id, mode="single", t_s=times, rt_pred_s=rt_pred,
        weights=np.ones((times.size, 1)), rt_rec_s=_recorded_rt_column(fs, times),
    )


def predict_trace(model: EnsembleModel, fs: FeaturizedSession, mode: str) -> PredictionTrace:
    if mode == "dynamic":
        return predict_dynamic(model, fs)
    if mode == "fixed":
        return predict_fixed(model, fs)
    if mode == "single":
        return predict_single(model, fs)
    raise ValidationError(f"unknown prediction mode {mode!r}")


def align_trace_to_trials(trace: PredictionTrace, events: list[TrialEvent]
                          ) -> tuple[np.ndarray, np.ndarray, int]:
    """Pair each trial's recorded RT with the trace row at floor(onset).

    Returns (recorded, predicted, n_excluded); trials whose onset precedes
    the first trace row (or follows the last) are excluded and counted.
    """
    index_of = {int(t): i for i, t in enumerate(trace.t_s)}
    rec, pred = [], []
    excluded = 0
    for ev in events:
        i = index_of.get(int(math.floor(ev.deviation_onset_s)))
        if i is None:
            excluded += 1
            continue
        rec.append(ev.rt_s)
        pred.append(trace.rt_pred_s[i])
    return np.asarray(rec), np.asarray(pred), excluded


# ---------------------------------------------------------------------------
# artifacts


def ensemble_to_dict(model: EnsembleModel) -> dict:
    return {
        "k": model.k,
        "svrs": [svr_to_dict(s) for s in model.svrs],
        "single_svr": svr_to_dict(model.single_svr),
        "weight_model": weight_model_to_dict(model.weight_model),
        "fixed_weights": None if model.fixed_weights is None else model.fixed_weights.tolist(),
        "provenance": model.provenance,
    }


def ensemble_from_dict(d: dict) -> EnsembleModel:
    model = EnsembleModel(
        svrs=[svr_from_dict(s) for s in d["svrs"]],
        single_svr=svr_from_dict(d["single_svr"]),
        weight_model=weight_model_from_dict(d["weight_model"]),
        k=int(d["k"]),
        fixed_weights=None if d.get("fixed_weights") is None
        else np.asarray(d["fixed_weights"], dtype=np.float64),
        provenance=dict(d.get("provenance", {})),
    )
    model.validate()
    return model


def save_ensemble(path, model: EnsembleModel) -> None:
    write_json(path, ensemble_to_dict(model))


def load_ensemble(path) -> EnsembleModel:
    return ensemble_from_dict(read_json(path))


def write_trace_csv(path, trace: PredictionTrace, provenance: dict) -> None:
    n_w = trace.weights.shape[1]
    header = ["t_s", "rt_pred_s"] + [f"w_{i + 1}" for i in range(n_w)] + ["rt_rec_s"]
    lines = [provenance_comment(provenance).rstrip("\n"), ",".join(header)]
    for i in range(trace.t_s.size):
        row = [str(int(trace.t_s[i])), fmt_float(trace.rt_pred_s[i])]
        row += [fmt_float(v) for v in trace.weights[i]]
        rec = trace.rt_rec_s[i]
        row.append("" if np.isnan(rec) else fmt_float(rec))
        lines.append(",".join(row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_trace_csv(path) -> PredictionTrace:
    header, rows = read_csv_rows(path)
    w_cols = [i for i, c in enumerate(header) if c.startswith("w_")]
    t, pred, weights, rec = [], [], [], []
    for row in rows:
        t.append(int(float(row[0])))
        pred.append(float(row[1]))
        weights.append([float(row[i]) for i in w_cols])
        rec.append(float(row[-1]) if row[-1] else np.nan)
    return PredictionTrace(
        session_id="", mode="", t_s=np.asarray(t, dtype=np.int64),
        rt_pred_s=np.asarray(pred), weights=np.asarray(weights),
        rt_rec_s=np.asarray(rec),
    )
