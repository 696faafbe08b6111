"""Gaussian mixture models for per-second ensemble weighting.

One mixture is fitted per cluster of sessions; at prediction time the
normalized posterior probability of the current feature vector under each
cluster's mixture (summed over that mixture's components and weighted by
the cluster prior) becomes the weight of the corresponding regression
sub-model. MAP classification over the same posteriors drives the
clustering-accuracy grids.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .scaling import FeatureScaler

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class GaussianComponent:
    weight: float
    mean: np.ndarray
    variances: np.ndarray  # diagonal entries, [d]


@dataclass
class FitDiagnostics:
    log_likelihood: float
    iterations: int
    converged: bool
    ll_history: np.ndarray
    reseed_iterations: list[int] = field(default_factory=list)


@dataclass
class GmmModel:
    """Diagonal-covariance Gaussian mixture with ``m`` components."""

    weights: np.ndarray  # [m]
    means: np.ndarray  # [m, d]
    variances: np.ndarray  # [m, d]
    diagnostics: FitDiagnostics | None = None

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def feature_dim(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> list[GaussianComponent]:
        return [GaussianComponent(float(w), m, v)
                for w, m, v in zip(self.weights, self.means, self.variances)]

    def validate(self) -> None:
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValidationError(f"component weights sum to {self.weights.sum()!r}, not 1")
        if (self.variances <= 0.0).any():
            raise ValidationError("non-positive component variance")


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    out = np.log(np.sum(np.exp(a - amax), axis=axis)) + np.squeeze(amax, axis=axis)
    return out


def component_log_densities(model: GmmModel, Y: np.ndarray) -> np.ndarray:
    """log of weight_l * N(y; mean_l, var_l) for every row of Y, shape [n, m]."""
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    inv = 1.0 / model.variances  # [m, d]
    # quadratic form expanded so the whole batch is three matmuls
    quad = (Y * Y) @ inv.T - 2.0 * (Y @ (model.means * inv).T) \
        + np.sum(model.means * model.means * inv, axis=1)
    norm = np.sum(np.log(model.variances), axis=1) + model.feature_dim * LOG_2PI
    return np.log(model.weights) - 0.5 * (norm + quad)


def gmm_log_densities(model: GmmModel, Y: np.ndarray) -> np.ndarray:
    """Mixture log density of each row of Y, shape [n]."""
    return _logsumexp(component_log_densities(model, Y), axis=1)


def log_density(model: GmmModel, y: np.ndarray) -> float:
    """Mixture log density at a single point (log-sum-exp stabilized)."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.size != model.feature_dim:
        raise ValidationError(f"expected a vector of dim {model.feature_dim}")
    if not np.isfinite(y).all():
        raise ValidationError("non-finite input to log_density")
    return float(gmm_log_densities(model, y[None, :])[0])


def _responsibilities(model: GmmModel, Y: np.ndarray) -> tuple[np.ndarray, float]:
    logp = component_log_densities(model, Y)
    lse = _logsumexp(logp, axis=1)
    resp = np.exp(logp - lse[:, None])
    return resp, float(lse.sum())


def _kmeanspp_init(X: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((m, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for k in range(1, m):
        total = d2.sum()
        if total > 0.0:
            probs = d2 / total
            idx = rng.choice(n, p=probs)
        else:
            idx = rng.integers(n)
        centers[k] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[k]) ** 2, axis=1))
    return centers


def _fit_once(X: np.ndarray, m: int, rng: np.random.Generator, max_iter: int,
              rel_tol: float, variance_floor: float) -> GmmModel:
    n, d = X.shape
    Xsq = X * X
    data_var = np.maximum(X.var(axis=0), variance_floor)

    centers = _kmeanspp_init(X, m, rng)
    assign = np.argmin(
        ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2), axis=1
    ) if n * m * d <= 20_000_000 else np.argmin(
        (Xsq.sum(axis=1)[:, None] - 2 * X @ centers.T + (centers ** 2).sum(axis=1)), axis=1
    )
    resp = np.zeros((n, m))
    resp[np.arange(n), assign] = 1.0

    weights = np.full(m, 1.0 / m)
    means = centers.copy()
    variances = np.tile(data_var, (m, 1))
    model = GmmModel(weights, means, variances)

    ll_history: list[float] = []
    reseeds: list[int] = []
    prev_ll = -np.inf
    converged = False
    iterations = 0
    for it in range(max_iter):
        # M-step from current responsibilities
        nk = resp.sum(axis=0)
        dead = np.flatnonzero(nk < 1e-10)
        if dead.size:
            # re-seed dead components from the worst-fit point
            point_ll = gmm_log_densities(model, X)
            for k in dead:
                worst = int(np.argmin(point_ll))
                resp[:, k] = 0.0
                resp[worst, :] = 0.0
                resp[worst, k] = 1.0
                log.warning("re-seeded empty mixture component %d at iteration %d", k, it)
            reseeds.append(it)
            nk = resp.sum(axis=0)
            prev_ll = -np.inf  # monotonicity clock restarts after intervention
        weights = nk / n
        means = (resp.T @ X) / nk[:, None]
        variances = (resp.T @ Xsq) / nk[:, None] - means * means
        variances = np.maximum(variances, variance_floor)
        model = GmmModel(weights, means, variances)

        # E-step + log-likelihood of the updated model
        resp, ll = _responsibilities(model, X)
        ll_history.append(ll)
        iterations = it + 1
        if np.isfinite(prev_ll) and abs(ll - prev_ll) <= rel_tol * max(abs(ll), 1.0):
            converged = True
            break
        prev_ll = ll

    model.diagnostics = FitDiagnostics(
        log_likelihood=ll_history[-1],
        iterations=iterations,
        converged=converged,
        ll_history=np.asarray(ll_history),
        reseed_iterations=reseeds,
    )
    return model


def fit_em(data: np.ndarray, m: int, seed: int, max_iter: int = 500,
           rel_tol: float = 1e-7, variance_floor: float = 1e-6,
           n_init: int = 3) -> GmmModel:
    """Fit an ``m``-component diagonal-covariance mixture by EM.

    Initialization picks component seeds by distance-weighted sampling
    (k-means++ style); ``n_init`` restarts are run from distinct derived
    seeds and the fit with the best final log-likelihood is kept. The
    per-restart log-likelihood sequence is non-decreasing (up to the
    convergence tolerance) except immediately after an empty-component
    re-seed, which is recorded in the diagnostics.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError("data must be a 2-D array [n, d]")
    n, d = X.shape
    if m < 1:
        raise ValidationError(f"m must be >= 1, got {m}")
    if n < m:
        raise ValidationError(f"cannot fit {m} components to {n} points")
    if not np.isfinite(X).all():
        raise ValidationError("non-finite values in training data")

    best: GmmModel | None = None
    for restart in range(max(1, n_init)):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(restart,)))
        model = _fit_once(X, m, rng, max_iter, rel_tol, variance_floor)
        if best is None or model.diagnostics.log_likelihood > best.diagnostics.log_likelihood:
            best = model
    best.validate()
    return best


# ---------------------------------------------------------------------------
# cluster weighting


@dataclass
class ClusterWeightModel:
    """Per-cluster mixtures plus the shared feature scaler and priors."""

    gmms: list[GmmModel]
    cluster_priors: np.ndarray  # [k]
    scaler: FeatureScaler

    @property
    def n_clusters(self) -> int:
        return len(self.gmms)

    def validate(self) -> None:
        dims = {g.feature_dim for g in self.gmms}
        if len(dims) != 1:
            raise ValidationError(f"mixture feature dims differ: {sorted(dims)}")
        if abs(self.cluster_priors.sum() - 1.0) > 1e-9 or (self.cluster_priors <= 0).any():
            raise ValidationError("cluster priors must be positive and sum to 1")


def batch_cluster_weights(model: ClusterWeightModel, Y: np.ndarray) -> np.ndarray:
    """Normalized posterior cluster weights for each row of raw features Y."""
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if not np.isfinite(Y).all():
        raise ValidationError("non-finite weighting features")
    Ys = model.scaler.transform(Y)
    logp = np.column_stack([gmm_log_densities(g, Ys) for g in model.gmms])
    logp = logp + np.log(model.cluster_priors)[None, :]
    finite = np.isfinite(logp).any(axis=1)
    out = np.empty_like(logp)
    if (~finite).any():
        log.warning("posterior underflow on %d frames; falling back to priors",
                    int((~finite).sum()))
        out[~finite] = model.cluster_priors
    lse = _logsumexp(logp[finite], axis=1)
    out[finite] = np.exp(logp[finite] - lse[:, None])
    return out


def cluster_weights(model: ClusterWeightModel, y: np.ndarray) -> np.ndarray:
    """Posterior weight of each cluster for one raw feature vector.

    Standardization with the training scaler happens internally; the
    returned vector is non-negative and sums to 1. Summing the pooled
    mixture's per-component posteriors within each cluster gives the
    same value.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise ValidationError("expected a single feature vector")
    return batch_cluster_weights(model, y[None, :])[0]


def map_classify(model: ClusterWeightModel, y: np.ndarray) -> int:
    """Index of the maximum-posterior cluster (ties go to the lowest index)."""
    return int(np.argmax(cluster_weights(model, y)))


def fit_cluster_weight_model(frames_by_cluster: list[np.ndarray], m: int, seed: int,
                             equal_priors: bool = False,
                             min_frames_per_component: int = 5,
                             **fit_kwargs) -> ClusterWeightModel:
    """Fit one mixture per cluster on that cluster's weighting frames.

    The scaler is fitted on the pooled frames of all clusters; priors are
    proportional to per-cluster frame counts unless ``equal_priors``. A
    cluster with fewer than ``m`` frames gets a reduced component count
    ``max(1, n_frames // min_frames_per_component)``.
    """
    if not frames_by_cluster or any(f.shape[0] == 0 for f in frames_by_cluster):
        raise ValidationError("every cluster needs at least one weighting frame")
    pooled = np.vstack(frames_by_cluster)
    scaler = FeatureScaler.fit(pooled)
    gmms = []
    for ci, frames in enumerate(frames_by_cluster):
        m_c = m
        if frames.shape[0] < m:
            m_c = max(1, frames.shape[0] // min_frames_per_component)
            log.warning("cluster %d has %d frames < m=%d; reducing to %d components",
                        ci, frames.shape[0], m, m_c)
        child_seed = int(np.random.SeedSequence(seed, spawn_key=(ci,)).generate_state(1)[0])
        gmms.append(fit_em(scaler.transform(frames), m_c, seed=child_seed, **fit_kwargs))
    counts = np.array([f.shape[0] for f in frames_by_cluster], dtype=np.float64)
    priors = np.full(len(gmms), 1.0 / len(gmms)) if equal_priors else counts / counts.sum()
    model = ClusterWeightModel(gmms=gmms, cluster_priors=priors, scaler=scaler)
    model.validate()
    return model


# ---------------------------------------------------------------------------
# classification-accuracy grids


@dataclass
class SessionFrames:
    """Weighting-feature frames of one session plus its cluster label."""

    session_id: str
    label: int  # 0-based cluster index
    blocks: dict[str, np.ndarray]  # block name -> [n_frames, d_block]

    def features(self, band_set: tuple[str, ...]) -> np.ndarray:
        missing = [b for b in band_set if b not in self.blocks]
        if missing:
            raise ValidationError(f"session {self.session_id} lacks feature blocks {missing}")
        return np.hstack([self.blocks[b] for b in band_set])


@dataclass
class GridCell:
    mean_accuracy: float
    std_accuracy: float
    confusion_mean: np.ndarray  # [k, k] row = true cluster, col = predicted
    confusion_std: np.ndarray
    n_sessions: int
    skipped_folds: int


def accuracy_grid(sessions: list[SessionFrames], m_range=range(1, 16),
                  band_sets=(("pow_theta",), ("pow_theta", "plv_alpha")),
                  seed: int = 0, n_clusters: int | None = None,
                  **fit_kwargs) -> dict[tuple[int, str], GridCell]:
    """Leave-one-session-out MAP classification accuracy over (m, band set).

    For each held-out session, mixtures are fitted per cluster on the
    remaining sessions' frames and the holdout's frames are MAP-classified;
    accuracy is the fraction assigned to the true cluster. Folds whose
    training side would leave a cluster empty are skipped with a warning.
    """
    if len(sessions) < 2:
        raise ValidationError("need at least two labeled sessions")
    labels = np.array([s.label for s in sessions])
    k = n_clusters or int(labels.max()) + 1
    out: dict[tuple[int, str], GridCell] = {}
    for m in m_range:
        for band_set in band_sets:
            set_name = "+".join(band_set)
            per_session_acc = []
            per_session_rows = []  # (true label, predicted fraction row)
            skipped = 0
            for hold_idx, holdout in enumerate(sessions):
                train = [s for i, s in enumerate(sessions) if i != hold_idx]
                train_labels = [s.label for s in train]
                if any(c not in train_labels for c in range(k)):
                    skipped += 1
                    log.warning("skipping fold for %s: a cluster would be empty",
                                holdout.session_id)
                    continue
                frames_by_cluster = [
                    np.vstack([s.features(band_set) for s in train if s.label == c])
                    for c in range(k)
                ]
                child = int(np.random.SeedSequence(
                    seed, spawn_key=(hold_idx,)).generate_state(1)[0])
                model = fit_cluster_weight_model(frames_by_cluster, m, seed=child,
                                                 **fit_kwargs)
                W = batch_cluster_weights(model, holdout.features(band_set))
                pred = np.argmax(W, axis=1)
                row = np.bincount(pred, minlength=k) / pred.size
                per_session_acc.append(float(row[holdout.label]))
                per_session_rows.append((holdout.label, row))
            conf_mean = np.zeros((k, k))
            conf_std = np.zeros((k, k))
            for c in range(k):
                rows = np.array([r for lab, r in per_session_rows if lab == c])
                if rows.size:
                    conf_mean[c] = rows.mean(axis=0)
                    conf_std[c] = rows.std(axis=0)
            acc = np.asarray(per_session_acc)
            out[(m, set_name)] = GridCell(
                mean_accuracy=float(acc.mean()) if acc.size else float("nan"),
                std_accuracy=float(acc.std()) if acc.size else float("nan"),
                confusion_mean=conf_mean,
                confusion_std=conf_std,
                n_sessions=int(acc.size),
                skipped_folds=skipped,
            )
    return out


# ---------------------------------------------------------------------------
# serialization


def gmm_to_dict(model: GmmModel) -> dict:
    return {
        "weights": model.weights.tolist(),
        "means": model.means.tolist(),
        "variances": model.variances.tolist(),
    }


def gmm_from_dict(d: dict) -> GmmModel:
    return GmmModel(
        weights=np.asarray(d["weights"], dtype=np.float64),
        means=np.asarray(d["means"], dtype=np.float64),
        variances=np.asarray(d["variances"], dtype=np.float64),
    )


def weight_model_to_dict(model: ClusterWeightModel) -> dict:
    return {
        "gmms": [gmm_to_dict(g) for g in model.gmms],
        "cluster_priors": model.cluster_priors.tolist(),
        "scaler": model.scaler.to_dict(),
    }


def weight_model_from_dict(d: dict) -> ClusterWeightModel:
    return ClusterWeightModel(
        gmms=[gmm_from_dict(g) for g in d["gmms"]],
        cluster_priors=np.asarray(d["cluster_priors"], dtype=np.float64),
        scaler=FeatureScaler.from_dict(d["scaler"]),
    )
