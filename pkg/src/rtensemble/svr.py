"""Epsilon-insensitive support vector regression with an RBF kernel.

The dual problem is solved by sequential minimal optimization over the
doubled variable vector ``a = [alpha; alpha*]``: at each step the pair of
variables with the largest Karush-Kuhn-Tucker violation is updated
analytically, keeping the box and equality constraints exact. Features and
targets are standardized internally; the tube half-width ``epsilon`` is
specified in target units (seconds) and rescaled, so it means the same
thing for clusters with different reaction-time ranges.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np
from numba import njit
from scipy.spatial.distance import cdist

from .errors import NumericError, ValidationError
from .scaling import FeatureScaler

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """SVR hyperparameters; ``C``/``epsilon``/``gamma`` may be grid lists.

    ``gamma=None`` resolves to ``1/d`` at training time (or to the default
    ``1/d * {0.1, 1, 10}`` grid in `grid_search`).
    """

    C: float | list = 10.0
    epsilon: float | list = 0.05  # seconds
    gamma: float | list | None = None
    kkt_tol: float = 1e-3
    max_passes: int = 10**6
    cv_folds: int = 5
    seed: int = 0

    def validate(self) -> None:
        for name in ("C", "epsilon"):
            vals = getattr(self, name)
            vals = vals if isinstance(vals, (list, tuple)) else [vals]
            if not vals or any(v <= 0 for v in vals):
                raise ValidationError(f"{name} values must be positive, got {vals}")
        if self.gamma is not None:
            vals = self.gamma if isinstance(self.gamma, (list, tuple)) else [self.gamma]
            if not vals or any(v <= 0 for v in vals):
                raise ValidationError(f"gamma values must be positive, got {vals}")
        if self.kkt_tol <= 0 or self.max_passes <= 0:
            raise ValidationError("kkt_tol and max_passes must be positive")
        if self.cv_folds < 2:
            raise ValidationError("cv_folds must be at least 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def default_grid(cls, **overrides) -> "TrainConfig":
        cfg = cls(C=[0.1, 1.0, 10.0, 100.0], epsilon=[0.01, 0.05, 0.1, 0.2], gamma=None)
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg


@dataclass
class FitInfo:
    iterations: int
    kkt_gap: float
    converged: bool
    full_dual_coeffs: np.ndarray  # beta per training point, training order
    objective_history: np.ndarray | None = None


@dataclass
class SvrModel:
    """Trained sub-model mapping an Oz log spectrum to a reaction time."""

    support_vectors: np.ndarray  # [s, d], standardized feature space
    dual_coeffs: np.ndarray  # [s], alpha - alpha*, in [-C, C]
    bias: float
    gamma: float
    C: float
    epsilon: float  # seconds
    scaler: FeatureScaler
    target_mean: float
    target_std: float
    fit_info: FitInfo | None = field(default=None, repr=False, compare=False)

    @property
    def n_features(self) -> int:
        return self.support_vectors.shape[1]

    def validate(self) -> None:
        if self.support_vectors.shape[0] < 1:
            raise ValidationError("model must keep at least one stored vector")
        if np.any(np.abs(self.dual_coeffs) > self.C * (1 + 1e-12)):
            raise ValidationError("dual coefficient outside the box constraint")
        if abs(self.dual_coeffs.sum()) > 1e-8 * max(1.0, self.C):
            raise ValidationError(
                f"dual coefficients sum to {self.dual_coeffs.sum()!r}, not 0"
            )


@njit(cache=True)
def _smo_solve(K, r, C, eps, tol, max_iter, obj_out):  # pragma: no cover - jitted
    """Maximal-violating-pair SMO on the doubled dual variable vector.

    Variables t < n are alpha (sign +1), t >= n are alpha* (sign -1).
    Returns (a, G, iterations, kkt_gap, objective_value).
    """
    n = K.shape[0]
    m2 = 2 * n
    a = np.zeros(m2)
    G = np.empty(m2)
    for i in range(n):
        G[i] = eps - r[i]
        G[n + i] = eps + r[i]
    obj = 0.0
    it = 0
    gap = np.inf
    while it < max_iter:
        Fmax = -np.inf
        Fmin = np.inf
        i_up = -1
        i_low = -1
        for t in range(m2):
            if t < n:
                F = -G[t]
                in_up = a[t] < C
                in_low = a[t] > 0.0
            else:
                F = G[t]
                in_up = a[t] > 0.0
                in_low = a[t] < C
            if in_up and F > Fmax:
                Fmax = F
                i_up = t
            if in_low and F < Fmin:
                Fmin = F
                i_low = t
        gap = Fmax - Fmin
        if gap < tol or i_up < 0 or i_low < 0:
            break
        i = i_up
        j = i_low
        bi = i % n
        bj = j % n
        q = K[bi, bi] + K[bj, bj] - 2.0 * K[bi, bj]
        if q < 1e-12:
            q = 1e-12
        lam = gap / q
        cap_i = (C - a[i]) if i < n else a[i]
        cap_j = a[j] if j < n else (C - a[j])
        if lam > cap_i:
            lam = cap_i
        if lam > cap_j:
            lam = cap_j
        yi = 1.0 if i < n else -1.0
        yj = 1.0 if j < n else -1.0
        # objective change of the minimization form, before the update
        obj += lam * (Fmin - Fmax) + 0.5 * lam * lam * q
        a[i] += yi * lam
        a[j] -= yj * lam
        if a[i] < 0.0:
            a[i] = 0.0
        elif a[i] > C:
            a[i] = C
        if a[j] < 0.0:
            a[j] = 0.0
        elif a[j] > C:
            a[j] = C
        for u in range(n):
            d = lam * (K[u, bi] - K[u, bj])
            G[u] += d
            G[n + u] -= d
        if obj_out.size > it:
            obj_out[it] = obj
        it += 1
    return a, G, it, gap, obj


def _rbf(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    return np.exp(-gamma * cdist(A, B, "sqeuclidean"))


def _bias_from_gradient(a: np.ndarray, G: np.ndarray, C: float) -> float:
    n = a.size // 2
    y = np.concatenate([np.ones(n), -np.ones(n)])
    F = -y * G
    margin = 1e-8 * C
    free = (a > margin) & (a < C - margin)
    if free.any():
        return float(F[free].mean())
    in_up = ((y > 0) & (a < C)) | ((y < 0) & (a > 0))
    in_low = ((y < 0) & (a < C)) | ((y > 0) & (a > 0))
    hi = F[in_up].max() if in_up.any() else 0.0
    lo = F[in_low].min() if in_low.any() else 0.0
    return float((hi + lo) / 2.0)


def _resolve_scalar(value, name: str, default: float | None = None) -> float:
    if isinstance(value, (list, tuple)):
        raise ValidationError(f"{name} is a grid; run grid_search first")
    if value is None:
        if default is None:
            raise ValidationError(f"{name} is unset")
        return float(default)
    return float(value)


def train(X: np.ndarray, rt: np.ndarray, cfg: TrainConfig | None = None,
          track_objective: bool = False) -> SvrModel:
    """Train an epsilon-SVR on (feature, reaction time) pairs.

    Working pairs are chosen by maximal KKT violation and the solver stops
    once the largest violation drops below ``kkt_tol``; exceeding
    ``max_passes`` pair updates raises `NumericError` rather than
    returning a silently unconverged model.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    X = np.asarray(X, dtype=np.float64)
    rt = np.asarray(rt, dtype=np.float64)
    if X.ndim != 2 or rt.ndim != 1 or X.shape[0] != rt.size:
        raise ValidationError(f"bad training shapes: X {X.shape}, rt {rt.shape}")
    n, d = X.shape
    if n < 2:
        raise ValidationError(f"need at least 2 training points, got {n}")
    bad = ~np.isfinite(X)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValidationError(f"non-finite feature at row {i}, column {j}")
    if not np.isfinite(rt).all():
        raise ValidationError(f"non-finite target at row {int(np.flatnonzero(~np.isfinite(rt))[0])}")
    if (rt <= 0).any():
        raise ValidationError("reaction times must be positive")

    C = _resolve_scalar(cfg.C, "C")
    epsilon = _resolve_scalar(cfg.epsilon, "epsilon")
    gamma = _resolve_scalar(cfg.gamma, "gamma", default=1.0 / d)

    scaler = FeatureScaler.fit(X)
    Xs = scaler.transform(X)
    t_mean = float(rt.mean())
    t_std = float(rt.std())
    if t_std == 0.0:
        t_std = 1.0
    z = (rt - t_mean) / t_std
    eps_std = epsilon / t_std

    K = _rbf(Xs, Xs, gamma)
    obj_out = np.empty(min(cfg.max_passes, 2_000_000) if track_objective else 0)
    a, G, iters, gap, _ = _smo_solve(K, z, C, eps_std, cfg.kkt_tol,
                                     cfg.max_passes, obj_out)
    if gap >= cfg.kkt_tol:
        raise NumericError(
            f"SMO did not converge in {cfg.max_passes} pair updates "
            f"(KKT gap {gap:.3e} >= {cfg.kkt_tol:.3e}); check C/gamma"
        )
    beta = a[:n] - a[n:]
    bias = _bias_from_gradient(a, G, C)

    nz = np.flatnonzero(beta)
    if nz.size == 0:
        nz = np.array([0])  # keep one stored vector; zero coefficient is harmless
    info = FitInfo(
        iterations=int(iters),
        kkt_gap=float(gap),
        converged=True,
        full_dual_coeffs=beta,
        objective_history=obj_out[:iters].copy() if track_objective else None,
    )
    model = SvrModel(
        support_vectors=Xs[nz].copy(),
        dual_coeffs=beta[nz].copy(),
        bias=bias,
        gamma=gamma,
        C=C,
        epsilon=epsilon,
        scaler=scaler,
        target_mean=t_mean,
        target_std=t_std,
        fit_info=info,
    )
    model.validate()
    return model


def predict_batch(model: SvrModel, X: np.ndarray) -> np.ndarray:
    """Predicted reaction times (seconds) for each row of X."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.n_features:
        raise ValidationError(
            f"query has {X.shape[1]} features, model expects {model.n_features}"
        )
    Ks = _rbf(model.scaler.transform(X), model.support_vectors, model.gamma)
    f = Ks @ model.dual_coeffs + model.bias
    return f * model.target_std + model.target_mean


def predict(model: SvrModel, x: np.ndarray) -> float:
    """Predicted reaction time (seconds) for a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError("expected a single feature vector")
    return float(predict_batch(model, x[None, :])[0])


def _expand_grid(cfg: TrainConfig, d: int) -> list[tuple[float, float, float]]:
    cs = cfg.C if isinstance(cfg.C, (list, tuple)) else [cfg.C]
    es = cfg.epsilon if isinstance(cfg.epsilon, (list, tuple)) else [cfg.epsilon]
    if cfg.gamma is None:
        gs = [0.1 / d, 1.0 / d, 10.0 / d]
    elif isinstance(cfg.gamma, (list, tuple)):
        gs = list(cfg.gamma)
    else:
        gs = [cfg.gamma]
    return [(float(c), float(e), float(g)) for c in cs for e in es for g in gs]


def grid_search(X: np.ndarray, rt: np.ndarray, cfg: TrainConfig | None = None) -> TrainConfig:
    """Cross-validated RMSE over the hyperparameter grid; returns the argmin.

    Ties prefer the smaller ``C`` and then the larger ``epsilon`` (the
    flatter model). Folds come from one seeded shuffle shared by all grid
    points.
    """
    cfg = cfg or TrainConfig.default_grid()
    cfg.validate()
    X = np.asarray(X, dtype=np.float64)
    rt = np.asarray(rt, dtype=np.float64)
    n, d = X.shape
    grid = _expand_grid(cfg, d)
    if len(grid) == 1:
        c, e, g = grid[0]
        return TrainConfig(C=c, epsilon=e, gamma=g, kkt_tol=cfg.kkt_tol,
                           max_passes=cfg.max_passes, cv_folds=cfg.cv_folds, seed=cfg.seed)

    folds = np.array_split(
        np.random.default_rng(cfg.seed).permutation(n), cfg.cv_folds
    )
    for fold in folds:
        if n - fold.size < 2:
            raise ValidationError(
                f"cv fold of size {fold.size} leaves fewer than 2 training points"
            )

    best_key = None
    best: tuple[float, float, float] | None = None
    for c, e, g in grid:
        sq_err = 0.0
        count = 0
        for fold in folds:
            mask = np.ones(n, dtype=bool)
            mask[fold] = False
            sub_cfg = TrainConfig(C=c, epsilon=e, gamma=g, kkt_tol=cfg.kkt_tol,
                                  max_passes=cfg.max_passes, cv_folds=cfg.cv_folds,
                                  seed=cfg.seed)
            model = train(X[mask], rt[mask], sub_cfg)
            pred = predict_batch(model, X[fold])
            sq_err += float(np.sum((pred - rt[fold]) ** 2))
            count += fold.size
        cv_rmse = float(np.sqrt(sq_err / count))
        key = (cv_rmse, c, -e, g)
        if best_key is None or key < best_key:
            best_key = key
            best = (c, e, g)
    c, e, g = best
    log.info("grid search selected C=%g epsilon=%g gamma=%g (cv rmse %.4f)",
             c, e, g, best_key[0])
    return TrainConfig(C=c, epsilon=e, gamma=g, kkt_tol=cfg.kkt_tol,
                       max_passes=cfg.max_passes, cv_folds=cfg.cv_folds, seed=cfg.seed)


# ---------------------------------------------------------------------------
# serialization


def svr_to_dict(model: SvrModel) -> dict:
    return {
        "support_vectors": model.support_vectors.tolist(),
        "dual_coeffs": model.dual_coeffs.tolist(),
        "bias": model.bias,
        "gamma": model.gamma,
        "C": model.C,
        "epsilon": model.epsilon,
        "scaler": model.scaler.to_dict(),
        "target_mean": model.target_mean,
        "target_std": model.target_std,
    }


def svr_from_dict(d: dict) -> SvrModel:
    return SvrModel(
        support_vectors=np.asarray(d["support_vectors"], dtype=np.float64),
        dual_coeffs=np.asarray(d["dual_coeffs"], dtype=np.float64),
        bias=float(d["bias"]),
        gamma=float(d["gamma"]),
        C=float(d["C"]),
        epsilon=float(d["epsilon"]),
        scaler=FeatureScaler.from_dict(d["scaler"]),
        target_mean=float(d["target_mean"]),
        target_std=float(d["target_std"]),
    )
