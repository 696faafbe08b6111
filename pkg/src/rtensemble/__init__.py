"""EEG-based driver reaction-time prediction with a dynamically weighted
ensemble of per-cluster support vector regressors.
"""

from .clustering import (ClusteringResult, SessionRecord, build_session_record,
                         initial_labels, recursive_cluster, rt_ratio)
from .ensemble import (EnsembleConfig, EnsembleModel, FeaturizedSession, PredictionTrace,
                       align_trace_to_trials, featurize_session, load_ensemble,
                       predict_dynamic, predict_fixed, predict_single, predict_trace,
                       save_ensemble, train_ensemble)
from .errors import NumericError, ParseError, PipelineError, ValidationError
from .evaluate import EvalConfig, EvalReport, cross_model_matrix, loso_evaluate, rmse
from .gmm import (ClusterWeightModel, GmmModel, accuracy_grid, cluster_weights, fit_em,
                  log_density, map_classify)
from .session import (DEFAULT_CHANNELS, WEIGHTING_CHANNELS, EegSession, TrialEvent,
                      load_session, save_session)
from .spectral import (BANDS, FeatureConfig, FeatureFrame, SpectralFrame, band_power,
                       bandpass_filter, extract_features, plv, sliding_log_spectrum)
from .svr import SvrModel, TrainConfig, grid_search, predict, train
from .synthgen import (FatigueDynamics, GeneratorConfig, GroundTruth, SubjectArchetype,
                       default_archetypes, generate_corpus, generate_drift_sessions,
                       generate_session, save_corpus)

__version__ = "0.1.0"
