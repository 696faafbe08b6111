"""Command-line pipeline: synth -> features -> cluster -> train -> predict -> eval.

Every artifact embeds the master seed and a hash of the resolved semantic
config, and all writes are atomic, so a pipeline rerun with the same seed
reproduces every file byte for byte.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .clustering import build_session_record, read_clusters_json, recursive_cluster, write_clusters_json
from .ensemble import (EnsembleConfig, featurize_session, load_ensemble, predict_trace,
                       save_ensemble, train_ensemble, write_trace_csv)
from .errors import ParseError, PipelineError, ValidationError
from .evaluate import (EvalConfig, cross_model_matrix, loso_evaluate, record_from_featurized,
                       write_cluster_rmse_csv, write_confusion_csv, write_cross_model_csv,
                       write_report)
from .gmm import SessionFrames, accuracy_grid
from .io_utils import config_digest, read_json, write_json
from .session import list_corpus_sessions, load_session
from .spectral import BANDS, FeatureConfig, extract_features, write_features_csv
from .svr import TrainConfig
from .synthgen import (GeneratorConfig, generate_corpus, generate_drift_sessions, save_corpus)

log = logging.getLogger(__name__)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise ParseError(f"config file {path} must hold a JSON object")
    return doc


def _feature_config(args, file_cfg: dict) -> FeatureConfig:
    cfg = FeatureConfig(**file_cfg.get("features", {}))
    if getattr(args, "pad_factor", None):
        cfg.pad_factor = args.pad_factor
    if getattr(args, "all_bands", False):
        cfg.all_bands = True
    cfg.validate()
    return cfg


def _svr_config(args, file_cfg: dict) -> TrainConfig:
    cfg = TrainConfig(**file_cfg.get("svr", {}))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _ensemble_config(args, file_cfg: dict) -> EnsembleConfig:
    section = dict(file_cfg.get("ensemble", {}))
    svr = _svr_config(args, file_cfg)
    cfg = EnsembleConfig(svr=svr, **section)
    if getattr(args, "k", None):
        cfg.k = args.k
    if getattr(args, "m", None):
        cfg.m = args.m
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _provenance(seed: int, config: dict) -> dict:
    return {"seed": seed, "config_hash": config_digest(config)}


def _load_featurized_corpus(corpus_dir: str, fcfg: FeatureConfig):
    out = []
    for sdir in list_corpus_sessions(corpus_dir):
        session = load_session(sdir)
        out.append((sdir, session, featurize_session(session, fcfg)))
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    file_cfg = _load_config_file(args.config)
    gen_section = dict(file_cfg.get("generator", {}))
    gen_section["seed"] = args.seed
    if args.duration:
        gen_section["duration_s"] = args.duration
    if args.profile == "drift":
        gen_section["drift_profile"] = True
    cfg = GeneratorConfig(**gen_section)
    counts = tuple(int(x) for x in args.sessions.split(","))
    corpus = generate_corpus(counts, cfg)
    if args.blended:
        corpus += generate_drift_sessions(args.blended, cfg)
    save_corpus(args.out, corpus, cfg)
    print(f"wrote {len(corpus)} sessions to {args.out}")
    return 0


def cmd_features(args) -> int:
    file_cfg = _load_config_file(args.config)
    fcfg = _feature_config(args, file_cfg)
    session = load_session(args.session)
    frames = extract_features(session, fcfg)
    out = args.out or str(Path(args.session) / "features.csv")
    seed = session.provenance.get("generator_seed", -1)
    write_features_csv(out, frames, session, fcfg,
                       _provenance(seed, fcfg.to_dict()))
    print(f"wrote {len(frames)} feature frames to {out}")
    return 0


def cmd_cluster(args) -> int:
    file_cfg = _load_config_file(args.config)
    fcfg = _feature_config(args, file_cfg)
    svr_cfg = _svr_config(args, file_cfg)
    records = []
    for sdir in list_corpus_sessions(args.corpus):
        records.append(build_session_record(load_session(sdir), fcfg))
    result = recursive_cluster(records, k=args.k, svr_cfg=svr_cfg,
                               max_iter=args.max_iter)
    config = {"k": args.k, "svr": svr_cfg.to_dict(), "features": fcfg.to_dict()}
    write_clusters_json(args.out, result, _provenance(args.seed or 0, config))
    print(f"clustered {len(records)} sessions in {result.iterations} iterations "
          f"(converged={result.converged}) -> {args.out}")
    return 0


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    fcfg = _feature_config(args, file_cfg)
    ecfg = _ensemble_config(args, file_cfg)
    clusters = read_clusters_json(args.clusters)
    labels = {sid: int(lab) for sid, lab in clusters["labels"].items()}
    ecfg.k = int(clusters["n_clusters"])
    featurized = [fz for _, _, fz in _load_featurized_corpus(args.corpus, fcfg)]
    missing = [fz.session_id for fz in featurized if fz.session_id not in labels]
    if missing:
        raise ValidationError(f"clusters file lacks labels for {missing}")
    model = train_ensemble(featurized, labels, ecfg)
    model.provenance.update(_provenance(ecfg.seed, {
        "ensemble": ecfg.to_dict(), "features": fcfg.to_dict(),
    }))
    model.provenance["training_sessions"] = sorted(labels)
    save_ensemble(args.out, model)
    print(f"trained ensemble (k={ecfg.k}, m={ecfg.m}) on {len(featurized)} "
          f"sessions -> {args.out}")
    return 0


def cmd_predict(args) -> int:
    file_cfg = _load_config_file(args.config)
    fcfg = _feature_config(args, file_cfg)
    model = load_ensemble(args.model)
    session = load_session(args.session)
    fz = featurize_session(session, fcfg)
    trace = predict_trace(model, fz, args.mode)
    seed = model.provenance.get("seed", -1)
    write_trace_csv(args.out, trace, _provenance(seed, {
        "mode": args.mode, "features": fcfg.to_dict(),
        "model_hash": model.provenance.get("config_hash", ""),
    }))
    print(f"wrote {trace.t_s.size} trace rows ({args.mode}) to {args.out}")
    return 0


def _truth_labels(corpus_dir: str) -> dict[str, int]:
    labels = {}
    for sdir in list_corpus_sessions(corpus_dir):
        truth_path = sdir / "truth.json"
        if not truth_path.is_file():
            raise ParseError(f"--labels truth requires {truth_path}")
        doc = read_json(truth_path)
        aid = int(doc["archetype_id"])
        if aid < 1:
            raise ValidationError(
                f"session {sdir.name} is state-blended; it has no truth cluster"
            )
        labels[sdir.name] = aid - 1
    return labels


def cmd_eval(args) -> int:
    file_cfg = _load_config_file(args.config)
    fcfg = _feature_config(args, file_cfg)
    ecfg = _ensemble_config(args, file_cfg)
    modes = MODES_ALL if args.mode == "all" else (args.mode,)
    evcfg = EvalConfig(ensemble=ecfg, label_mode=args.label_mode,
                       subject_loso=args.by_subject, modes=modes)

    loaded = _load_featurized_corpus(args.corpus, fcfg)
    featurized = [fz for _, _, fz in loaded]

    if args.labels == "truth":
        labels = _truth_labels(args.corpus)
    elif args.labels:
        labels = {s: int(l) for s, l in read_clusters_json(args.labels)["labels"].items()}
    else:
        records = [record_from_featurized(fz) for fz in featurized]
        result = recursive_cluster(records, k=ecfg.k, svr_cfg=ecfg.svr)
        labels = result.labels

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    prov = _provenance(ecfg.seed, {
        "eval": evcfg.to_dict(), "features": fcfg.to_dict(), "labels_source": args.labels or "clustered",
    })

    report = loso_evaluate(featurized, labels, evcfg)
    write_report(out_dir / "report.json", report, prov)
    write_cluster_rmse_csv(out_dir / "rmse_by_cluster.csv", report, prov)

    records = [record_from_featurized(fz) for fz in featurized]
    mean, std = cross_model_matrix(records, labels, ecfg.svr, k=ecfg.k)
    write_cross_model_csv(out_dir / "cross_model_rmse.csv", mean, std, prov)

    if args.band:
        bands = list(BANDS) if args.band == "all" else [args.band]
        grid_sessions = []
        for fz in featurized:
            blocks = {"pow_theta": np.vstack([fr.theta_powers for fr in fz.frames
                                              if fr.t_s <= 300]),
                      "plv_alpha": np.vstack([fr.alpha_plv for fr in fz.frames
                                              if fr.t_s <= 300])}
            for bname in bands:
                if bname == "theta":
                    continue
                key = f"pow_{bname}"
                rows = [fr.extra[key] for fr in fz.frames if fr.t_s <= 300 and key in fr.extra]
                if rows:
                    blocks[key] = np.vstack(rows)
            grid_sessions.append(SessionFrames(fz.session_id, labels[fz.session_id], blocks))
        band_sets = []
        for bname in bands:
            key = f"pow_{bname}"
            if all(key in s.blocks for s in grid_sessions):
                band_sets.append((key,))
        band_sets.append(("pow_theta", "plv_alpha"))
        m_values = [int(x) for x in args.grid_m.split(",")] if args.grid_m else [ecfg.m]
        grid = accuracy_grid(grid_sessions, m_range=m_values, band_sets=band_sets,
                             seed=ecfg.seed, n_clusters=ecfg.k)
        grid_doc = {}
        for (m, set_name), cell in grid.items():
            grid_doc[f"{set_name}@m={m}"] = {
                "mean_accuracy": cell.mean_accuracy, "std_accuracy": cell.std_accuracy,
                "n_sessions": cell.n_sessions, "skipped_folds": cell.skipped_folds,
            }
            write_confusion_csv(out_dir / f"confusion_{set_name.replace('+', '_')}_m{m}.csv",
                                cell, prov)
        write_json(out_dir / "accuracy_grid.json", {"provenance": prov, "grid": grid_doc})

    print(f"evaluated {report.n_sessions} sessions "
          f"({len(report.skipped_folds)} skipped) -> {out_dir}")
    return 0


MODES_ALL = ("single", "fixed", "dynamic")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rtensemble",
        description="EEG reaction-time prediction with a dynamically weighted ensemble",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--sessions", default="36,14,23",
                    help="sessions per archetype, comma separated")
    sp.add_argument("--duration", type=float, default=None)
    sp.add_argument("--profile", choices=["default", "drift"], default="default")
    sp.add_argument("--blended", type=int, default=0,
                    help="append N state-blended drift sessions")
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("features", help="extract per-second features of a session")
    sp.add_argument("--session", required=True)
    sp.add_argument("--out")
    sp.add_argument("--pad-factor", type=int, choices=[2, 4], dest="pad_factor")
    sp.add_argument("--all-bands", action="store_true", dest="all_bands")
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_features)

    sp = sub.add_parser("cluster", help="recursively cluster corpus sessions")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--k", type=int, default=3)
    sp.add_argument("--max-iter", type=int, default=50, dest="max_iter")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--pad-factor", type=int, choices=[2, 4], dest="pad_factor")
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_cluster)

    sp = sub.add_parser("train", help="train the ensemble from cluster labels")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--clusters", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--k", type=int)
    sp.add_argument("--m", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--pad-factor", type=int, choices=[2, 4], dest="pad_factor")
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="emit a per-second prediction trace")
    sp.add_argument("--model", required=True)
    sp.add_argument("--session", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=["single", "fixed", "dynamic"], default="dynamic")
    sp.add_argument("--pad-factor", type=int, choices=[2, 4], dest="pad_factor")
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("eval", help="leave-one-session-out evaluation")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=["single", "fixed", "dynamic", "all"], default="all")
    sp.add_argument("--k", type=int)
    sp.add_argument("--m", type=int)
    sp.add_argument("--band", choices=["theta", "delta", "alpha", "beta", "all"])
    sp.add_argument("--grid-m", dest="grid_m",
                    help="comma-separated mixture sizes for the accuracy grid")
    sp.add_argument("--labels", help="'truth' or a clusters.json path")
    sp.add_argument("--label-mode", choices=["cluster", "fixed"], default="cluster",
                    dest="label_mode")
    sp.add_argument("--by-subject", action="store_true", dest="by_subject")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--pad-factor", type=int, choices=[2, 4], dest="pad_factor")
    sp.add_argument("--all-bands", action="store_true", dest="all_bands")
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # unexpected: report as generic failure
        print(json.dumps({"error": "error", "message": f"{type(exc).__name__}: {exc}"}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
