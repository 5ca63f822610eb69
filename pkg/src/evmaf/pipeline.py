"""Extraction, caching, training and evaluation pipelines behind the CLI."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import eadm
from .errors import (ComputationError, ConfigurationError, EvmafError, InputError,
                     MalformedInputError)
from .evaluation import (EvalReport, MetricSeries, build_pairs, compare_pairwise,
                         evaluate_series, pairwise_accuracy, write_pairs_csv)
from .features import EXTRACTOR_VERSION, eadm_alpha_label, extract_feature_vector
from .fusion import (FusionModel, SvrHyper, TrainingTable, config_hash,
                     sfms_trace, train_svr, tune_alpha, tune_beta)
from .manifest import DatabaseManifest, SequenceRecord
from .pool import ORIGINAL_KEYS, FeatureKey, PoolSpec, render_keys
from .video_io import open_sequence, read_frame_pair

logger = logging.getLogger(__name__)

CACHE_SCHEMA_VERSION = 1

DEFAULT_CONFIG = {
    "alpha": eadm.DEFAULT_ALPHA,
    "alpha_grid": [0.1, 0.2, 0.3, 0.5, 1.0],
    "beta": 0.5,
    "grid_step": 0.05,
    "svr": {"nu": 0.9, "C": 4.0, "gamma": None},
    "pool": "full",
    "selection_folds": 0,
}


class CacheMissError(EvmafError, FileNotFoundError):
    """Features for a sequence are not cached (or were cached with other versions)."""


# -- config ---------------------------------------------------------------------------

def load_config(path=None, overrides: Optional[Mapping] = None) -> dict:
    """Merge a JSON config file over the defaults and validate it."""
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        unknown = set(user) - set(DEFAULT_CONFIG) - {"seed"}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        for k, v in user.items():
            cfg[k] = {**cfg[k], **v} if k == "svr" else v
    cfg.update(overrides or {})
    for name in ("alpha", "beta"):
        v = cfg[name]
        if v != "tune" and not isinstance(v, (int, float)):
            raise ConfigurationError(f"{name} must be a number or \"tune\", got {v!r}")
    if cfg["alpha"] != "tune" and not cfg["alpha"] > 0:
        raise ConfigurationError("alpha must be > 0")
    if cfg["beta"] != "tune" and not 0 <= cfg["beta"] <= 1:
        raise ConfigurationError("beta must lie in [0, 1]")
    if not cfg["alpha_grid"] or any(not a > 0 for a in cfg["alpha_grid"]):
        raise ConfigurationError("alpha_grid must be a non-empty list of positive numbers")
    return cfg


def extraction_alphas(cfg: Mapping) -> Tuple[float, Tuple[float, ...]]:
    """Main E-ADM alpha and the extra alphas cached for tuning."""
    if cfg["alpha"] == "tune":
        return eadm.DEFAULT_ALPHA, tuple(float(a) for a in cfg["alpha_grid"])
    return float(cfg["alpha"]), ()


def svr_hyper(cfg: Mapping) -> SvrHyper:
    s = cfg["svr"]
    return SvrHyper(float(s["nu"]), float(s["C"]),
                    None if s.get("gamma") is None else float(s["gamma"]))


# -- feature cache --------------------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _cache_paths(cache_dir, database: str, seq_id: str):
    d = os.path.join(cache_dir, database)
    return os.path.join(d, f"{seq_id}.csv"), os.path.join(d, f"{seq_id}.meta.json")


def _cache_meta(rec: SequenceRecord, pool: PoolSpec, alpha: float, extra: Sequence[float]):
    return {
        "schema_version": CACHE_SCHEMA_VERSION,
        "pool_version": pool.version,
        "extractor_version": EXTRACTOR_VERSION,
        "keys": render_keys(pool.keys),
        "alpha": alpha,
        "extra_alphas": list(extra),
        "reference": {"path": os.path.basename(rec.source.path),
                      "sha256": _sha256(rec.source.path)},
        "test": {"path": os.path.basename(rec.test.path), "sha256": _sha256(rec.test.path)},
        "resample": rec.resample,
    }


def _columns(pool: PoolSpec, extra: Sequence[float]) -> List[str]:
    return render_keys(pool.keys) + [eadm_alpha_label(a) for a in extra]


def extract_sequence(rec: SequenceRecord, keys: Sequence[FeatureKey], alpha: float,
                     extra: Sequence[float] = ()) -> List[Dict]:
    """Per-frame feature dicts for one reference/test sequence."""
    ref = open_sequence(rec.source.path, rec.source.spec)
    test = open_sequence(rec.test.path, rec.test.spec)
    n = min(ref.frame_count, test.frame_count)
    rows = []
    prev = None
    for i in range(n):
        pair = read_frame_pair(ref, test, i, upsample=rec.upsample)
        fv = extract_feature_vector(pair, prev, keys, alpha, extra)
        rows.append({str(k): v for k, v in fv.values.items()})
        prev = pair
    return rows


def _write_cache(csv_path, meta_path, columns, rows, meta):
    os.makedirs(os.path.dirname(csv_path), exist_ok=True)
    tmp = csv_path + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["frame"] + columns)
        for i, r in enumerate(rows):
            w.writerow([i] + [repr(float(r[c])) for c in columns])
    os.replace(tmp, csv_path)
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, ensure_ascii=False, sort_keys=True)
        fh.write("\n")


def _read_meta(meta_path):
    try:
        with open(meta_path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError):
        return None


@dataclass
class ExtractResult:
    database: str
    frames_recomputed: int = 0
    frames_cached: int = 0
    sequences_recomputed: int = 0
    errors: Dict[str, str] = field(default_factory=dict)
    numerical_errors: Dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.errors and not self.numerical_errors


def _extract_job(args):
    rec, keys, alpha, extra = args
    try:
        return extract_sequence(rec, keys, alpha, extra), None
    except ComputationError as exc:
        return None, ("numerical", str(exc))
    except (OSError, MalformedInputError, ConfigurationError, IndexError) as exc:
        return None, ("data", f"{type(exc).__name__}: {exc}")


def extract_database(manifest: DatabaseManifest, pool: PoolSpec, cache_dir, alpha: float,
                     extra: Sequence[float] = (), jobs: int = 1) -> ExtractResult:
    """Fill the feature cache for every sequence whose cache is missing or stale.

    A sequence is reused only when its metadata (versions, key list, alphas and
    media hashes) matches exactly. Failures are recorded per sequence and do
    not stop the others.
    """
    result = ExtractResult(manifest.database)
    columns = _columns(pool, extra)
    todo = []
    metas = {}
    for rec in manifest.sequences:
        csv_path, meta_path = _cache_paths(cache_dir, manifest.database, rec.id)
        try:
            meta = _cache_meta(rec, pool, alpha, extra)
        except OSError as exc:
            result.errors[rec.id] = f"{type(exc).__name__}: {exc}"
            continue
        cached = _read_meta(meta_path)
        if os.path.isfile(csv_path) and cached is not None and \
                {k: v for k, v in cached.items() if k != "frames"} == meta:
            result.frames_cached += int(cached.get("frames", 0))
            continue
        metas[rec.id] = meta
        todo.append(rec)
    args = [(rec, pool.keys, alpha, tuple(extra)) for rec in todo]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outcomes = list(ex.map(_extract_job, args))
    else:
        outcomes = [_extract_job(a) for a in args]
    for rec, (rows, err) in zip(todo, outcomes):
        if err is not None:
            kind, msg = err
            (result.numerical_errors if kind == "numerical" else result.errors)[rec.id] = msg
            logger.error("%s/%s: %s", manifest.database, rec.id, msg)
            continue
        csv_path, meta_path = _cache_paths(cache_dir, manifest.database, rec.id)
        _write_cache(csv_path, meta_path, columns, rows, {**metas[rec.id], "frames": len(rows)})
        result.frames_recomputed += len(rows)
        result.sequences_recomputed += 1
    logger.info("%s: %d frames recomputed, %d frames reused from cache",
                manifest.database, result.frames_recomputed, result.frames_cached)
    return result


@dataclass
class FrameTable:
    """Cached per-frame features of one sequence."""

    sequence_id: str
    columns: List[str]
    values: np.ndarray  # frames x columns
    alpha: float

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.columns.index(name)]
        except ValueError:
            raise CacheMissError(f"{self.sequence_id}: feature {name} not in cache") from None

    def rows(self) -> List[Dict[str, float]]:
        return [dict(zip(self.columns, r)) for r in self.values]


def load_frame_table(cache_dir, database: str, rec: SequenceRecord,
                     pool: Optional[PoolSpec] = None) -> FrameTable:
    csv_path, meta_path = _cache_paths(cache_dir, database, rec.id)
    meta = _read_meta(meta_path)
    if meta is None or not os.path.isfile(csv_path):
        raise CacheMissError(
            f"no cached features for {database}/{rec.id} in {cache_dir}; "
            f"run 'evmaf extract' on this manifest first")
    if meta.get("extractor_version") != EXTRACTOR_VERSION or (
            pool is not None and meta.get("pool_version") != pool.version):
        raise CacheMissError(
            f"cache for {database}/{rec.id} was built with pool {meta.get('pool_version')} / "
            f"{meta.get('extractor_version')}; re-run 'evmaf extract'")
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row[1:]] for row in reader], dtype=np.float64)
    values = data.reshape(-1, len(header) - 1)
    if not np.all(np.isfinite(values)):
        raise ComputationError(f"non-finite values in cache for {database}/{rec.id}")
    return FrameTable(rec.id, header[1:], values, float(meta["alpha"]))


def eadm_column(table: FrameTable, alpha: float) -> str:
    """Cache column holding E-ADM at ``alpha``."""
    if abs(table.alpha - alpha) < 1e-12:
        return "E-ADM"
    label = eadm_alpha_label(alpha)
    if label in table.columns:
        return label
    raise CacheMissError(f"{table.sequence_id}: no E-ADM column for alpha={alpha:g}; "
                         f"re-run 'evmaf extract' with that alpha")


def sequence_table(manifest: DatabaseManifest, cache_dir, pool: Optional[PoolSpec] = None,
                   ) -> Tuple[TrainingTable, List[FrameTable]]:
    """Mean-aggregate each sequence's cached frames into a TrainingTable."""
    if not manifest.has_mos:
        raise InputError(f"{manifest.database}: manifest has sequences without MOS")
    frames = [load_frame_table(cache_dir, manifest.database, rec, pool)
              for rec in manifest.sequences]
    columns = frames[0].columns
    for ft in frames:
        if ft.columns != columns:
            raise CacheMissError(f"{manifest.database}: cache columns differ between "
                                 f"sequences; re-run 'evmaf extract'")
    X = np.array([ft.values.mean(axis=0) for ft in frames])
    table = TrainingTable(manifest.database, [r.id for r in manifest.sequences], columns, X,
                          [r.mos for r in manifest.sequences])
    return table, frames


def _with_eadm_alpha(table: TrainingTable, alpha: float, cached_alpha: float) -> TrainingTable:
    if abs(alpha - cached_alpha) < 1e-12:
        return table
    X = table.X.copy()
    X[:, table.keys.index("E-ADM")] = table.X[:, table.keys.index(eadm_alpha_label(alpha))]
    return TrainingTable(table.database, table.sequence_ids, table.keys, X, table.mos)


# -- training -------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: FusionModel
    trace1: list
    trace2: list


def train_fusion(table1: TrainingTable, table2: TrainingTable, pool: PoolSpec, cfg: Mapping,
                 cached_alpha: float) -> TrainResult:
    """Select features, fit both regressors and set alpha and beta.

    Model 1 starts from the original feature set (E-ADM in place of ADM) and
    draws from the rest of the pool on ``table1``; model 2 starts empty and
    draws from the whole pool on ``table2``.
    """
    hyper = svr_hyper(cfg)
    if cfg["alpha"] == "tune":
        grid = [float(a) for a in cfg["alpha_grid"]]
        cols = {a: [t.columns([eadm_alpha_label(a)])[:, 0] for t in (table1, table2)]
                for a in grid}
        alpha = tune_alpha(cols, [table1.mos, table2.mos])
        logger.info("tuned alpha = %g", alpha)
    else:
        alpha = float(cfg["alpha"])
    t1 = _with_eadm_alpha(table1, alpha, cached_alpha)
    t2 = _with_eadm_alpha(table2, alpha, cached_alpha)

    seed1 = [str(k) for k in ORIGINAL_KEYS]
    pool_keys = render_keys(pool.keys)
    missing = [k for k in seed1 if k not in pool_keys]
    if missing:
        raise ConfigurationError(f"pool spec lacks original features {missing}")
    folds = int(cfg.get("selection_folds", 0))
    groups1 = [s.rsplit("_", 1)[0] for s in t1.sequence_ids]
    groups2 = [s.rsplit("_", 1)[0] for s in t2.sequence_ids]
    trace1 = sfms_trace([k for k in pool_keys if k not in seed1], seed1, t1, hyper,
                        groups1, folds)
    trace2 = sfms_trace(pool_keys, [], t2, hyper, groups2, folds)
    m1 = train_svr(t1, trace1[-1].selected, hyper)
    m2 = train_svr(t2, trace2[-1].selected, hyper)
    if cfg["beta"] == "tune":
        preds1 = [m1.predict_matrix(t.columns(m1.feature_keys)) for t in (t1, t2)]
        preds2 = [m2.predict_matrix(t.columns(m2.feature_keys)) for t in (t1, t2)]
        beta = tune_beta(preds1, preds2, [t1, t2], float(cfg["grid_step"]))
        logger.info("tuned beta = %g", beta)
    else:
        beta = float(cfg["beta"])
    model = FusionModel(m1, m2, beta, alpha, pool.version, EXTRACTOR_VERSION, config_hash(cfg))
    return TrainResult(model, trace1, trace2)


# -- prediction -----------------------------------------------------------------------

def predict_frames(model: FusionModel, rows: Sequence[Mapping]) -> np.ndarray:
    """``(frames, 3)`` array of per-frame ``Q, M1, M2``."""
    return np.array([model.predict(r) for r in rows], dtype=np.float64).reshape(-1, 3)


def predict_sequence(model: FusionModel, ref_handle, test_handle,
                     upsample: Optional[str] = None) -> np.ndarray:
    keys = [FeatureKey.parse(k) for k in model.feature_keys]
    n = min(ref_handle.frame_count, test_handle.frame_count)
    rows, prev = [], None
    for i in range(n):
        pair = read_frame_pair(ref_handle, test_handle, i, upsample=upsample)
        fv = extract_feature_vector(pair, prev, keys, model.alpha)
        rows.append({str(k): v for k, v in fv.values.items()})
        prev = pair
    return predict_frames(model, rows)


def write_prediction_csv(path, scores: np.ndarray, model: FusionModel) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={model.config_hash}\n")
        w = csv.writer(fh)
        w.writerow(["frame", "Q", "M1", "M2"])
        for i, (q, a, b) in enumerate(scores):
            w.writerow([i, repr(float(q)), repr(float(a)), repr(float(b))])


# -- evaluation -----------------------------------------------------------------------

MODEL_METRIC = "model"


def _model_rows(model: FusionModel, ft: FrameTable) -> List[Dict[str, float]]:
    col = eadm_column(ft, model.alpha)
    rows = ft.rows()
    if col != "E-ADM":
        for r in rows:
            r["E-ADM"] = r[col]
    return rows


def sequence_scores(model: FusionModel, frames: Sequence[FrameTable],
                    baselines: Sequence[str]) -> Dict[str, np.ndarray]:
    """Sequence-level scores (frame means) of the model, its two halves and baselines."""
    out: Dict[str, List[float]] = {MODEL_METRIC: [], "M1": [], "M2": []}
    out.update({b: [] for b in baselines})
    for ft in frames:
        q = predict_frames(model, _model_rows(model, ft)).mean(axis=0)
        out[MODEL_METRIC].append(q[0])
        out["M1"].append(q[1])
        out["M2"].append(q[2])
        for b in baselines:
            col = eadm_column(ft, model.alpha) if b == "E-ADM" else str(FeatureKey.parse(b))
            out[b].append(float(ft.column(col).mean()))
    return {k: np.array(v) for k, v in out.items()}


def _safe_name(metric: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", metric.replace("Δ", "d"))


def evaluate_model(model: FusionModel, manifests: Sequence[DatabaseManifest], cache_dir,
                   baselines: Sequence[str], anchor: Optional[str], out_dir,
                   cfg_hash: Optional[str] = None) -> Tuple[EvalReport, Dict[str, str]]:
    """Score every database with MOS, write report, CSV and pair files.

    Returns the report and ``{database: reason}`` for refused databases.
    """
    refused: Dict[str, str] = {}
    series: Dict[str, Dict[str, MetricSeries]] = {}
    for man in manifests:
        if not man.has_mos:
            refused[man.database] = "manifest has sequences without MOS"
            logger.error("%s: evaluation refused (no MOS)", man.database)
            continue
        frames = [load_frame_table(cache_dir, man.database, rec) for rec in man.sequences]
        mos = np.array([rec.mos for rec in man.sequences])
        for metric, scores in sequence_scores(model, frames, baselines).items():
            series.setdefault(metric, {})[man.database] = MetricSeries(man.database, scores, mos)
    if not series:
        raise InputError("no database with MOS to evaluate")
    if anchor is not None and anchor not in series:
        raise ConfigurationError(f"anchor {anchor!r} is not among the evaluated metrics")
    report = evaluate_series(series, anchor)
    report.config_hash = cfg_hash or model.config_hash
    os.makedirs(out_dir, exist_ok=True)
    pairs = {}
    for metric, by_db in series.items():
        pairs[metric] = build_pairs(list(by_db.values()))
        report.pairwise[metric] = pairwise_accuracy(pairs[metric])
        write_pairs_csv(os.path.join(out_dir, f"pairs_{_safe_name(metric)}.csv"), pairs[metric])
    if anchor is not None:
        report.pairwise_p = compare_pairwise(pairs[MODEL_METRIC], pairs[anchor])[3]
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    report.write_csv(os.path.join(out_dir, "report.csv"))
    return report, refused
