"""SVR fusion: min-max normalization, nu-SVR training, greedy forward feature
selection, two-model linear combination and weight tuning."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.svm import NuSVR

from .errors import InputError, SchemaVersionError, TrainingError
from .evaluation import fisher_aggregate, srocc
from .pool import FeatureKey

logger = logging.getLogger(__name__)

MODEL_SCHEMA_VERSION = 1
SVR_MAX_ITER = 1_000_000
MOS_RANGE = (0.0, 100.0)

KeyLike = Union[FeatureKey, str]


def key_str(k: KeyLike) -> str:
    return str(k)


@dataclass
class TrainingTable:
    """Sequence-level features and MOS (already on [0, 100]) for one database."""

    database: str
    sequence_ids: List[str]
    keys: List[str]
    X: np.ndarray
    mos: np.ndarray

    def __post_init__(self):
        self.keys = [key_str(k) for k in self.keys]
        self.X = np.asarray(self.X, dtype=np.float64).reshape(len(self.sequence_ids),
                                                              len(self.keys))
        self.mos = np.asarray(self.mos, dtype=np.float64)
        if self.mos.shape != (len(self.sequence_ids),):
            raise InputError("one MOS value per sequence is required")
        if np.any(self.mos < MOS_RANGE[0]) or np.any(self.mos > MOS_RANGE[1]):
            raise InputError(f"{self.database}: MOS must lie in [0, 100]")

    def __len__(self):
        return len(self.sequence_ids)

    def columns(self, keys: Sequence[KeyLike]) -> np.ndarray:
        idx = []
        for k in keys:
            try:
                idx.append(self.keys.index(key_str(k)))
            except ValueError:
                raise InputError(f"{self.database}: feature {k} missing from table") from None
        return self.X[:, idx]

    @classmethod
    def from_rows(cls, database: str, rows: Sequence[Tuple[str, Mapping, float]]):
        """Build from ``(sequence_id, {key: value}, mos)`` rows sharing one key set."""
        if not rows:
            raise InputError("empty table")
        keys = [key_str(k) for k in rows[0][1]]
        X = [[float(feat[k] if k in feat else feat[FeatureKey.parse(k)]) for k in keys]
             for _, feat, _ in rows]
        return cls(database, [r[0] for r in rows], keys, np.array(X), [r[2] for r in rows])


@dataclass
class Normalizer:
    """Per-feature min-max scaling fitted on training data, clamped at prediction."""

    keys: List[str]
    lo: np.ndarray
    hi: np.ndarray

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        span = self.hi - self.lo
        const = span <= 0
        out = np.divide(X - self.lo, span, out=np.zeros_like(X), where=~const)
        out[..., const] = 0.0
        return np.clip(out, 0.0, 1.0)

    def to_dict(self):
        return {"keys": self.keys, "min": [float(v) for v in self.lo],
                "max": [float(v) for v in self.hi]}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["keys"]), np.array(d["min"], dtype=np.float64),
                   np.array(d["max"], dtype=np.float64))


def fit_normalizer(table: TrainingTable, keys: Optional[Sequence[KeyLike]] = None) -> Normalizer:
    if len(table) == 0:
        raise InputError("cannot normalize an empty table")
    keys = [key_str(k) for k in (keys if keys is not None else table.keys)]
    X = table.columns(keys)
    return Normalizer(keys, X.min(axis=0), X.max(axis=0))


def normalize_features(table: TrainingTable) -> Tuple[TrainingTable, Normalizer]:
    """Map every column to [0, 1] by its training min/max; constant columns map to 0."""
    norm = fit_normalizer(table)
    out = TrainingTable(table.database, list(table.sequence_ids), list(table.keys),
                        norm.transform(table.X), table.mos.copy())
    return out, norm


@dataclass(frozen=True)
class SvrHyper:
    nu: float = 0.9
    C: float = 4.0
    gamma: Optional[float] = None  # None -> 1 / number of features

    def gamma_for(self, n_features: int) -> float:
        return self.gamma if self.gamma is not None else 1.0 / n_features


@dataclass
class SvrModel:
    """RBF nu-SVR on normalized features, predicting MOS/100."""

    feature_keys: List[str]
    normalizer: Normalizer
    gamma: float
    C: float
    nu: float
    support_vectors: np.ndarray
    dual_coef: np.ndarray
    intercept: float

    def decision(self, Xn: np.ndarray) -> np.ndarray:
        Xn = np.atleast_2d(np.asarray(Xn, dtype=np.float64))
        if self.support_vectors.size == 0:
            return np.full(Xn.shape[0], self.intercept)
        d2 = ((Xn[:, None, :] - self.support_vectors[None, :, :]) ** 2).sum(axis=2)
        return np.exp(-self.gamma * d2) @ self.dual_coef + self.intercept

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        """Scores in [0, 100] for raw (unnormalized) feature rows ordered as ``feature_keys``."""
        f = self.decision(self.normalizer.transform(X))
        return np.clip(f * 100.0, *MOS_RANGE)

    def predict(self, features: Mapping) -> float:
        row = []
        for k in self.feature_keys:
            if k in features:
                row.append(features[k])
                continue
            try:
                row.append(features[FeatureKey.parse(k)])
            except (KeyError, ValueError):
                raise InputError(f"feature {k} missing from input") from None
        return float(self.predict_matrix(np.array([row], dtype=np.float64))[0])

    def to_dict(self):
        return {
            "feature_keys": self.feature_keys,
            "normalizer": self.normalizer.to_dict(),
            "kernel": "rbf",
            "gamma": self.gamma,
            "C": self.C,
            "nu": self.nu,
            "support_vectors": self.support_vectors.tolist(),
            "dual_coef": self.dual_coef.tolist(),
            "intercept": self.intercept,
        }

    @classmethod
    def from_dict(cls, d):
        n = len(d["feature_keys"])
        return cls(list(d["feature_keys"]), Normalizer.from_dict(d["normalizer"]),
                   float(d["gamma"]), float(d["C"]), float(d["nu"]),
                   np.array(d["support_vectors"], dtype=np.float64).reshape(-1, n),
                   np.array(d["dual_coef"], dtype=np.float64), float(d["intercept"]))


def train_svr(table: TrainingTable, keys: Sequence[KeyLike], hyper: SvrHyper = SvrHyper(),
              max_iter: int = SVR_MAX_ITER) -> SvrModel:
    """Fit a nu-SVR on ``keys`` of ``table``.

    Raises:
        InputError: fewer than 8 rows, empty or duplicated key list.
        TrainingError: the solver hit ``max_iter`` without converging.
    """
    keys = [key_str(k) for k in keys]
    if not keys or len(set(keys)) != len(keys):
        raise InputError(f"feature list must be non-empty and duplicate-free: {keys}")
    if len(table) < 8:
        raise InputError(f"need at least 8 training rows, got {len(table)}")
    norm = fit_normalizer(table, keys)
    Xn = norm.transform(table.columns(keys))
    y = table.mos / 100.0
    gamma = hyper.gamma_for(len(keys))
    svr = NuSVR(kernel="rbf", gamma=gamma, C=hyper.C, nu=hyper.nu, max_iter=max_iter)
    with warnings.catch_warnings():
        warnings.simplefilter("error", ConvergenceWarning)
        try:
            svr.fit(Xn, y)
        except ConvergenceWarning:
            raise TrainingError(f"nu-SVR did not converge within {max_iter} iterations") from None
    return SvrModel(keys, norm, gamma, hyper.C, hyper.nu,
                    np.array(svr.support_vectors_, dtype=np.float64),
                    np.array(svr.dual_coef_[0], dtype=np.float64),
                    float(svr.intercept_[0]))


def predict_svr(model: SvrModel, features: Mapping) -> float:
    return model.predict(features)


# -- greedy forward selection -------------------------------------------------------

def _subset(table: TrainingTable, rows: np.ndarray) -> TrainingTable:
    return TrainingTable(table.database, [table.sequence_ids[i] for i in rows], table.keys,
                         table.X[rows], table.mos[rows])


def subset_srocc(table: TrainingTable, keys: Sequence[KeyLike], hyper: SvrHyper = SvrHyper(),
                 groups: Optional[Sequence] = None, folds: int = 0) -> float:
    """SROCC between MOS and the predictions of an SVR trained on ``keys``.

    By default predictions are in-sample. With ``folds >= 2`` and ``groups``
    (e.g. source content ids), rows are split into content-disjoint folds
    and each fold is predicted by a model trained on the others. The empty
    feature set predicts a constant, whose SROCC is 0.
    """
    if not keys:
        return 0.0
    if folds < 2:
        model = train_svr(table, keys, hyper)
        return srocc(model.predict_matrix(table.columns(model.feature_keys)), table.mos)
    if groups is None or len(groups) != len(table):
        raise InputError("grouped k-fold needs one group label per row")
    labels = sorted(set(groups))
    fold_of = {g: i % folds for i, g in enumerate(labels)}
    assign = np.array([fold_of[g] for g in groups])
    pred = np.empty(len(table))
    for f in range(min(folds, len(labels))):
        test = np.flatnonzero(assign == f)
        model = train_svr(_subset(table, np.flatnonzero(assign != f)), keys, hyper)
        pred[test] = model.predict_matrix(table.columns(model.feature_keys)[test])
    return srocc(pred, table.mos)


@dataclass
class SfmsStep:
    selected: List[str]
    score: float
    candidate_scores: Dict[str, float] = field(default_factory=dict)


def sfms_trace(pool: Sequence[KeyLike], seed_set: Sequence[KeyLike], table: TrainingTable,
               hyper: SvrHyper = SvrHyper(), groups: Optional[Sequence] = None,
               folds: int = 0) -> List[SfmsStep]:
    """Run greedy forward selection and return every accepted step.

    The first entry is the seed set with its initial score; each later entry
    adds the candidate with the highest SROCC, accepted only if it strictly
    improves on the current score. Ties go to the earliest candidate in
    ``pool`` order.
    """
    pool = [key_str(k) for k in pool]
    seed = [key_str(k) for k in seed_set]
    if not pool and not seed:
        raise InputError("both the candidate pool and the seed set are empty")
    overlap = set(pool) & set(seed)
    if overlap:
        raise InputError(f"pool and seed set overlap: {sorted(overlap)}")
    selected = list(seed)
    best = subset_srocc(table, selected, hyper, groups, folds)
    steps = [SfmsStep(list(selected), best)]
    remaining = list(pool)
    while remaining:
        scores = {c: subset_srocc(table, selected + [c], hyper, groups, folds) for c in remaining}
        pick = max(remaining, key=lambda c: (scores[c], -remaining.index(c)))
        if scores[pick] > best:
            best = scores[pick]
            selected.append(pick)
            remaining.remove(pick)
            steps.append(SfmsStep(list(selected), best, scores))
            logger.info("selected %s (SROCC %.4f)", pick, best)
        else:
            break
    return steps


def sfms_select(pool: Sequence[KeyLike], seed_set: Sequence[KeyLike], table: TrainingTable,
                hyper: SvrHyper = SvrHyper(), groups: Optional[Sequence] = None,
                folds: int = 0) -> List[str]:
    return sfms_trace(pool, seed_set, table, hyper, groups, folds)[-1].selected


# -- model combination --------------------------------------------------------------

def combine_models(m1_score, m2_score, beta: float):
    """Convex combination ``beta * m1 + (1 - beta) * m2`` (scalars or arrays)."""
    if not 0.0 <= beta <= 1.0:
        raise InputError(f"beta must lie in [0, 1], got {beta}")
    if beta == 1.0:
        return m1_score
    if beta == 0.0:
        return m2_score
    if np.ndim(m1_score) or np.ndim(m2_score):
        m1_score = np.asarray(m1_score, dtype=np.float64)
        m2_score = np.asarray(m2_score, dtype=np.float64)
    return beta * m1_score + (1.0 - beta) * m2_score


def _grid(step: float) -> np.ndarray:
    n = int(round(1.0 / step))
    if n < 1 or abs(n * step - 1.0) > 1e-9:
        raise InputError(f"grid step must divide 1 evenly, got {step}")
    return np.arange(n + 1) / n


def _pick_toward_half(grid, scores, tol=1e-12):
    best = max(scores)
    ties = [b for b, s in zip(grid, scores) if s >= best - tol]
    # closest to 0.5; equidistant pairs resolve to the smaller value
    return float(min(ties, key=lambda b: (abs(b - 0.5), b)))


def tune_beta(preds1: Sequence[Sequence[float]], preds2: Sequence[Sequence[float]],
              tables: Sequence, grid_step: float = 0.05) -> float:
    """Weight maximizing the Fisher-aggregated SROCC over several databases.

    ``tables`` holds per-database MOS vectors or TrainingTables aligned with the
    prediction lists. Ties resolve toward 0.5.
    """
    if not tables:
        raise InputError("no databases to tune on")
    mos = [np.asarray(t.mos if hasattr(t, "mos") else t, float) for t in tables]
    p1 = [np.asarray(p, float) for p in preds1]
    p2 = [np.asarray(p, float) for p in preds2]
    if not (len(p1) == len(p2) == len(mos)):
        raise InputError("prediction lists and tables are not aligned")
    grid = _grid(grid_step)
    scores = []
    for b in grid:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rs = [srocc(combine_models(a, c, float(b)), m) for a, c, m in zip(p1, p2, mos)]
            scores.append(fisher_aggregate(rs))
    return _pick_toward_half(grid, scores)


def tune_alpha(eadm_by_alpha: Mapping[float, Sequence], mos: Sequence) -> float:
    """Alpha whose E-ADM scores rank-correlate best with MOS.

    ``eadm_by_alpha`` maps each alpha to one score vector, or to a list of
    per-database vectors aligned with a list of MOS vectors in ``mos``; the
    per-database SROCCs are Fisher-aggregated. Ties resolve to the smallest
    alpha.
    """
    if not eadm_by_alpha:
        raise InputError("no alpha candidates")
    multi = np.ndim(mos[0]) > 0 if len(mos) else False
    mos_list = [np.asarray(m, float) for m in mos] if multi else [np.asarray(mos, float)]
    scored = []
    for a in sorted(eadm_by_alpha, key=float):
        vals = eadm_by_alpha[a] if multi else [eadm_by_alpha[a]]
        if len(vals) != len(mos_list):
            raise InputError("E-ADM vectors and MOS vectors are not aligned")
        rs = [srocc(v, m) for v, m in zip(vals, mos_list)]
        scored.append((float(a), fisher_aggregate(rs)))
    best = max(s for _, s in scored)
    return next(a for a, s in scored if s >= best - 1e-12)


# -- two-model fusion -----------------------------------------------------------------

@dataclass
class FusionModel:
    model1: SvrModel
    model2: SvrModel
    beta: float = 0.5
    alpha: float = 0.3
    pool_version: str = ""
    extractor_version: str = ""
    config_hash: str = ""
    output_range: Tuple[float, float] = MOS_RANGE

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise InputError(f"beta must lie in [0, 1], got {self.beta}")

    @property
    def feature_keys(self) -> List[str]:
        keys = list(self.model1.feature_keys)
        keys += [k for k in self.model2.feature_keys if k not in keys]
        return keys

    def predict(self, features: Mapping) -> Tuple[float, float, float]:
        """Return ``(Q, M1, M2)`` for one feature vector."""
        m1 = self.model1.predict(features)
        m2 = self.model2.predict(features)
        return float(combine_models(m1, m2, self.beta)), m1, m2

    def to_dict(self):
        return {
            "schema_version": MODEL_SCHEMA_VERSION,
            "kind": "two-model-svr-fusion",
            "beta": self.beta,
            "alpha": self.alpha,
            "output_range": list(self.output_range),
            "pool_version": self.pool_version,
            "extractor_version": self.extractor_version,
            "config_hash": self.config_hash,
            "model1": self.model1.to_dict(),
            "model2": self.model2.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        version = d.get("schema_version")
        if version != MODEL_SCHEMA_VERSION:
            raise SchemaVersionError(
                f"model schema version {version!r} is not supported "
                f"(expected {MODEL_SCHEMA_VERSION})")
        return cls(SvrModel.from_dict(d["model1"]), SvrModel.from_dict(d["model2"]),
                   float(d["beta"]), float(d["alpha"]), d.get("pool_version", ""),
                   d.get("extractor_version", ""), d.get("config_hash", ""),
                   tuple(d.get("output_range", MOS_RANGE)))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, ensure_ascii=False, allow_nan=False) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "FusionModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, ensure_ascii=True, default=str)
    return hashlib.sha256(blob.encode("ascii")).hexdigest()[:16]
