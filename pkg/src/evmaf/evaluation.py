"""Rank-correlation evaluation protocol.

SROCC per database, logistic mapping and residual F-tests against an anchor
metric, Fisher-z aggregation across databases, and the pairwise
MOS-difference analysis with its exact test.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence

import numpy as np
from scipy import optimize, special, stats

from .errors import InputError

logger = logging.getLogger(__name__)

FISHER_CLAMP = 0.999999


class SroccResult(NamedTuple):
    value: float
    degenerate: bool


def spearman(x: Sequence[float], y: Sequence[float]) -> SroccResult:
    """Spearman rank correlation with average ranks for ties.

    A constant input has no ranking; the correlation is then reported as 0
    with ``degenerate=True``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError(f"srocc needs two equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise InputError("srocc needs at least two samples")
    rx = stats.rankdata(x)
    ry = stats.rankdata(y)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        return SroccResult(0.0, True)
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return SroccResult(max(-1.0, min(1.0, r)), False)


def srocc(x: Sequence[float], y: Sequence[float]) -> float:
    return spearman(x, y).value


def fisher_z(r: float) -> float:
    return 0.5 * math.log((1.0 + r) / (1.0 - r))


def fisher_aggregate(sroccs: Sequence[float]) -> float:
    """Average correlations in Fisher-z space and map back with tanh."""
    values = [float(r) for r in sroccs]
    if not values:
        raise InputError("nothing to aggregate")
    zs = []
    for r in values:
        if abs(r) >= 1.0:
            warnings.warn(f"correlation {r} clamped to +/-{FISHER_CLAMP} for Fisher z",
                          RuntimeWarning, stacklevel=2)
            r = math.copysign(FISHER_CLAMP, r)
        zs.append(fisher_z(r))
    if all(v == values[0] for v in values):
        return values[0] if abs(values[0]) < 1.0 else math.copysign(FISHER_CLAMP, values[0])
    return math.tanh(math.fsum(zs) / len(zs))


# -- logistic mapping and F-test --------------------------------------------------

def logistic4(m, b1, b2, b3, b4):
    z = np.clip(-b2 * (np.asarray(m, float) - b3), -700.0, 700.0)
    return b1 / (1.0 + np.exp(z)) + b4


def _logistic_jac(p, m):
    b1, b2, b3, _ = p
    z = np.clip(-b2 * (m - b3), -700.0, 700.0)
    e = np.exp(z)
    s = 1.0 / (1.0 + e)
    ds = s * s * e
    return np.column_stack([s, b1 * ds * (m - b3), -b1 * ds * b2, np.ones_like(m)])


@dataclass
class LogisticFit:
    params: np.ndarray
    predicted: np.ndarray
    residuals: np.ndarray
    linear_fallback: bool = False

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.residuals ** 2)))

    def __call__(self, metric):
        m = np.asarray(metric, float)
        if self.linear_fallback:
            return self.params[0] * m + self.params[1]
        return logistic4(m, *self.params)


def _linear_fit(m, mos):
    if np.ptp(m) == 0:
        slope, icpt = 0.0, float(np.mean(mos))
    else:
        slope, icpt = np.polyfit(m, mos, 1)
    pred = slope * m + icpt
    return np.array([slope, icpt]), pred


_SLOPE_FACTORS = (1.0, 0.1, 10.0, 100.0)
_CENTRE_QUANTILES = (0.5, 0.1, 0.25, 0.75, 0.9)


def fit_logistic(metric: Sequence[float], mos: Sequence[float]) -> LogisticFit:
    """Least-squares 4-parameter logistic mapping of metric scores onto MOS.

    Levenberg-Marquardt with an analytic Jacobian, started from the usual
    b1=range(MOS), b2=1/std(metric), b3=median(metric), b4=min(MOS) and from a
    fixed grid of other slopes and centres (the objective has local minima);
    the lowest residual wins, earlier starts winning ties. Falls back to a
    straight line (``linear_fallback=True``) when the metric is constant, every
    start fails, or the line fits strictly better (a line is the logistic's own
    limit, which LM can only approach).
    """
    m = np.asarray(metric, dtype=np.float64)
    y = np.asarray(mos, dtype=np.float64)
    if m.shape != y.shape or m.size < 5:
        raise InputError(f"logistic fit needs >= 5 aligned samples, got {m.size}")
    lin_params, lin_pred = _linear_fit(m, y)
    lin = LogisticFit(lin_params, lin_pred, y - lin_pred, linear_fallback=True)
    sd = float(np.std(m))
    if sd == 0.0:
        return lin
    sign = 1.0 if np.corrcoef(m, y)[0, 1] >= 0 else -1.0
    best, best_sse = None, float(lin.residuals @ lin.residuals)
    for f in _SLOPE_FACTORS:
        for q in _CENTRE_QUANTILES:
            p0 = np.array([np.ptp(y), sign * f / sd, float(np.quantile(m, q)), float(np.min(y))])
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    res = optimize.least_squares(
                        lambda p: logistic4(m, *p) - y, p0, jac=lambda p: _logistic_jac(p, m),
                        method="lm", xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=1000)
            except (ValueError, np.linalg.LinAlgError) as exc:
                logger.debug("logistic start %s failed: %s", p0, exc)
                continue
            # status 0 (evaluation cap) is kept: in the exponential-tail regime b1
            # grows without bound while the residual keeps improving
            if res.status < 0 or not np.all(np.isfinite(res.x)):
                continue
            resid = y - logistic4(m, *res.x)
            sse = float(resid @ resid)
            if np.isfinite(sse) and sse < best_sse:
                best, best_sse = res.x, sse
    if best is None:
        return lin
    pred = logistic4(m, *best)
    return LogisticFit(best, pred, y - pred)


def f_test_residuals(res_a: Sequence[float], res_b: Sequence[float],
                     confidence: float = 0.95, n_params: int = 4) -> int:
    """Two-sided residual-variance F-test.

    Returns 1 when A's residual variance is significantly smaller than B's,
    -1 when significantly larger, 0 otherwise (including n < 5).
    """
    a = np.asarray(res_a, float)
    b = np.asarray(res_b, float)
    if a.shape != b.shape:
        raise InputError("residual vectors must have equal length")
    n = a.size
    if n < 5:
        warnings.warn(f"F-test needs at least 5 residuals, got {n}", RuntimeWarning,
                      stacklevel=2)
        return 0
    dof = n - n_params
    var_a = float(a @ a) / dof
    var_b = float(b @ b) / dof
    if var_a == var_b:
        return 0
    crit = stats.f.ppf(1.0 - (1.0 - confidence) / 2.0, dof, dof)
    if var_a < var_b:
        return 1 if (var_a == 0.0 or var_b / var_a > crit) else 0
    return -1 if (var_b == 0.0 or var_a / var_b > crit) else 0


# -- pairwise MOS-difference analysis ----------------------------------------------

@dataclass(frozen=True)
class MetricSeries:
    database: str
    scores: np.ndarray
    mos: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, float)
        m = np.asarray(self.mos, float)
        if s.shape != m.shape or s.ndim != 1 or s.size < 4:
            raise InputError(f"{self.database}: need >= 4 aligned (score, MOS) values")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(m))):
            raise InputError(f"{self.database}: non-finite scores or MOS")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "mos", m)


@dataclass
class PairwiseSet:
    mos_diff: np.ndarray
    metric_diff: np.ndarray
    database: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.mos_diff)


def build_pairs(series: Sequence[MetricSeries]) -> PairwiseSet:
    """All intra-database sequence pairs, ordered so that MOS difference >= 0.

    Pairs with equal MOS keep index order.
    """
    mos_d, met_d, dbs = [], [], []
    for s in series:
        i, j = np.triu_indices(len(s.mos), k=1)
        swap = s.mos[i] < s.mos[j]
        hi = np.where(swap, j, i)
        lo = np.where(swap, i, j)
        mos_d.append(s.mos[hi] - s.mos[lo])
        met_d.append(s.scores[hi] - s.scores[lo])
        dbs.append(np.full(len(i), s.database, dtype=object))
    if not mos_d:
        raise InputError("no series given")
    return PairwiseSet(np.concatenate(mos_d), np.concatenate(met_d), np.concatenate(dbs))


@dataclass
class PairwiseAccuracy:
    accuracy: float
    correct: int
    incorrect: int
    metric_ties: int
    mos_ties: int


def pairwise_accuracy(pairs: PairwiseSet) -> PairwiseAccuracy:
    """Share of pairs whose metric difference agrees in sign with the MOS difference.

    ``metric_diff >= 0`` counts as agreement; metric ties and MOS ties are
    tallied separately so stricter rules can be recomputed.
    """
    if len(pairs) == 0:
        raise InputError("empty pair set")
    md = np.asarray(pairs.metric_diff, float)
    correct = int(np.count_nonzero(md >= 0))
    n = md.size
    return PairwiseAccuracy(correct / n, correct, n - correct,
                            int(np.count_nonzero(md == 0)),
                            int(np.count_nonzero(np.asarray(pairs.mos_diff) == 0)))


def compare_pairwise(pairs_a: PairwiseSet, pairs_b: PairwiseSet):
    """Accuracy of two metrics on the same pairs, their 2x2 count table and exact-test p."""
    acc_a = pairwise_accuracy(pairs_a)
    acc_b = pairwise_accuracy(pairs_b)
    table = [[acc_a.correct, acc_a.incorrect], [acc_b.correct, acc_b.incorrect]]
    return acc_a, acc_b, table, fisher_exact(table)


def _log_hypergeom(a, r1, r2, c1):
    # log of C(r1, a) C(r2, c1 - a) / C(r1 + r2, c1)
    n = r1 + r2
    return (special.gammaln(r1 + 1) - special.gammaln(a + 1) - special.gammaln(r1 - a + 1)
            + special.gammaln(r2 + 1) - special.gammaln(c1 - a + 1)
            - special.gammaln(r2 - c1 + a + 1)
            - special.gammaln(n + 1) + special.gammaln(c1 + 1) + special.gammaln(n - c1 + 1))


def fisher_exact(counts) -> float:
    """Two-sided Fisher exact test p-value for a 2x2 table of counts.

    Sums the hypergeometric probabilities of every table with the same margins
    that is no more likely than the observed one (relative slack 1e-7).
    """
    t = np.asarray(counts)
    if t.shape != (2, 2) or np.any(t < 0) or np.any(t != np.floor(t)):
        raise InputError(f"need a 2x2 table of nonnegative integers, got {counts!r}")
    (a, b), (c, d) = (int(v) for v in t[0]), (int(v) for v in t[1])
    r1, r2, c1, c2 = a + b, c + d, a + c, b + d
    if min(r1, r2, c1, c2) == 0:
        return 1.0
    lo = max(0, c1 - r2)
    hi = min(r1, c1)
    support = np.arange(lo, hi + 1, dtype=np.float64)
    logp = _log_hypergeom(support, r1, r2, c1)
    obs = _log_hypergeom(float(a), r1, r2, c1)
    keep = logp <= obs + math.log1p(1e-7)
    top = float(np.max(logp))
    p = float(np.exp(special.logsumexp(logp[keep] - top) + top))
    return min(1.0, p)


def write_pairs_csv(path, pairs: PairwiseSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["database", "mos_diff", "metric_diff"])
        dbs = pairs.database if pairs.database is not None else [""] * len(pairs)
        for db, m, q in zip(dbs, pairs.mos_diff, pairs.metric_diff):
            w.writerow([db, repr(float(m)), repr(float(q))])


def read_pairs_csv(path) -> PairwiseSet:
    dbs, mos_d, met_d = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            dbs.append(row.get("database", ""))
            mos_d.append(float(row["mos_diff"]))
            met_d.append(float(row["metric_diff"]))
    return PairwiseSet(np.array(mos_d), np.array(met_d), np.array(dbs, dtype=object))


# -- report ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """SROCC per database and metric, F-test verdicts against an anchor, and aggregates."""

    databases: List[str]
    metrics: List[str]
    anchor: Optional[str]
    srocc: Dict[str, Dict[str, float]] = field(default_factory=dict)
    verdict: Dict[str, Dict[str, int]] = field(default_factory=dict)
    overall: Dict[str, float] = field(default_factory=dict)
    pairwise: Dict[str, PairwiseAccuracy] = field(default_factory=dict)
    pairwise_p: Optional[float] = None
    config_hash: Optional[str] = None

    def to_text(self) -> str:
        head = ["SROCC (F-test)"] + self.databases + ["Overall"]
        rows = [head]
        for m in self.metrics:
            row = [m]
            for db in self.databases:
                cell = f"{self.srocc[m][db]:.4f}"
                if self.anchor is not None and m != self.anchor:
                    cell += f" ({self.verdict[m][db]})"
                row.append(cell)
            row.append(f"{self.overall[m]:.4f}")
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        lines = []
        if self.config_hash:
            lines.append(f"# config_hash={self.config_hash}")
        if self.anchor:
            lines.append(f"# F-test anchor: {self.anchor}")
        for k, r in enumerate(rows):
            lines.append(" | ".join(c.rjust(w) for c, w in zip(r, widths)))
            if k == 0:
                lines.append("-+-".join("-" * w for w in widths))
        if self.pairwise:
            lines.append("")
            for m, acc in self.pairwise.items():
                lines.append(f"pairwise accuracy {m}: {acc.accuracy:.4f} "
                             f"({acc.correct} correct, {acc.incorrect} incorrect, "
                             f"{acc.metric_ties} metric ties, {acc.mos_ties} MOS ties)")
            if self.pairwise_p is not None:
                lines.append(f"Fisher exact test p = {self.pairwise_p:.3e}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric"] + [f"{db}_srocc" for db in self.databases]
                       + [f"{db}_ftest" for db in self.databases] + ["overall"])
            for m in self.metrics:
                w.writerow([m] + [repr(self.srocc[m][db]) for db in self.databases]
                           + [self.verdict.get(m, {}).get(db, "") for db in self.databases]
                           + [repr(self.overall[m])])


def evaluate_series(series: Mapping[str, Mapping[str, MetricSeries]],
                    anchor: Optional[str] = None) -> EvalReport:
    """Build a report from ``series[metric][database]``.

    Every non-anchor metric is F-tested against ``anchor`` on logistic-fit
    residuals; the anchor's own row carries no verdicts.
    """
    metrics = list(series)
    if not metrics:
        raise InputError("no metrics to evaluate")
    databases = list(series[metrics[0]])
    report = EvalReport(databases, metrics, anchor)
    fits = {m: {db: fit_logistic(series[m][db].scores, series[m][db].mos) for db in databases}
            for m in metrics}
    for m in metrics:
        report.srocc[m] = {db: srocc(series[m][db].scores, series[m][db].mos) for db in databases}
        report.overall[m] = fisher_aggregate([report.srocc[m][db] for db in databases])
        if anchor is not None:
            report.verdict[m] = {db: f_test_residuals(fits[m][db].residuals,
                                                      fits[anchor][db].residuals)
                                 for db in databases}
    return report
