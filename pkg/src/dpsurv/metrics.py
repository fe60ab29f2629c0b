"""Discrimination and calibration metrics for survival predictions.

Censoring is handled with inverse-probability weights from the Kaplan-Meier
estimate of the censoring distribution; weights at event times use the
left limit G(t-).  Subjects whose required weight denominator is zero are
dropped from the average and counted.  Comparable pairs for the concordance
index require the earlier subject to be an observed event.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import grfn
from .evidence import summarizing_grfn, survival_function
from .grfn import MixtureGRFN, UnattainableLevelError
from .training import PROBABILITY_FLOOR, SurvivalRecord

__all__ = [
    "CoverageResult",
    "PredictionSet",
    "StepFunction",
    "UndefinedMetricError",
    "bll",
    "bll_curve",
    "brier_curve",
    "brier_score",
    "c_index",
    "calibration_coverage",
    "ibll",
    "ibs",
    "ipcw_dropped",
    "km_censoring",
]


class UndefinedMetricError(ValueError):
    """The metric has no valid value on this input (e.g. no comparable
    pairs, or every subject lost its IPCW weight)."""


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function on [0, inf)."""

    knots: np.ndarray
    values: np.ndarray
    value_before_first: float = 1.0

    def __post_init__(self) -> None:
        k = np.asarray(self.knots, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if k.ndim != 1 or v.shape != k.shape:
            raise ValueError("knots and values must be matching vectors")
        if k.size > 1 and not (np.diff(k) > 0).all():
            raise ValueError("knots must be strictly increasing")
        if ((v < 0) | (v > 1)).any():
            raise ValueError("values must lie in [0, 1]")
        object.__setattr__(self, "knots", k)
        object.__setattr__(self, "values", v)

    def __call__(self, t: float) -> float:
        i = int(np.searchsorted(self.knots, t, side="right")) - 1
        return float(self.values[i]) if i >= 0 else self.value_before_first

    def left_limit(self, t: float) -> float:
        """Value just below t."""
        i = int(np.searchsorted(self.knots, t, side="left")) - 1
        return float(self.values[i]) if i >= 0 else self.value_before_first


@dataclass(frozen=True)
class PredictionSet:
    """Aligned per-subject predictions: a scalar risk, the slide-level
    mixture evidence (with the shared belief/plausibility blend), and the
    observed outcome."""

    records: tuple[SurvivalRecord, ...]
    risks: np.ndarray
    mixtures: tuple[MixtureGRFN, ...]
    lambda_mix: float

    def __init__(
        self,
        records: Sequence[SurvivalRecord],
        risks: Sequence[float],
        mixtures: Sequence[MixtureGRFN],
        lambda_mix: float,
    ) -> None:
        recs = tuple(records)
        r = np.asarray(risks, dtype=np.float64)
        mix = tuple(mixtures)
        if not len(recs) == r.size == len(mix) or len(recs) == 0:
            raise ValueError("records, risks and mixtures must align and be nonempty")
        object.__setattr__(self, "records", recs)
        object.__setattr__(self, "risks", r)
        object.__setattr__(self, "mixtures", mix)
        object.__setattr__(self, "lambda_mix", float(lambda_mix))

    def __len__(self) -> int:
        return len(self.records)

    def survival(self, i: int, t: float) -> float:
        return survival_function(self.mixtures[i], t, self.lambda_mix)


def c_index(preds: PredictionSet) -> float:
    """Fraction of correctly risk-ordered comparable pairs: (i, j) with
    T_i < T_j and subject i an observed event; risk ties count 0.5."""
    times = np.array([r.time for r in preds.records])
    event = np.array([not r.censored for r in preds.records])
    risks = preds.risks
    concordant = 0.0
    comparable = 0
    for i in range(len(preds)):
        if not event[i]:
            continue
        later = times > times[i]
        comparable += int(later.sum())
        concordant += float((risks[i] > risks[later]).sum())
        concordant += 0.5 * float((risks[i] == risks[later]).sum())
    if comparable == 0:
        raise UndefinedMetricError("no comparable pairs")
    return concordant / comparable


def km_censoring(records: Sequence[SurvivalRecord]) -> StepFunction:
    """Kaplan-Meier estimate of the censoring survival function (censoring
    treated as the event, observed deaths as censored observations)."""
    if len(records) == 0:
        raise ValueError("records must be nonempty")
    times = np.array([r.time for r in records])
    cens = np.array([r.censored for r in records])
    knots = []
    values = []
    surv = 1.0
    for t in np.unique(times[cens]):
        at_risk = int((times >= t).sum())
        events = int(((times == t) & cens).sum())
        surv *= 1.0 - events / at_risk
        knots.append(float(t))
        values.append(surv)
    return StepFunction(knots=np.array(knots), values=np.array(values))


def _ipcw_terms(
    s_vals: np.ndarray,
    records: Sequence[SurvivalRecord],
    censor_surv: StepFunction,
    t: float,
    kind: str,
) -> tuple[float, int, int]:
    total = 0.0
    used = 0
    dropped = 0
    for s, rec in zip(s_vals, records):
        if rec.time <= t and not rec.censored:
            weight = censor_surv.left_limit(rec.time)
            if weight <= 0.0:
                dropped += 1
                continue
            if kind == "brier":
                total += s**2 / weight
            else:
                total += math.log(max(1.0 - s, PROBABILITY_FLOOR)) / weight
            used += 1
        elif rec.time > t:
            weight = censor_surv(t)
            if weight <= 0.0:
                dropped += 1
                continue
            if kind == "brier":
                total += (1.0 - s) ** 2 / weight
            else:
                total += math.log(max(s, PROBABILITY_FLOOR)) / weight
            used += 1
        else:
            # Censored at or before t: no usable outcome, zero contribution.
            used += 1
    if used == 0:
        raise UndefinedMetricError(f"all subjects dropped at t={t}")
    return total / used, used, dropped


def _survival_at(preds: PredictionSet, t: float) -> np.ndarray:
    return np.array([preds.survival(i, t) for i in range(len(preds))])


def brier_score(preds: PredictionSet, censor_surv: StepFunction, t: float) -> float:
    """IPCW Brier score at time t."""
    value, _, _ = _ipcw_terms(
        _survival_at(preds, t), preds.records, censor_surv, t, "brier"
    )
    return value


def bll(preds: PredictionSet, censor_surv: StepFunction, t: float) -> float:
    """IPCW binomial log-likelihood at time t (higher is better; the
    integrated version is reported negated)."""
    value, _, _ = _ipcw_terms(
        _survival_at(preds, t), preds.records, censor_surv, t, "bll"
    )
    return value


def ipcw_dropped(preds: PredictionSet, censor_surv: StepFunction, t: float) -> int:
    """Subjects excluded at time t because their IPCW denominator is zero."""
    _, _, dropped = _ipcw_terms(
        _survival_at(preds, t), preds.records, censor_surv, t, "brier"
    )
    return dropped


def _default_range(preds: PredictionSet) -> tuple[float, float]:
    event_times = [r.time for r in preds.records if not r.censored]
    if not event_times:
        raise UndefinedMetricError("no events: integration range undefined")
    return min(event_times), max(r.time for r in preds.records)


def _score_curve(
    preds: PredictionSet, censor_surv: StepFunction, ts: Sequence[float], kind: str
) -> tuple[np.ndarray, np.ndarray]:
    values = np.empty(len(ts))
    dropped = np.empty(len(ts), dtype=np.int64)
    for i, t in enumerate(ts):
        values[i], _, dropped[i] = _ipcw_terms(
            _survival_at(preds, float(t)), preds.records, censor_surv, float(t), kind
        )
    return values, dropped


def brier_curve(
    preds: PredictionSet, censor_surv: StepFunction, ts: Sequence[float]
) -> tuple[np.ndarray, np.ndarray]:
    """Brier score over a time grid plus the per-time dropped-subject counts."""
    return _score_curve(preds, censor_surv, ts, "brier")


def bll_curve(
    preds: PredictionSet, censor_surv: StepFunction, ts: Sequence[float]
) -> tuple[np.ndarray, np.ndarray]:
    """Binomial log-likelihood over a time grid (not yet negated) plus
    dropped-subject counts."""
    return _score_curve(preds, censor_surv, ts, "bll")


def _integrate(
    preds: PredictionSet,
    censor_surv: StepFunction,
    t_lo: float | None,
    t_hi: float | None,
    n_grid: int,
    kind: str,
) -> float:
    if t_lo is None or t_hi is None:
        lo, hi = _default_range(preds)
        t_lo = lo if t_lo is None else t_lo
        t_hi = hi if t_hi is None else t_hi
    if not t_lo < t_hi:
        raise ValueError(f"need t_lo < t_hi, got [{t_lo}, {t_hi}]")
    ts = np.linspace(t_lo, t_hi, n_grid)
    vals, _ = _score_curve(preds, censor_surv, ts, kind)
    return float(np.trapezoid(vals, ts) / (t_hi - t_lo))


def ibs(
    preds: PredictionSet,
    censor_surv: StepFunction,
    t_lo: float | None = None,
    t_hi: float | None = None,
    n_grid: int = 100,
) -> float:
    """Integrated Brier score: trapezoidal time-average of the Brier score.
    The range defaults to [min event time, max observed time]."""
    return _integrate(preds, censor_surv, t_lo, t_hi, n_grid, "brier")


def ibll(
    preds: PredictionSet,
    censor_surv: StepFunction,
    t_lo: float | None = None,
    t_hi: float | None = None,
    n_grid: int = 100,
) -> float:
    """Negated integrated binomial log-likelihood (lower is better)."""
    return -_integrate(preds, censor_surv, t_lo, t_hi, n_grid, "bll")


@dataclass(frozen=True)
class CoverageResult:
    """Coverage of prediction intervals on uncensored subjects.  Subjects
    whose belief interval is unattainable at a level are excluded there and
    counted in n_unattainable."""

    alphas: np.ndarray
    coverage: np.ndarray
    n_uncensored: int
    n_unattainable: np.ndarray


def calibration_coverage(
    preds: PredictionSet, alphas: Sequence[float], kind: str
) -> CoverageResult:
    """Fraction of uncensored subjects whose log survival time falls inside
    the alpha-level interval of their pooled (summarizing) GRFN, per alpha.
    ``kind`` selects belief ("bpi") or probabilistic ("ppi") intervals."""
    if kind not in ("bpi", "ppi"):
        raise ValueError(f"kind must be 'bpi' or 'ppi', got {kind!r}")
    alphas = np.asarray(list(alphas), dtype=np.float64)
    pooled = [
        summarizing_grfn(m)
        for m, rec in zip(preds.mixtures, preds.records)
        if not rec.censored
    ]
    log_times = [
        math.log(rec.time) for rec in preds.records if not rec.censored
    ]
    if not pooled:
        raise UndefinedMetricError("no uncensored subjects")
    coverage = np.zeros(alphas.size)
    unattainable = np.zeros(alphas.size, dtype=np.int64)
    for a_idx, alpha in enumerate(alphas):
        hits = 0
        total = 0
        for g, x in zip(pooled, log_times):
            try:
                iv = grfn.bpi(g, float(alpha)) if kind == "bpi" else grfn.ppi(
                    g, float(alpha)
                )
            except UnattainableLevelError:
                unattainable[a_idx] += 1
                continue
            total += 1
            if iv.lo <= x <= iv.hi:
                hits += 1
        coverage[a_idx] = hits / total if total else math.nan
    return CoverageResult(
        alphas=alphas,
        coverage=coverage,
        n_uncensored=len(pooled),
        n_unattainable=unattainable,
    )
