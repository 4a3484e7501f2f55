"""Evaluation suite: golden-set replay, hard/soft recall, total value divergence,
NE, AUC, online outcome metrics and bootstrap aggregation.

Undefined values (zero denominators, single-class label sets) are returned as
``None`` by the per-request functions and excluded-and-counted by
:func:`aggregate`, never zero-filled.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, DataError
from .nn import binary_ce_loss, clamp_prob


# --- golden sets and recall -------------------------------------------------------

@dataclass(frozen=True)
class GoldenSet:
    request_id: int
    ad_ids: np.ndarray  # best first
    total_values: np.ndarray


@dataclass(frozen=True)
class FinalValues:
    """Final-stage total values keyed by ad id for one request.

    Soft recall only accepts this type, so early-stage values cannot be passed
    by accident.
    """

    ad_ids: np.ndarray
    total_values: np.ndarray

    def of(self, ads) -> np.ndarray:
        index = {int(a): i for i, a in enumerate(self.ad_ids)}
        try:
            return self.total_values[[index[int(a)] for a in ads]]
        except KeyError as exc:
            raise DataError(f"ad {exc.args[0]} has no final-stage value") from None


def golden_positions(final_tv: np.ndarray, k: int) -> np.ndarray:
    """Top-k positions by final total value over all candidates (rows ad-id sorted)."""
    return np.argsort(-final_tv, axis=-1, kind="stable")[..., :k]


def build_golden_set(request_id: int, ad_ids: np.ndarray, final_tv: np.ndarray, k: int) -> GoldenSet:
    """Replay-flow golden set: every retrieved candidate is final-stage scored, top-k kept.

    ``final_tv`` must come from the same scoring path the production auction uses.
    """
    ad_ids = np.asarray(ad_ids)
    order = np.lexsort((ad_ids, -np.asarray(final_tv)))[: min(k, len(ad_ids))]
    return GoldenSet(request_id, ad_ids[order], np.asarray(final_tv)[order])


def hard_recall(model_topk, golden: GoldenSet) -> float:
    k = len(model_topk)
    if k == 0:
        raise ConfigError("hard recall needs K >= 1")
    return len(set(int(a) for a in model_topk) & set(int(a) for a in golden.ad_ids)) / k


def soft_recall(model_topk, final_values: FinalValues, golden: GoldenSet) -> float | None:
    """Sum of final total values of the model's picks over that of the golden set."""
    denom = float(np.sum(golden.total_values))
    if not denom > 0:
        return None
    return float(np.sum(final_values.of(model_topk))) / denom


def tvd(final_tv, early_tv) -> float | None:
    """sum |TV_final - TV_early| / sum |TV_final| over one request's final-stage candidates."""
    final_tv = np.asarray(final_tv, dtype=np.float64)
    early_tv = np.asarray(early_tv, dtype=np.float64)
    denom = float(np.sum(np.abs(final_tv)))
    if denom == 0.0:
        return None
    return float(np.sum(np.abs(final_tv - early_tv))) / denom


def batch_recalls(final_tv_all: np.ndarray, early_tv_all: np.ndarray, k: int):
    """Vectorized hard/soft recall for request rows of candidate scores.

    The model's picks are its top-k by early total value; both the picks and the
    golden set are valued with final total values. Returns ``(hard, soft)``
    with NaN where soft recall is undefined.
    """
    golden = golden_positions(final_tv_all, k)
    picks = golden_positions(early_tv_all, k)
    B, N = final_tv_all.shape
    in_golden = np.zeros((B, N), bool)
    np.put_along_axis(in_golden, golden, True, axis=1)
    hard = np.take_along_axis(in_golden, picks, axis=1).sum(axis=1) / k
    g_sum = np.take_along_axis(final_tv_all, golden, axis=1).sum(axis=1)
    p_sum = np.take_along_axis(final_tv_all, picks, axis=1).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        soft = np.where(g_sum > 0, p_sum / np.where(g_sum > 0, g_sum, 1.0), np.nan)
    return hard, soft


def batch_tvd(final_tv: np.ndarray, early_tv: np.ndarray) -> np.ndarray:
    denom = np.abs(final_tv).sum(axis=1)
    num = np.abs(final_tv - early_tv).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 0, num / np.where(denom > 0, denom, 1.0), np.nan)


def pooled_tvd(final_tv: np.ndarray, early_tv: np.ndarray) -> float | None:
    denom = float(np.abs(final_tv).sum())
    return None if denom == 0 else float(np.abs(final_tv - early_tv).sum()) / denom


# --- NE and AUC ----------------------------------------------------------------------

def entropy(p: float) -> float:
    p = float(clamp_prob(p))
    return float(-(p * np.log(p) + (1 - p) * np.log1p(-p)))


def ne(predictions, labels) -> float | None:
    """Normalized entropy: mean log loss over the entropy of the empirical positive rate."""
    y = np.asarray(labels, dtype=np.float64)
    p = np.asarray(predictions, dtype=np.float64)
    if y.size == 0:
        raise DataError("NE of an empty set")
    rate = y.mean()
    if rate <= 0.0 or rate >= 1.0:
        return None
    loss, _ = binary_ce_loss(p, y)
    return float(np.mean(loss)) / entropy(rate)


def auc(predictions, labels) -> float | None:
    """ROC AUC by rank sum; tied scores count one half."""
    y = np.asarray(labels).astype(bool)
    s = np.asarray(predictions, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def weighted_auc(scores: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """AUC under integer sample weights; ``weights`` is ``(R, n)`` for R resamples."""
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    y = labels[order].astype(bool)
    w = np.atleast_2d(weights)[:, order].astype(np.float64)
    wp = np.where(y, w, 0.0)
    wn = np.where(y, 0.0, w)
    # group ties: positives beat all negatives strictly below, half of tied negatives
    starts = np.concatenate([[True], s[1:] != s[:-1]])
    first = np.flatnonzero(starts)
    gp = np.add.reduceat(wp, first, axis=1)
    gn = np.add.reduceat(wn, first, axis=1)
    neg_below = np.cumsum(gn, axis=1) - gn
    num = (gp * (neg_below + 0.5 * gn)).sum(axis=1)
    den = gp.sum(axis=1) * gn.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


# --- online outcome metrics ---------------------------------------------------------

@dataclass(frozen=True)
class OutcomeMetrics:
    impressions: int
    ctr: float | None
    cvr_proxy: float | None
    xout_rate: float | None
    impression_total_value: float | None


def online_outcome_metrics(clicks, quality_events, winner_tv, winner_cvr) -> OutcomeMetrics:
    """Outcome rates over impressed ads.

    ``winner_cvr`` is the fixed per-campaign conversion propensity of each
    impressed ad; ``cvr_proxy`` is expected conversions per impression.
    """
    clicks = np.asarray(clicks, dtype=np.float64).ravel()
    n = clicks.size
    if n == 0:
        return OutcomeMetrics(0, None, None, None, None)
    xout = np.asarray(quality_events)[..., 0].ravel()
    return OutcomeMetrics(
        n,
        float(clicks.mean()),
        float((clicks * np.asarray(winner_cvr, dtype=np.float64).ravel()).mean()),
        float(xout.mean()),
        float(np.asarray(winner_tv, dtype=np.float64).mean()),
    )


# --- aggregation -------------------------------------------------------------------

@dataclass(frozen=True)
class MetricSummary:
    """``sd`` is the across-request sd for per-request metrics and the bootstrap
    standard error for pooled ratio metrics (``kind``)."""

    mean: float
    sd: float
    ci_low: float
    ci_high: float
    count: int
    undefined: int
    kind: str = "per_request"

    def as_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "ci_low": self.ci_low, "ci_high": self.ci_high,
                "count": self.count, "undefined": self.undefined, "kind": self.kind}


@functools.lru_cache(maxsize=8)
def _resample_counts(n: int, resamples: int, seed: int) -> np.ndarray:
    """Multiplicity of each of ``n`` units in ``resamples`` bootstrap draws (read-only).

    Every metric of one evaluation sees the same resamples, which keeps
    bootstrap intervals of related metrics paired.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB007]))
    draws = rng.integers(n, size=(resamples, n)) + (np.arange(resamples) * n)[:, None]
    counts = np.bincount(draws.ravel(), minlength=resamples * n).reshape(resamples, n)
    counts = counts.astype(np.float64)
    counts.flags.writeable = False
    return counts


def aggregate(values, resamples: int = 1000, seed: int = 0, alpha: float = 0.05) -> MetricSummary:
    """Mean, sd and percentile-bootstrap CI of per-request values; ``None``/NaN are
    undefined and counted."""
    arr = np.array([np.nan if v is None else v for v in values], dtype=np.float64)
    defined = arr[np.isfinite(arr)]
    undefined = int(arr.size - defined.size)
    n = defined.size
    if n == 0:
        return MetricSummary(np.nan, np.nan, np.nan, np.nan, 0, undefined)
    mean = float(defined.mean())
    sd = float(defined.std(ddof=1)) if n > 1 else 0.0
    if n == 1:
        return MetricSummary(mean, sd, mean, mean, 1, undefined)
    means = _resample_counts(n, resamples, seed) @ defined / n
    lo, hi = np.quantile(means, [alpha / 2, 1 - alpha / 2])
    return MetricSummary(mean, sd, float(lo), float(hi), n, undefined)


def aggregate_ratio(numerators, denominators, resamples: int = 1000, seed: int = 0,
                    alpha: float = 0.05) -> MetricSummary:
    """Pooled ratio sum(num)/sum(den) with a request-level bootstrap."""
    num = np.asarray(numerators, dtype=np.float64)
    den = np.asarray(denominators, dtype=np.float64)
    if den.sum() <= 0:
        return MetricSummary(np.nan, np.nan, np.nan, np.nan, 0, int(num.size), "pooled")
    point = float(num.sum() / den.sum())
    n = num.size
    if n == 1:
        return MetricSummary(point, 0.0, point, point, 1, 0, "pooled")
    counts = _resample_counts(n, resamples, seed)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = (counts @ num) / (counts @ den)
    ratios = ratios[np.isfinite(ratios)]
    lo, hi = np.quantile(ratios, [alpha / 2, 1 - alpha / 2])
    return MetricSummary(point, float(ratios.std(ddof=1)), float(lo), float(hi), n, 0, "pooled")


def aggregate_ne(predictions, labels, groups, resamples: int = 1000, seed: int = 0,
                 alpha: float = 0.05) -> MetricSummary:
    """NE over all records with a bootstrap over request groups."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    point = ne(p, y) if y.size else None
    if point is None:
        return MetricSummary(np.nan, np.nan, np.nan, np.nan, 0, 1, "pooled")
    loss, _ = binary_ce_loss(p, y)
    uniq, inv = np.unique(groups, return_inverse=True)
    g_loss = np.bincount(inv, weights=loss)
    g_pos = np.bincount(inv, weights=y)
    g_n = np.bincount(inv).astype(np.float64)
    counts = _resample_counts(len(uniq), resamples, seed)
    tot_n = counts @ g_n
    rate = np.clip((counts @ g_pos) / tot_n, 1e-12, 1 - 1e-12)
    h = -(rate * np.log(rate) + (1 - rate) * np.log1p(-rate))
    vals = (counts @ g_loss) / tot_n / h
    lo, hi = np.quantile(vals, [alpha / 2, 1 - alpha / 2])
    return MetricSummary(point, float(vals.std(ddof=1)), float(lo), float(hi), len(uniq), 0, "pooled")


def aggregate_auc(predictions, labels, groups, resamples: int = 1000, seed: int = 0,
                  alpha: float = 0.05, chunk: int = 100) -> MetricSummary:
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    point = auc(p, y) if y.size else None
    if point is None:
        return MetricSummary(np.nan, np.nan, np.nan, np.nan, 0, 1, "pooled")
    uniq, inv = np.unique(groups, return_inverse=True)
    counts = _resample_counts(len(uniq), resamples, seed)
    vals = np.concatenate([weighted_auc(p, y, counts[i:i + chunk][:, inv])
                           for i in range(0, resamples, chunk)])
    vals = vals[np.isfinite(vals)]
    lo, hi = np.quantile(vals, [alpha / 2, 1 - alpha / 2])
    return MetricSummary(point, float(vals.std(ddof=1)), float(lo), float(hi), len(uniq), 0, "pooled")
