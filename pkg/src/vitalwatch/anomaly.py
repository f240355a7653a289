"""Anomaly scores from imputation error, POT thresholds and event extraction."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .model import TrainedModel, window_arrays
from .series import SeriesFrame

logger = logging.getLogger(__name__)

ANOMALY_TYPES = ("hyper_hypotension", "abnormal_hrv", "stress", "sleep_quality")


@dataclass(frozen=True)
class ScoreSeries:
    """Per-timestep anomaly scores.

    ``scores[t]`` is NaN where no future segment covered ``t``.
    ``channel_errors`` holds the per-target-channel mean squared error
    (standardized units) behind each score.
    """

    timestamps: np.ndarray
    scores: np.ndarray
    coverage: np.ndarray
    channel_errors: np.ndarray
    channel_names: tuple[str, ...]
    first_window: np.ndarray

    @property
    def scored(self) -> np.ndarray:
        return self.coverage > 0

    @property
    def start_offset(self) -> int:
        idx = np.flatnonzero(self.scored)
        return int(idx[0]) if idx.size else len(self.scores)

    def values(self) -> np.ndarray:
        """The finite scores only."""
        return self.scores[self.scored]

    def slice_rows(self, start: int, stop: int) -> "ScoreSeries":
        return ScoreSeries(
            self.timestamps[start:stop],
            self.scores[start:stop],
            self.coverage[start:stop],
            self.channel_errors[start:stop],
            self.channel_names,
            self.first_window[start:stop],
        )


def score(frame: SeriesFrame, model: TrainedModel, stride: int = 1) -> ScoreSeries:
    """Squared imputation error of every future target sample, averaged over the windows covering it."""
    if not model.trained:
        raise ValueError("score: model parameters are untrained")
    if frame.roles != model.roles:
        raise ValueError(f"score: frame roles {frame.roles} do not match model roles {model.roles}")
    cfg = model.cfg
    K, lam = cfg.window, cfg.future_len
    past = K - lam
    tgt = model.target_idx
    T, n = frame.T, len(tgt)
    err_sum = np.zeros((T, n))
    err_cnt = np.zeros((T, n))
    coverage = np.zeros(T, dtype=int)
    first_window = np.full(T, -1)
    starts = np.arange(0, T - K + 1, stride)
    values, missing, starts = window_arrays(frame, model.scaler, cfg, starts)
    if starts.size:
        pred = model.predict_standardized(values, missing)
        truth = values[:, past:, :][:, :, tgt]
        obs = ~missing[:, past:, :][:, :, tgt]
        sq = np.where(obs, (pred - truth) ** 2, 0.0)
        rows = starts[:, None] + past + np.arange(lam)[None, :]
        np.add.at(err_sum, rows.ravel(), sq.reshape(-1, n))
        np.add.at(err_cnt, rows.ravel(), obs.reshape(-1, n).astype(float))
        has_obs = obs.any(axis=2)
        np.add.at(coverage, rows[has_obs], 1)
        for w, r in zip(starts[::-1], rows[::-1]):
            first_window[r] = w
    with np.errstate(invalid="ignore", divide="ignore"):
        per_channel = np.where(err_cnt > 0, err_sum / np.maximum(err_cnt, 1), np.nan)
    scores = np.full(T, np.nan)
    ok = coverage > 0
    scores[ok] = np.nanmean(per_channel[ok], axis=1)
    first_window[~ok] = -1
    names = tuple(model.channel_names[i] for i in tgt)
    return ScoreSeries(frame.timestamps.copy(), scores, coverage, per_channel, names, first_window)


# ---------------------------------------------------------------------------
# POT
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PotThreshold:
    tau: float
    q: float
    u_quantile: float
    u: float
    xi: float
    sigma: float
    n_total: int
    n_exceed: int
    fallback: bool = False
    method: str = "grimshaw"

    def exceedance_probability(self, x: float) -> float:
        """P(S > x) under the fitted tail, valid for x >= u."""
        rate = self.n_exceed / self.n_total
        z = (x - self.u) / self.sigma
        if abs(self.xi) < 1e-6:
            return rate * math.exp(-z)
        base = 1.0 + self.xi * z
        if base <= 0:
            return 0.0
        return rate * base ** (-1.0 / self.xi)


def gpd_loglik(y: np.ndarray, xi: float, sigma: float) -> float:
    if sigma <= 0:
        return -math.inf
    if abs(xi) < 1e-9:
        return -y.size * math.log(sigma) - y.sum() / sigma
    z = 1.0 + xi * y / sigma
    if np.any(z <= 0):
        return -math.inf
    return -y.size * math.log(sigma) - (1.0 + 1.0 / xi) * np.log(z).sum()


def _grimshaw_roots(y: np.ndarray, grid: int = 400) -> list[float]:
    """Roots x of u(x) v(x) = 1 with u = mean(1/(1+xy)), v = 1 + mean(log(1+xy))."""
    y_min, y_max, y_mean = float(y.min()), float(y.max()), float(y.mean())
    if y_min <= 0 or y_max == y_min:
        return []

    def h(x):
        s = 1.0 + x * y
        return np.mean(1.0 / s) * (1.0 + np.mean(np.log(s))) - 1.0

    eps = 1e-8 / y_mean
    a = -1.0 / y_max + eps
    c = 2.0 * (y_mean - y_min) / (y_min**2)
    roots = []
    for lo, hi in ((a, -eps), (eps, c)):
        if hi <= lo:
            continue
        if lo > 0:
            xs = np.geomspace(lo, hi, grid)
        else:
            xs = -np.geomspace(-lo, -hi, grid)
        hv = np.array([h(x) for x in xs])
        for i in range(grid - 1):
            if np.isfinite(hv[i]) and np.isfinite(hv[i + 1]) and hv[i] * hv[i + 1] < 0:
                try:
                    roots.append(brentq(h, xs[i], xs[i + 1], xtol=1e-14, maxiter=200))
                except (ValueError, RuntimeError):
                    continue
    return roots


def fit_gpd(excesses: Sequence[float]) -> tuple[float, float, str]:
    """Fit a generalized Pareto distribution to positive excesses.

    Method-of-moments starting point, replaced by the best Grimshaw
    likelihood root (or the exponential special case) when that scores a
    higher likelihood.  Returns ``(xi, sigma, method)``.
    """
    y = np.asarray(excesses, dtype=np.float64)
    if y.size < 2:
        raise ValueError("fit_gpd needs at least two excesses")
    mean, var = float(y.mean()), float(y.var())
    candidates: list[tuple[float, float, str]] = []
    if var > 0:
        xi_m = 0.5 * (1.0 - mean**2 / var)
        candidates.append((xi_m, 0.5 * mean * (mean**2 / var + 1.0), "moments"))
    candidates.append((0.0, mean, "exponential"))
    for x in _grimshaw_roots(y):
        xi = float(np.mean(np.log1p(x * y)))
        if xi != 0:
            candidates.append((xi, xi / x, "grimshaw"))
    best = max(candidates, key=lambda c: gpd_loglik(y, c[0], c[1]))
    return best


def _tau(u: float, xi: float, sigma: float, ratio: float) -> float:
    if abs(xi) < 1e-6:
        return u - sigma * math.log(ratio)
    return u + (sigma / xi) * (ratio ** (-xi) - 1.0)


def fit_pot(
    calibration_scores: ScoreSeries | Sequence[float],
    q: float = 1e-3,
    u_quantile: float = 0.98,
    min_exceedances: int = 50,
    force_fallback: bool = False,
) -> PotThreshold:
    """Peaks-over-threshold threshold at risk ``q``.

    Falls back to the empirical ``1 - q`` quantile when fewer than
    ``min_exceedances`` scores exceed the initial quantile.
    """
    s = calibration_scores.values() if isinstance(calibration_scores, ScoreSeries) else np.asarray(calibration_scores, float)
    s = s[np.isfinite(s)]
    if s.size == 0:
        raise ValueError("fit_pot: no finite calibration scores")
    if not 0 < u_quantile < 1:
        raise ValueError(f"fit_pot: u_quantile must be in (0,1), got {u_quantile}")
    # q + u < 1 avoids the rounding in 1 - u (1 - 0.98 > 0.02)
    if not (0 < q and q + u_quantile < 1):
        raise ValueError(f"fit_pot: need 0 < q < 1 - u_quantile, got q={q}, u_quantile={u_quantile}")
    u = float(np.quantile(s, u_quantile))
    excess = s[s > u] - u
    if force_fallback or excess.size < min_exceedances:
        tau = float(np.quantile(s, 1.0 - q))
        if not force_fallback:
            logger.warning("POT: only %d exceedances over u=%.4g; using the empirical quantile", excess.size, u)
        return PotThreshold(tau, q, u_quantile, u, 0.0, 1.0, int(s.size), int(excess.size), True, "quantile")
    xi, sigma, method = fit_gpd(excess)
    ratio = q * s.size / excess.size
    return PotThreshold(_tau(u, xi, sigma, ratio), q, u_quantile, u, xi, sigma, int(s.size), int(excess.size), False, method)


# ---------------------------------------------------------------------------
# events
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnomalyEvent:
    start: int
    end: int
    start_time: float
    end_time: float
    peak_index: int
    peak_score: float
    channels_ranked: tuple[str, ...]
    anomaly_type_id: int = 0

    @property
    def anomaly_type(self) -> str:
        return ANOMALY_TYPES[self.anomaly_type_id] if 0 <= self.anomaly_type_id < len(ANOMALY_TYPES) else str(self.anomaly_type_id)


def flags(scores: ScoreSeries | np.ndarray, tau: float) -> np.ndarray:
    s = scores.scores if isinstance(scores, ScoreSeries) else np.asarray(scores, float)
    with np.errstate(invalid="ignore"):
        return np.nan_to_num(s, nan=-np.inf) > tau


def detect(scores: ScoreSeries, threshold: PotThreshold | float, anomaly_type_id: int = 0) -> list[AnomalyEvent]:
    """Merge runs of ``S_t > tau`` into events."""
    tau = threshold.tau if isinstance(threshold, PotThreshold) else float(threshold)
    y = flags(scores, tau)
    padded = np.concatenate([[0], y.astype(np.int8), [0]])
    edges = np.flatnonzero(np.diff(padded))
    events = []
    for s, e in zip(edges[::2], edges[1::2]):
        seg = scores.scores[s:e]
        peak = int(s + np.argmax(seg))
        errs = np.nan_to_num(scores.channel_errors[peak], nan=-np.inf)
        ranked = tuple(scores.channel_names[i] for i in np.argsort(-errs, kind="stable"))
        events.append(
            AnomalyEvent(
                int(s),
                int(e - 1),
                float(scores.timestamps[s]),
                float(scores.timestamps[e - 1]),
                peak,
                float(scores.scores[peak]),
                ranked,
                anomaly_type_id,
            )
        )
    return events


def _iso(t: float) -> str:
    return datetime.fromtimestamp(t, tz=timezone.utc).isoformat().replace("+00:00", "Z")


def write_events(path: str | Path, events: Sequence[AnomalyEvent], threshold: PotThreshold) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            record = {
                "start": _iso(ev.start_time),
                "end": _iso(ev.end_time),
                "start_index": ev.start,
                "end_index": ev.end,
                "peak_index": ev.peak_index,
                "peak_score": round(ev.peak_score, 10),
                "channels_ranked": list(ev.channels_ranked),
                "tau": round(threshold.tau, 10),
                "fallback": threshold.fallback,
                "anomaly_type_id": ev.anomaly_type_id,
                "anomaly_type": ev.anomaly_type,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_events(path: str | Path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def threshold_dict(threshold: PotThreshold) -> dict:
    return asdict(threshold)


def write_scores(path: str | Path, scores: ScoreSeries) -> None:
    header = ["timestamp", "score", "coverage", *[f"err_{n}" for n in scores.channel_names]]
    lines = [",".join(header)]
    for i, t in enumerate(scores.timestamps):
        if not scores.scored[i]:
            cells = ["", "0"] + [""] * len(scores.channel_names)
        else:
            errs = ["" if math.isnan(e) else f"{e:.8g}" for e in scores.channel_errors[i]]
            cells = [f"{scores.scores[i]:.8g}", str(int(scores.coverage[i]))] + errs
        lines.append(",".join([f"{t:.0f}", *cells]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# percentile ground truth
# ---------------------------------------------------------------------------


def percentile_labels(frame: SeriesFrame, low: float = 0.03, high: float = 0.97) -> np.ndarray:
    """Flag timesteps where any target channel is outside its own percentile band.

    With ``k = ceil(low * N)`` observed samples on a channel, values strictly
    below the (k+1)-th smallest are low outliers; symmetrically with
    ``ceil((1 - high) * N)`` for the top.  Ties are never split, so a
    constant channel flags nothing.
    """
    labels = np.zeros(frame.T, dtype=bool)
    for c in frame.target_idx:
        obs = ~frame.missing[:, c]
        x = frame.values[obs, c]
        N = x.size
        if N == 0:
            continue
        xs = np.sort(x)
        k_lo = math.ceil(low * N - 1e-9)
        k_hi = math.ceil((1.0 - high) * N - 1e-9)
        hit = np.zeros(N, dtype=bool)
        if 0 < k_lo < N:
            hit |= x < xs[k_lo]
        if 0 < k_hi < N:
            hit |= x > xs[N - 1 - k_hi]
        labels[np.flatnonzero(obs)[hit]] = True
    return labels
