"""Beat detection, HR/HRV extraction, blocked cross-validation and metrics."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import median_filter

from .anomaly import fit_pot, flags, score
from .model import ModelConfig, train
from .series import TARGET, SeriesFrame, interpolate

logger = logging.getLogger(__name__)

MIN_IBI, MAX_IBI = 0.25, 3.0


@dataclass(frozen=True)
class BeatSeries:
    beat_times: np.ndarray

    def intervals(self) -> np.ndarray:
        """Inter-beat intervals, keeping only physiologically plausible ones."""
        ibi = np.diff(self.beat_times)
        return ibi[(ibi > MIN_IBI) & (ibi < MAX_IBI)]


def detect_beats(raw: Sequence[float], rate_hz: float, c: float = 5.0, window_s: float = 2.0,
                 refractory_s: float = 0.25) -> BeatSeries:
    """Local maxima above ``rolling median + c * rolling MAD``, one per refractory period."""
    if rate_hz < 32:
        raise ValueError(f"detect_beats: rate_hz must be >= 32, got {rate_hz}")
    x = np.asarray(raw, dtype=np.float64)
    if x.size < 3 or np.ptp(x) == 0:
        warnings.warn("detect_beats: flat signal, no beats")
        return BeatSeries(np.zeros(0))
    size = max(3, int(round(window_s * rate_hz)) | 1)
    med = median_filter(x, size=size, mode="nearest")
    mad = median_filter(np.abs(x - med), size=size, mode="nearest")
    thresh = med + c * np.maximum(mad, 1e-12)
    peak = (x[1:-1] > x[:-2]) & (x[1:-1] >= x[2:]) & (x[1:-1] > thresh[1:-1])
    cand = np.flatnonzero(peak) + 1
    # greedy by height: a taller peak suppresses anything within the refractory period
    refractory = int(np.ceil(refractory_s * rate_hz))
    kept: list[int] = []
    taken = np.zeros(x.size, dtype=bool)
    for i in cand[np.argsort(-x[cand], kind="stable")]:
        if not taken[i]:
            kept.append(i)
            taken[max(0, i - refractory + 1) : i + refractory] = True
    times = np.sort(np.array(kept, dtype=float)) / rate_hz
    return BeatSeries(times)


def rmssd(intervals: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.diff(intervals) ** 2)))


def hr_hrv_windows(beats: BeatSeries, step: float = 10.0, window: float = 60.0,
                   start: float | None = None, end: float | None = None) -> SeriesFrame:
    """HR (bpm) and RMSSD HRV (ms) over ``window``-second windows every ``step`` seconds.

    Rows are stamped with the window end.  A window needs two beats for HR
    and three for RMSSD; otherwise the cell is missing.
    """
    bt = np.asarray(beats.beat_times, dtype=float)
    if start is None:
        start = float(bt[0]) if bt.size else 0.0
    if end is None:
        end = float(bt[-1]) if bt.size else start + window
    n_rows = max(int(np.floor((end - start - window) / step)) + 1, 1)
    stamps = start + window + step * np.arange(n_rows)
    values = np.full((n_rows, 2), np.nan)
    for r, stop in enumerate(stamps):
        inside = bt[(bt >= stop - window) & (bt < stop)]
        ibi = np.diff(inside)
        ibi = ibi[(ibi > MIN_IBI) & (ibi < MAX_IBI)]
        if ibi.size >= 1:
            values[r, 0] = 60.0 / ibi.mean()
        if ibi.size >= 2:
            values[r, 1] = 1000.0 * rmssd(ibi)
    return SeriesFrame(stamps, values, np.isnan(values), (TARGET, TARGET), ("HR", "HRV"), step)


# ---------------------------------------------------------------------------
# metrics and cross-validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldResult:
    fold: int
    start: int
    stop: int
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float | None:
        if self.tp + self.fn == 0:
            return None
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def fpr(self) -> float:
        return self.fp / (self.fp + self.tn) if self.fp + self.tn else 0.0

    @property
    def fnr(self) -> float:
        return self.fn / (self.fn + self.tp) if self.fn + self.tp else 0.0


def confusion(pred: np.ndarray, labels: np.ndarray) -> tuple[int, int, int, int]:
    pred = np.asarray(pred, bool)
    labels = np.asarray(labels, bool)
    return (int((pred & labels).sum()), int((pred & ~labels).sum()),
            int((~pred & ~labels).sum()), int((~pred & labels).sum()))


@dataclass
class EvalReport:
    folds: list[FoldResult]
    excluded: list[int] = field(default_factory=list)

    def _stat(self, name: str) -> tuple[float, float]:
        vals = [getattr(f, name) for f in self.folds if f.fold not in self.excluded]
        vals = [v for v in vals if v is not None]
        if not vals:
            return float("nan"), float("nan")
        return float(np.mean(vals)), float(np.std(vals))

    @property
    def f1(self) -> tuple[float, float]:
        return self._stat("f1")

    @property
    def fpr(self) -> tuple[float, float]:
        return self._stat("fpr")

    @property
    def fnr(self) -> tuple[float, float]:
        return self._stat("fnr")

    def to_dict(self) -> dict:
        out = {"folds": [], "excluded_folds": self.excluded}
        for f in self.folds:
            d = asdict(f)
            d.update(precision=f.precision, recall=f.recall, f1=f.f1, fpr=f.fpr, fnr=f.fnr)
            out["folds"].append(d)
        for name in ("precision", "recall", "f1", "fpr", "fnr"):
            mean, std = self._stat(name)
            out[name] = {"mean": mean, "std": std}
        return out

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def fold_blocks(T: int, folds: int) -> list[tuple[int, int]]:
    """Contiguous, disjoint blocks covering [0, T)."""
    edges = np.linspace(0, T, folds + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


Detector = Callable[[list[SeriesFrame], SeriesFrame], np.ndarray]


def kfold_f1(frame: SeriesFrame, labels: np.ndarray, detector: Detector, folds: int = 5) -> EvalReport:
    """Blocked k-fold: each contiguous block is tested once, trained on the rest.

    ``detector(train_segments, test_frame)`` returns boolean flags for every
    row of ``test_frame``.
    """
    labels = np.asarray(labels, dtype=bool)
    if labels.shape != (frame.T,):
        raise ValueError(f"labels have shape {labels.shape}, frame has {frame.T} rows")
    results, excluded = [], []
    for i, (a, b) in enumerate(fold_blocks(frame.T, folds)):
        train_parts = [frame.slice_rows(s, e) for s, e in ((0, a), (b, frame.T)) if e > s]
        pred = np.asarray(detector(train_parts, frame.slice_rows(a, b)), dtype=bool)
        if pred.shape != (b - a,):
            raise ValueError(f"detector returned {pred.shape} flags for a {b - a}-row block")
        res = FoldResult(i, a, b, *confusion(pred, labels[a:b]))
        if res.f1 is None:
            logger.warning("fold %d has no positive labels; F1 undefined, fold excluded", i)
            excluded.append(i)
        results.append(res)
    return EvalReport(results, excluded)


@dataclass
class ModelDetector:
    """Train the imputation model, calibrate POT on training scores, flag the test block."""

    cfg: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 2
    lr: float = 5e-4
    batch_size: int = 32
    q: float = 1e-3
    u_quantile: float = 0.98
    interpolation: str = "nearest_window"
    max_gap: int = 5
    force_fallback: bool = False
    max_windows: int | None = None

    def __call__(self, train_parts: list[SeriesFrame], test: SeriesFrame) -> np.ndarray:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            parts = [interpolate(p, self.interpolation, self.max_gap) for p in train_parts]
            test = interpolate(test, self.interpolation, self.max_gap)
        parts = [p for p in parts if p.T >= self.cfg.window]
        model = train(parts, self.cfg, self.epochs, self.lr, batch_size=self.batch_size, max_windows=self.max_windows)
        calib = np.concatenate([score(p, model).values() for p in parts])
        threshold = fit_pot(calib, self.q, self.u_quantile, force_fallback=self.force_fallback)
        self.last_threshold = threshold
        self.last_model = model
        return flags(score(test, model), threshold.tau)
