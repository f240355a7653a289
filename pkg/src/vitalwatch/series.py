"""Series data model, CSV ingestion, gap handling and interpolation metrics."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

TARGET = "target"
CONTEXT = "context"
IGNORE = "ignore"

MISSING_SENTINEL = np.nan


class SeriesError(ValueError):
    """Malformed input series or schema."""


@dataclass(frozen=True)
class SeriesFrame:
    """Uniformly sampled multivariate series with a per-cell missing mask.

    ``values`` is T x C; entries under ``missing`` hold :data:`MISSING_SENTINEL`
    and must never be read.  Target channels come first in ``roles`` only by
    convention of the producer; use :attr:`target_idx`/:attr:`context_idx`.
    """

    timestamps: np.ndarray
    values: np.ndarray
    missing: np.ndarray
    roles: tuple[str, ...]
    channel_names: tuple[str, ...]
    sample_period: float

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64)
        vals = np.array(self.values, dtype=np.float64)
        miss = np.asarray(self.missing, dtype=bool)
        if vals.ndim != 2 or miss.shape != vals.shape or ts.shape != (vals.shape[0],):
            raise SeriesError(f"inconsistent shapes: timestamps {ts.shape}, values {vals.shape}, mask {miss.shape}")
        if len(self.roles) != vals.shape[1] or len(self.channel_names) != vals.shape[1]:
            raise SeriesError("roles/channel_names must have one entry per column")
        if any(r not in (TARGET, CONTEXT) for r in self.roles):
            raise SeriesError(f"unknown role in {self.roles}")
        if TARGET not in self.roles:
            raise SeriesError("frame needs at least one target channel")
        if ts.size > 1 and np.any(np.diff(ts) <= 0):
            raise SeriesError("timestamps must be strictly increasing")
        vals[miss] = MISSING_SENTINEL
        vals.setflags(write=False)
        miss = miss.copy()
        miss.setflags(write=False)
        ts = ts.copy()
        ts.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "missing", miss)
        object.__setattr__(self, "roles", tuple(self.roles))
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def target_idx(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == TARGET]

    @property
    def context_idx(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == CONTEXT]

    @property
    def n_targets(self) -> int:
        return len(self.target_idx)

    @property
    def n_context(self) -> int:
        return len(self.context_idx)

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Values with masked cells replaced by ``fill`` (safe for arithmetic)."""
        return np.where(self.missing, fill, self.values)

    def slice_rows(self, start: int, stop: int) -> "SeriesFrame":
        return replace(
            self,
            timestamps=self.timestamps[start:stop],
            values=self.values[start:stop],
            missing=self.missing[start:stop],
        )

    def select_channels(self, names: Sequence[str]) -> "SeriesFrame":
        idx = [self.channel_names.index(n) for n in names]
        return replace(
            self,
            values=self.values[:, idx],
            missing=self.missing[:, idx],
            roles=tuple(self.roles[i] for i in idx),
            channel_names=tuple(names),
        )

    def with_values(self, values: np.ndarray, missing: np.ndarray) -> "SeriesFrame":
        return replace(self, values=values, missing=missing)


@dataclass(frozen=True)
class Gap:
    channel: int
    start: int
    length: int


@dataclass(frozen=True)
class WindowSpec:
    """Sliding-window geometry: ``length`` = past_len + future_len samples."""

    length: int
    stride: int = 1
    past_len: int | None = None
    future_len: int = 1

    def __post_init__(self):
        past = self.length - self.future_len if self.past_len is None else self.past_len
        object.__setattr__(self, "past_len", past)
        if self.stride < 1:
            raise SeriesError(f"stride must be >= 1, got {self.stride}")
        if self.future_len < 1:
            raise SeriesError(f"future_len must be >= 1, got {self.future_len}")
        if past < 0 or past + self.future_len != self.length:
            raise SeriesError(
                f"past_len ({past}) + future_len ({self.future_len}) must equal length ({self.length})"
            )


@dataclass(frozen=True)
class Window:
    """View of ``frame`` rows [start, start + length)."""

    frame: SeriesFrame
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length

    @property
    def values(self) -> np.ndarray:
        return self.frame.values[self.start : self.stop]

    @property
    def missing(self) -> np.ndarray:
        return self.frame.missing[self.start : self.stop]

    @property
    def time_range(self) -> tuple[float, float]:
        return float(self.frame.timestamps[self.start]), float(self.frame.timestamps[self.stop - 1])


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def parse_keyvalue(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SeriesError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_schema(path: str | Path) -> dict[str, str]:
    """Read a channel-role config (``channel.HR = target``)."""
    entries = parse_keyvalue(Path(path).read_text(encoding="utf-8"))
    schema = {}
    for key, role in entries.items():
        if not key.startswith("channel."):
            continue
        role = role.lower()
        if role not in (TARGET, CONTEXT, IGNORE):
            raise SeriesError(f"{path}: channel {key[8:]!r} has unknown role {role!r}")
        schema[key[len("channel.") :]] = role
    return schema


def write_schema(path: str | Path, frame: SeriesFrame) -> None:
    lines = [f"channel.{name} = {role}" for name, role in zip(frame.channel_names, frame.roles)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_time(text: str, row: int) -> float:
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(text.replace("Z", "+00:00")).timestamp()
    except ValueError:
        raise SeriesError(f"row {row}: unparseable timestamp {text!r}") from None


def _parse_cell(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        return math.nan
    return v if math.isfinite(v) else math.nan


def ingest_csv(path: str | Path, schema: dict[str, str]) -> SeriesFrame:
    """Load a CSV onto a uniform grid at its modal row spacing.

    Empty or non-numeric cells become missing; grid points with no row get an
    all-missing row.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SeriesError(f"{path}: empty file") from None
        names = [h.strip() for h in header[1:]]
        unknown = [n for n in names if n not in schema]
        if unknown:
            raise SeriesError(f"{path}: no role given for columns {unknown}")
        keep = [i for i, n in enumerate(names) if schema[n] != IGNORE]
        if not any(schema[names[i]] == TARGET for i in keep):
            raise SeriesError(f"{path}: schema assigns zero target channels")
        times, rows = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            t = _parse_time(row[0], row_no)
            if times and t <= times[-1]:
                raise SeriesError(f"{path}: non-monotonic timestamp at row {row_no}")
            cells = row[1:] + [""] * (len(names) - len(row) + 1)
            times.append(t)
            rows.append([_parse_cell(cells[i]) for i in keep])

    chan_names = tuple(names[i] for i in keep)
    roles = tuple(schema[n] for n in chan_names)
    if not times:
        raise SeriesError(f"{path}: no data rows")
    raw = np.array(rows, dtype=np.float64).reshape(len(times), len(keep))
    ts = np.array(times)
    if ts.size == 1:
        period = 1.0
        grid_idx = np.zeros(1, dtype=int)
        n_rows = 1
    else:
        spacing = Counter(np.round(np.diff(ts), 9).tolist())
        period = max(spacing.items(), key=lambda kv: (kv[1], -kv[0]))[0]
        grid_idx = np.round((ts - ts[0]) / period).astype(int)
        if np.any(np.diff(grid_idx) <= 0):
            raise SeriesError(f"{path}: two rows fall on the same {period}s grid point")
        n_rows = int(grid_idx[-1]) + 1
    values = np.full((n_rows, len(keep)), np.nan)
    values[grid_idx] = raw
    timestamps = ts[0] + period * np.arange(n_rows)
    return SeriesFrame(timestamps, values, np.isnan(values), roles, chan_names, float(period))


def write_csv(path: str | Path, frame: SeriesFrame) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *frame.channel_names])
        for t, row, miss in zip(frame.timestamps, frame.values, frame.missing):
            w.writerow([f"{t:.0f}" if float(t).is_integer() else repr(float(t))]
                       + ["" if m else f"{v:.6g}" for v, m in zip(row, miss)])


# ---------------------------------------------------------------------------
# gaps and interpolation
# ---------------------------------------------------------------------------


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """(start, length) of maximal True runs in a 1-D bool array."""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return [(int(s), int(e - s)) for s, e in zip(edges[::2], edges[1::2])]


def find_gaps(frame: SeriesFrame) -> list[Gap]:
    return [
        Gap(c, start, length)
        for c in range(frame.values.shape[1])
        for start, length in _runs(frame.missing[:, c])
    ]


def _nearest_neighbor_fill(col: np.ndarray, observed: np.ndarray, start: int, length: int) -> None:
    obs_idx = np.flatnonzero(observed)
    for t in range(start, start + length):
        pos = np.searchsorted(obs_idx, t)
        left = obs_idx[pos - 1] if pos > 0 else None
        right = obs_idx[pos] if pos < obs_idx.size else None
        if left is None:
            col[t] = col[right]
        elif right is None or t - left <= right - t:
            col[t] = col[left]
        else:
            col[t] = col[right]


def _find_donor(observed: np.ndarray, start: int, length: int) -> int | None:
    """Start of the fully observed segment of ``length`` whose centre is nearest the gap's."""
    T = observed.size
    if length > T:
        return None
    # counts of observed samples in every length-g window
    csum = np.concatenate([[0], np.cumsum(observed)])
    full = np.flatnonzero(csum[length:] - csum[:-length] == length)
    if full.size == 0:
        return None
    dist = np.abs(full - start)  # same length, so centre distance == start distance
    return int(full[np.argmin(dist)])  # argmin picks the earliest on ties


def interpolate(frame: SeriesFrame, method: str = "nearest_window", max_gap: int = 5) -> SeriesFrame:
    """Fill gaps of at most ``max_gap`` samples, per channel.

    ``nearest_neighbor`` copies the closest observed value (earlier wins ties).
    ``nearest_window`` copies the closest fully observed segment of the same
    length and shifts it so its ends meet the observed neighbours of the gap.
    """
    if max_gap < 0:
        raise SeriesError(f"max_gap must be >= 0, got {max_gap}")
    if method not in ("nearest_neighbor", "nearest_window"):
        raise SeriesError(f"unknown interpolation method {method!r}")
    values = frame.values.copy()
    missing = frame.missing.copy()
    for gap in find_gaps(frame):
        if gap.length > max_gap:
            continue
        c, s, g = gap.channel, gap.start, gap.length
        col = values[:, c]
        observed = ~frame.missing[:, c]
        if not observed.any():
            continue
        donor = _find_donor(observed, s, g) if method == "nearest_window" else None
        if method == "nearest_window" and donor is None:
            warnings.warn(f"channel {frame.channel_names[c]}: no donor segment for gap at {s}; using nearest neighbour")
        if donor is None:
            _nearest_neighbor_fill(col, observed, s, g)
        else:
            segment = col[donor : donor + g].copy()
            corrections = []
            if s > 0:
                corrections.append(col[s - 1] - segment[0])
            if s + g < col.size:
                corrections.append(col[s + g] - segment[-1])
            offset = float(np.mean(corrections)) if corrections else 0.0
            col[s : s + g] = segment + offset
        missing[s : s + g, c] = False
    return frame.with_values(values, missing)


# ---------------------------------------------------------------------------
# quality metrics
# ---------------------------------------------------------------------------


def mase(predicted, actual, training_ref) -> float:
    """Mean absolute scaled error; 2-D inputs average the per-column values."""
    p = np.asarray(predicted, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    r = np.asarray(training_ref, dtype=np.float64)
    if p.shape != a.shape or p.shape[0] < 2:
        raise SeriesError(f"mase: predicted {p.shape} and actual {a.shape} must match with length >= 2")
    if r.shape[0] < 2:
        raise SeriesError("mase: training_ref needs at least 2 samples")
    if p.ndim == 1:
        p, a, r = p[:, None], a[:, None], r[:, None]
    scale = np.mean(np.abs(np.diff(r, axis=0)), axis=0)
    if np.any(scale == 0):
        raise ZeroDivisionError("mase: naive forecast error of training_ref is zero; scale undefined")
    return float(np.mean(np.mean(np.abs(p - a), axis=0) / scale))


def dtw(a, b) -> float:
    """Classic DTW with |a_i - b_j| cost and the symmetric (1,0)/(0,1)/(1,1) steps."""
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.size == 0 or y.size == 0:
        raise SeriesError("dtw: series must be non-empty")
    cost = np.abs(x[:, None] - y[None, :])
    acc = np.full((x.size + 1, y.size + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, x.size + 1):
        row_cost = cost[i - 1]
        prev = acc[i - 1]
        cur = acc[i]
        for j in range(1, y.size + 1):
            cur[j] = row_cost[j - 1] + min(prev[j], cur[j - 1], prev[j - 1])
    return float(acc[-1, -1])


def sliding_windows(frame: SeriesFrame, spec: WindowSpec) -> list[Window]:
    K, T = spec.length, frame.T
    if K > T:
        warnings.warn(f"window length {K} exceeds series length {T}; no windows")
        return []
    return [Window(frame, s, K) for s in range(0, T - K + 1, spec.stride)]
