"""Per-event report bundles: explanation prompt, CSV excerpt and a figure."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .series import SeriesFrame

EXCERPT_MINUTES = 120


@dataclass
class EventView:
    """The subset of an event-log record the report needs."""

    start: int
    end: int
    peak_index: int
    peak_score: float
    tau: float
    channels_ranked: tuple[str, ...]
    anomaly_type: str
    fallback: bool = False

    @classmethod
    def from_record(cls, rec: dict) -> "EventView":
        return cls(
            int(rec["start_index"]),
            int(rec["end_index"]),
            int(rec.get("peak_index", rec["start_index"])),
            float(rec["peak_score"]),
            float(rec["tau"]),
            tuple(rec["channels_ranked"]),
            str(rec.get("anomaly_type", rec.get("anomaly_type_id", ""))),
            bool(rec.get("fallback", False)),
        )


def _clock(t: float) -> str:
    return datetime.fromtimestamp(t, tz=timezone.utc).strftime("%Y-%m-%d %H:%M")


def excerpt_rows(frame: SeriesFrame, ev: EventView, minutes: int = EXCERPT_MINUTES) -> tuple[int, int]:
    rows = max(1, int(round(minutes * 60.0 / frame.sample_period)))
    stop = min(frame.T, ev.end + 1)
    start = max(0, stop - rows)
    return start, stop


def build_prompt(ev: EventView, frame: SeriesFrame, patient: dict[str, str], minutes: int = EXCERPT_MINUTES) -> str:
    a, b = excerpt_rows(frame, ev, minutes)
    lines = [
        "You are assisting a clinician who reviews automatically flagged anomalies in home-monitoring data.",
        "",
        "PATIENT",
    ]
    lines += [f"- {k}: {v}" for k, v in sorted(patient.items())] or ["- (no metadata supplied)"]
    t0, t1 = frame.timestamps[ev.start], frame.timestamps[ev.end]
    lines += [
        "",
        "ANOMALY",
        f"- type monitored: {ev.anomaly_type}",
        f"- time range: {_clock(t0)} to {_clock(t1)} UTC ({ev.end - ev.start + 1} samples)",
        f"- peak score {ev.peak_score:.3g} against threshold {ev.tau:.3g}"
        + (" (empirical-quantile fallback)" if ev.fallback else ""),
        f"- channels by contribution: {', '.join(ev.channels_ranked)}",
        "",
        f"SIGNAL EXCERPT (last {b - a} samples up to the end of the anomaly; blank = not recorded)",
        "time," + ",".join(frame.channel_names),
    ]
    for r in range(a, b):
        cells = ["" if frame.missing[r, c] else f"{frame.values[r, c]:.4g}" for c in range(frame.values.shape[1])]
        stamp = datetime.fromtimestamp(frame.timestamps[r], tz=timezone.utc).strftime("%H:%M")
        marker = "*" if ev.start <= r <= ev.end else ""
        lines.append(f"{stamp}{marker}," + ",".join(cells))
    lines += [
        "(rows marked * fall inside the flagged interval)",
        "",
        "TASK",
        "Read the signals above. Say which readings are unusual for this patient, what physiological or",
        "environmental explanation fits them, and what values you would have expected instead. Use",
        "clinical terminology, keep it under 200 words, and state if a sensor fault is more plausible.",
    ]
    return "\n".join(lines) + "\n"


def write_excerpt_csv(path: Path, frame: SeriesFrame, ev: EventView, minutes: int = EXCERPT_MINUTES) -> None:
    a, b = excerpt_rows(frame, ev, minutes)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "in_event", *frame.channel_names])
        for r in range(a, b):
            w.writerow([f"{frame.timestamps[r]:.0f}", int(ev.start <= r <= ev.end)]
                       + ["" if frame.missing[r, c] else f"{frame.values[r, c]:.6g}" for c in range(frame.values.shape[1])])


def plot_event(path: Path, frame: SeriesFrame, ev: EventView, minutes: int = EXCERPT_MINUTES) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    a, b = excerpt_rows(frame, ev, minutes)
    t = (frame.timestamps[a:b] - frame.timestamps[ev.start]) / 60.0
    n = frame.values.shape[1]
    fig, axes = plt.subplots(n, 1, figsize=(7, 1.4 * n + 0.6), sharex=True, squeeze=False)
    for c, ax in enumerate(axes[:, 0]):
        y = np.where(frame.missing[a:b, c], np.nan, frame.values[a:b, c])
        ax.plot(t, y, lw=0.9, color="k" if frame.roles[c] == "target" else "0.5")
        ax.axvspan(0, (frame.timestamps[ev.end] - frame.timestamps[ev.start]) / 60.0 + 1e-9, color="tab:red", alpha=0.2)
        ax.set_ylabel(frame.channel_names[c], fontsize=8)
        ax.tick_params(labelsize=7)
    axes[-1, 0].set_xlabel("minutes from anomaly start", fontsize=8)
    fig.suptitle(f"{ev.anomaly_type}: peak {ev.peak_score:.3g} (tau {ev.tau:.3g})", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_bundle(outdir: str | Path, events: Sequence[EventView], frame: SeriesFrame,
                 patient: dict[str, str], figures: bool = True) -> list[Path]:
    """Write prompt / CSV / PNG per event plus ``summary.txt``; returns the files written."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, ev in enumerate(events):
        stem = out / f"event_{i:03d}"
        prompt = stem.with_suffix(".prompt.txt")
        prompt.write_text(build_prompt(ev, frame, patient), encoding="utf-8")
        csv_path = stem.with_suffix(".csv")
        write_excerpt_csv(csv_path, frame, ev)
        written += [prompt, csv_path]
        if figures:
            png = stem.with_suffix(".png")
            plot_event(png, frame, ev)
            written.append(png)
    summary = out / "summary.txt"
    if events:
        by_type: dict[str, int] = {}
        for ev in events:
            by_type[ev.anomaly_type] = by_type.get(ev.anomaly_type, 0) + 1
        text = f"{len(events)} event(s): " + ", ".join(f"{k}={v}" for k, v in sorted(by_type.items()))
    else:
        text = "0 events: nothing to report"
    summary.write_text(text + "\n", encoding="utf-8")
    written.append(summary)
    return written
