"""Synthetic home-monitoring patients with known injected anomalies.

Signals are generated at 1-minute resolution.  Vital signs follow a
circadian curve plus a linear response to step count; the room CO2 level
follows occupancy (high overnight).  Injected episodes perturb the vitals
multiplicatively or additively and are returned as ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .series import CONTEXT, TARGET, SeriesFrame, parse_keyvalue

MINUTE = 60.0
DAY = 1440
INJECTION_TYPES = ("hyper_hypotension", "abnormal_hrv", "stress", "sleep_quality")


@dataclass(frozen=True)
class PatientProfile:
    hr_base: float = 70.0
    hr_circadian: float = 10.0
    hr_per_step: float = 0.2
    hr_noise: float = 1.5
    hrv_base: float = 45.0
    hrv_circadian: float = -10.0
    hrv_per_step: float = -0.08
    hrv_noise: float = 2.5
    include_bp: bool = False
    sbp_base: float = 125.0
    dbp_base: float = 80.0
    bp_circadian: float = 8.0
    bp_noise: float = 2.0
    include_context: bool = True
    co2_base: float = 500.0
    co2_night: float = 400.0
    co2_noise: float = 10.0
    activity_bouts_per_day: float = 4.0
    bout_minutes_min: int = 10
    bout_minutes_max: int = 40
    bout_steps_min: float = 60.0
    bout_steps_max: float = 120.0
    noise_scale: float = 1.0
    short_dropouts_per_day: float = 3.0
    long_dropouts_per_day: float = 0.2
    stress_episodes: int = 0
    stress_minutes_min: int = 8
    stress_minutes_max: int = 15
    stress_hr_factor: float = 1.3
    stress_hrv_factor: float = 0.5
    bp_episodes: int = 0
    hrv_episodes: int = 0
    sleep_episodes: int = 0
    start: float = 1_700_000_000.0

    @classmethod
    def from_text(cls, text: str) -> "PatientProfile":
        raw = parse_keyvalue(text)
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            key = key.removeprefix("profile.")
            if key not in kinds:
                raise ValueError(f"unknown profile key {key!r}")
            kind = kinds[key]
            if kind in ("bool", bool):
                kwargs[key] = value.lower() in ("1", "true", "yes", "on")
            elif kind in ("int", int):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "PatientProfile":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class InjectedEvent:
    kind: str
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length


def circadian(minutes: np.ndarray) -> np.ndarray:
    """Daytime level in [0, 1]; peaks mid-afternoon, lowest at 03:00."""
    hours = (minutes % DAY) / 60.0
    return 0.5 + 0.5 * np.cos(2 * np.pi * (hours - 15.0) / 24.0)


def _channel_layout(profile: PatientProfile) -> tuple[list[str], list[str]]:
    names = ["HR", "HRV"] + (["SBP", "DBP"] if profile.include_bp else [])
    roles = [TARGET] * len(names)
    if profile.include_context:
        names += ["steps", "CO2"]
        roles += [CONTEXT, CONTEXT]
    return names, roles


def baseline(profile: PatientProfile, days: float, steps: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Noise-free signals for the given step trace (none = no activity)."""
    T = int(round(days * DAY))
    t = np.arange(T, dtype=float)
    c = circadian(t) - 0.5
    steps = np.zeros(T) if steps is None else steps
    out = {
        "HR": profile.hr_base + profile.hr_circadian * c + profile.hr_per_step * steps,
        "HRV": profile.hrv_base + profile.hrv_circadian * c + profile.hrv_per_step * steps,
    }
    if profile.include_bp:
        out["SBP"] = profile.sbp_base + profile.bp_circadian * c
        out["DBP"] = profile.dbp_base + 0.6 * profile.bp_circadian * c
    if profile.include_context:
        out["steps"] = steps
        out["CO2"] = profile.co2_base + profile.co2_night * (0.5 - c)
    return out


def _activity(profile: PatientProfile, T: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    steps = np.zeros(T)
    active = np.zeros(T, dtype=bool)
    n_days = int(np.ceil(T / DAY))
    for day in range(n_days):
        for _ in range(rng.poisson(profile.activity_bouts_per_day)):
            start = day * DAY + int(rng.integers(8 * 60, 21 * 60))
            length = int(rng.integers(profile.bout_minutes_min, profile.bout_minutes_max + 1))
            stop = min(start + length, T)
            if start >= T:
                continue
            steps[start:stop] = rng.uniform(profile.bout_steps_min, profile.bout_steps_max, stop - start)
            active[start:stop] = True
    return steps, active


def _place(rng, T, length, busy, window=(9 * 60, 20 * 60), night=False) -> int | None:
    for _ in range(200):
        day = int(rng.integers(0, max(T // DAY, 1)))
        if night:
            offset = int(rng.integers(0, 5 * 60))
        else:
            offset = int(rng.integers(*window))
        start = day * DAY + offset
        if start + length > T:
            continue
        # keep a margin so episodes never touch each other or an activity bout
        lo, hi = max(start - 30, 0), min(start + length + 30, T)
        if not busy[lo:hi].any():
            return start
    return None


def synth_patient(profile: PatientProfile, days: float, seed: int) -> tuple[SeriesFrame, list[InjectedEvent]]:
    """Generate a 1-minute frame plus the list of injected episodes."""
    rng = np.random.default_rng(seed)
    T = int(round(days * DAY))
    steps, active = _activity(profile, T, rng)
    sig = baseline(profile, days, steps)
    ns = profile.noise_scale
    noise = {
        "HR": profile.hr_noise,
        "HRV": profile.hrv_noise,
        "SBP": profile.bp_noise,
        "DBP": profile.bp_noise,
        "CO2": profile.co2_noise,
    }
    for name in list(sig):
        if name in noise and ns > 0:
            sig[name] = sig[name] + rng.normal(0.0, noise[name] * ns, T)
        elif name == "steps" and ns > 0:
            sig[name] = np.where(active, sig[name] + rng.normal(0, 5 * ns, T), 0.0).clip(min=0)

    busy = active.copy()
    events: list[InjectedEvent] = []
    plan = [("stress", profile.stress_episodes), ("hyper_hypotension", profile.bp_episodes if profile.include_bp else 0),
            ("abnormal_hrv", profile.hrv_episodes), ("sleep_quality", profile.sleep_episodes)]
    for kind, count in plan:
        for _ in range(count):
            length = int(rng.integers(profile.stress_minutes_min, profile.stress_minutes_max + 1))
            if kind == "sleep_quality":
                length *= 3
            start = _place(rng, T, length, busy, night=(kind == "sleep_quality"))
            if start is None:
                continue
            sl = slice(start, start + length)
            busy[sl] = True
            if kind == "stress":
                sig["HR"][sl] *= profile.stress_hr_factor
                sig["HRV"][sl] *= profile.stress_hrv_factor
            elif kind == "hyper_hypotension":
                sig["SBP"][sl] += 30.0
                sig["DBP"][sl] += 18.0
            elif kind == "abnormal_hrv":
                sig["HRV"][sl] *= 2.0
            else:
                sig["HR"][sl] += 12.0
                sig["HRV"][sl] *= 0.6
            events.append(InjectedEvent(kind, start, length))
    events.sort(key=lambda e: e.start)

    names, roles = _channel_layout(profile)
    values = np.column_stack([sig[n] for n in names])
    missing = np.zeros_like(values, dtype=bool)
    n_days = T / DAY
    wearable = [i for i, n in enumerate(names) if n not in ("CO2",)]
    for _ in range(rng.poisson(profile.short_dropouts_per_day * n_days)):
        s = int(rng.integers(0, T))
        missing[s : s + int(rng.integers(1, 6)), wearable] = True
    for _ in range(rng.poisson(profile.long_dropouts_per_day * n_days)):
        s = int(rng.integers(0, T))
        missing[s : s + int(rng.integers(10, 61)), wearable] = True
    timestamps = profile.start + MINUTE * np.arange(T)
    return SeriesFrame(timestamps, values, missing, tuple(roles), tuple(names), MINUTE), events


def event_labels(T: int, events: list[InjectedEvent]) -> np.ndarray:
    labels = np.zeros(T, dtype=bool)
    for ev in events:
        labels[ev.start : ev.stop] = True
    return labels


def activity_fixture(days: float, seed: int, include_context: bool = True, noise: float = 1.0):
    """HR = 70 + 30 * activity_flag (+ noise); the flag is the only context channel."""
    rng = np.random.default_rng(seed)
    T = int(round(days * DAY))
    flag = np.zeros(T)
    for day in range(int(np.ceil(days))):
        for _ in range(6):
            s = day * DAY + int(rng.integers(7 * 60, 22 * 60))
            flag[s : min(s + int(rng.integers(15, 45)), T)] = 1.0
    hr = 70.0 + 30.0 * flag + rng.normal(0, noise, T)
    names, roles = ["HR"], [TARGET]
    cols = [hr]
    if include_context:
        names.append("activity")
        roles.append(CONTEXT)
        cols.append(flag)
    values = np.column_stack(cols)
    frame = SeriesFrame(1_700_000_000.0 + MINUTE * np.arange(T), values, np.zeros_like(values, bool),
                        tuple(roles), tuple(names), MINUTE)
    return frame, flag.astype(bool)
