import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitalwatch.series import (
    CONTEXT,
    TARGET,
    Gap,
    SeriesError,
    SeriesFrame,
    WindowSpec,
    dtw,
    find_gaps,
    ingest_csv,
    interpolate,
    load_schema,
    mase,
    sliding_windows,
)


def make_frame(values, missing=None, roles=None):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if missing is None:
        missing = np.isnan(values)
    roles = roles or (TARGET,) * values.shape[1]
    names = tuple(f"c{i}" for i in range(values.shape[1]))
    return SeriesFrame(np.arange(values.shape[0]) * 60.0, values, missing, roles, names, 60.0)


# --- ingestion ----------------------------------------------------------------


def test_empty_cell_is_missing(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("timestamp,HR,CO2\n0,70,400\n60,,410\n120,72,420\n")
    f = ingest_csv(p, {"HR": TARGET, "CO2": CONTEXT})
    assert f.missing[1, 0] and not f.missing[1, 1]
    assert f.roles == (TARGET, CONTEXT)


def test_grid_row_inserted_at_modal_spacing(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("timestamp,HR\n0,70\n60,71\n180,73\n")
    f = ingest_csv(p, {"HR": TARGET})
    assert f.T == 4
    assert f.timestamps.tolist() == [0, 60, 120, 180]
    assert f.missing[2].all()
    assert f.sample_period == 60


def test_non_numeric_cell_and_iso_timestamps(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text('timestamp,HR\n2024-01-01T00:00:00Z,70\n2024-01-01T00:01:00Z,"n/a"\n')
    f = ingest_csv(p, {"HR": TARGET})
    assert f.missing[:, 0].tolist() == [False, True]
    assert f.timestamps[1] - f.timestamps[0] == 60


def test_home_style_layout(tmp_path):
    vitals = ["HR", "HRV", "CVRR", "RR", "SpO2", "SBP", "DBP", "Steps", "Sleep"]
    ambient = ["Temp", "Hum", "CO2", "Press", "Lux", "TVOC", "Room"]
    header = ["timestamp", *vitals, *ambient]
    rows = [",".join(str(v) for v in [60 * i] + [1.0] * 16) for i in range(5)]
    p = tmp_path / "home.csv"
    p.write_text(",".join(header) + "\n" + "\n".join(rows) + "\n")
    schema = {**{v: TARGET for v in vitals}, **{a: CONTEXT for a in ambient}}
    f = ingest_csv(p, schema)
    assert (f.n_targets, f.n_context) == (9, 7)


def test_rejects_non_monotonic(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("timestamp,HR\n0,1\n120,2\n60,3\n")
    with pytest.raises(SeriesError, match="row 4"):
        ingest_csv(p, {"HR": TARGET})


def test_rejects_zero_targets(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("timestamp,HR\n0,1\n")
    with pytest.raises(SeriesError, match="zero target"):
        ingest_csv(p, {"HR": CONTEXT})


def test_schema_file_and_ignore(tmp_path):
    cfg = tmp_path / "roles.cfg"
    cfg.write_text("# roles\nchannel.HR = target\nchannel.CO2 = context\nchannel.junk = ignore\n")
    schema = load_schema(cfg)
    p = tmp_path / "a.csv"
    p.write_text("timestamp,HR,junk,CO2\n0,1,x,3\n60,2,y,4\n")
    f = ingest_csv(p, schema)
    assert f.channel_names == ("HR", "CO2")


def test_masked_cells_hold_sentinel():
    f = make_frame([1.0, 2.0, 3.0], missing=np.array([[False], [True], [False]]))
    assert math.isnan(f.values[1, 0])
    assert f.filled()[1, 0] == 0.0


# --- gaps ---------------------------------------------------------------------


def test_find_gaps():
    m = np.zeros((8, 2), bool)
    m[2:5, 0] = True
    assert find_gaps(make_frame(np.zeros((8, 2)), m)) == [Gap(0, 2, 3)]
    assert find_gaps(make_frame(np.zeros((8, 2)))) == []
    m[6, 0] = True
    assert len(find_gaps(make_frame(np.zeros((8, 2)), m))) == 2


@given(st.lists(st.lists(st.booleans(), min_size=1, max_size=3), min_size=1, max_size=30).filter(
    lambda rows: len({len(r) for r in rows}) == 1))
def test_gaps_cover_mask_exactly(rows):
    mask = np.array(rows)
    f = make_frame(np.zeros(mask.shape), mask)
    rebuilt = np.zeros_like(mask)
    for g in find_gaps(f):
        assert g.length >= 1
        assert not rebuilt[g.start : g.start + g.length, g.channel].any()
        rebuilt[g.start : g.start + g.length, g.channel] = True
    assert (rebuilt == mask).all()


# --- interpolation --------------------------------------------------------------


def test_nearest_neighbor_earlier_wins():
    f = make_frame([1.0, np.nan, 3.0])
    out = interpolate(f, "nearest_neighbor")
    assert out.values[:, 0].tolist() == [1.0, 1.0, 3.0]
    assert not out.missing.any()


def test_long_gap_untouched():
    v = np.arange(20.0)
    v[5:11] = np.nan
    out = interpolate(make_frame(v), "nearest_window", max_gap=5)
    assert out.missing[5:11, 0].all()


def test_nearest_window_copies_shape_with_offset():
    v = np.array([0, 1, 2, 3, 10, 11, np.nan, np.nan, 14, 15], dtype=float)
    out = interpolate(make_frame(v), "nearest_window")
    # nearest full donor of length 2 is rows 4-5 ([10, 11]); corrections 11-10=1 and 14-11=3 -> offset 2
    assert out.values[6:8, 0].tolist() == [12.0, 13.0]


def test_nearest_window_edge_gap_is_one_sided():
    v = np.array([np.nan, np.nan, 5, 6, 7, 8], dtype=float)
    out = interpolate(make_frame(v), "nearest_window")
    # donor rows 2-3 = [5, 6]; only the right correction applies: 5 - 6 = -1
    assert out.values[:2, 0].tolist() == [4.0, 5.0]


def test_nearest_window_without_donor_falls_back():
    # no fully observed run of two samples exists anywhere
    v = np.array([1, np.nan, np.nan, 4, np.nan, 6], dtype=float)
    with pytest.warns(UserWarning, match="nearest neighbour"):
        out = interpolate(make_frame(v), "nearest_window")
    assert out.values[1:3, 0].tolist() == [1.0, 4.0]
    assert not out.missing.any()


def test_max_gap_zero_is_identity():
    v = np.array([1, np.nan, 3, np.nan, np.nan, 6], dtype=float)
    f = make_frame(v)
    out = interpolate(f, "nearest_window", max_gap=0)
    assert np.array_equal(out.missing, f.missing)
    assert np.array_equal(out.filled(), f.filled())


def test_negative_max_gap_rejected():
    with pytest.raises(SeriesError):
        interpolate(make_frame([1.0, 2.0]), max_gap=-1)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.booleans(), min_size=4, max_size=40),
    st.sampled_from(["nearest_neighbor", "nearest_window"]),
    st.integers(0, 6),
)
def test_interpolation_never_touches_observed_cells(mask_list, method, max_gap):
    mask = np.array(mask_list)
    if mask.all():
        mask[0] = False
    rng = np.random.default_rng(len(mask_list))
    v = rng.normal(size=mask.size)
    f = make_frame(np.where(mask, np.nan, v), mask[:, None])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out = interpolate(f, method, max_gap)
    obs = ~mask
    assert np.array_equal(out.values[obs, 0], f.values[obs, 0])
    expected = mask.copy()
    for g in find_gaps(f):
        if g.length <= max_gap:
            expected[g.start : g.start + g.length] = False
    assert np.array_equal(out.missing[:, 0], expected)



def test_nearest_window_beats_nearest_neighbor_on_sines():
    # sines sampled at 40-200 points per period, i.e. smooth on the sample grid
    rng = np.random.default_rng(2024)
    wins = 0
    trials = 100
    for _ in range(trials):
        T = 300
        period = rng.uniform(40, 200)
        t = np.arange(T)
        truth = np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi))
        s = int(rng.integers(10, T - 13))
        v = truth.copy()
        v[s : s + 3] = np.nan
        f = make_frame(v)
        nw = interpolate(f, "nearest_window").values[:, 0]
        nn = interpolate(f, "nearest_neighbor").values[:, 0]
        seg = slice(s, s + 3)
        if dtw(nw[seg], truth[seg]) <= dtw(nn[seg], truth[seg]):
            wins += 1
    assert wins >= 80


# --- metrics ------------------------------------------------------------------


def test_mase_basic():
    a = np.array([1.0, 2.0, 3.0])
    assert mase(a, a, [0.0, 1.0]) == 0.0
    assert mase(np.full(4, 2.0), np.full(4, 3.0), [0.0, 1.0, 2.0]) == pytest.approx(1.0)


def test_mase_random_walk_against_direct_formula():
    rng = np.random.default_rng(5)
    ref = np.cumsum(rng.normal(size=200))
    actual = np.cumsum(rng.normal(size=50))
    pred = actual + rng.normal(scale=0.3, size=50)
    num = sum(abs(p - a) for p, a in zip(pred, actual)) / len(actual)
    den = sum(abs(ref[i] - ref[i - 1]) for i in range(1, len(ref))) / (len(ref) - 1)
    assert mase(pred, actual, ref) == pytest.approx(num / den, rel=1e-12)


def test_mase_multivariate_averages_channels():
    rng = np.random.default_rng(1)
    p, a, r = rng.normal(size=(10, 2)), rng.normal(size=(10, 2)), rng.normal(size=(30, 2))
    per = [mase(p[:, c], a[:, c], r[:, c]) for c in range(2)]
    assert mase(p, a, r) == pytest.approx(np.mean(per))


def test_mase_zero_scale():
    with pytest.raises(ZeroDivisionError):
        mase([1.0, 2.0], [1.0, 2.0], [3.0, 3.0])


def brute_dtw(a, b):
    """Minimum cost over every monotone warping path, enumerated explicitly."""
    n, m = len(a), len(b)
    best = math.inf

    def walk(i, j, acc):
        nonlocal best
        acc += abs(a[i] - b[j])
        if acc >= best:
            return
        if (i, j) == (n - 1, m - 1):
            best = acc
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, acc)

    walk(0, 0, 0.0)
    return best


def test_dtw_examples():
    assert dtw([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0
    assert brute_dtw([0, 0, 1], [0, 1]) == 0.0
    assert dtw([0, 0, 1], [0, 1]) == 0.0


def test_dtw_matches_brute_force():
    rng = np.random.default_rng(11)
    for n, m in itertools.product(range(1, 6), range(1, 6)):
        a, b = rng.normal(size=n), rng.normal(size=m)
        assert dtw(a, b) == pytest.approx(brute_dtw(a, b), abs=1e-12)


def test_dtw_symmetric_and_below_lockstep():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a, b = rng.normal(size=rng.integers(2, 15)), rng.normal(size=rng.integers(2, 15))
        assert dtw(a, b) == pytest.approx(dtw(b, a), abs=1e-12)
        c = rng.normal(size=a.size)
        assert dtw(a, c) <= np.abs(a - c).sum() + 1e-12


# --- windows ------------------------------------------------------------------


@pytest.mark.parametrize(
    "T,K,stride,count",
    [(10, 5, 1, 6), (16, 16, 1, 1), (100, 16, 8, 11)],
)
def test_window_counts(T, K, stride, count):
    f = make_frame(np.zeros(T))
    wins = sliding_windows(f, WindowSpec(K, stride, future_len=1))
    assert len(wins) == count
    assert [w.start for w in wins] == list(range(0, T - K + 1, stride))
    assert all(0 <= w.start and w.stop <= T for w in wins)


def test_window_longer_than_series_warns():
    with pytest.warns(UserWarning):
        assert sliding_windows(make_frame(np.zeros(4)), WindowSpec(8, future_len=4)) == []


def test_window_carries_time_range():
    w = sliding_windows(make_frame(np.zeros(20)), WindowSpec(16, 1, 8, 8))[2]
    assert w.time_range == (120.0, 1020.0)


def test_windowspec_invariants():
    with pytest.raises(SeriesError):
        WindowSpec(16, 1, past_len=8, future_len=7)
    with pytest.raises(SeriesError):
        WindowSpec(16, 0, future_len=8)
    with pytest.raises(SeriesError):
        WindowSpec(16, 1, future_len=0)
