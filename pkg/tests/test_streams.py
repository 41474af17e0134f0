import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdrlab.errors import ConfigError, MalformedStreamError, MissingModalityError
from pdrlab.streams import (
    HELD,
    INTERPOLATED,
    MISSING,
    OBSERVED,
    SensorSample,
    Segment,
    Stream,
    StreamCollector,
    make_windows,
    position_deltas,
    positions_from_deltas,
    radio_heading,
    read_jsonl,
    synchronize,
    window_count,
    write_jsonl,
)


def _imu(t):
    t = np.asarray(t, dtype=float)
    return Stream("accel", t, t, np.tile([0.0, 0.0, 9.81], (len(t), 1)))


def _dummy_segment(n, f_s=100.0):
    return Segment(f_s, 0.0, {"v": np.zeros(n)}, {})


def test_linear_interpolation_midpoint():
    speed = Stream("speed", [0.0, 1.0], [0.0, 1.0], [[0.0], [2.0]])
    radio = Stream("radio_pos", [0.0, 1.0], [0.0, 1.0], [[0, 0], [1, 1]])
    seg = synchronize([speed, radio, _imu([0.0, 1.0])], f_s=2.0)
    assert seg.channel("v")[1, 0] == pytest.approx(1.0)
    assert seg.validity["v"][1] == INTERPOLATED
    assert seg.validity["v"][0] == OBSERVED


def test_single_radio_sample_offline_vs_realtime():
    radio = Stream("radio_pos", [0.5], [0.5], [[1.0, 2.0]])
    imu = _imu(np.arange(0, 1.01, 0.1))
    off = synchronize([radio, imu], f_s=10.0, policy="offline")
    assert (off.validity["p_radio"] != MISSING).sum() == 1
    rt = synchronize([radio, imu], f_s=10.0, policy="realtime")
    codes = rt.validity["p_radio"]
    assert np.all(codes[:5] == MISSING)
    assert codes[5] == OBSERVED and np.all(codes[6:] == HELD)
    assert np.all(rt.channel("p_radio")[5:] == [1.0, 2.0])


def test_two_radio_sources_on_a_line_resample_exactly():
    f = lambda t: np.column_stack([0.5 + 1.3 * t, -2.0 + 0.7 * t])
    ta = np.arange(0, 2.001, 0.1)
    tb = ta[:-1] + 0.05
    a = Stream("radio_pos", ta, ta, f(ta), "a")
    b = Stream("radio_pos", tb, tb, f(tb), "b")
    seg = synchronize([a, b, _imu(ta)], f_s=100.0)
    ok = seg.valid("p_radio")
    assert np.allclose(seg.channel("p_radio")[ok], f(seg.times[ok]), atol=1e-9)


def test_realtime_respects_availability():
    radio = Stream("radio_pos", [0.0, 0.1], [0.2, 0.3], [[0, 0], [1, 0]])
    seg = synchronize([radio, _imu(np.arange(0, 0.41, 0.01))], f_s=100.0, policy="realtime")
    p = seg.channel("p_radio")
    assert np.all(~seg.valid("p_radio")[:20])
    assert p[20, 0] == 0.0 and p[29, 0] == 0.0 and p[30, 0] == 1.0


def test_realtime_keeps_the_most_recent_measurement_under_reordering():
    # the later measurement arrives first; the stale one must not overwrite it
    radio = Stream("radio_pos", [0.0, 0.1], [0.3, 0.15], [[0, 0], [1, 0]])
    seg = synchronize([radio, _imu(np.arange(0, 0.41, 0.01))], f_s=100.0, policy="realtime")
    assert seg.channel("p_radio")[35, 0] == 1.0


def test_synchronize_needs_radio_and_imu():
    with pytest.raises(MissingModalityError):
        synchronize([_imu([0, 1])])
    with pytest.raises(MissingModalityError):
        synchronize([Stream("radio_pos", [0.0], [0.0], [[0, 0]])])


def test_non_monotone_stream_rejected():
    radio = Stream("radio_pos", [1.0, 0.0], [1.0, 0.0], [[0, 0], [1, 1]])
    with pytest.raises(MalformedStreamError):
        synchronize([radio, _imu([0, 1])])


def test_sample_validation():
    with pytest.raises(MalformedStreamError):
        SensorSample(0.0, 0.0, "radio_pos", (1.0,))
    with pytest.raises(MalformedStreamError):
        SensorSample(1.0, 0.5, "speed", (1.0,))


def test_radio_heading_examples():
    assert radio_heading([[0, 0], [1, 0]])[0] == 0.0
    assert radio_heading([[0, 0], [0, 1]])[0] == pytest.approx(math.pi / 2)
    square = [[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]]
    assert np.allclose(radio_heading(square)[:4], [0, math.pi / 2, math.pi, -math.pi / 2])


def test_window_examples():
    assert len(make_windows(_dummy_segment(1000), 128, 0.5, 0.0)) == 14
    assert len(make_windows(_dummy_segment(128), 128, 0.5, 0.0)) == 1
    assert len(make_windows(_dummy_segment(128), 128, 0.5, 1.0)) == 0


def test_window_targets_and_bad_args(walk_segment):
    ws = make_windows(walk_segment, 128, 0.5, 1.0)
    w = ws[3]
    assert w.start_tick == 3 * 64 and w.target_tick == w.end_tick + 100
    assert w.target.x == walk_segment.ref.x[w.target_tick]
    assert w.inputs(walk_segment).shape[0] == 128
    with pytest.raises(ConfigError):
        make_windows(walk_segment, 128, 1.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 3000), st.integers(2, 400), st.floats(0, 0.95), st.integers(0, 300))
def test_window_count_closed_form(n, n_w, overlap, h):
    stride = max(1, int(round(n_w * (1 - overlap))))
    expect = max(0, (n - n_w - h) // stride + 1) if n - n_w - h >= 0 else 0
    assert window_count(n, n_w, overlap, h) == expect


def test_position_deltas_examples():
    seg = Segment(1.0, 0.0, {"p_radio": [[0, 0], [1, 0], [1, 1]]}, {})
    assert np.array_equal(position_deltas(seg).channel("p_radio"), [[0, 0], [1, 0], [0, 1]])
    const = Segment(1.0, 0.0, {"p_radio": np.ones((5, 2))}, {})
    assert np.all(position_deltas(const).channel("p_radio") == 0)


def test_position_deltas_round_trip(rng):
    p = np.cumsum(rng.normal(size=(100, 2)), axis=0)
    d = position_deltas(Segment(1.0, 0.0, {"p_radio": p}, {})).channel("p_radio")
    assert np.allclose(positions_from_deltas(d, p[0]), p, atol=1e-12)


def test_jsonl_round_trip(tmp_path, walk_segment):
    from pdrlab.simkit import SensorNoiseSpec, activity_profile, simulate_streams

    _, streams = simulate_streams(activity_profile("walking", 3.0), SensorNoiseSpec(), 1)
    write_jsonl(streams, tmp_path / "s.jsonl")
    back = read_jsonl(tmp_path / "s.jsonl")
    key = lambda s: (s.modality, s.source)
    assert sorted(streams, key=key) == sorted(back, key=key)


def test_jsonl_malformed_line(tmp_path):
    (tmp_path / "bad.jsonl").write_text('{"t_meas": 0}\n')
    with pytest.raises(MalformedStreamError):
        read_jsonl(tmp_path / "bad.jsonl")


def test_segment_csv_round_trip(walk_segment):
    back = Segment.from_csv(walk_segment.to_csv())
    for name in walk_segment.channels:
        assert np.array_equal(back.channel(name), walk_segment.channel(name), equal_nan=True)
        assert np.array_equal(back.validity[name], walk_segment.validity[name])
    assert np.array_equal(back.ref.x, walk_segment.ref.x) and back.ref.events == walk_segment.ref.events


def test_collector_accepts_concurrent_producers():
    col = StreamCollector()

    def produce(offset):
        for k in range(200):
            col.add(SensorSample(k * 0.01 + offset, k * 0.01 + offset, "speed", (1.0,), f"s{offset}"))

    threads = [threading.Thread(target=produce, args=(i * 0.001,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    out = col.streams()
    assert sum(len(s) for s in out) == 800 and all(s.is_monotone() for s in out)
