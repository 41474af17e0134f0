"""Glue between simulation, synchronisation and orientation estimation."""

from __future__ import annotations

from .classic import calibrated_orientation
from .simkit import simulate_streams
from .streams import synchronize


def build_segment(streams, f_s=100.0, policy="offline", ref=None, beta=0.1,
                  calib_block=10.0, segment_id="segment", t0=None, t_end=None):
    """Synchronise streams and add the calibrated ``theta_ori`` channel."""
    seg = synchronize(streams, f_s, policy, t0=t0, t_end=t_end, ref=ref, segment_id=segment_id)
    theta, codes = calibrated_orientation(seg, beta=beta, block=calib_block)
    return seg.with_channel("theta_ori", theta, codes)


def simulate_segment(profile, noise, seed, f_s=100.0, policy="realtime", dt=0.01, **kwargs):
    """Simulate one recording and return its segment (reference attached)."""
    ref, streams = simulate_streams(profile, noise, seed, dt)
    segment_id = kwargs.pop("segment_id", f"{profile.kind}-{seed}")
    return build_segment(streams, f_s, policy, ref=ref, segment_id=segment_id,
                         t0=float(ref.t[0]), t_end=float(ref.t[-1]), **kwargs)
