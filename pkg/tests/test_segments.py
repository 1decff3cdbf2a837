"""Waveform container and XSEG binary format tests."""

import struct

import numpy as np
import pytest

from xmae.segments import (GroundTruth, Modality, WaveformSegment, read_xseg,
                           write_xseg)


def test_segment_requires_samples():
    with pytest.raises(ValueError):
        WaveformSegment(np.array([]), 100, Modality.PPG)


def test_segment_requires_positive_fs():
    with pytest.raises(ValueError):
        WaveformSegment(np.array([1.0]), 0, Modality.ECG)


def test_len_and_duration():
    seg = WaveformSegment(np.zeros(250), 100, Modality.PPG)
    assert len(seg) == 250


def test_ground_truth_strictly_increasing():
    with pytest.raises(ValueError):
        GroundTruth((1.0, 1.0), (1.2, 1.3), 200.0)


def test_xseg_round_trip(tmp_path):
    path = tmp_path / "a.xseg"
    samples = np.random.default_rng(0).normal(size=777)
    seg = WaveformSegment(samples, 100, Modality.ECG, "sub1", 10.0)
    write_xseg(path, seg)
    back = read_xseg(path)
    assert back.fs == 100
    assert back.modality == Modality.ECG
    np.testing.assert_array_equal(back.samples,
                                  samples.astype(np.float32).astype(float))


def test_xseg_header_layout(tmp_path):
    path = tmp_path / "b.xseg"
    seg = WaveformSegment(np.array([1.5, -0.25]), 128, Modality.PPG)
    write_xseg(path, seg)
    raw = path.read_bytes()
    assert raw[:4] == b"XSEG"
    version, modality, fs, n = struct.unpack("<HBII", raw[4:15])
    assert (version, modality, fs, n) == (1, 0, 128, 2)
    assert struct.unpack("<2f", raw[15:23]) == (1.5, -0.25)
    assert len(raw) == 15 + 4 * n


def test_xseg_write_is_deterministic(tmp_path):
    seg = WaveformSegment(np.linspace(-1, 1, 100), 100, Modality.ECG)
    p1, p2 = tmp_path / "c1.xseg", tmp_path / "c2.xseg"
    write_xseg(p1, seg)
    write_xseg(p2, seg)
    assert p1.read_bytes() == p2.read_bytes()


def test_xseg_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.xseg"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        read_xseg(path)
