"""Waveform segment container and the XSEG binary interchange format."""

import json
import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

XSEG_MAGIC = b"XSEG"
XSEG_VERSION = 1


class Modality(IntEnum):
    PPG = 0
    ECG = 1


class DegenerateSignal(ValueError):
    pass


@dataclass(frozen=True)
class WaveformSegment:
    """A fixed-rate 1D signal window with modality tag and provenance."""

    samples: np.ndarray
    fs: int
    modality: Modality
    subject_id: str = ""
    t0: float = 0.0

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise DegenerateSignal("segment must hold a nonempty 1D signal")
        if self.fs <= 0:
            raise ValueError(f"fs must be positive, got {self.fs}")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.fs

    def with_samples(self, samples, fs=None) -> "WaveformSegment":
        return replace(self, samples=np.asarray(samples, dtype=np.float64),
                       fs=self.fs if fs is None else fs)


@dataclass(frozen=True)
class GroundTruth:
    """Per-segment beat annotations from the synthetic generator.

    onsets_s[k] == rpeaks_s[k] + delay_ms/1000 for every paired index k
    (exactly, when per-beat jitter is disabled).
    """

    rpeaks_s: tuple = field(default_factory=tuple)
    onsets_s: tuple = field(default_factory=tuple)
    delay_ms: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "rpeaks_s", tuple(float(t) for t in self.rpeaks_s))
        object.__setattr__(self, "onsets_s", tuple(float(t) for t in self.onsets_s))
        for name in ("rpeaks_s", "onsets_s"):
            vals = getattr(self, name)
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValueError(f"{name} must be strictly increasing")


def write_xseg(path, seg: WaveformSegment, sidecar: dict | None = None) -> None:
    """Write a segment as XSEG: magic, u16 version, u8 modality, u32 fs,
    u32 count, f32 samples (all little-endian). Optional JSON sidecar with
    the same stem carries {subject_id, t0_s, delay_ms?, rpeaks_s?, onsets_s?}.
    """
    path = Path(path)
    data = np.asarray(seg.samples, dtype="<f4")
    header = XSEG_MAGIC + struct.pack("<HBII", XSEG_VERSION, int(seg.modality),
                                      int(seg.fs), data.size)
    path.write_bytes(header + data.tobytes())
    if sidecar is not None:
        meta = {"subject_id": seg.subject_id, "t0_s": seg.t0}
        meta.update(sidecar)
        sidecar_path(path).write_text(
            json.dumps(meta, sort_keys=True, indent=1) + "\n")


def read_xseg(path) -> WaveformSegment:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != XSEG_MAGIC:
        raise ValueError(f"{path}: not an XSEG file")
    version, modality, fs, n = struct.unpack_from("<HBII", raw, 4)
    if version != XSEG_VERSION:
        raise ValueError(f"{path}: unsupported XSEG version {version}")
    samples = np.frombuffer(raw, dtype="<f4", count=n, offset=15).astype(np.float64)
    subject_id, t0 = "", 0.0
    sc = sidecar_path(path)
    if sc.exists():
        meta = json.loads(sc.read_text())
        subject_id = meta.get("subject_id", "")
        t0 = meta.get("t0_s", 0.0)
    return WaveformSegment(samples, fs, Modality(modality), subject_id, t0)


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def read_sidecar(path) -> dict:
    return json.loads(sidecar_path(path).read_text())
