"""Deterministic signal conditioning: IIR filtering, resampling, windowing,
normalization, and template-match quality gating."""

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .segments import DegenerateSignal, Modality, WaveformSegment

STABILITY_MARGIN = 1e-9


class InvalidCutoff(ValueError):
    pass


class InvalidOrder(ValueError):
    pass


@dataclass(frozen=True)
class BiquadCascade:
    """Cascade of stable second-order sections (b0,b1,b2,a1,a2 per row)."""

    sections: np.ndarray  # shape (n_sections, 5)
    gain: float = 1.0

    @property
    def n_sections(self) -> int:
        return self.sections.shape[0]

    def poles(self) -> np.ndarray:
        roots = []
        for _, _, _, a1, a2 in self.sections:
            roots.extend(np.roots([1.0, a1, a2]))
        return np.asarray(roots)

    def is_stable(self) -> bool:
        poles = self.poles()
        return poles.size == 0 or np.max(np.abs(poles)) < 1.0 - STABILITY_MARGIN

    def to_sos(self) -> np.ndarray:
        sos = np.empty((self.n_sections, 6))
        sos[:, :3] = self.sections[:, :3]
        sos[:, 3] = 1.0
        sos[:, 4:] = self.sections[:, 3:]
        sos[0, :3] *= self.gain
        return sos


@dataclass(frozen=True)
class QualityReport:
    per_sample_score: np.ndarray
    p15: float
    passed: bool


def design_butterworth(kind: str, order: int, cutoffs_hz, fs: int) -> BiquadCascade:
    """Design a maximally flat Butterworth filter as a biquad cascade.

    Discretized by the bilinear transform with frequency prewarping
    (the scipy.signal.butter digital design path).
    """
    if order < 1:
        raise InvalidOrder(f"order must be >= 1, got {order}")
    cutoffs = np.atleast_1d(np.asarray(cutoffs_hz, dtype=float))
    nyq = fs / 2.0
    if np.any(cutoffs <= 0) or np.any(cutoffs >= nyq):
        raise InvalidCutoff(f"cutoffs {cutoffs.tolist()} outside (0, {nyq})")
    if kind == "bandpass":
        if cutoffs.size != 2 or cutoffs[0] >= cutoffs[1]:
            raise InvalidCutoff("bandpass needs two cutoffs with low < high")
        wn = cutoffs / nyq
    elif kind in ("lowpass", "highpass"):
        if cutoffs.size != 1:
            raise InvalidCutoff(f"{kind} needs exactly one cutoff")
        wn = cutoffs[0] / nyq
    else:
        raise ValueError(f"unknown filter kind {kind!r}")
    sos = sps.butter(order, wn, btype=kind, output="sos")
    cascade = BiquadCascade(np.ascontiguousarray(
        np.delete(sos, 3, axis=1)))  # drop a0 (always 1)
    assert cascade.is_stable()
    return cascade


def apply_filter(cascade: BiquadCascade, x: WaveformSegment,
                 zero_phase: bool = True) -> WaveformSegment:
    """Run the cascade over x. With zero_phase, the filter is applied
    forward and backward (squared magnitude, zero phase) over a
    reflection-padded copy; padding length is 3 * (sections * 2)."""
    sos = cascade.to_sos()
    y = np.asarray(x.samples, dtype=np.float64)
    if not zero_phase:
        return x.with_samples(sps.sosfilt(sos, y))
    pad = min(3 * (cascade.n_sections * 2), y.size - 1)
    yp = np.pad(y, pad, mode="reflect") if pad > 0 else y
    yp = sps.sosfilt(sos, yp)
    yp = sps.sosfilt(sos, yp[::-1])[::-1]
    return x.with_samples(yp[pad:pad + y.size] if pad > 0 else yp)


def notch_powerline(x: WaveformSegment, line_hz: float) -> WaveformSegment:
    """Suppress powerline noise with a moving average spanning one period
    of line_hz (kernel width round(fs / line_hz) samples). No-op when the
    period spans fewer than 2 samples (line_hz too high for fs)."""
    width = int(round(x.fs / line_hz))
    if width < 2:
        return x
    left = (width - 1) // 2
    right = width - 1 - left
    yp = np.pad(x.samples, (left, right), mode="reflect")
    kernel = np.full(width, 1.0 / width)
    return x.with_samples(np.convolve(yp, kernel, mode="valid"))


def resample(x: WaveformSegment, target_fs: int) -> WaveformSegment:
    """Linear-interpolation resampling onto the uniform target grid.
    Downsampling by more than 2x applies an anti-alias lowpass first."""
    if target_fs <= 0:
        raise ValueError("target_fs must be positive")
    if x.samples.size < 2:
        raise DegenerateSignal("resample needs at least 2 samples")
    if target_fs == x.fs:
        return x
    y = x
    if x.fs > 2 * target_fs:
        aa = design_butterworth("lowpass", 5, 0.45 * target_fs, x.fs)
        y = apply_filter(aa, x, zero_phase=True)
    n_new = int(round(x.samples.size * target_fs / x.fs))
    t_old = np.arange(x.samples.size) / x.fs
    t_new = np.arange(n_new) / target_fs
    return x.with_samples(np.interp(t_new, t_old, y.samples), fs=target_fs)


def normalize_unit_range(x: WaveformSegment) -> WaveformSegment:
    """Affine map sending min -> -1 and max -> +1."""
    lo, hi = float(np.min(x.samples)), float(np.max(x.samples))
    if hi - lo < 1e-9:
        raise DegenerateSignal("constant segment cannot be range-normalized")
    return x.with_samples(2.0 * (x.samples - lo) / (hi - lo) - 1.0)


def segment_windows(x: WaveformSegment, win_s: float) -> list[WaveformSegment]:
    """Consecutive non-overlapping windows of win_s seconds; the trailing
    remainder is dropped. win_s * fs must be a positive integer so that
    paired-modality callers get identical boundaries."""
    n_win = win_s * x.fs
    if abs(n_win - round(n_win)) > 1e-9 or round(n_win) < 1:
        raise ValueError(f"win_s * fs = {n_win} is not a positive integer")
    n_win = int(round(n_win))
    out = []
    for k in range(x.samples.size // n_win):
        out.append(WaveformSegment(x.samples[k * n_win:(k + 1) * n_win],
                                   x.fs, x.modality, x.subject_id,
                                   x.t0 + k * n_win / x.fs))
    return out


def quality_score(x: WaveformSegment) -> QualityReport:
    """Template-match quality gating. Each detected beat is scored by the
    Pearson correlation (clamped to [0,1]) of its window against the mean
    beat template; scores broadcast per-beat to samples, samples outside
    any beat inherit the nearest beat's score. Pass iff the 15th-percentile
    score exceeds 0.9."""
    from .evalkit import detect_r_peaks, detect_systolic_peaks

    n = x.samples.size
    if x.modality == Modality.ECG:
        peak_times = detect_r_peaks(x)
    else:
        peak_times = detect_systolic_peaks(x)
    peaks = np.asarray([int(round(t * x.fs)) for t in peak_times], dtype=int)
    failed = QualityReport(np.zeros(n), 0.0, False)
    if peaks.size < 3:
        return failed

    half = int(np.median(np.diff(peaks)) // 2)
    if half < 2:
        return failed
    starts = peaks - half
    keep = (starts >= 0) & (starts + 2 * half <= n)
    starts = starts[keep]
    if starts.size < 2:
        return failed

    beats = np.stack([x.samples[s:s + 2 * half] for s in starts])
    template = beats.mean(axis=0)
    t_ctr = template - template.mean()
    b_ctr = beats - beats.mean(axis=1, keepdims=True)
    denom = np.linalg.norm(b_ctr, axis=1) * np.linalg.norm(t_ctr)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 0, b_ctr @ t_ctr / np.where(denom > 0, denom, 1), 0.0)
    beat_scores = np.clip(r, 0.0, 1.0)

    scores = np.empty(n)
    centers = starts + half
    nearest = np.abs(np.arange(n)[:, None] - centers[None, :]).argmin(axis=1)
    scores[:] = beat_scores[nearest]
    for s, sc in zip(starts, beat_scores):
        scores[s:s + 2 * half] = sc
    p15 = float(np.percentile(scores, 15))
    return QualityReport(scores, p15, p15 > 0.9)
