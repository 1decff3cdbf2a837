"""Synthetic paired ECG-PPG generation from a latent beat process with a
known per-subject electro-mechanical delay, plus full ground truth."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import sigproc
from .segments import GroundTruth, Modality, WaveformSegment, write_xseg

RR_CLAMP_MS = (300.0, 2000.0)

# Gaussian bump morphology: (amplitude, offset_ms, width_ms) per component.
ECG_BUMPS = (
    (0.15, -160.0, 25.0),   # P
    (-0.10, -25.0, 10.0),   # Q
    (1.00, 0.0, 12.0),      # R
    (-0.20, 25.0, 10.0),    # S
    (0.30, 180.0, 40.0),    # T
)
PPG_BUMPS = (
    (-0.60, 0.0, 25.0),     # onset notch: pins the pre-systolic valley
    (1.00, 120.0, 90.0),    # systolic
    (0.35, 380.0, 120.0),   # diastolic
)


def _composite_valley_offset_ms(bumps) -> float:
    """Where the summed clean pulse actually bottoms out, relative to the
    notch anchor. The systolic upstroke pulls the composite minimum a few
    milliseconds off the notch center; anchors are shifted to compensate
    so the rendered valley sits exactly at the reported onset time."""
    t = np.linspace(-150.0, 150.0, 30001)
    y = np.zeros_like(t)
    for amp, off_ms, width_ms in bumps:
        y += amp * np.exp(-0.5 * ((t - off_ms) / width_ms) ** 2)
    return float(t[np.argmin(y)])


PPG_VALLEY_OFFSET_MS = _composite_valley_offset_ms(PPG_BUMPS)


@dataclass(frozen=True)
class SubjectProfile:
    subject_id: str
    delay_ms: float
    rr_mean_ms: float
    rr_sd_ms: float = 30.0
    rr_ar1: float = 0.5
    noise_sd: float = 0.0
    jitter_ms: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.delay_ms < self.rr_mean_ms):
            raise ValueError("need 0 < delay_ms < rr_mean_ms (one pulse per beat)")
        if not 0 <= self.rr_ar1 < 1:
            raise ValueError("rr_ar1 must lie in [0, 1)")


@dataclass(frozen=True)
class BeatTrain:
    beat_times_s: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.beat_times_s, dtype=np.float64)
        if np.any(np.diff(times) <= 0):
            raise ValueError("beat times must be strictly increasing")
        object.__setattr__(self, "beat_times_s", times)

    @property
    def rr_intervals_ms(self) -> np.ndarray:
        return np.diff(self.beat_times_s) * 1000.0


@dataclass(frozen=True)
class DatasetConfig:
    """Ranges for per-subject profiles plus rendering knobs."""

    delay_ms: tuple = (150.0, 450.0)
    rr_mean_ms: tuple = (600.0, 1200.0)
    rr_sd_ms: tuple = (20.0, 60.0)
    rr_ar1: tuple = (0.3, 0.7)
    noise_sd: float = 0.02
    jitter_ms: float = 0.0
    fs: int = 100
    segment_s: float = 10.0


# Margin after the last beat so the PPG pulse fits inside the segment.
_TAIL_MARGIN_S = 0.7
_FIRST_BEAT_S = 0.5


def gen_beat_train(profile: SubjectProfile, duration_s: float) -> BeatTrain:
    """AR(1) RR process: RR_k = mean + ar1*(RR_{k-1} - mean)
    + sqrt(1 - ar1^2) * sd * z_k, clamped to [300, 2000] ms."""
    if duration_s < 2 * profile.rr_mean_ms / 1000.0:
        raise ValueError("duration too short for two beats")
    rng = np.random.default_rng(profile.seed)
    mean, sd, ar1 = profile.rr_mean_ms, profile.rr_sd_ms, profile.rr_ar1
    rr = float(np.clip(mean + sd * rng.standard_normal(), *RR_CLAMP_MS))
    times = [_FIRST_BEAT_S]
    innov_scale = np.sqrt(1.0 - ar1 ** 2) * sd
    while True:
        t_next = times[-1] + rr / 1000.0
        if t_next > duration_s - _TAIL_MARGIN_S:
            break
        times.append(t_next)
        rr = float(np.clip(mean + ar1 * (rr - mean)
                           + innov_scale * rng.standard_normal(), *RR_CLAMP_MS))
    return BeatTrain(np.asarray(times))


def _render_bumps(anchor_times_s, bumps, n, fs, noise_sd, seed):
    t = np.arange(n) / fs
    y = np.zeros(n)
    for tb in anchor_times_s:
        for amp, off_ms, width_ms in bumps:
            c = tb + off_ms / 1000.0
            w = width_ms / 1000.0
            lo = max(int((c - 5 * w) * fs), 0)
            hi = min(int((c + 5 * w) * fs) + 1, n)
            if lo < hi:
                y[lo:hi] += amp * np.exp(-0.5 * ((t[lo:hi] - c) / w) ** 2)
    if noise_sd > 0:
        y += noise_sd * np.random.default_rng(seed).standard_normal(n)
    return y


def render_ecg(beats: BeatTrain, fs: int, noise_sd: float = 0.0,
               seed: int = 0) -> WaveformSegment:
    """P-QRS-T morphology as Gaussian bumps anchored at each beat time."""
    if fs < 50:
        raise ValueError("fs must be >= 50")
    duration = beats.beat_times_s[-1] + _TAIL_MARGIN_S
    n = int(round(duration * fs))
    y = _render_bumps(beats.beat_times_s, ECG_BUMPS, n, fs, noise_sd, seed)
    return WaveformSegment(y, fs, Modality.ECG)


def render_ppg(beats: BeatTrain, delay_ms: float, fs: int,
               noise_sd: float = 0.0, seed: int = 0,
               onset_times_s=None) -> WaveformSegment:
    """Two-bump pulse whose onset valley sits at beat time + delay_ms.
    Explicit onset_times_s (e.g. jittered) override the constant delay."""
    if fs < 50:
        raise ValueError("fs must be >= 50")
    if onset_times_s is None:
        onset_times_s = beats.beat_times_s + delay_ms / 1000.0
    duration = beats.beat_times_s[-1] + _TAIL_MARGIN_S
    n = int(round(duration * fs))
    anchors = np.asarray(onset_times_s) - PPG_VALLEY_OFFSET_MS / 1000.0
    y = _render_bumps(anchors, PPG_BUMPS, n, fs, noise_sd, seed)
    return WaveformSegment(y, fs, Modality.PPG)


def _sample_profile(subject_id, cfg: DatasetConfig, rng) -> SubjectProfile:
    u = rng.uniform
    return SubjectProfile(
        subject_id=subject_id,
        delay_ms=u(*cfg.delay_ms),
        rr_mean_ms=u(*cfg.rr_mean_ms),
        rr_sd_ms=u(*cfg.rr_sd_ms),
        rr_ar1=u(*cfg.rr_ar1),
        noise_sd=cfg.noise_sd,
        jitter_ms=cfg.jitter_ms,
        seed=int(rng.integers(0, 2 ** 63)),
    )


def render_pair(profile: SubjectProfile, seg_index: int, cfg: DatasetConfig):
    """One aligned (ppg, ecg, ground_truth) triple of cfg.segment_s seconds."""
    seg_seed = np.random.default_rng(
        [profile.seed, seg_index]).integers(0, 2 ** 63)
    sub_rng = np.random.default_rng([seg_seed, 0])
    train = gen_beat_train(
        SubjectProfile(profile.subject_id, profile.delay_ms,
                       profile.rr_mean_ms, profile.rr_sd_ms, profile.rr_ar1,
                       seed=int(sub_rng.integers(0, 2 ** 63))),
        cfg.segment_s)
    onsets = train.beat_times_s + profile.delay_ms / 1000.0
    if profile.jitter_ms > 0:
        jit_rng = np.random.default_rng([seg_seed, 1])
        onsets = onsets + profile.jitter_ms / 1000.0 * jit_rng.standard_normal(
            onsets.size)
        onsets = np.maximum.accumulate(onsets)  # keep strictly sorted
        onsets += 1e-6 * np.arange(onsets.size)
    n = int(round(cfg.segment_s * cfg.fs))

    ecg = render_ecg(train, cfg.fs, profile.noise_sd,
                     seed=int(np.random.default_rng([seg_seed, 2]).integers(2 ** 63)))
    ppg = render_ppg(train, profile.delay_ms, cfg.fs, profile.noise_sd,
                     seed=int(np.random.default_rng([seg_seed, 3]).integers(2 ** 63)),
                     onset_times_s=onsets)

    def crop_norm(seg, modality):
        y = np.zeros(n)
        y[:min(n, len(seg))] = seg.samples[:n]
        cropped = WaveformSegment(y, cfg.fs, modality, profile.subject_id,
                                  seg_index * cfg.segment_s)
        return sigproc.normalize_unit_range(cropped)

    gt = GroundTruth(train.beat_times_s, onsets, profile.delay_ms)
    return crop_norm(ppg, Modality.PPG), crop_norm(ecg, Modality.ECG), gt


def gen_dataset(n_subjects: int, segs_per_subject: int,
                cfg: DatasetConfig, seed: int, out_dir) -> dict:
    """Write paired XSEG files, per-pair JSON sidecars, and manifest.json.
    Fully deterministic given the seed."""
    if n_subjects < 1:
        raise ValueError("need at least one subject")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    manifest = {"seed": seed, "fs": cfg.fs, "segment_s": cfg.segment_s,
                "subjects": []}
    for si in range(n_subjects):
        profile = _sample_profile(f"sub{si:04d}", cfg, rng)
        entry = {"subject_id": profile.subject_id,
                 "delay_ms": profile.delay_ms,
                 "rr_mean_ms": profile.rr_mean_ms,
                 "files": []}
        for k in range(segs_per_subject):
            ppg, ecg, gt = render_pair(profile, k, cfg)
            stem = f"{profile.subject_id}_seg{k:04d}"
            write_xseg(out_dir / f"{stem}_ppg.xseg", ppg)
            write_xseg(out_dir / f"{stem}_ecg.xseg", ecg)
            (out_dir / f"{stem}.json").write_text(json.dumps({
                "subject_id": profile.subject_id,
                "t0_s": ppg.t0,
                "delay_ms": gt.delay_ms,
                "rpeaks_s": list(gt.rpeaks_s),
                "onsets_s": list(gt.onsets_s),
            }, sort_keys=True) + "\n")
            entry["files"].append(stem)
        manifest["subjects"].append(entry)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


def load_pair(data_dir, stem):
    """Read one (ppg, ecg, ground_truth) triple written by gen_dataset."""
    from .segments import read_xseg

    data_dir = Path(data_dir)
    ppg = read_xseg(data_dir / f"{stem}_ppg.xseg")
    ecg = read_xseg(data_dir / f"{stem}_ecg.xseg")
    meta = json.loads((data_dir / f"{stem}.json").read_text())
    gt = GroundTruth(meta["rpeaks_s"], meta["onsets_s"], meta["delay_ms"])
    ppg = WaveformSegment(ppg.samples, ppg.fs, Modality.PPG,
                          meta["subject_id"], meta["t0_s"])
    ecg = WaveformSegment(ecg.samples, ecg.fs, Modality.ECG,
                          meta["subject_id"], meta["t0_s"])
    return ppg, ecg, gt
