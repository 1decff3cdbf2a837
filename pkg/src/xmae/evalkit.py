"""Physiological grounding evaluation: R-peak and PPG-onset detection,
delay estimation and error CDFs, HRV features, subject-split linear
probes, and template-based ECG reconstruction from PPG."""

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter1d

from . import model as model_mod
from .segments import Modality, WaveformSegment


class NoPairs(ValueError):
    pass


class TooFewBeats(ValueError):
    pass


class SingularSystem(np.linalg.LinAlgError):
    pass


class SingleClassFold(ValueError):
    pass


class TemplateTooShort(ValueError):
    pass


# frozen detector constants
RPEAK_INTEGRATION_S = 0.150
RPEAK_ROLLING_MAX_S = 2.0
RPEAK_SEARCH_S = 0.060
RPEAK_REFRACTORY_S = 0.200
ONSET_REFRACTORY_S = 0.300
ONSET_SEARCH_S = 0.400
PAIRING_WINDOW_S = 0.500


@dataclass(frozen=True)
class DelayEstimate:
    per_beat_delays_ms: tuple
    mean_ms: float
    n_paired: int
    n_unpaired: int


@dataclass(frozen=True)
class HrvFeatures:
    median_nn_ms: float
    sdnn_ms: float
    rmssd_ms: float
    pnn20_pct: float
    pnn50_pct: float
    shannon_entropy_bits: float

    def as_dict(self):
        return {"median_nn": self.median_nn_ms, "sdnn": self.sdnn_ms,
                "rmssd": self.rmssd_ms, "pnn20": self.pnn20_pct,
                "pnn50": self.pnn50_pct,
                "shan_en": self.shannon_entropy_bits}


@dataclass(frozen=True)
class ProbeResult:
    per_fold_metric: tuple
    mean: float
    sd: float


def _rolling_max(x, n):
    return maximum_filter1d(x, size=max(n, 1), mode="nearest")


def _smooth(x, n):
    """Zero-lag moving average (odd width) for extremum localization."""
    n = n | 1
    if n < 3:
        return x
    pad = np.concatenate([x[n // 2:0:-1], x, x[-2:-n // 2 - 2:-1]])
    return np.convolve(pad, np.full(n, 1.0 / n), mode="valid")


def _refine_extremum(x, i):
    """Parabolic vertex through (i-1, i, i+1), fractional sample offset."""
    if i <= 0 or i >= x.size - 1:
        return float(i)
    a, b, c = x[i - 1], x[i], x[i + 1]
    denom = a - 2.0 * b + c
    if abs(denom) < 1e-12:
        return float(i)
    return i + float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5))


def detect_r_peaks(ecg: WaveformSegment) -> list:
    """Derivative -> squaring -> 150 ms moving integration -> adaptive
    threshold (0.5 x rolling 2 s max) -> raw local maxima within +-60 ms
    of each upward crossing -> 200 ms refractory."""
    fs = ecg.fs
    x = ecg.samples
    d = np.diff(x, prepend=x[:1])
    sq = d * d
    w = max(int(round(RPEAK_INTEGRATION_S * fs)), 1)
    integ = np.convolve(sq, np.full(w, 1.0 / w), mode="full")[:x.size]
    thr = 0.5 * _rolling_max(integ, int(round(RPEAK_ROLLING_MAX_S * fs)))
    above = integ > np.maximum(thr, 1e-12)
    crossings = np.flatnonzero(above & ~np.roll(above, 1))
    crossings = crossings[crossings > 0]
    half = int(round(RPEAK_SEARCH_S * fs))
    xs = _smooth(x, max(int(round(0.030 * fs)), 1))
    candidates = []
    for c in crossings:
        lo, hi = max(c - half, 0), min(c + half + 1, x.size)
        candidates.append(lo + int(np.argmax(xs[lo:hi])))
    peaks = []
    refractory = RPEAK_REFRACTORY_S * fs
    for p in sorted(set(candidates)):
        if not peaks or p - peaks[-1] >= refractory:
            peaks.append(p)
    return [_refine_extremum(xs, p) / fs for p in peaks]


def detect_systolic_peaks(ppg: WaveformSegment) -> list:
    """Local maxima above 0.5 x rolling 2 s max, 300 ms refractory."""
    fs = ppg.fs
    x = ppg.samples
    thr = 0.5 * _rolling_max(x, int(round(RPEAK_ROLLING_MAX_S * fs)))
    local_max = np.zeros(x.size, dtype=bool)
    local_max[1:-1] = (x[1:-1] > x[:-2]) & (x[1:-1] >= x[2:])
    if np.ptp(x) < 1e-12:
        return []
    candidates = np.flatnonzero(local_max & (x > thr))
    peaks = []
    refractory = ONSET_REFRACTORY_S * fs
    for p in candidates:
        if not peaks or p - peaks[-1] >= refractory:
            peaks.append(p)
    return [p / fs for p in peaks]


def detect_ppg_onsets(ppg: WaveformSegment) -> list:
    """Onset valley: argmin of the 400 ms window preceding each systolic
    peak."""
    fs = ppg.fs
    xs = _smooth(ppg.samples, max(int(round(0.030 * fs)), 1))
    onsets = []
    for pt in detect_systolic_peaks(ppg):
        p = int(round(pt * fs))
        lo = max(p - int(round(ONSET_SEARCH_S * fs)), 0)
        if lo >= p:
            continue
        valley = lo + int(np.argmin(xs[lo:p]))
        onsets.append(_refine_extremum(xs, valley) / fs)
    return sorted(set(onsets))


def estimate_delay(rpeaks, onsets) -> DelayEstimate:
    """Pair each R-peak with the earliest unused onset in (r, r+0.5 s]."""
    delays = []
    used = np.zeros(len(onsets), dtype=bool)
    onsets = list(onsets)
    j = 0
    for r in rpeaks:
        while j < len(onsets) and onsets[j] <= r:
            j += 1
        if j < len(onsets) and onsets[j] - r <= PAIRING_WINDOW_S:
            delays.append((onsets[j] - r) * 1000.0)
            used[j] = True
            j += 1
    n_paired = len(delays)
    if n_paired == 0:
        raise NoPairs("no R-peak/onset pair within the pairing window")
    n_unpaired = (len(rpeaks) - n_paired) + int((~used).sum())
    return DelayEstimate(tuple(delays), float(np.mean(delays)),
                         n_paired, n_unpaired)


def delay_error_table(pairs) -> dict:
    """Per-segment absolute delay errors (ms), sorted with empirical CDF
    values k/n, and the midpoint-convention median."""
    if not pairs:
        raise ValueError("no delay pairs")
    errors = np.sort([abs(gt.mean_ms - rec.mean_ms) for gt, rec in pairs])
    cdf = np.arange(1, errors.size + 1) / errors.size
    return {"error_ms": errors, "cdf": cdf,
            "median_ms": float(np.median(errors))}


def hrv_features(beat_times) -> HrvFeatures:
    beat_times = np.asarray(beat_times, dtype=float)
    if beat_times.size < 3:
        raise TooFewBeats(f"need >= 3 beats, got {beat_times.size}")
    nn = np.diff(beat_times) * 1000.0
    succ = np.abs(np.diff(nn))
    counts, _ = np.histogram(nn, bins=np.arange(300.0, 2000.0 + 8.0, 8.0))
    total = counts.sum()
    if total > 0:
        p = counts[counts > 0] / total
        shan = float(-(p * np.log2(p)).sum())
    else:
        shan = 0.0
    return HrvFeatures(
        median_nn_ms=float(np.median(nn)),
        sdnn_ms=float(np.std(nn)),
        rmssd_ms=float(np.sqrt(np.mean(np.diff(nn) ** 2))) if nn.size > 1 else 0.0,
        pnn20_pct=float(100.0 * np.mean(succ > 20.0)) if succ.size else 0.0,
        pnn50_pct=float(100.0 * np.mean(succ > 50.0)) if succ.size else 0.0,
        shannon_entropy_bits=shan,
    )


def hrv_error_comparison(gt_ecg: WaveformSegment, rec_ecg: WaveformSegment,
                         ppg: WaveformSegment) -> dict:
    """Per-feature absolute errors of rec-ECG-derived and PPG-derived HRV
    features against the ground-truth ECG features, on aligned windows."""
    feats_gt = hrv_features(detect_r_peaks(gt_ecg)).as_dict()
    feats_rec = hrv_features(detect_r_peaks(rec_ecg)).as_dict()
    feats_ppg = hrv_features(detect_ppg_onsets(ppg)).as_dict()
    return {name: {"rec": abs(feats_rec[name] - feats_gt[name]),
                   "ppg": abs(feats_ppg[name] - feats_gt[name])}
            for name in feats_gt}


def _fold_assignment(subject_ids, n_folds=5, seed=13):
    """Partition subjects into folds by hash order with a fixed seed."""
    subjects = sorted(set(subject_ids))
    if len(subjects) < n_folds:
        raise ValueError(f"need >= {n_folds} subjects, got {len(subjects)}")
    keyed = sorted(subjects, key=lambda s: hashlib.sha256(
        f"{seed}:{s}".encode()).hexdigest())
    fold_of = {s: i % n_folds for i, s in enumerate(keyed)}
    return np.asarray([fold_of[s] for s in subject_ids])


def ridge_fit(x, y, lam):
    """Closed-form ridge weights (X'X + lam I)^-1 X'y, no standardization."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    gram = x.T @ x + lam * np.eye(x.shape[1])
    try:
        return np.linalg.solve(gram, x.T @ y)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc


def _standardize(train, test):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (train - mu) / sd, (test - mu) / sd


def _probe_scores(embeddings, targets, subject_ids, lam, folds):
    """Per-fold (test_scores, test_targets) from subject-split ridge."""
    embeddings = np.asarray(embeddings, dtype=float)
    targets = np.asarray(targets, dtype=float)
    out = []
    for k in range(5):
        tr, te = folds != k, folds == k
        x_tr, x_te = _standardize(embeddings[tr], embeddings[te])
        y_tr = targets[tr]
        y_mu = y_tr.mean()
        w = ridge_fit(x_tr, y_tr - y_mu, lam)
        out.append((x_te @ w + y_mu, targets[te], y_mu))
    return out


def probe_regression(embeddings, targets, subject_ids, lam=1e-3) -> ProbeResult:
    """5-fold subject-split ridge regression; metric = mean absolute error."""
    folds = _fold_assignment(subject_ids)
    maes = [float(np.mean(np.abs(pred - y)))
            for pred, y, _ in _probe_scores(embeddings, targets,
                                            subject_ids, lam, folds)]
    return ProbeResult(tuple(maes), float(np.mean(maes)), float(np.std(maes)))


def auroc(scores, labels) -> float:
    """Rank-statistic AUROC; ties contribute one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassFold("AUROC needs both classes")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_rank_sum = ranks[labels].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def probe_classification(embeddings, labels, subject_ids, lam=1e-3) -> ProbeResult:
    """Ridge on +-1 targets as scorer; metric = AUROC per fold."""
    labels = np.asarray(labels).astype(bool)
    folds = _fold_assignment(subject_ids)
    for k in range(5):
        tr = folds != k
        if labels[tr].all() or not labels[tr].any():
            raise SingleClassFold(f"training folds for fold {k} lack a class")
    targets = np.where(labels, 1.0, -1.0)
    aucs = []
    for k, (pred, y, _) in enumerate(_probe_scores(embeddings, targets,
                                                   subject_ids, lam, folds)):
        aucs.append(auroc(pred, y > 0))
    return ProbeResult(tuple(aucs), float(np.mean(aucs)), float(np.std(aucs)))


def extract_template(ppg: WaveformSegment, ecg: WaveformSegment,
                     end_onset_s=None, length_s: float = 1.2):
    """Cut an aligned (ppg, ecg) template of length_s seconds that ends
    exactly at a PPG onset valley and contains at least one R-peak.

    Terminating the window at an onset makes the template's final R-peak
    pair with the valley at the splice boundary, so the reconstruction
    input carries a clean R-to-onset delay cue even when the delay plus
    one beat interval exceeds the template length."""
    fs = ecg.fs
    onsets = ([end_onset_s] if end_onset_s is not None
              else detect_ppg_onsets(ppg))
    rpeaks = detect_r_peaks(ecg)
    n = int(round(length_s * fs))
    for o in onsets:
        end = int(round(o * fs))
        start = end - n
        if start < 0 or end > len(ecg):
            continue
        if any(start / fs < r < end / fs for r in rpeaks):
            return (ppg.samples[start:end].copy(),
                    ecg.samples[start:end].copy())
    raise TemplateTooShort("no onset-terminated window holds an R-peak")


def _cosine_crossfade(a_tail, b_head):
    n = a_tail.size
    w = 0.5 * (1.0 - np.cos(np.pi * np.arange(1, n + 1) / (n + 1)))
    return (1.0 - w) * a_tail + w * b_head


def reconstruct_ecg_from_ppg(params, mcfg, ppg: WaveformSegment,
                             template: tuple, objective: str = "xmae",
                             mm_cfg=None):
    """Reconstruct a full ECG timeline for an incoming PPG segment using a
    held-out same-subject template. The template's patches occupy the
    visible ECG positions (leading); the incoming PPG fills the remaining
    timeline via a valley-aligned splice with a 50 ms cosine crossfade.

    Returns (ecg_hat samples, spliced ppg samples, template sample count).
    """
    from . import masking

    tpl_ppg, tpl_ecg = (np.asarray(t, dtype=float) for t in template)
    fs = ppg.fs
    p = mcfg.patch_len
    n_tpl_patches = tpl_ecg.size // p
    if n_tpl_patches < 3:
        raise TemplateTooShort(
            f"template covers {n_tpl_patches} patches, need >= 3")
    n_tpl = n_tpl_patches * p
    tpl_ppg, tpl_ecg = tpl_ppg[:n_tpl], tpl_ecg[:n_tpl]

    # valley-aligned cut of the incoming PPG
    onsets = detect_ppg_onsets(ppg)
    fill = mcfg.seq_len - n_tpl
    cut_candidates = [int(round(t * fs)) for t in onsets
                      if int(round(t * fs)) + fill <= len(ppg)]
    cut = max(cut_candidates) if cut_candidates else 0
    spliced = np.empty(mcfg.seq_len)
    spliced[:n_tpl] = tpl_ppg
    spliced[n_tpl:] = ppg.samples[cut:cut + fill]
    xf = int(round(0.050 * fs))
    if xf > 0 and cut >= xf:
        spliced[n_tpl:n_tpl + xf] = _cosine_crossfade(
            tpl_ppg[-xf:], ppg.samples[cut:cut + xf])

    ecg_in = np.zeros(mcfg.seq_len)
    ecg_in[:n_tpl] = tpl_ecg
    visible = np.zeros(mcfg.n_patches, dtype=bool)
    visible[:n_tpl_patches] = True
    mask = masking.MaskSpec(visible)

    if objective == "xmae":
        ecg_hat, _, _ = model_mod.forward_xmae(params, mcfg, spliced,
                                               ecg_in, mask)
        out = np.asarray(ecg_hat.data, dtype=float).copy()
    else:
        # symmetric baseline: same visible ECG budget, minimal PPG masking
        ppg_visible = np.ones(mcfg.n_patches, dtype=bool)
        ppg_visible[-1] = False
        _, ecg_hat, _, _ = model_mod.forward_mm_baseline(
            params, mcfg, spliced, ecg_in, masking.MaskSpec(ppg_visible),
            mask)
        out = np.asarray(ecg_hat.data, dtype=float).copy()
    out[:n_tpl] = tpl_ecg
    return out, spliced, n_tpl


def segment_delay_pair(real_ppg: WaveformSegment, real_ecg: WaveformSegment,
                       rec_ecg_samples, spliced_ppg_samples, n_tpl, fs):
    """(gt, rec) DelayEstimates for one segment: gt from the real pair,
    rec from the reconstructed ECG + spliced real PPG beyond the template."""
    gt = estimate_delay(detect_r_peaks(real_ecg), detect_ppg_onsets(real_ppg))
    rec_ecg = WaveformSegment(rec_ecg_samples, fs, Modality.ECG)
    rec_ppg = WaveformSegment(spliced_ppg_samples, fs, Modality.PPG)
    t_tpl = n_tpl / fs
    rp = [t for t in detect_r_peaks(rec_ecg) if t > t_tpl]
    on = [t for t in detect_ppg_onsets(rec_ppg) if t > t_tpl]
    rec = estimate_delay(rp, on)
    return gt, rec
