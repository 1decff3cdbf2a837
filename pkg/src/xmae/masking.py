"""Patch-level mask construction and the curriculum masking-ratio state
machine. PPG is never masked in the cross-reconstruction objective; these
masks apply to the ECG patch grid (and to both modalities for the
symmetric baseline)."""

import math
from dataclasses import dataclass, replace

import numpy as np


class InvalidRatio(ValueError):
    pass


class NonFiniteLoss(ValueError):
    pass


@dataclass(frozen=True)
class MaskSpec:
    """Visibility pattern over a patch grid. True = visible."""

    visible: np.ndarray

    def __post_init__(self):
        vis = np.asarray(self.visible, dtype=bool)
        if vis.ndim != 1 or not (vis.any() and (~vis).any()):
            raise InvalidRatio("mask needs >=1 visible and >=1 masked patch")
        object.__setattr__(self, "visible", vis)

    @property
    def n_patches(self) -> int:
        return self.visible.size

    @property
    def masked_count(self) -> int:
        return int((~self.visible).sum())

    @property
    def ratio(self) -> float:
        return self.masked_count / self.n_patches

    @property
    def visible_idx(self) -> np.ndarray:
        return np.flatnonzero(self.visible)

    @property
    def masked_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.visible)

    def as_bitstring(self) -> str:
        return "".join("v" if v else "m" for v in self.visible)


def _masked_count(n_patches: int, ratio: float) -> int:
    if n_patches < 2:
        raise InvalidRatio("need at least 2 patches")
    count = math.floor(ratio * n_patches)
    if count in (0, n_patches):
        raise InvalidRatio(
            f"ratio {ratio} leaves no masked or no visible patch for "
            f"n_patches={n_patches}")
    return count


def contiguous_mask(n_patches: int, ratio: float, rng_seed) -> MaskSpec:
    """One contiguous visible run of n - floor(ratio*n) patches, placed
    uniformly at random; the masked complement is at most two blocks."""
    count = _masked_count(n_patches, ratio)
    n_visible = n_patches - count
    rng = np.random.default_rng(rng_seed)
    start = int(rng.integers(0, n_patches - n_visible + 1))
    visible = np.zeros(n_patches, dtype=bool)
    visible[start:start + n_visible] = True
    return MaskSpec(visible)


def random_mask(n_patches: int, ratio: float, rng_seed) -> MaskSpec:
    """floor(ratio*n) patches masked, chosen uniformly without replacement."""
    count = _masked_count(n_patches, ratio)
    rng = np.random.default_rng(rng_seed)
    masked = rng.choice(n_patches, size=count, replace=False)
    visible = np.ones(n_patches, dtype=bool)
    visible[masked] = False
    return MaskSpec(visible)


def expand_to_samples(mask: MaskSpec, patch_len: int) -> np.ndarray:
    """Repeat each patch flag patch_len times (per-sample loss mask)."""
    if patch_len < 1:
        raise ValueError("patch_len must be >= 1")
    return np.repeat(mask.visible, patch_len)


@dataclass(frozen=True)
class CurriculumState:
    """Masking-ratio schedule: step up by `step` whenever the epoch loss
    improves on the best seen by at least `improve_threshold` (relative),
    capped at m_max."""

    m_current: float = 0.80
    m_max: float = 0.90
    step: float = 0.05
    improve_threshold: float = 0.10
    best_loss: float | None = None

    def __post_init__(self):
        if self.step <= 0 or not (0 < self.m_current <= self.m_max < 1):
            raise ValueError("invalid curriculum configuration")


def curriculum_update(state: CurriculumState, epoch_loss: float) -> CurriculumState:
    if not (np.isfinite(epoch_loss) and epoch_loss > 0):
        raise NonFiniteLoss(f"epoch loss {epoch_loss} is not usable")
    if state.best_loss is None:
        return replace(state, best_loss=epoch_loss)
    improvement = (state.best_loss - epoch_loss) / state.best_loss
    if improvement >= state.improve_threshold:
        return replace(state,
                       m_current=min(state.m_current + state.step, state.m_max),
                       best_loss=epoch_loss)
    return replace(state, best_loss=min(state.best_loss, epoch_loss))
