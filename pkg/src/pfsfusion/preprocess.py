"""Volume I/O and the harmonize -> clip -> normalize -> resize chain.

Normalizers are fitted per modality on training-fold volumes only; the
``fit_on`` ids they carry are what the leakage audit inspects.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParameterError, ValidationError

MODALITIES = ("PET", "CT")
TARGET_SHAPE = (75, 50, 50)
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class Volume:
    modality: str
    voxels: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    rescale_slope: float = 1.0
    rescale_intercept: float = 0.0

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValidationError(f"unknown modality {self.modality!r}")
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ValidationError(f"volume must be a non-empty 3D grid, got shape {vox.shape}")
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ValidationError(f"spacing must be three positive values, got {self.spacing_mm}")
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    @property
    def shape(self) -> tuple:
        return self.voxels.shape


@dataclass(frozen=True)
class Normalizer:
    modality: str
    mean: float
    std: float
    fit_on: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not self.std > 0:
            raise ValidationError("normalizer std must be positive")


def write_volume(path: str | Path, volume: Volume) -> None:
    """Write ``<path>`` (raw little-endian float32) and ``<path>.json`` sidecar."""
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes())
    meta = {
        "modality": volume.modality,
        "shape": list(volume.shape),
        "spacing_mm": list(volume.spacing_mm),
        "rescale_slope": volume.rescale_slope,
        "rescale_intercept": volume.rescale_intercept,
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1))


def read_volume(path: str | Path) -> Volume:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    shape = tuple(meta["shape"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != int(np.prod(shape)):
        raise ValidationError(f"{path}: {raw.size} voxels on disk, sidecar says {shape}")
    return Volume(meta["modality"], raw.reshape(shape).astype(np.float32), tuple(meta["spacing_mm"]),
                  float(meta["rescale_slope"]), float(meta["rescale_intercept"]))


def harmonize(volume: Volume) -> Volume:
    """Apply the stored rescale slope/intercept and reset them to 1/0."""
    if volume.rescale_slope == 0:
        raise ValidationError("rescale slope is zero")
    vox = (volume.voxels.astype(np.float64) * volume.rescale_slope + volume.rescale_intercept).astype(np.float32)
    return replace(volume, voxels=vox, rescale_slope=1.0, rescale_intercept=0.0)


def clip_artifacts(volume: Volume, lo_pct: float = 0.1, hi_pct: float = 99.9) -> Volume:
    """Winsorize voxels to the [lo_pct, hi_pct] percentile interval (linear-interpolated percentiles)."""
    if not 0.0 <= lo_pct < hi_pct <= 100.0:
        raise ParameterError(f"need 0 <= lo < hi <= 100, got ({lo_pct}, {hi_pct})")
    lo, hi = np.percentile(volume.voxels, [lo_pct, hi_pct])
    return replace(volume, voxels=np.clip(volume.voxels, np.float32(lo), np.float32(hi)))


def fit_normalizer(training_volumes: Sequence[Volume], modality: str, ids: Sequence[str] = ()) -> Normalizer:
    """Pooled mean and (population) std over every voxel of every training volume."""
    if not training_volumes:
        raise ValidationError("cannot fit a normalizer on zero volumes")
    for v in training_volumes:
        if v.modality != modality:
            raise ValidationError(f"expected {modality} volumes, got {v.modality}")
    count = sum(v.voxels.size for v in training_volumes)
    mean = sum(float(v.voxels.sum(dtype=np.float64)) for v in training_volumes) / count
    ss = sum(float(np.square(v.voxels.astype(np.float64) - mean).sum()) for v in training_volumes)
    std = max(np.sqrt(ss / count), STD_FLOOR)
    return Normalizer(modality, mean, float(std), tuple(ids))


@dataclass(frozen=True)
class VolumeMoments:
    """Voxel count, mean and sum of squared deviations of one volume (float64)."""

    modality: str
    count: int
    mean: float
    m2: float


def volume_moments(volume: Volume) -> VolumeMoments:
    v = volume.voxels.astype(np.float64)
    mean = float(v.sum() / v.size)
    return VolumeMoments(volume.modality, int(v.size), mean, float(np.square(v - mean).sum()))


def normalizer_from_moments(moments: Sequence[VolumeMoments], modality: str, ids: Sequence[str] = ()) -> Normalizer:
    """Same pooled statistics as :func:`fit_normalizer`, merged from per-volume moments.

    Uses the pairwise update of Chan et al., so the result agrees with the
    two-pass fit to rounding error while only small summaries stay in memory.
    """
    if not moments:
        raise ValidationError("cannot fit a normalizer on zero volumes")
    count, mean, m2 = 0, 0.0, 0.0
    for m in moments:
        if m.modality != modality:
            raise ValidationError(f"expected {modality} moments, got {m.modality}")
        total = count + m.count
        delta = m.mean - mean
        mean += delta * m.count / total
        m2 += m.m2 + delta * delta * count * m.count / total
        count = total
    std = max(np.sqrt(m2 / count), STD_FLOOR)
    return Normalizer(modality, float(mean), float(std), tuple(ids))


def apply_normalizer(volume: Volume, normalizer: Normalizer) -> Volume:
    if volume.modality != normalizer.modality:
        raise ValidationError(f"{normalizer.modality} normalizer applied to a {volume.modality} volume")
    vox = ((volume.voxels.astype(np.float64) - normalizer.mean) / normalizer.std).astype(np.float32)
    return replace(volume, voxels=vox)


def _resample_axis(a: np.ndarray, axis: int, m: int) -> np.ndarray:
    n = a.shape[axis]
    if n == m:
        return a
    pos = np.arange(m, dtype=np.float64) * (n - 1) / (m - 1) if m > 1 else np.zeros(1)
    i0 = np.minimum(np.floor(pos).astype(int), n - 2)
    frac = pos - i0
    shape = [1] * a.ndim
    shape[axis] = m
    frac = frac.reshape(shape)
    return np.take(a, i0, axis=axis) * (1.0 - frac) + np.take(a, i0 + 1, axis=axis) * frac


def resize_volume(volume: Volume, target: tuple = TARGET_SHAPE) -> Volume:
    """Trilinear resampling with corner-aligned grids (first and last voxels map onto each other).

    Applied one axis at a time, which is exactly trilinear interpolation.
    """
    if min(volume.shape) < 2:
        raise ValidationError(f"every axis needs at least 2 voxels to interpolate, got {volume.shape}")
    if len(target) != 3 or min(target) < 2:
        raise ValidationError(f"bad target shape {target}")
    a = volume.voxels.astype(np.float64)
    for axis, m in enumerate(target):
        a = _resample_axis(a, axis, m)
    spacing = tuple(s * (n - 1) / (m - 1) for s, n, m in zip(volume.spacing_mm, volume.shape, target))
    return replace(volume, voxels=a.astype(np.float32), spacing_mm=spacing)


def prepare_volume(volume: Volume) -> Volume:
    """The fold-independent part of the chain: harmonize, then clip artifacts."""
    return clip_artifacts(harmonize(volume))


def preprocess(volume: Volume, normalizer: Normalizer, target: tuple = TARGET_SHAPE) -> Volume:
    """Full chain for one volume: harmonize -> clip -> normalize -> resize."""
    return resize_volume(apply_normalizer(prepare_volume(volume), normalizer), target)
