"""Input-gradient saliency, gradient-distribution distances, lab importance and PCA.

Saliency is the absolute gradient of the output logit with respect to each
input voxel, max-normalized per volume. Distances between two pooled gradient
distributions come in two groups: sample-based (Wasserstein-1, energy, KS) and
histogram-based (Jensen-Shannon, Bhattacharyya, overlap).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import DegenerateError, DimensionError, UsageError, ValidationError
from .models import LAB_FEATURES, Batch, FusionModel
from .preprocess import Volume, write_volume
from .stats import kolmogorov_sf
from .tensor import Tensor

N_BINS = 50
V_MIN = 0.3


@dataclass
class SaliencyVolume:
    values: np.ndarray
    modality: str
    model_kind: str = ""
    patient_id: str = ""
    degenerate: bool = False

    def __post_init__(self):
        if self.values.ndim != 3:
            raise DimensionError(f"saliency must be 3D, got {self.values.shape}")

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass
class GradientHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    total: int

    def __post_init__(self):
        if int(self.counts.sum()) != self.total:
            raise ValidationError("histogram counts do not add up to total")
        if np.any(np.diff(self.bin_edges) <= 0):
            raise ValidationError("bin edges must be strictly increasing")

    @property
    def probabilities(self) -> np.ndarray:
        return self.counts / self.total

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])


@dataclass
class DistanceReport:
    wasserstein: float
    ks_statistic: float
    ks_p: float
    jensen_shannon: float
    energy: float
    bhattacharyya: float
    histogram_overlap: float

    FIELD_NAMES = {
        "wasserstein": "Wasserstein Distance",
        "ks_statistic": "Kolmogorov-Smirnov Statistic",
        "ks_p": "Kolmogorov-Smirnov p-value",
        "jensen_shannon": "Jensen-Shannon Divergence",
        "energy": "Energy Distance",
        "bhattacharyya": "Bhattacharyya Distance",
        "histogram_overlap": "Histogram Overlap",
    }

    def to_dict(self) -> dict:
        # JSON has no infinity; disjoint histograms give an infinite Bhattacharyya distance
        return {label: (None if math.isinf(getattr(self, k)) else getattr(self, k))
                for k, label in self.FIELD_NAMES.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


# --------------------------------------------------------------------------
# saliency


def _normalized(grad: np.ndarray) -> tuple[np.ndarray, bool]:
    g = np.abs(grad.astype(np.float64))
    peak = g.max()
    if peak == 0 or not np.isfinite(peak):
        return np.zeros_like(g), True
    return g / peak, False


def _clear_param_grads(model) -> None:
    # the backward pass also fills parameter gradients; drop them so later training starts clean
    for p in getattr(model, "parameters", lambda: [])():
        p.zero_grad()


def input_gradient_saliency(model: FusionModel | Callable, pet=None, ct=None, labs=None,
                            patient_id: str = "", stemmed: bool = False) -> dict[str, SaliencyVolume]:
    """Saliency of one patient's logit with respect to each supplied image volume.

    ``model`` is a :class:`FusionModel` (run in eval mode) or any callable taking
    the keyword tensors ``pet``/``ct``/``labs`` and returning a [1] logit tensor.
    Image arrays are [D,H,W] or [1,1,D,H,W].
    """
    inputs = {}
    for key, arr in (("pet", pet), ("ct", ct)):
        if arr is not None:
            a = np.asarray(arr, dtype=np.float32)
            a = a.reshape((1, 1) + a.shape[-3:])
            inputs[key] = Tensor(a, requires_grad=True)
    if not inputs:
        raise UsageError("saliency needs at least one image input")
    lab_t = None if labs is None else Tensor(np.asarray(labs, np.float32).reshape(1, -1))
    if isinstance(model, FusionModel):
        was = model.training
        model.training = False
        try:
            out = model.logits(inputs.get("pet"), inputs.get("ct"), lab_t, stemmed)
        finally:
            model.training = was
        kind = model.kind.value
    else:
        out = model(pet=inputs.get("pet"), ct=inputs.get("ct"), labs=lab_t)
        kind = getattr(model, "__name__", "callable")
    if out.size != 1:
        raise DimensionError("saliency is defined for a single patient at a time")
    T.backward(T.tensor_sum(out))
    _clear_param_grads(model)
    result = {}
    for key, t in inputs.items():
        grad = t.grad if t.grad is not None else np.zeros(t.shape, np.float32)
        values, degenerate = _normalized(grad[0, 0])
        result[key] = SaliencyVolume(values, key.upper(), kind, patient_id, degenerate)
    return result


def write_saliency(path: str | Path, s: SaliencyVolume, spacing_mm: tuple = (1.0, 1.0, 1.0)) -> None:
    """Store saliency in the raw volume format, tagged with the modality it explains."""
    write_volume(path, Volume(s.modality, s.values.astype(np.float32), tuple(spacing_mm)))


# --------------------------------------------------------------------------
# rendering


def _central_slices(vol: np.ndarray) -> dict[str, np.ndarray]:
    d, h, w = vol.shape
    return {"axial": vol[d // 2], "coronal": vol[:, h // 2, :], "sagittal": vol[:, :, w // 2]}


def _heat(t: np.ndarray) -> np.ndarray:
    """Red-to-yellow ramp for t in [0, 1]; never gray, so overlays stay distinguishable."""
    rgb = np.zeros(t.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = 255
    rgb[..., 1] = np.round(255 * np.clip(t, 0, 1)).astype(np.uint8)
    return rgb


def render_slices(saliency: SaliencyVolume, base: Volume | np.ndarray, v_min: float = V_MIN) -> dict[str, np.ndarray]:
    """Central axial/coronal/sagittal overlays as uint8 RGB arrays.

    Saliency below ``v_min`` is transparent (the gray base shows through);
    everything else is painted opaque with the heat ramp.
    """
    b = np.asarray(base.voxels if isinstance(base, Volume) else base, dtype=np.float64)
    if b.shape != saliency.shape:
        raise ValidationError(f"saliency {saliency.shape} does not match base {b.shape}")
    lo, hi = b.min(), b.max()
    gray = np.zeros_like(b) if hi == lo else (b - lo) / (hi - lo)
    gray = np.round(255 * gray).astype(np.uint8)
    out = {}
    s_sl = _central_slices(saliency.values)
    for plane, g in _central_slices(gray).items():
        s = s_sl[plane]
        rgb = np.repeat(g[..., None], 3, axis=-1)
        mask = s >= v_min
        t = (s - v_min) / (1 - v_min) if v_min < 1 else np.ones_like(s)
        rgb[mask] = _heat(t)[mask]
        out[plane] = rgb
    return out


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """Binary P6 image."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w = rgb.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


# --------------------------------------------------------------------------
# distributions and distances


def gradient_distribution(saliencies: Sequence[SaliencyVolume | np.ndarray]) -> GradientHistogram:
    """Pooled histogram of all voxel values on 50 uniform bins over [0, 1]."""
    if len(saliencies) == 0:
        raise ValidationError("need at least one saliency volume")
    edges = np.linspace(0.0, 1.0, N_BINS + 1)
    counts = np.zeros(N_BINS, dtype=np.int64)
    for s in saliencies:
        v = np.asarray(s.values if isinstance(s, SaliencyVolume) else s).ravel()
        counts += np.histogram(v, bins=edges)[0]
    return GradientHistogram(edges, counts, int(counts.sum()))


def _mean_abs_between(a_sorted: np.ndarray, b_sorted: np.ndarray) -> float:
    """Mean of |a_i - b_j| over all pairs, via prefix sums on sorted arrays."""
    cb = np.r_[0.0, np.cumsum(b_sorted)]
    k = np.searchsorted(b_sorted, a_sorted, side="right")
    below = a_sorted * k - cb[k]
    above = (cb[-1] - cb[k]) - a_sorted * (b_sorted.size - k)
    return float((below + above).sum() / (a_sorted.size * b_sorted.size))


def wasserstein_1(a, b) -> float:
    """Integral of |F_a - F_b| over the real line (empirical CDFs)."""
    a, b = np.sort(np.asarray(a, float)), np.sort(np.asarray(b, float))
    grid = np.sort(np.r_[a, b])
    fa = np.searchsorted(a, grid[:-1], side="right") / a.size
    fb = np.searchsorted(b, grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(fa - fb) * np.diff(grid)))


def energy_distance(a, b) -> float:
    """2E|X-Y| - E|X-X'| - E|Y-Y'| over the empirical distributions."""
    a, b = np.sort(np.asarray(a, float)), np.sort(np.asarray(b, float))
    return max(0.0, 2 * _mean_abs_between(a, b) - _mean_abs_between(a, a) - _mean_abs_between(b, b))


def ks_two_sample(a, b) -> tuple[float, float]:
    """Statistic sup|F_a - F_b| and its asymptotic Kolmogorov p-value."""
    a, b = np.sort(np.asarray(a, float)), np.sort(np.asarray(b, float))
    grid = np.r_[a, b]
    d = float(np.max(np.abs(np.searchsorted(a, grid, side="right") / a.size
                            - np.searchsorted(b, grid, side="right") / b.size)))
    en = math.sqrt(a.size * b.size / (a.size + b.size))
    return d, kolmogorov_sf(en * d)


def _histogram_metrics(p: np.ndarray, q: np.ndarray) -> tuple[float, float, float]:
    m = 0.5 * (p + q)
    with np.errstate(divide="ignore", invalid="ignore"):
        kl_p = np.where(p > 0, p * np.log2(p / m), 0.0).sum()
        kl_q = np.where(q > 0, q * np.log2(q / m), 0.0).sum()
    jsd = float(min(1.0, max(0.0, 0.5 * (kl_p + kl_q))))
    bc = float(np.sum(np.sqrt(p * q)))
    bhatt = math.inf if bc <= 0 else max(0.0, -math.log(min(bc, 1.0)))
    overlap = float(np.minimum(p, q).sum())
    return jsd, bhatt, overlap


def _expand(h: GradientHistogram) -> np.ndarray:
    return np.repeat(h.centers, h.counts)


def distribution_distances(p, q) -> DistanceReport:
    """Six distances between two gradient distributions.

    Raw sample arrays give exact sample-based metrics; their histograms (50
    bins on [0, 1], or on the pooled range if samples leave it) feed the
    histogram metrics. Histogram inputs use bin centers for the sample-based
    metrics and must share bin edges.
    """
    if isinstance(p, GradientHistogram) != isinstance(q, GradientHistogram):
        raise UsageError("compare two histograms or two sample sets, not a mix")
    if isinstance(p, GradientHistogram):
        if p.bin_edges.shape != q.bin_edges.shape or np.any(p.bin_edges != q.bin_edges):
            raise ValidationError("histograms must share identical bin edges")
        if p.total == 0 or q.total == 0:
            raise ValidationError("empty histogram")
        a, b = _expand(p), _expand(q)
        hp, hq = p.probabilities, q.probabilities
    else:
        a, b = np.asarray(p, float).ravel(), np.asarray(q, float).ravel()
        if a.size == 0 or b.size == 0:
            raise ValidationError("sample sets must be non-empty")
        lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
        if lo >= 0.0 and hi <= 1.0:
            lo, hi = 0.0, 1.0
        elif hi == lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, N_BINS + 1)
        hp = np.histogram(a, bins=edges)[0] / a.size
        hq = np.histogram(b, bins=edges)[0] / b.size
    ks, ks_p = ks_two_sample(a, b)
    jsd, bhatt, overlap = _histogram_metrics(hp, hq)
    return DistanceReport(wasserstein_1(a, b), ks, ks_p, jsd, energy_distance(a, b), bhatt, overlap)


# --------------------------------------------------------------------------
# lab importance


def lab_gradient_importance(model: FusionModel, data: Batch) -> dict[str, float]:
    """Mean |d logit / d lab_j| over patients, on standardized lab inputs."""
    if not isinstance(model, FusionModel) or not model.kind.uses_labs:
        raise UsageError("lab gradient importance needs a model with a lab branch")
    if data.labs is None or len(data) == 0:
        raise ValidationError("evaluation set has no lab features")
    labs = Tensor(np.asarray(data.labs, np.float32), requires_grad=True)
    pet = None if data.pet is None or not model.kind.uses_pet else Tensor(data.pet)
    ct = None if data.ct is None or not model.kind.uses_ct else Tensor(data.ct)
    was = model.training
    model.training = False
    try:
        logits = model.logits(pet, ct, labs, data.stemmed)
    finally:
        model.training = was
    # rows are independent in eval mode, so one backward of the sum gives per-row gradients
    T.backward(T.tensor_sum(logits))
    _clear_param_grads(model)
    g = np.abs(labs.grad.astype(np.float64)).mean(axis=0)
    return dict(zip(LAB_FEATURES, (float(v) for v in g)))


# --------------------------------------------------------------------------
# projection


@dataclass
class PcaResult:
    coords: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    explained_ratio: np.ndarray


def _power_iteration(c: np.ndarray, start: np.ndarray, tol: float, max_iter: int) -> tuple[float, np.ndarray]:
    v = start / np.linalg.norm(start)
    lam = float(v @ c @ v)
    for _ in range(max_iter):
        w = c @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0, v
        v_new = w / norm
        lam = float(v_new @ c @ v_new)
        v = v_new
        if np.linalg.norm(c @ v - lam * v) <= tol * max(1.0, abs(lam)):
            break
    return lam, v


def pca_projection(embeddings, components: int = 2, tol: float = 1e-9, max_iter: int = 200_000) -> PcaResult:
    """Top principal components by power iteration with deflation.

    Each component's sign is fixed so its largest-magnitude loading is positive.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3 or x.shape[1] < 2:
        raise ValidationError(f"need an n x d matrix with n >= 3 and d >= 2, got {x.shape}")
    if components < 1 or components > x.shape[1]:
        raise ValidationError(f"cannot extract {components} components from {x.shape[1]} dimensions")
    xc = x - x.mean(axis=0)
    c = xc.T @ xc / (x.shape[0] - 1)
    total = float(np.trace(c))
    if total <= 0:
        raise DegenerateError("embeddings have zero variance")
    vecs, vals = [], []
    deflated = c.copy()
    for _ in range(components):
        # deterministic start: the largest column of the deflated matrix, made orthogonal to earlier vectors
        col = deflated[:, int(np.argmax(np.linalg.norm(deflated, axis=0)))].copy()
        if np.linalg.norm(col) <= 1e-300:
            col = np.ones(c.shape[0])
        for v in vecs:
            col -= (col @ v) * v
        if np.linalg.norm(col) <= 1e-12:
            col = np.eye(c.shape[0])[len(vecs)]
            for v in vecs:
                col -= (col @ v) * v
        lam, v = _power_iteration(deflated, col, tol, max_iter)
        for u in vecs:
            v -= (v @ u) * u
        v /= np.linalg.norm(v)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        lam = max(0.0, float(v @ c @ v))
        vecs.append(v)
        vals.append(lam)
        deflated = deflated - lam * np.outer(v, v)
    comps = np.array(vecs)
    vals = np.array(vals)
    return PcaResult(xc @ comps.T, comps, vals, vals / total)
