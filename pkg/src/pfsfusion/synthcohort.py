"""Synthetic PRRT cohort with planted, complementary lab and imaging signal.

Three latent factors drive the outcome: a PET lesion burden, a CT hepatic
lesion load and a tumor-marker level that surfaces as CgA. Each modality sees
only part of the picture, so the benchmark ordering (fusion beats unimodal,
dual imaging beats single imaging) is learnable but not trivial.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .preprocess import Volume, write_volume
from .stats import TestResult, fisher_exact_2x2, mann_whitney_u

PFS_THRESHOLD_MONTHS = 12.0
SHORT, LONG = "SHORT", "LONG"
LAB_NAMES = ("AST", "ALT", "CgA", "GGT")


def derive_seed(master_seed: int, *keys) -> int:
    """Stable 64-bit seed from a master seed and string keys (independent of PYTHONHASHSEED)."""
    text = ":".join([str(int(master_seed))] + [str(k) for k in keys])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


@dataclass(frozen=True)
class LabPanel:
    ast_u_per_l: float
    alt_u_per_l: float
    ggt_u_per_l: float
    cga_ug_per_l: float

    def __post_init__(self):
        for name in ("ast_u_per_l", "alt_u_per_l", "ggt_u_per_l", "cga_ug_per_l"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValidationError(f"lab value {name} must be positive, got {v}")

    @property
    def de_ritis(self) -> float:
        return self.ast_u_per_l / self.alt_u_per_l

    def as_vector(self) -> np.ndarray:
        """Raw values in the model feature order (AST, ALT, CgA, GGT)."""
        return np.array([self.ast_u_per_l, self.alt_u_per_l, self.cga_ug_per_l, self.ggt_u_per_l])

    def to_dict(self) -> dict:
        return {**asdict(self), "de_ritis": self.de_ritis}


@dataclass
class PatientRecord:
    id: str
    labs: LabPanel
    pfs_months: float
    label: str
    sex: str = "M"
    event: bool = True
    pet_path: str = ""
    ct_path: str = ""
    latents: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.pfs_months > 0:
            raise ValidationError(f"{self.id}: pfs must be positive")
        expected = SHORT if self.pfs_months <= PFS_THRESHOLD_MONTHS else LONG
        if self.label != expected:
            raise ValidationError(f"{self.id}: label {self.label} inconsistent with pfs {self.pfs_months}")
        if not self.event:
            raise ValidationError(f"{self.id}: censored records are not supported")

    @property
    def y(self) -> int:
        """1 for LONG (the class predicted as 'high PFS'), 0 for SHORT."""
        return int(self.label == LONG)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labs"] = self.labs.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PatientRecord:
        d = dict(d)
        labs = {k: v for k, v in d.pop("labs").items() if k != "de_ritis"}
        return cls(labs=LabPanel(**labs), **d)


@dataclass
class GeneratorParams:
    # outcome model: risk = wb*b + wh*h + c + interaction*min(b, c) + noise
    burden_weight: float = 0.7
    hepatic_weight: float = 1.5
    interaction: float = 0.6
    risk_noise: float = 0.4
    # labs (log-normal); cga/ggt carry the latents with these loadings
    cga_log_median: float = 360.0
    cga_log_sd: float = 1.5
    cga_loading: float = 0.8
    ggt_log_median: float = 60.0
    ggt_log_sd: float = 0.7
    ggt_loading: float = 0.3
    ast_log_median: float = 28.0
    ast_log_sd: float = 0.4
    alt_log_median: float = 28.0
    alt_log_sd: float = 0.45
    female_fraction: float = 0.41
    # pfs: SHORT = threshold * Beta(a, b); LONG = threshold + Gamma(k, theta)
    short_beta: tuple = (2.5, 1.2)
    long_gamma: tuple = (1.5, 9.0)
    # volumes
    raw_shape: tuple = (96, 64, 64)
    spacing_mm: tuple = (3.0, 4.0, 4.0)
    pet_background: float = 1.0
    pet_noise_sd: float = 0.1
    pet_peak_base: float = 3.0
    pet_peak_per_lesion: float = 0.2
    max_burden: int = 8
    ct_noise_sd: float = 12.0
    ct_liver_hu: float = 60.0
    ct_liver_hu_per_sd: float = 150.0
    ct_lesion_contrast: float = 70.0
    ct_contrast_per_sd: float = 20.0
    ct_lesion_radius: tuple = (3.5, 5.5)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> GeneratorParams:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class CohortManifest:
    seed: int
    records: list
    generation_params: dict

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValidationError("patient ids must be unique")
        if {r.label for r in self.records} != {SHORT, LONG}:
            raise ValidationError("cohort must contain both SHORT and LONG patients")

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.y for r in self.records])

    def by_id(self, pid: str) -> PatientRecord:
        return self._index()[pid]

    def _index(self) -> dict:
        return {r.id: r for r in self.records}

    def to_json(self) -> str:
        payload = {"seed": self.seed, "generation_params": self.generation_params,
                   "records": [r.to_dict() for r in self.records]}
        return json.dumps(payload, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> CohortManifest:
        d = json.loads(text)
        return cls(d["seed"], [PatientRecord.from_dict(r) for r in d["records"]], d["generation_params"])

    def params(self) -> GeneratorParams:
        return GeneratorParams.from_dict(self.generation_params)


def short_count(n: int, short_fraction: float) -> int:
    return int(math.floor(n * short_fraction + 0.5))


def generate_cohort(n: int = 116, short_fraction: float = 0.36, seed: int = 42,
                    params: GeneratorParams | None = None) -> CohortManifest:
    """Draw latents, labs and PFS; the top ``round(n * short_fraction)`` risks are SHORT."""
    if n < 6:
        raise ValidationError(f"need at least 6 patients, got {n}")
    if not 0 < short_fraction < 1:
        raise ValidationError("short_fraction must lie strictly between 0 and 1")
    k = short_count(n, short_fraction)
    if k < 3 or n - k < 3:
        raise ValidationError(f"{k} SHORT / {n - k} LONG is too few to stratify into three folds")
    p = params or GeneratorParams()
    rng = np.random.default_rng(derive_seed(seed, "cohort"))

    zb, zh, zc = rng.normal(size=(3, n))
    risk = (p.burden_weight * zb + p.hepatic_weight * zh + zc + p.interaction * np.minimum(zb, zc)
            + p.risk_noise * rng.normal(size=n))
    short = np.zeros(n, dtype=bool)
    short[np.argsort(-risk, kind="stable")[:k]] = True

    def observe(z, loading):
        return loading * z + math.sqrt(1 - loading ** 2) * rng.normal(size=n)

    cga = np.exp(math.log(p.cga_log_median) + p.cga_log_sd * observe(zc, p.cga_loading))
    ggt = np.exp(math.log(p.ggt_log_median) + p.ggt_log_sd * observe(zh, p.ggt_loading))
    ast = np.exp(math.log(p.ast_log_median) + p.ast_log_sd * rng.normal(size=n))
    alt = np.exp(math.log(p.alt_log_median) + p.alt_log_sd * rng.normal(size=n))
    female = rng.random(n) < p.female_fraction
    burden = np.clip(np.round(p.max_burden / 2 + zb * p.max_burden / 4), 0, p.max_burden).astype(int)

    pfs_short = PFS_THRESHOLD_MONTHS * rng.beta(*p.short_beta, size=n)
    pfs_long = PFS_THRESHOLD_MONTHS + rng.gamma(*p.long_gamma, size=n)
    pfs = np.where(short, np.clip(np.round(pfs_short, 2), 0.5, PFS_THRESHOLD_MONTHS), np.round(pfs_long, 2))
    # rounding must never push a LONG patient onto the threshold
    pfs = np.where(~short & (pfs <= PFS_THRESHOLD_MONTHS), PFS_THRESHOLD_MONTHS + 0.01, pfs)

    width = max(3, len(str(n)))
    records = []
    for i in range(n):
        pid = f"p{i + 1:0{width}d}"
        labs = LabPanel(*(max(1.0, round(float(v), 1)) for v in (ast[i], alt[i], ggt[i], cga[i])))
        records.append(PatientRecord(
            id=pid, labs=labs, pfs_months=float(pfs[i]), label=SHORT if short[i] else LONG,
            sex="F" if female[i] else "M",
            pet_path=f"volumes/{pid}_pet.vol", ct_path=f"volumes/{pid}_ct.vol",
            latents={"burden": int(burden[i]), "hepatic": round(float(zh[i]), 6), "marker": round(float(zc[i]), 6)},
        ))
    return CohortManifest(int(seed), records, p.to_dict())


# --------------------------------------------------------------------------
# phantoms


@lru_cache(maxsize=4)
def _grid(shape: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return tuple(np.arange(s, dtype=np.float32).reshape([-1 if i == j else 1 for j in range(3)])
                 for i, s in enumerate(shape))


def _ellipsoid(shape: tuple, center, radii) -> np.ndarray:
    z, y, x = _grid(shape)
    return ((z - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2 + ((x - center[2]) / radii[2]) ** 2 <= 1.0


def _anatomy(shape: tuple) -> dict:
    d, h, w = shape
    c = (d / 2, h / 2, w / 2)
    return {
        "body": (c, (0.46 * d, 0.34 * h, 0.42 * w)),
        "inner": (c, (0.46 * d - 3, 0.34 * h - 3, 0.42 * w - 3)),
        "liver": ((0.4 * d, 0.45 * h, 0.33 * w), (0.15 * d, 0.19 * h, 0.19 * w)),
    }


def _uniform_noise(rng, shape, sd) -> np.ndarray:
    a = sd * math.sqrt(3.0)
    return rng.uniform(-a, a, size=shape).astype(np.float32)


def _random_point(rng, center, radii, scale: float = 0.8) -> np.ndarray:
    while True:
        u = rng.uniform(-1, 1, size=3)
        if u @ u <= 1:
            return np.asarray(center) + scale * u * np.asarray(radii)


def pet_phantom(burden: int, rng: np.random.Generator, p: GeneratorParams) -> np.ndarray:
    """Body background plus ``burden`` Gaussian lesions whose peak also rises with burden."""
    shape = tuple(p.raw_shape)
    anat = _anatomy(shape)
    body = _ellipsoid(shape, *anat["body"])
    vol = np.where(body, p.pet_background, 0.1 * p.pet_background).astype(np.float32)
    vol += _uniform_noise(rng, shape, p.pet_noise_sd)
    z, y, x = _grid(shape)
    for _ in range(int(burden)):
        region = anat["liver"] if rng.random() < 0.6 else anat["inner"]
        ctr = _random_point(rng, *region)
        sigma = rng.uniform(1.8, 2.6)
        peak = (p.pet_peak_base + p.pet_peak_per_lesion * burden) * rng.lognormal(0.0, 0.1)
        lo = np.maximum(np.floor(ctr - 4 * sigma).astype(int), 0)
        hi = np.minimum(np.ceil(ctr + 4 * sigma).astype(int) + 1, shape)
        sl = tuple(slice(a, b) for a, b in zip(lo, hi))
        r2 = (z[sl[0]] - ctr[0]) ** 2 + (y[:, sl[1]] - ctr[1]) ** 2 + (x[:, :, sl[2]] - ctr[2]) ** 2
        vol[sl] += (peak * np.exp(-r2 / (2 * sigma ** 2))).astype(np.float32)
    return vol


def ct_phantom(hepatic: float, rng: np.random.Generator, p: GeneratorParams) -> tuple[np.ndarray, float]:
    """HU-like body with fat rim, soft tissue, liver and hyperdense liver lesions.

    Liver attenuation, lesion count and lesion contrast all grow with ``hepatic``. Returns the volume and the
    lesion share of liver voxels (the auxiliary pretraining target).
    """
    shape = tuple(p.raw_shape)
    anat = _anatomy(shape)
    vol = np.full(shape, -1000.0, dtype=np.float32)
    vol[_ellipsoid(shape, *anat["body"])] = -100.0
    vol[_ellipsoid(shape, *anat["inner"])] = 40.0
    liver = _ellipsoid(shape, *anat["liver"])
    liver_hu = p.ct_liver_hu + p.ct_liver_hu_per_sd * hepatic
    vol[liver] = liver_hu
    lesions = np.zeros(shape, dtype=bool)
    count = int(np.clip(round(3 + 1.5 * hepatic), 0, 8))
    contrast = max(30.0, p.ct_lesion_contrast + p.ct_contrast_per_sd * hepatic)
    for _ in range(count):
        ctr = _random_point(rng, *anat["liver"], scale=0.7)
        radius = rng.uniform(*p.ct_lesion_radius)
        lesions |= _ellipsoid(shape, ctr, (radius, radius, radius)) & liver
    vol[lesions] = liver_hu + contrast
    vol += _uniform_noise(rng, shape, p.ct_noise_sd)
    return vol, float(lesions.sum() / liver.sum())


def generate_volume_pair(record: PatientRecord, seed: int,
                         params: GeneratorParams | None = None) -> tuple[Volume, Volume]:
    """PET and CT phantoms on identical grids, stored with scanner-style rescale tags."""
    p = params or GeneratorParams()
    rng = np.random.default_rng(derive_seed(seed, record.id, "volumes"))
    pet_true = pet_phantom(record.latents.get("burden", 0), rng, p)
    ct_true, _ = ct_phantom(record.latents.get("hepatic", 0.0), rng, p)
    slope = float(np.round(rng.uniform(0.5, 2.0), 4))
    pet = Volume("PET", pet_true / np.float32(slope), p.spacing_mm, rescale_slope=slope)
    ct = Volume("CT", ct_true + np.float32(1024.0), p.spacing_mm, rescale_intercept=-1024.0)
    return pet, ct


def generate_pretraining_set(n: int, seed: int, params: GeneratorParams | None = None) -> list[tuple[str, Volume, float]]:
    """Independent CT phantoms (ids ``pt-###``) with their lesion-fraction targets."""
    p = params or GeneratorParams()
    out = []
    for i in range(n):
        pid = f"pt-{i + 1:03d}"
        rng = np.random.default_rng(derive_seed(seed, pid, "pretrain"))
        vol, frac = ct_phantom(float(rng.normal()), rng, p)
        out.append((pid, Volume("CT", vol, p.spacing_mm), frac))
    return out


def _write_pair(args) -> None:
    record, seed, params, root = args
    pet, ct = generate_volume_pair(record, seed, params)
    write_volume(root / record.pet_path, pet)
    write_volume(root / record.ct_path, ct)


def write_cohort(manifest: CohortManifest, outdir: str | Path, jobs: int = 1) -> Path:
    """Write ``cohort.json`` and every patient's volume pair under ``outdir``."""
    root = Path(outdir)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    params = manifest.params()
    tasks = [(r, manifest.seed, params, root) for r in manifest.records]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_write_pair, tasks))
    else:
        for t in tasks:
            _write_pair(t)
    path = root / "cohort.json"
    path.write_text(manifest.to_json())
    return path


def load_cohort(path: str | Path) -> CohortManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "cohort.json"
    return CohortManifest.from_json(path.read_text())


# --------------------------------------------------------------------------
# cohort summary


@dataclass
class SummaryRow:
    variable: str
    overall: str
    short: str
    long: str
    test: str
    p_value: float | None
    result: TestResult | None = None


@dataclass
class CohortSummary:
    rows: list
    n_short: int
    n_long: int

    def row(self, variable: str) -> SummaryRow:
        for r in self.rows:
            if r.variable == variable:
                return r
        raise KeyError(variable)

    def to_csv(self) -> str:
        lines = ["variable,overall,short_pfs,long_pfs,test,p_value"]
        for r in self.rows:
            p = "" if r.p_value is None else f"{r.p_value:.3f}"
            lines.append(f"{r.variable},{r.overall},{r.short},{r.long},{r.test},{p}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        header = ("Variable", "Overall", f"PFS <= 12 mo (n={self.n_short})", f"PFS > 12 mo (n={self.n_long})", "p")
        body = [(r.variable, r.overall, r.short, r.long, "" if r.p_value is None else f"{r.p_value:.3f}")
                for r in self.rows]
        widths = [max(len(str(row[i])) for row in [header] + body) for i in range(5)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        return "\n".join(fmt.format(*row) for row in [header] + body) + "\n"


def _fmt_num(v: float) -> str:
    return f"{v:.0f}" if abs(v) >= 100 else f"{v:.3g}"


def _median_range(values: np.ndarray) -> str:
    return f"{_fmt_num(float(np.median(values)))} ({_fmt_num(float(values.min()))}-{_fmt_num(float(values.max()))})"


def _count_pct(k: int, n: int) -> str:
    return f"{k} ({round(100 * k / n)}%)"


def cohort_summary(records: Sequence[PatientRecord] | CohortManifest) -> CohortSummary:
    """Table-1 style comparison of SHORT vs LONG (Mann-Whitney for labs, Fisher for sex)."""
    recs = list(records.records if isinstance(records, CohortManifest) else records)
    short = [r for r in recs if r.label == SHORT]
    long_ = [r for r in recs if r.label == LONG]
    if not short or not long_:
        raise ValidationError("cohort summary needs both SHORT and LONG patients")
    rows = [SummaryRow("Patients", str(len(recs)), _count_pct(len(short), len(recs)),
                       _count_pct(len(long_), len(recs)), "", None)]

    fs = sum(r.sex == "F" for r in short)
    fl = sum(r.sex == "F" for r in long_)
    fisher = fisher_exact_2x2([[fs, len(short) - fs], [fl, len(long_) - fl]])
    rows.append(SummaryRow("Female", _count_pct(fs + fl, len(recs)), _count_pct(fs, len(short)),
                           _count_pct(fl, len(long_)), "fisher", fisher.p_raw, fisher))

    getters = {
        "CgA (ug/l)": lambda r: r.labs.cga_ug_per_l,
        "AST (U/l)": lambda r: r.labs.ast_u_per_l,
        "ALT (U/l)": lambda r: r.labs.alt_u_per_l,
        "GGT (U/l)": lambda r: r.labs.ggt_u_per_l,
        "De Ritis ratio": lambda r: r.labs.de_ritis,
    }
    for name, get in getters.items():
        a = np.array([get(r) for r in short])
        b = np.array([get(r) for r in long_])
        res = mann_whitney_u(a, b)
        rows.append(SummaryRow(name, _median_range(np.r_[a, b]), _median_range(a), _median_range(b),
                               "mann-whitney", res.p_raw, res))
    return CohortSummary(rows, len(short), len(long_))
