"""Repeated stratified cross-validation over the seven models, plus family tests and reports.

Per-patient work that does not depend on the fold (slope harmonization,
artifact clipping, resizing and the parameter-free max-pool stem) is done once
and cached. Everything fitted on data (intensity normalizers, lab standardizer,
the models themselves) is fitted per fold on training ids only, and every run
carries an audit of those ids.
"""

from __future__ import annotations

import json
import math
import multiprocessing as mp
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import explain as E
from . import models as M
from . import preprocess as P
from . import stats
from . import synthcohort as S
from . import tensor as T
from .errors import LeakageError, ValidationError
from .forest import permutation_importance
from .tensor import Tensor

REPETITIONS = 5
N_FOLDS = 3


# --------------------------------------------------------------------------
# fold plan


@dataclass
class FoldPlan:
    seed: int
    ids: tuple
    assignments: list  # one dict id -> fold per repetition

    @property
    def repetitions(self) -> int:
        return len(self.assignments)

    @property
    def n_folds(self) -> int:
        return 1 + max(max(a.values()) for a in self.assignments)

    def test_ids(self, rep: int, fold: int) -> tuple:
        return tuple(i for i in self.ids if self.assignments[rep][i] == fold)

    def train_ids(self, rep: int, fold: int) -> tuple:
        return tuple(i for i in self.ids if self.assignments[rep][i] != fold)

    def fold_sizes(self, rep: int) -> list[int]:
        return [len(self.test_ids(rep, f)) for f in range(self.n_folds)]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "ids": list(self.ids), "assignments": [[a[i] for i in self.ids] for a in self.assignments]}


def make_fold_plan(ids: Sequence[str], labels, seed: int, repetitions: int = REPETITIONS,
                   n_folds: int = N_FOLDS) -> FoldPlan:
    """Per repetition: shuffle each class, then deal patients round-robin into folds.

    Dealing the two shuffled class lists back to back keeps fold sizes within
    one of each other and each fold's class counts within one of the ideal.
    """
    ids = tuple(ids)
    y = np.asarray(labels).astype(int)
    if len(ids) != y.size:
        raise ValidationError("ids and labels differ in length")
    if len(set(ids)) != len(ids):
        raise ValidationError("patient ids must be unique")
    if len(ids) < 2 * n_folds:
        raise ValidationError(f"need at least {2 * n_folds} patients for {n_folds}-fold CV")
    for c in (0, 1):
        if (y == c).sum() < n_folds:
            raise ValidationError(f"class {c} has {(y == c).sum()} patients, too few to stratify into {n_folds} folds")
    assignments = []
    for rep in range(repetitions):
        rng = np.random.default_rng(S.derive_seed(seed, "folds", rep))
        order = np.concatenate([rng.permutation(np.nonzero(y == c)[0]) for c in (0, 1)])
        relabel = rng.permutation(n_folds)
        assignments.append({ids[i]: int(relabel[k % n_folds]) for k, i in enumerate(order)})
    return FoldPlan(seed, ids, assignments)


# --------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    cohort: str | None = None  # directory with cohort.json; None generates the cohort in memory
    models: list = field(default_factory=lambda: [k.value for k in M.ALL_KINDS])
    seed: int = 42
    epochs: int | None = None
    batch_size: int | None = None
    widths: tuple = M.ModelSpec.widths
    stem_pools: int = M.ModelSpec.stem_pools
    repetitions: int = REPETITIONS
    folds: int = N_FOLDS
    n_patients: int = 116
    short_fraction: float = 0.36
    n_pretrain: int = 60
    pretrain_epochs: int = 10
    # the auxiliary task uses a smaller step than the downstream fits so the encoder keeps its feature scale
    pretrain_lr: float = 0.001
    importance_repeats: int = 10
    saliency_kinds: list = field(default_factory=lambda: ["PET_ONLY", "PET_FUSION"])
    jobs: int = 1

    def __post_init__(self):
        if not self.models:
            raise ValidationError("the experiment needs at least one model kind")
        self.models = [M.ModelKind(k).value for k in self.models]
        if len(set(self.models)) != len(self.models):
            raise ValidationError("model kinds listed twice")
        self.widths = tuple(self.widths)
        self.saliency_kinds = [M.ModelKind(k).value for k in self.saliency_kinds]
        if self.jobs < 1:
            raise ValidationError("jobs must be >= 1")
        if not self.pretrain_lr > 0:
            raise ValidationError("pretrain_lr must be positive")

    def model_spec(self, kind: str, seed: int) -> M.ModelSpec:
        extra = {}
        if self.epochs is not None:
            extra["epochs"] = self.epochs
        if self.batch_size is not None:
            extra["batch_size"] = self.batch_size
        return M.ModelSpec(kind, seed=seed, widths=self.widths, stem_pools=self.stem_pools, **extra)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d.pop("jobs")  # scheduling never changes results, so it stays out of reports
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# data cache


@dataclass
class PatientCache:
    moments: dict  # modality -> VolumeMoments of the clipped native-grid volume
    stem: dict  # modality -> [1, d, h, w] stem output of the resized volume
    resized: dict  # modality -> [D, H, W] resized volume (kept only where saliency needs it)


def _stem(vol: np.ndarray, pools: int) -> np.ndarray:
    x = Tensor(vol[None, None])
    with T.no_grad():
        for _ in range(pools):
            x = T.maxpool3d(x)
    return x.data[0]


def _cache_volume(vol: P.Volume, pools: int, keep: bool) -> tuple:
    prepared = P.prepare_volume(vol)
    resized = P.resize_volume(prepared).voxels
    return P.volume_moments(prepared), _stem(resized, pools), (resized if keep else None)


def build_cache(manifest: S.CohortManifest, root: Path | None, pools: int, keep_full: Sequence[str] = ()) -> dict:
    """Fold-independent preprocessing for every patient.

    Normalization is an increasing affine map, and both resizing (weights sum
    to one) and max-pooling commute with such maps, so normalizing the cached
    stem output later equals running the full chain in its nominal order.
    """
    params = manifest.params()
    cache = {}
    for r in manifest.records:
        if root is None:
            pet, ct = S.generate_volume_pair(r, manifest.seed, params)
        else:
            pet, ct = P.read_volume(root / r.pet_path), P.read_volume(root / r.ct_path)
        entry = PatientCache({}, {}, {})
        for v in (pet, ct):
            mom, st, full = _cache_volume(v, pools, v.modality in keep_full)
            entry.moments[v.modality] = mom
            entry.stem[v.modality] = st
            if full is not None:
                entry.resized[v.modality] = full
        cache[r.id] = entry
    return cache


# --------------------------------------------------------------------------
# fold tasks


@dataclass
class FoldContext:
    """Everything fitted on a fold's training ids, shared by all models of that fold."""

    rep: int
    fold: int
    train_ids: tuple
    test_ids: tuple
    normalizers: dict
    lab_stats: M.LabStandardizer

    def audit_row(self) -> dict:
        return {"rep": self.rep, "fold": self.fold, "test_ids": list(self.test_ids),
                "normalizer_ids": {k: list(n.fit_on) for k, n in self.normalizers.items()},
                "lab_standardizer_ids": list(self.lab_stats.fit_on)}


@dataclass
class FoldResult:
    kind: str
    rep: int
    fold: int
    seed: int
    test_ids: tuple
    y_true: list
    y_prob: list
    auroc: float = math.nan
    auprc: float = math.nan
    accuracy: float = math.nan
    failed: bool = False
    error: str = ""
    loss_trace: list = field(default_factory=list)
    lab_gradient: dict | None = None
    permutation: dict | None = None
    saliency_counts: list | None = None
    example_saliency: dict | None = None  # patient id + values, for the overlay figure
    embeddings: list | None = None

    def saliency_file(self) -> str:
        return f"saliency_{self.kind}_{self.example_saliency['patient_id']}.vol"

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["test_ids"] = list(self.test_ids)
        if self.example_saliency is not None:
            d["example_saliency"] = {"patient_id": self.example_saliency["patient_id"], "file": self.saliency_file()}
        return d

    @classmethod
    def from_dict(cls, d: dict, root: Path | None = None) -> FoldResult:
        d = dict(d)
        d["test_ids"] = tuple(d["test_ids"])
        ex = d.get("example_saliency")
        if ex is not None and root is not None and (root / ex["file"]).exists():
            d["example_saliency"] = {"patient_id": ex["patient_id"],
                                     "values": P.read_volume(root / ex["file"]).voxels}
        elif ex is not None:
            d["example_saliency"] = None
        for k in ("auroc", "auprc", "accuracy"):
            d[k] = math.nan if d[k] is None else d[k]
        return cls(**d)


def fold_context(manifest: S.CohortManifest, cache: dict, plan: FoldPlan, rep: int, fold: int) -> FoldContext:
    train, test = plan.train_ids(rep, fold), plan.test_ids(rep, fold)
    norms = {mod: P.normalizer_from_moments([cache[i].moments[mod] for i in train], mod, train)
             for mod in P.MODALITIES}
    labs = M.fit_lab_standardizer([manifest.by_id(i).labs for i in train], train)
    return FoldContext(rep, fold, train, test, norms, labs)


def _normalized(arr: np.ndarray, n: P.Normalizer) -> np.ndarray:
    return ((arr.astype(np.float64) - n.mean) / n.std).astype(np.float32)


def make_batch(manifest: S.CohortManifest, cache: dict, ctx: FoldContext, ids: Sequence[str], kind: M.ModelKind) -> M.Batch:
    stack = lambda mod: np.stack([_normalized(cache[i].stem[mod], ctx.normalizers[mod]) for i in ids])
    return M.Batch(
        pet=stack("PET") if kind.uses_pet else None,
        ct=stack("CT") if kind.uses_ct else None,
        labs=ctx.lab_stats.transform([manifest.by_id(i).labs for i in ids]),
        y=np.array([manifest.by_id(i).y for i in ids]),
        ids=tuple(ids),
        stemmed=True,
    )


def _image_embedding(model: M.FusionModel, b: M.Batch) -> np.ndarray | None:
    parts = []
    with T.no_grad():
        if model.pet_encoder is not None:
            parts.append(model.pet_encoder(Tensor(b.pet), True).data)
        if model.ct_encoder is not None:
            parts.append(model.ct_encoder(Tensor(b.ct), True).data)
    return np.concatenate(parts, axis=1)


def _head_proba(model: M.FusionModel, img: np.ndarray, labs: np.ndarray) -> np.ndarray:
    with T.no_grad():
        x = Tensor(np.concatenate([img, labs.astype(np.float32)], axis=1))
        return T.sigmoid(model.head(x).data[:, 0].astype(np.float64))


# worker-global state; set before the pool forks so tasks share it read-only
_STATE: dict = {}


def _run_task(task: tuple) -> FoldResult:
    kind_name, rep, fold, seed = task
    cfg: ExperimentConfig = _STATE["config"]
    manifest, cache, ctx = _STATE["manifest"], _STATE["cache"], _STATE["contexts"][(rep, fold)]
    kind = M.ModelKind(kind_name)
    spec = cfg.model_spec(kind_name, seed)
    train_b = make_batch(manifest, cache, ctx, ctx.train_ids, kind)
    test_b = make_batch(manifest, cache, ctx, ctx.test_ids, kind)
    res = FoldResult(kind_name, rep, fold, seed, ctx.test_ids, [int(v) for v in test_b.y], [])
    model = M.build_model(spec)
    if kind.pretrained:
        M.copy_encoder(_STATE["pretrained"], model.ct_encoder)
    try:
        res.loss_trace = [float(v) for v in M.train(model, train_b, spec)]
        prob = M.predict_proba(model, test_b)
        if not np.all(np.isfinite(prob)):
            raise M.TrainingDiverged("non-finite predictions")
    except M.TrainingDiverged as exc:
        res.failed, res.error = True, str(exc)
        return res
    res.y_prob = [float(p) for p in prob]
    res.auroc = stats.auroc(prob, test_b.y)
    res.auprc = stats.auprc(prob, test_b.y)
    res.accuracy = stats.accuracy(prob, test_b.y)
    imp_rng = np.random.default_rng(S.derive_seed(seed, "importance"))
    if kind.is_forest:
        imp = permutation_importance(model.forest.predict_proba, test_b.labs, test_b.y, cfg.importance_repeats, imp_rng)
        res.permutation = dict(zip(M.LAB_FEATURES, map(float, imp)))
        return res
    img = _image_embedding(model, test_b)
    if kind.uses_labs:
        imp = permutation_importance(lambda X: _head_proba(model, img, X), test_b.labs, test_b.y,
                                     cfg.importance_repeats, imp_rng)
        res.permutation = dict(zip(M.LAB_FEATURES, map(float, imp)))
        res.lab_gradient = E.lab_gradient_importance(model, test_b)
    if rep == 0:
        if fold == 0:
            labs = test_b.labs if kind.uses_labs else np.zeros((len(test_b), 0), np.float32)
            res.embeddings = np.concatenate([img, labs], axis=1).astype(np.float64).tolist()
        if kind_name in cfg.saliency_kinds:
            _saliency(res, model, manifest, cache, ctx, test_b)
    return res


def _saliency(res: FoldResult, model: M.FusionModel, manifest, cache, ctx: FoldContext, test_b: M.Batch) -> None:
    """Pooled PET saliency histogram over the fold's test patients, plus one example volume."""
    counts = np.zeros(E.N_BINS, dtype=np.int64)
    for k, pid in enumerate(ctx.test_ids):
        pet = _normalized(cache[pid].resized["PET"], ctx.normalizers["PET"])
        ct = _normalized(cache[pid].resized["CT"], ctx.normalizers["CT"]) if model.kind.uses_ct else None
        labs = test_b.labs[k] if model.kind.uses_labs else None
        sal = E.input_gradient_saliency(model, pet=pet, ct=ct, labs=labs, patient_id=pid)["pet"]
        counts += E.gradient_distribution([sal]).counts
        if ctx.fold == 0 and k == 0:
            res.example_saliency = {"patient_id": pid, "values": sal.values.astype(np.float32)}
    res.saliency_counts = counts.tolist()


# --------------------------------------------------------------------------
# experiment


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    manifest: S.CohortManifest
    plan: FoldPlan
    folds: list  # FoldResult, sorted by (kind order, rep, fold)
    audit: list  # FoldContext.audit_row() per (rep, fold)
    pretrain: dict | None = None

    def by_kind(self, kind: str) -> list[FoldResult]:
        return [f for f in self.folds if f.kind == kind]

    def fold_grid(self, kind: str, metric: str = "auroc") -> np.ndarray:
        grid = np.full((self.config.repetitions, self.config.folds), np.nan)
        for f in self.by_kind(kind):
            grid[f.rep, f.fold] = math.nan if f.failed else getattr(f, metric)
        return grid

    def summary(self, kind: str, metric: str = "auroc") -> stats.CvSummary:
        return stats.summarize_cv(self.fold_grid(kind, metric), self.config.repetitions, self.config.folds)

    def kinds(self) -> list[str]:
        return [k for k in self.config.models if self.by_kind(k)]

    def to_dict(self) -> dict:
        folds = []
        for f in self.folds:
            d = f.to_dict()
            for k in ("auroc", "auprc", "accuracy"):
                d[k] = None if math.isnan(d[k]) else d[k]
            folds.append(d)
        return {
            "config": self.config.to_dict(),
            "cohort": json.loads(self.manifest.to_json()),
            "plan": self.plan.to_dict(),
            "pretrain": self.pretrain,
            "audit": self.audit,
            "folds": folds,
        }


RESULT_FILE = "results.json"


def save_result(result: ExperimentResult, outdir: str | Path) -> Path:
    """Full result bundle (JSON plus example saliency volumes) for later ``report``/``explain`` calls."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    for f in result.folds:
        if f.example_saliency is not None:
            sal = E.SaliencyVolume(np.asarray(f.example_saliency["values"]), "PET", f.kind, f.example_saliency["patient_id"])
            E.write_saliency(out / f.saliency_file(), sal)
    path = out / RESULT_FILE
    path.write_text(json.dumps(result.to_dict(), sort_keys=True) + "\n")
    return path


def load_result(outdir: str | Path) -> ExperimentResult:
    root = Path(outdir)
    path = root / RESULT_FILE if root.is_dir() else root
    d = json.loads(path.read_text())
    cfg = ExperimentConfig.from_dict(d["config"])
    manifest = S.CohortManifest.from_json(json.dumps(d["cohort"]))
    pl = d["plan"]
    plan = FoldPlan(pl["seed"], tuple(pl["ids"]), [dict(zip(pl["ids"], a)) for a in pl["assignments"]])
    folds = [FoldResult.from_dict(f, path.parent) for f in d["folds"]]
    return ExperimentResult(cfg, manifest, plan, folds, d["audit"], d["pretrain"])


def _pretrain(cfg: ExperimentConfig, manifest: S.CohortManifest) -> tuple[M.Encoder3D, dict]:
    """Lesion-fraction regression on independent CT phantoms, normalized with their own statistics."""
    seed = S.derive_seed(cfg.seed, "pretrain-set")
    pre = S.generate_pretraining_set(cfg.n_pretrain, seed, manifest.params())
    ids = tuple(p[0] for p in pre)
    cached = [_cache_volume(v, cfg.stem_pools, False) for _, v, _ in pre]
    norm = P.normalizer_from_moments([c[0] for c in cached], "CT", ids)
    x = np.stack([_normalized(c[1], norm) for c in cached])
    targets = np.array([p[2] for p in pre])
    rng = np.random.default_rng(S.derive_seed(cfg.seed, "pretrain-init"))
    enc = M.Encoder3D(cfg.widths, M.ModelSpec.input_shape, cfg.stem_pools, rng, "ct")
    spec = cfg.model_spec(M.ModelKind.PETCT_FUSION_PRETRAINED, 0)
    r = M.pretrain_ct_encoder(enc, x, targets, ids, forbidden_ids=manifest.ids, epochs=cfg.pretrain_epochs,
                              batch_size=spec.batch_size, lr=cfg.pretrain_lr, seed=cfg.seed)
    info = {"ids": list(ids), "normalizer_ids": list(norm.fit_on), "val_mse_before": r.val_mse_before,
            "val_mse_after": r.val_mse_after, "trace": r.trace}
    return enc, info


def load_manifest(cfg: ExperimentConfig) -> tuple[S.CohortManifest, Path | None]:
    if cfg.cohort is None:
        return S.generate_cohort(cfg.n_patients, cfg.short_fraction, cfg.seed), None
    root = Path(cfg.cohort)
    return S.load_cohort(root), (root if root.is_dir() else root.parent)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    manifest, root = load_manifest(cfg)
    plan = make_fold_plan(manifest.ids, manifest.labels, cfg.seed, cfg.repetitions, cfg.folds)
    keep = ("PET", "CT") if any(k in cfg.models for k in cfg.saliency_kinds) else ()
    cache = build_cache(manifest, root, cfg.stem_pools, keep)
    contexts = {(r, f): fold_context(manifest, cache, plan, r, f)
                for r in range(cfg.repetitions) for f in range(cfg.folds)}
    pretrained, pre_info = (None, None)
    if M.ModelKind.PETCT_FUSION_PRETRAINED.value in cfg.models:
        pretrained, pre_info = _pretrain(cfg, manifest)
    # every seed is derived up front, so worker scheduling cannot influence results
    tasks = [(k, r, f, S.derive_seed(cfg.seed, "model", k, r, f))
             for k in cfg.models for r in range(cfg.repetitions) for f in range(cfg.folds)]
    _STATE.update(config=cfg, manifest=manifest, cache=cache, contexts=contexts, pretrained=pretrained)
    try:
        if cfg.jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(cfg.jobs, mp_context=mp.get_context("fork")) as pool:
                results = list(pool.map(_run_task, tasks, chunksize=1))
        else:
            results = [_run_task(t) for t in tasks]
    finally:
        _STATE.clear()
    audit = [contexts[key].audit_row() for key in sorted(contexts)]
    result = ExperimentResult(cfg, manifest, plan, results, audit, pre_info)
    leakage_audit(result)
    return result


# --------------------------------------------------------------------------
# leakage audit


@dataclass
class AuditReport:
    checked_folds: int
    checked_statistics: int
    violations: list

    @property
    def clean(self) -> bool:
        return not self.violations


def leakage_audit(result: ExperimentResult | dict, raise_on_violation: bool = True) -> AuditReport:
    """Check that no fitted statistic saw any patient of the fold it is evaluated on.

    Covers both intensity normalizers and the lab standardizer of every
    (repetition, fold), and the pretraining set against every test fold.
    """
    d = result.to_dict() if isinstance(result, ExperimentResult) else result
    pre_ids = set((d.get("pretrain") or {}).get("ids", []))
    pre_norm = set((d.get("pretrain") or {}).get("normalizer_ids", []))
    violations, n_stats = [], 0
    for row in d["audit"]:
        test = set(row["test_ids"])
        fitted = dict(("normalizer:" + k, v) for k, v in row["normalizer_ids"].items())
        fitted["lab_standardizer"] = row["lab_standardizer_ids"]
        if d.get("pretrain"):
            fitted["pretraining_set"] = pre_ids
            fitted["pretraining_normalizer"] = pre_norm
        for name, ids in fitted.items():
            n_stats += 1
            overlap = sorted(test & set(ids))
            if overlap:
                violations.append({"rep": row["rep"], "fold": row["fold"], "statistic": name, "ids": overlap})
    for f in d.get("folds", []):
        key = next((r for r in d["audit"] if r["rep"] == f["rep"] and r["fold"] == f["fold"]), None)
        if key is None or sorted(key["test_ids"]) != sorted(f["test_ids"]):
            violations.append({"rep": f["rep"], "fold": f["fold"], "statistic": "model:" + f["kind"],
                               "ids": ["evaluated on ids outside the audited test fold"]})
    report = AuditReport(len(d["audit"]), n_stats, violations)
    if raise_on_violation and violations:
        raise LeakageError(f"{len(violations)} leakage violations, first: {violations[0]}")
    return report


# --------------------------------------------------------------------------
# family comparison


class Family(str, Enum):
    UNIMODAL = "UNIMODAL"
    ONE_IMAGE_FUSION = "ONE_IMAGE_FUSION"
    DUAL_FUSION = "DUAL_FUSION"


FAMILIES = {
    Family.UNIMODAL: (M.ModelKind.RF_LABS, M.ModelKind.PET_ONLY, M.ModelKind.CT_ONLY),
    Family.ONE_IMAGE_FUSION: (M.ModelKind.PET_FUSION, M.ModelKind.CT_FUSION),
    Family.DUAL_FUSION: (M.ModelKind.PETCT_FUSION, M.ModelKind.PETCT_FUSION_PRETRAINED),
}
COMPARISONS = ((Family.ONE_IMAGE_FUSION, Family.UNIMODAL), (Family.DUAL_FUSION, Family.ONE_IMAGE_FUSION))


@dataclass
class FamilyComparison:
    family: Family
    baseline: Family
    samples: list
    baseline_samples: list
    mann_whitney: stats.TestResult
    cliffs: stats.TestResult

    def to_dict(self) -> dict:
        return {"family": self.family.value, "baseline": self.baseline.value,
                "n": len(self.samples), "n_baseline": len(self.baseline_samples),
                "median": float(np.median(self.samples)), "median_baseline": float(np.median(self.baseline_samples)),
                "mann_whitney": self.mann_whitney.to_dict(), "cliffs_delta": self.cliffs.to_dict(),
                "sampling_unit": "fold-level AUROC"}


def family_of(kind: str | M.ModelKind) -> Family:
    kind = M.ModelKind(kind)
    return next(f for f, members in FAMILIES.items() if kind in members)


def compare_families(samples_by_kind: dict[str, Sequence[float]] | ExperimentResult) -> list[FamilyComparison]:
    """Pooled fold-level AUROC per family; Mann-Whitney with Bonferroni over both comparisons."""
    if isinstance(samples_by_kind, ExperimentResult):
        r = samples_by_kind
        samples_by_kind = {k: [f.auroc for f in r.by_kind(k) if not f.failed] for k in r.kinds()}
    missing = [k.value for k in M.ALL_KINDS if k.value not in samples_by_kind]
    if missing:
        raise ValidationError(f"family comparison needs all seven kinds; missing {missing}")
    pooled = {}
    for fam, members in FAMILIES.items():
        vals = [float(v) for k in members for v in samples_by_kind[k.value] if not math.isnan(v)]
        if not vals:
            raise ValidationError(f"family {fam.value} has no successful folds")
        pooled[fam] = vals
    out = []
    for fam, base in COMPARISONS:
        mw = stats.mann_whitney_u(pooled[fam], pooled[base])
        out.append(FamilyComparison(fam, base, pooled[fam], pooled[base], mw, stats.cliffs_delta(pooled[fam], pooled[base])))
    adjusted = stats.bonferroni([c.mann_whitney.p_raw for c in out], len(COMPARISONS))
    for c, p in zip(out, adjusted):
        c.mann_whitney.p_adjusted = float(p)
        c.cliffs.p_adjusted = float(p)
    return out


# --------------------------------------------------------------------------
# Kaplan-Meier stratification


@dataclass
class Stratification:
    threshold: float
    n_low: int
    n_high: int
    low: stats.SurvivalCurve | None
    high: stats.SurvivalCurve | None
    logrank: stats.TestResult | None

    @property
    def stratifiable(self) -> bool:
        return self.logrank is not None

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "n_low": self.n_low, "n_high": self.n_high,
                "stratifiable": self.stratifiable,
                "median_low": self.low.median if self.low else None,
                "median_high": self.high.median if self.high else None,
                "logrank": self.logrank.to_dict() if self.logrank else None}


def km_stratify(predictions, pfs_months, events=None, threshold: float = 0.5) -> Stratification:
    """Low stratum: prediction < threshold; high stratum: prediction >= threshold."""
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    t = np.asarray(pfs_months, dtype=np.float64).reshape(-1)
    e = np.ones(t.size, bool) if events is None else np.asarray(events, bool).reshape(-1)
    if p.shape != t.shape or e.shape != t.shape:
        raise ValidationError("predictions, times and events differ in length")
    hi = p >= threshold
    if hi.all() or not hi.any():
        return Stratification(threshold, int((~hi).sum()), int(hi.sum()), None, None, None)
    low_c = stats.kaplan_meier(t[~hi], e[~hi])
    high_c = stats.kaplan_meier(t[hi], e[hi])
    return Stratification(threshold, int((~hi).sum()), int(hi.sum()), low_c, high_c,
                          stats.logrank_test(t[~hi], t[hi], e[~hi], e[hi]))


def out_of_fold_predictions(result: ExperimentResult, kind: str, rep: int = 0) -> dict[str, float]:
    """Each patient's prediction from the one fold of ``rep`` where it was held out."""
    out = {}
    for f in result.by_kind(kind):
        if f.rep == rep and not f.failed:
            out.update(zip(f.test_ids, f.y_prob))
    return out


# --------------------------------------------------------------------------
# reports


def _f(v: float | None) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def metrics_csv(result: ExperimentResult) -> str:
    lines = ["model,auroc_mean,auroc_se,auprc_mean,auprc_se,accuracy_mean,accuracy_se,folds_used,folds_failed"]
    for k in result.kinds():
        cells = [k]
        for metric in ("auroc", "auprc", "accuracy"):
            try:
                s = result.summary(k, metric)
                cells += [_f(s.mean), _f(s.se)]
            except (ValidationError, ArithmeticError):
                cells += ["", ""]
        failed = sum(f.failed for f in result.by_kind(k))
        cells += [str(len(result.by_kind(k)) - failed), str(failed)]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def importance_csv(result: ExperimentResult) -> str:
    lines = ["model,method,feature,mean,rank"]
    for k in result.kinds():
        for method in ("permutation", "lab_gradient"):
            rows = [getattr(f, method) for f in result.by_kind(k) if getattr(f, method)]
            if not rows:
                continue
            means = {feat: float(np.mean([r[feat] for r in rows])) for feat in M.LAB_FEATURES}
            order = sorted(M.LAB_FEATURES, key=lambda feat: (-means[feat], feat))
            for feat in M.LAB_FEATURES:
                lines.append(f"{k},{method},{feat},{_f(means[feat])},{order.index(feat) + 1}")
    return "\n".join(lines) + "\n"


def top_lab_by_repetition(result: ExperimentResult, kind: str, method: str = "lab_gradient") -> list[str]:
    """Highest-importance lab per repetition (importance averaged over that repetition's folds)."""
    out = []
    for rep in range(result.config.repetitions):
        rows = [getattr(f, method) for f in result.by_kind(kind) if f.rep == rep and getattr(f, method)]
        if rows:
            means = {feat: np.mean([r[feat] for r in rows]) for feat in M.LAB_FEATURES}
            out.append(max(M.LAB_FEATURES, key=lambda feat: (means[feat], -M.LAB_FEATURES.index(feat))))
    return out


def saliency_histogram(result: ExperimentResult, kind: str) -> E.GradientHistogram | None:
    rows = [f.saliency_counts for f in result.by_kind(kind) if f.saliency_counts is not None]
    if not rows:
        return None
    counts = np.sum(np.array(rows, dtype=np.int64), axis=0)
    return E.GradientHistogram(np.linspace(0.0, 1.0, E.N_BINS + 1), counts, int(counts.sum()))


def saliency_distances(result: ExperimentResult, a: str = "PET_ONLY", b: str = "PET_FUSION") -> E.DistanceReport | None:
    ha, hb = saliency_histogram(result, a), saliency_histogram(result, b)
    if ha is None or hb is None:
        return None
    return E.distribution_distances(ha, hb)


def predictions_csv(result: ExperimentResult) -> str:
    lines = ["model,repetition,fold,patient_id,label,probability"]
    for f in result.folds:
        for pid, y, p in zip(f.test_ids, f.y_true, f.y_prob):
            lines.append(f"{f.kind},{f.rep},{f.fold},{pid},{y},{p:.8f}")
    return "\n".join(lines) + "\n"


def km_steps_csv(curve: stats.SurvivalCurve) -> str:
    return "time_months,survival,at_risk\n" + "".join(f"{t:.6f},{s:.6f},{n}\n" for t, s, n in curve.steps())


REPORT_SECTIONS = ("tables", "survival", "explain")


def export_reports(result: ExperimentResult | None, outdir: str | Path, km_kind: str = "PETCT_FUSION",
                   sections: Sequence[str] = REPORT_SECTIONS) -> list[Path]:
    """Write report files plus ``manifest.json``; contents depend only on the config and seed.

    ``tables``: metrics, cohort summary, per-fold predictions, lab importance,
    family tests. ``survival``: KM stratification of ``km_kind``. ``explain``:
    gradient distances and histograms, saliency overlays, embedding projections.
    The manifest describes the whole bundle, so a partial export leaves it alone.
    """
    unknown = set(sections) - set(REPORT_SECTIONS)
    if unknown:
        raise ValidationError(f"unknown report sections {sorted(unknown)}")
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def put(name: str, text: str) -> None:
        path = out / name
        path.write_text(text)
        written.append(path)

    manifest = {"package_version": __version__, "numpy_version": np.__version__,
                "python_version": platform.python_version(), "files": []}
    if result is None:
        put("manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return written
    if "tables" in sections:
        _export_tables(result, put)
    if "survival" in sections and km_kind in result.kinds():
        _export_survival(result, km_kind, put)
    if "explain" in sections:
        _export_explain(result, out, put, written)
    cfg = result.config
    manifest.update({
        "config": cfg.to_dict(),
        "master_seed": cfg.seed,
        "model_seeds": {f"{f.kind}/{f.rep}/{f.fold}": f.seed for f in result.folds},
        "failed_folds": [f"{f.kind}/{f.rep}/{f.fold}" for f in result.folds if f.failed],
        "family_test_sampling_unit": "fold-level AUROC, pooled over family members",
        "leakage_audit": asdict(leakage_audit(result, raise_on_violation=False)),
        "files": sorted(p.name for p in written),
    })
    if set(sections) != set(REPORT_SECTIONS):
        return written
    put("manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return written


def _export_tables(result: ExperimentResult, put) -> None:
    put("metrics.csv", metrics_csv(result))
    put("cohort_summary.csv", S.cohort_summary(result.manifest).to_csv())
    put("fold_predictions.csv", predictions_csv(result))
    put("importance.csv", importance_csv(result))
    if all(k.value in result.kinds() for k in M.ALL_KINDS):
        fam = compare_families(result)
        put("family_tests.json", json.dumps([c.to_dict() for c in fam], indent=1, sort_keys=True) + "\n")


def stratify_result(result: ExperimentResult, kind: str = "PETCT_FUSION", rep: int = 0) -> Stratification:
    oof = out_of_fold_predictions(result, kind, rep)
    ids = sorted(oof)
    recs = [result.manifest.by_id(i) for i in ids]
    return km_stratify([oof[i] for i in ids], [r.pfs_months for r in recs], [r.event for r in recs])


def _export_survival(result: ExperimentResult, kind: str, put) -> None:
    strat = stratify_result(result, kind)
    put("km_stratification.json", json.dumps({"model": kind, **strat.to_dict()}, indent=1, sort_keys=True) + "\n")
    if strat.stratifiable:
        put("km_low_pfs.csv", km_steps_csv(strat.low))
        put("km_high_pfs.csv", km_steps_csv(strat.high))


def projection(result: ExperimentResult, kind: str) -> tuple[list, E.PcaResult] | None:
    """PCA of head-input embeddings for the test patients of one fold model (repetition 0, fold 0)."""
    fold = next((f for f in result.by_kind(kind) if f.embeddings and f.rep == 0 and f.fold == 0), None)
    if fold is None or len(fold.embeddings) < 3:
        return None
    try:
        return list(fold.test_ids), E.pca_projection(np.array(fold.embeddings))
    except ValidationError:
        return None


def _export_explain(result: ExperimentResult, out: Path, put, written: list) -> None:
    dist = saliency_distances(result)
    if dist is not None:
        put("gradient_distances.json", dist.to_json() + "\n")
        ha, hb = saliency_histogram(result, "PET_ONLY"), saliency_histogram(result, "PET_FUSION")
        lines = ["bin_low,bin_high,PET_ONLY,PET_FUSION"]
        for i in range(E.N_BINS):
            lines.append(f"{ha.bin_edges[i]:.2f},{ha.bin_edges[i + 1]:.2f},{ha.counts[i]},{hb.counts[i]}")
        put("gradient_histograms.csv", "\n".join(lines) + "\n")
    for f in result.folds:
        if f.example_saliency is None or "values" not in f.example_saliency:
            continue
        pid = f.example_saliency["patient_id"]
        sal = E.SaliencyVolume(np.asarray(f.example_saliency["values"], np.float64), "PET", f.kind, pid)
        for plane, rgb in E.render_slices(sal, _example_base(result, pid)).items():
            path = out / f"saliency_{f.kind}_{pid}_{plane}.ppm"
            E.write_ppm(path, rgb)
            written.append(path)
    for k in result.kinds():
        proj = projection(result, k)
        if proj is None:
            continue
        ids, pca = proj
        rows = ["patient_id,label,pc1,pc2"] + [
            f"{pid},{result.manifest.by_id(pid).label},{c[0]:.6f},{c[1]:.6f}" for pid, c in zip(ids, pca.coords)]
        put(f"projection_{k}.csv", "\n".join(rows) + "\n")


def _example_base(result: ExperimentResult, pid: str) -> np.ndarray:
    """Resized PET volume of one patient for the overlay background."""
    cohort = result.config.cohort
    r = result.manifest.by_id(pid)
    if cohort is None:
        pet, _ = S.generate_volume_pair(r, result.manifest.seed, result.manifest.params())
    else:
        root = Path(cohort) if Path(cohort).is_dir() else Path(cohort).parent
        pet = P.read_volume(root / r.pet_path)
    return P.resize_volume(P.prepare_volume(pet)).voxels
