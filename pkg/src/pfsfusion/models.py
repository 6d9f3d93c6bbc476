"""The seven benchmark model configurations and their training loop.

Image branches are small 3D CNNs (four conv -> relu -> maxpool blocks) whose
flattened outputs are concatenated with the standardized lab vector and fed
through a three-layer MLP head. ``RF_LABS`` is a random forest on the labs.

Every encoder starts with ``stem_pools`` parameter-free 2x2x2 max-pool passes.
They shrink the 75x50x50 input before the first convolution, which is what
makes CPU training feasible. Because the stem has no weights, its output can be
computed once per patient and fed in with ``stemmed=True``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, LeakageError, UsageError, ValidationError
from .forest import Forest, ForestSpec, fit_forest
from .preprocess import TARGET_SHAPE
from .synthcohort import LabPanel, derive_seed
from .tensor import Tensor

LAB_FEATURES = ("AST", "ALT", "CgA", "GGT")
LAB_STD_FLOOR = 1e-6


class ModelKind(str, Enum):
    RF_LABS = "RF_LABS"
    PET_ONLY = "PET_ONLY"
    CT_ONLY = "CT_ONLY"
    PET_FUSION = "PET_FUSION"
    CT_FUSION = "CT_FUSION"
    PETCT_FUSION = "PETCT_FUSION"
    PETCT_FUSION_PRETRAINED = "PETCT_FUSION_PRETRAINED"

    @property
    def uses_pet(self) -> bool:
        return self in (ModelKind.PET_ONLY, ModelKind.PET_FUSION, ModelKind.PETCT_FUSION,
                        ModelKind.PETCT_FUSION_PRETRAINED)

    @property
    def uses_ct(self) -> bool:
        return self in (ModelKind.CT_ONLY, ModelKind.CT_FUSION, ModelKind.PETCT_FUSION,
                        ModelKind.PETCT_FUSION_PRETRAINED)

    @property
    def uses_labs(self) -> bool:
        return self not in (ModelKind.PET_ONLY, ModelKind.CT_ONLY)

    @property
    def is_forest(self) -> bool:
        return self is ModelKind.RF_LABS

    @property
    def pretrained(self) -> bool:
        return self is ModelKind.PETCT_FUSION_PRETRAINED


ALL_KINDS = tuple(ModelKind)


@dataclass
class ModelSpec:
    kind: ModelKind
    lr: float = 0.01
    dropout: float = 0.1
    weight_decay: float = 0.2
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    widths: tuple = (8, 16, 32, 64)
    stem_pools: int = 2
    head_widths: tuple = (128, 32)
    input_shape: tuple = TARGET_SHAPE
    n_trees: int = 100

    def __post_init__(self):
        self.kind = ModelKind(self.kind)
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")
        if len(self.widths) != 4:
            raise ValidationError("an encoder has exactly four conv blocks")


# --------------------------------------------------------------------------
# lab standardization


@dataclass(frozen=True)
class LabStandardizer:
    mean: tuple
    std: tuple
    fit_on: tuple = ()

    def transform(self, panels: Sequence[LabPanel]) -> np.ndarray:
        f = lab_features(panels)
        return ((f - np.asarray(self.mean)) / np.asarray(self.std)).astype(np.float32)


def lab_features(panels: Sequence[LabPanel]) -> np.ndarray:
    """Raw feature matrix (AST, ALT, log CgA, GGT); rejects non-positive values."""
    rows = []
    for p in panels:
        v = p.as_vector()
        if np.any(~(v > 0)):
            raise ValidationError(f"lab values must be positive, got {v}")
        rows.append([v[0], v[1], math.log(v[2]), v[3]])
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def fit_lab_standardizer(panels: Sequence[LabPanel], ids: Sequence[str] = ()) -> LabStandardizer:
    if len(panels) == 0:
        raise ValidationError("cannot fit lab statistics on zero patients")
    f = lab_features(panels)
    mean = f.mean(axis=0)
    std = np.maximum(f.std(axis=0), LAB_STD_FLOOR)
    return LabStandardizer(tuple(float(m) for m in mean), tuple(float(s) for s in std), tuple(ids))


def standardize_labs(panel: LabPanel | Sequence[LabPanel], stats: LabStandardizer) -> np.ndarray:
    """z-scored 4-vector (or n x 4 matrix) in the order AST, ALT, CgA, GGT."""
    if isinstance(panel, LabPanel):
        return stats.transform([panel])[0]
    return stats.transform(panel)


# --------------------------------------------------------------------------
# layers


def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _pooled(n: int, times: int) -> int:
    for _ in range(times):
        n = (n + 1) // 2
    return n


class Encoder3D:
    """Four conv3d -> relu -> maxpool blocks after a parameter-free max-pool stem."""

    def __init__(self, widths: Sequence[int], input_shape: tuple, stem_pools: int, rng: np.random.Generator,
                 name: str = "enc"):
        self.widths = tuple(int(w) for w in widths)
        self.input_shape = tuple(input_shape)
        self.stem_pools = int(stem_pools)
        self.name = name
        self.kernels: list[Tensor] = []
        self.biases: list[Tensor] = []
        c_in = 1
        for i, w in enumerate(self.widths):
            k = _he_uniform(rng, (w, c_in, 3, 3, 3), c_in * 27)
            self.kernels.append(Tensor(k, requires_grad=True, name=f"{name}.conv{i}.weight"))
            self.biases.append(Tensor(np.zeros(w, np.float32), requires_grad=True, name=f"{name}.conv{i}.bias"))
            c_in = w

    @property
    def stem_shape(self) -> tuple:
        return tuple(_pooled(s, self.stem_pools) for s in self.input_shape)

    @property
    def output_shape(self) -> tuple:
        return (self.widths[-1],) + tuple(_pooled(s, self.stem_pools + 4) for s in self.input_shape)

    @property
    def embed_dim(self) -> int:
        return int(np.prod(self.output_shape))

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.kernels, self.biases) for t in pair]

    def stem(self, x: Tensor) -> Tensor:
        for _ in range(self.stem_pools):
            x = T.maxpool3d(x)
        return x

    def __call__(self, x: Tensor, stemmed: bool = False) -> Tensor:
        expected = self.stem_shape if stemmed else self.input_shape
        if x.data.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != expected:
            raise DimensionError(f"{self.name}: expected [N,1,{expected}], got {x.shape}")
        if not stemmed:
            x = self.stem(x)
        for k, b in zip(self.kernels, self.biases):
            x = T.maxpool3d(T.relu(T.conv3d(x, k, b)))
        return T.flatten(x)


OUTPUT_INIT_SCALE = 0.01


class FusionHead:
    """Three affine layers with relu + dropout between them and one output logit."""

    def __init__(self, in_dim: int, hidden: Sequence[int], rng: np.random.Generator):
        dims = [in_dim, *hidden, 1]
        self.in_dim = in_dim
        self.weights = [Tensor(_he_uniform(rng, (dims[i + 1], dims[i]), dims[i]), requires_grad=True,
                               name=f"head.fc{i}.weight") for i in range(len(dims) - 1)]
        # a small output layer keeps the initial logits near zero; large initial logits make the first
        # Adam steps kill whole conv layers and the model collapses to a constant prediction
        self.weights[-1].data *= np.float32(OUTPUT_INIT_SCALE)
        self.biases = [Tensor(np.zeros(dims[i + 1], np.float32), requires_grad=True, name=f"head.fc{i}.bias")
                       for i in range(len(dims) - 1)]

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def __call__(self, x: Tensor, dropout: float = 0.0, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = T.linear(x, w, b)
            if i < last:
                x = T.dropout(T.relu(x), dropout, training, rng)
        return x


@dataclass
class Batch:
    """Model inputs for a set of patients; absent modalities are ``None``."""

    pet: np.ndarray | None = None
    ct: np.ndarray | None = None
    labs: np.ndarray | None = None
    y: np.ndarray | None = None
    ids: tuple = ()
    stemmed: bool = True

    def __len__(self) -> int:
        for a in (self.labs, self.pet, self.ct, self.y):
            if a is not None:
                return len(a)
        return 0

    def take(self, idx) -> Batch:
        pick = lambda a: None if a is None else a[idx]
        ids = tuple(self.ids[i] for i in idx) if self.ids else ()
        return Batch(pick(self.pet), pick(self.ct), pick(self.labs), pick(self.y), ids, self.stemmed)


class FusionModel:
    """Image encoders for the active modalities plus the shared MLP head."""

    def __init__(self, spec: ModelSpec):
        if spec.kind.is_forest:
            raise UsageError("RF_LABS is built by build_model as a ForestModel")
        self.spec = spec
        self.training = False
        rng = np.random.default_rng(derive_seed(spec.seed, spec.kind.value, "init"))
        self.pet_encoder = Encoder3D(spec.widths, spec.input_shape, spec.stem_pools, rng, "pet") \
            if spec.kind.uses_pet else None
        self.ct_encoder = Encoder3D(spec.widths, spec.input_shape, spec.stem_pools, rng, "ct") \
            if spec.kind.uses_ct else None
        self.embed_dim = (self.pet_encoder or self.ct_encoder).embed_dim
        in_dim = sum(e.embed_dim for e in self.encoders) + (len(LAB_FEATURES) if spec.kind.uses_labs else 0)
        self.head = FusionHead(in_dim, spec.head_widths, rng)
        self.lab_stats: LabStandardizer | None = None
        self.normalizers: dict = {}

    @property
    def kind(self) -> ModelKind:
        return self.spec.kind

    @property
    def encoders(self) -> list[Encoder3D]:
        return [e for e in (self.pet_encoder, self.ct_encoder) if e is not None]

    def parameters(self) -> list[Tensor]:
        return [p for e in self.encoders for p in e.parameters()] + self.head.parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name in state:
                if state[p.name].shape != p.shape:
                    raise DimensionError(f"{p.name}: checkpoint {state[p.name].shape} vs model {p.shape}")
                p.data = np.array(state[p.name], dtype=np.float32)

    def save(self, path: str | Path) -> None:
        T.save_checkpoint(path, self.state_dict())

    def load(self, path: str | Path) -> None:
        self.load_state_dict(T.load_checkpoint(path))

    def embed(self, pet: Tensor | None = None, ct: Tensor | None = None, labs: Tensor | None = None,
              stemmed: bool = False) -> Tensor:
        """The concatenated head input (image embeddings, then labs)."""
        supplied = {"pet": pet is not None, "ct": ct is not None, "labs": labs is not None}
        needed = {"pet": self.kind.uses_pet, "ct": self.kind.uses_ct, "labs": self.kind.uses_labs}
        if supplied != needed:
            missing = [k for k in needed if needed[k] and not supplied[k]]
            extra = [k for k in needed if supplied[k] and not needed[k]]
            raise UsageError(f"{self.kind.value}: missing inputs {missing}, unexpected inputs {extra}")
        parts = []
        if pet is not None:
            parts.append(self.pet_encoder(pet, stemmed))
        if ct is not None:
            parts.append(self.ct_encoder(ct, stemmed))
        if labs is not None:
            if labs.data.ndim != 2 or labs.shape[1] != len(LAB_FEATURES):
                raise DimensionError(f"labs must be [N,4], got {labs.shape}")
            parts.append(labs)
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=1)

    def logits(self, pet: Tensor | None = None, ct: Tensor | None = None, labs: Tensor | None = None,
               stemmed: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        h = self.embed(pet, ct, labs, stemmed)
        return T.reshape(self.head(h, self.spec.dropout, self.training, rng), (h.shape[0],))


def _as_tensor(a) -> Tensor | None:
    return None if a is None else Tensor(a)


def forward(model: FusionModel, pet=None, ct=None, labs=None, stemmed: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """Logits for a batch; array inputs are wrapped as constant tensors."""
    wrap = lambda a: a if a is None or isinstance(a, Tensor) else Tensor(a)
    return model.logits(wrap(pet), wrap(ct), wrap(labs), stemmed, rng)


@dataclass
class ForestModel:
    spec: ModelSpec
    forest: Forest | None = None
    lab_stats: LabStandardizer | None = None

    @property
    def kind(self) -> ModelKind:
        return self.spec.kind


def build_model(spec: ModelSpec) -> FusionModel | ForestModel:
    return ForestModel(spec) if spec.kind.is_forest else FusionModel(spec)


# --------------------------------------------------------------------------
# training and inference


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the harness records the fold as failed."""


def _batch_tensors(model: FusionModel, b: Batch) -> dict:
    return {
        "pet": _as_tensor(b.pet) if model.kind.uses_pet else None,
        "ct": _as_tensor(b.ct) if model.kind.uses_ct else None,
        "labs": _as_tensor(b.labs) if model.kind.uses_labs else None,
    }


def train(model: FusionModel | ForestModel, data: Batch, spec: ModelSpec | None = None) -> list[float]:
    """Mini-batch Adam on BCE for ``spec.epochs``; returns the per-epoch mean loss."""
    spec = spec or model.spec
    y = np.asarray(data.y)
    if y.size == 0 or y.min() == y.max():
        raise ValidationError("training data must contain both classes")
    if isinstance(model, ForestModel):
        fspec = ForestSpec(n_trees=spec.n_trees, seed=derive_seed(spec.seed, "forest") % 2 ** 32)
        model.forest = fit_forest(data.labs, y, fspec)
        return []
    shuffle_rng = np.random.default_rng(derive_seed(spec.seed, spec.kind.value, "shuffle"))
    dropout_rng = np.random.default_rng(derive_seed(spec.seed, spec.kind.value, "dropout"))
    params = model.parameters()
    opt = T.Adam(params, lr=spec.lr, weight_decay=spec.weight_decay)
    trace = []
    model.training = True
    try:
        for epoch in range(spec.epochs):
            order = shuffle_rng.permutation(len(y))
            total = 0.0
            for start in range(0, len(order), spec.batch_size):
                idx = order[start:start + spec.batch_size]
                b = data.take(idx)
                opt.zero_grad()
                loss = T.bce_with_logits(model.logits(**_batch_tensors(model, b), stemmed=data.stemmed,
                                                      rng=dropout_rng), b.y)
                if not np.isfinite(loss.item()):
                    raise TrainingDiverged(f"non-finite loss in epoch {epoch}")
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            trace.append(total / len(y))
    finally:
        model.training = False
    return trace


def predict_proba(model: FusionModel | ForestModel, data: Batch, batch_size: int = 32) -> np.ndarray:
    """P(LONG) per patient, eval mode (dropout off), no graph recorded."""
    if isinstance(model, ForestModel):
        if model.forest is None:
            raise UsageError("forest has not been trained")
        return model.forest.predict_proba(data.labs)
    was = model.training
    model.training = False
    out = []
    try:
        with T.no_grad():
            for start in range(0, len(data), batch_size):
                b = data.take(np.arange(start, min(start + batch_size, len(data))))
                out.append(model.logits(**_batch_tensors(model, b), stemmed=data.stemmed).data.astype(np.float64))
    finally:
        model.training = was
    return T.sigmoid(np.concatenate(out)) if out else np.zeros(0)


def write_trace_csv(path: str | Path, trace: Sequence[float]) -> None:
    lines = ["epoch,mean_loss"] + [f"{i + 1},{v:.8f}" for i, v in enumerate(trace)]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# CT encoder pretraining (lesion-fraction regression on synthetic phantoms)


@dataclass
class PretrainResult:
    ids: tuple
    val_mse_before: float
    val_mse_after: float
    trace: list = field(default_factory=list)


def _regress(encoder: Encoder3D, w: Tensor, b: Tensor, x: np.ndarray, stemmed: bool) -> Tensor:
    return T.reshape(T.linear(encoder(Tensor(x), stemmed), w, b), (x.shape[0],))


def pretrain_ct_encoder(encoder: Encoder3D, volumes: np.ndarray, targets: np.ndarray, ids: Sequence[str],
                        forbidden_ids: Sequence[str] = (), epochs: int = 20, batch_size: int = 8,
                        lr: float = 0.01, seed: int = 0, stemmed: bool = True,
                        val_fraction: float = 0.2) -> PretrainResult:
    """Fit ``encoder`` (in place) plus a throwaway linear head to regress ``targets`` by MSE.

    Raises :class:`LeakageError` if any pretraining id is in ``forbidden_ids``.
    Targets are z-scored internally; the last ``val_fraction`` of the set is
    held out to report validation MSE before and after.
    """
    ids = tuple(ids)
    overlap = set(ids) & set(forbidden_ids)
    if overlap:
        raise LeakageError(f"pretraining set overlaps evaluation ids: {sorted(overlap)[:5]}")
    if len(ids) != len(volumes) or len(targets) != len(volumes):
        raise DimensionError("volumes, targets and ids must have equal length")
    t = np.asarray(targets, dtype=np.float64)
    t = ((t - t.mean()) / max(t.std(), 1e-12)).astype(np.float32)
    n_val = max(1, int(round(val_fraction * len(t))))
    tr, va = np.arange(len(t) - n_val), np.arange(len(t) - n_val, len(t))
    rng = np.random.default_rng(derive_seed(seed, "pretrain"))
    w = Tensor(_he_uniform(rng, (1, encoder.embed_dim), encoder.embed_dim), requires_grad=True, name="aux.weight")
    b = Tensor(np.zeros(1, np.float32), requires_grad=True, name="aux.bias")

    def val_mse() -> float:
        with T.no_grad():
            return float(np.mean((_regress(encoder, w, b, volumes[va], stemmed).data - t[va]) ** 2))

    before = val_mse()
    opt = T.Adam(encoder.parameters() + [w, b], lr=lr, weight_decay=0.0)
    trace = []
    for _ in range(epochs):
        order = rng.permutation(tr)
        total = 0.0
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            opt.zero_grad()
            loss = T.mse_loss(_regress(encoder, w, b, volumes[idx], stemmed), t[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        trace.append(total / len(tr))
    return PretrainResult(ids, before, val_mse(), trace)


def copy_encoder(src: Encoder3D, dst: Encoder3D) -> None:
    if src.widths != dst.widths or src.input_shape != dst.input_shape or src.stem_pools != dst.stem_pools:
        raise DimensionError("encoder architectures differ")
    for a, b in zip(src.parameters(), dst.parameters()):
        b.data = a.data.copy()
