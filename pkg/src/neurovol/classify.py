"""Neuron/glia classification of segmented regions.

Six intensity/shape features feed a linear soft-margin SVM trained by
deterministic batch subgradient descent on z-scored inputs. Evaluation is
ROC AUC under stratified k-fold cross-validation; the retraining entry
point pulls human-reviewed labels back out of the annotation store.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError, PreconditionFailedError
from .volume import Resolution, VolumeBlock

if TYPE_CHECKING:  # avoid import cycles; these are duck-typed at runtime
    from .segmentation import LabelVolume, RegionRecord
    from .store import PrecomputedStore

MODEL_MAGIC = "NVM1"

CLASS_NEURON = "neuron"
CLASS_GLIA = "glia"

FEATURE_NAMES = ("volume_um3", "diameter_um", "mean", "std", "kurtosis", "skew")

_EPOCHS = 500


@dataclass(frozen=True)
class FeatureVector:
    """Physical size plus intensity statistics of one region."""

    volume_um3: float
    diameter_um: float
    mean: float
    std: float
    kurtosis: float
    skew: float

    def as_array(self) -> np.ndarray:
        return np.array([self.volume_um3, self.diameter_um, self.mean,
                         self.std, self.kurtosis, self.skew], dtype=np.float64)

    def to_json_obj(self) -> dict:
        return {name: getattr(self, name) for name in FEATURE_NAMES}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "FeatureVector":
        return cls(**{name: float(obj[name]) for name in FEATURE_NAMES})

    @classmethod
    def from_array(cls, arr) -> "FeatureVector":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(*(float(v) for v in arr))


def compute_features(coords, intensities, res: Resolution) -> FeatureVector:
    """Features of one region from its voxel coordinates and intensities.

    Moments are population statistics; skew is the third standardized
    moment and kurtosis the excess fourth. Constant regions get skew and
    kurtosis 0 by convention.
    """
    values = np.asarray(intensities, dtype=np.float64).ravel()
    if values.size == 0:
        raise InvalidArgumentError("region must contain at least one voxel")
    count = values.size
    volume = count * res.voxel_volume_um3
    diameter = (6.0 * volume / math.pi) ** (1.0 / 3.0)
    mean = float(values.mean())
    centered = values - mean
    var = float(np.mean(centered ** 2))
    std = math.sqrt(var)
    if std == 0.0:
        skew = 0.0
        kurtosis = 0.0
    else:
        skew = float(np.mean(centered ** 3)) / std ** 3
        kurtosis = float(np.mean(centered ** 4)) / std ** 4 - 3.0
    return FeatureVector(volume_um3=volume, diameter_um=diameter, mean=mean,
                         std=std, kurtosis=kurtosis, skew=skew)


@dataclass(frozen=True)
class SvmModel:
    """Linear decision rule with its training-time normalization baked in."""

    weights: tuple[float, ...]
    bias: float
    norm_mean: tuple[float, ...]
    norm_scale: tuple[float, ...]
    c: float
    seed: int
    version: int = 0
    trained_revision: int | None = None

    def decision_value(self, fv: FeatureVector) -> float:
        x = fv.as_array()
        if not np.all(np.isfinite(x)):
            raise InvalidArgumentError("non-finite feature value")
        z = (x - np.asarray(self.norm_mean)) / np.asarray(self.norm_scale)
        return float(np.dot(np.asarray(self.weights), z) + self.bias)


@dataclass(frozen=True)
class CvReport:
    fold_aucs: tuple[float, ...]
    mean_auc: float
    seed: int

    def to_json_obj(self) -> dict:
        return {"fold_aucs": list(self.fold_aucs), "mean_auc": self.mean_auc,
                "seed": self.seed}


def _as_matrix(features: Sequence[FeatureVector] | np.ndarray) -> np.ndarray:
    if isinstance(features, np.ndarray):
        x = np.asarray(features, dtype=np.float64)
    else:
        x = np.stack([f.as_array() for f in features])
    if x.ndim != 2:
        raise InvalidArgumentError("features must form a 2D matrix")
    return x


def _as_signs(labels: Sequence[str]) -> np.ndarray:
    y = np.empty(len(labels), dtype=np.float64)
    for i, lab in enumerate(labels):
        if lab == CLASS_NEURON:
            y[i] = 1.0
        elif lab == CLASS_GLIA:
            y[i] = -1.0
        else:
            raise InvalidArgumentError(f"label must be neuron or glia, got {lab!r}")
    return y


def train_svm(features, labels: Sequence[str], c: float = 1.0, seed: int = 0) -> SvmModel:
    """Fit a linear soft-margin SVM on z-scored features.

    Minimizes (1/2)|w|^2 + c * sum(hinge) with full-batch projected
    subgradient descent over a fixed epoch count, so identical inputs give
    identical weights. Neuron is the positive class.
    """
    x = _as_matrix(features)
    y = _as_signs(labels)
    if len(y) != x.shape[0]:
        raise InvalidArgumentError("features and labels length mismatch")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("non-finite feature value in training data")
    if not (c > 0):
        raise InvalidArgumentError("C must be positive")
    if not ((y > 0).any() and (y < 0).any()):
        raise InvalidArgumentError("training data must contain both classes")

    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    scale = np.where(sd > 0, sd, 1.0)
    z = (x - mu) / scale

    n = z.shape[0]
    lam = 1.0 / (n * c)  # scaled so the objective matches (1/2)|w|^2 + c*sum(hinge)
    w = np.zeros(z.shape[1])
    b = 0.0
    radius = 1.0 / math.sqrt(lam)
    for t in range(1, _EPOCHS + 1):
        eta = 1.0 / (lam * t)
        margins = y * (z @ w + b)
        active = margins < 1.0
        gw = lam * w - (y[active, None] * z[active]).sum(axis=0) / n
        gb = -y[active].sum() / n
        w = w - eta * gw
        b = b - eta * gb
        norm = np.linalg.norm(w)
        if norm > radius:
            w = w * (radius / norm)
    return SvmModel(
        weights=tuple(float(v) for v in w),
        bias=float(b),
        norm_mean=tuple(float(v) for v in mu),
        norm_scale=tuple(float(v) for v in scale),
        c=float(c),
        seed=int(seed),
    )


def predict(model: SvmModel, fv: FeatureVector) -> tuple[str, float]:
    """Class and decision value; ties on the hyperplane go to neuron."""
    value = model.decision_value(fv)
    return (CLASS_NEURON if value >= 0 else CLASS_GLIA, value)


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative;
    ties count one half (Mann-Whitney)."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels, dtype=bool)
    if s.shape != pos.shape or s.ndim != 1:
        raise InvalidArgumentError("scores and labels must be equal-length 1D sequences")
    n_pos = int(pos.sum())
    n_neg = int(pos.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise InvalidArgumentError("AUC needs both classes present")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j < s.size and sorted_s[j] == sorted_s[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0
        i = j
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _stratified_folds(y: np.ndarray, k: int, seed: int) -> list[np.ndarray]:
    """Shuffle each class independently and deal round-robin into k folds."""
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    for sign in (1.0, -1.0):
        idx = np.flatnonzero(y == sign)
        rng.shuffle(idx)
        for i, example in enumerate(idx):
            folds[i % k].append(int(example))
    return [np.array(sorted(f), dtype=np.intp) for f in folds]


def cross_validate(features, labels: Sequence[str], k: int = 5, c: float = 1.0,
                   seed: int = 0) -> CvReport:
    """Stratified shuffled k-fold CV; reports the held-out AUC per fold."""
    x = _as_matrix(features)
    y = _as_signs(labels)
    if k < 2:
        raise InvalidArgumentError("need at least 2 folds")
    for sign, name in ((1.0, CLASS_NEURON), (-1.0, CLASS_GLIA)):
        if int((y == sign).sum()) < k:
            raise InvalidArgumentError(f"need at least {k} examples of class {name}")
    folds = _stratified_folds(y, k, seed)
    aucs = []
    for held_out in folds:
        train_mask = np.ones(len(y), dtype=bool)
        train_mask[held_out] = False
        model = train_svm(
            x[train_mask],
            [CLASS_NEURON if s > 0 else CLASS_GLIA for s in y[train_mask]],
            c=c, seed=seed,
        )
        mu = np.asarray(model.norm_mean)
        scale = np.asarray(model.norm_scale)
        z = (x[held_out] - mu) / scale
        scores = z @ np.asarray(model.weights) + model.bias
        aucs.append(roc_auc(scores, y[held_out] > 0))
    return CvReport(fold_aucs=tuple(aucs), mean_auc=float(np.mean(aucs)), seed=int(seed))


def coincidence_analysis(regions: Sequence["RegionRecord"], labels: "LabelVolume",
                         second_channel: VolumeBlock, threshold: float) -> list[bool]:
    """Flag each neuron region active when its mean second-channel intensity
    exceeds the threshold. Returns flags parallel to the input list."""
    if labels.extents != second_channel.extents:
        raise InvalidArgumentError(
            f"label extents {labels.extents} != channel extents {second_channel.extents}"
        )
    if not regions:
        return []
    ids = [r.label for r in regions]
    counts = np.bincount(labels.labels.ravel(), minlength=max(ids) + 1)
    missing = [i for i in ids if i <= 0 or counts[i] == 0]
    if missing:
        raise InvalidArgumentError(f"region labels absent from label volume: {missing}")
    means = ndimage.mean(second_channel.voxels.astype(np.float64), labels.labels, index=ids)
    return [float(m) > threshold for m in np.atleast_1d(means)]


def save_model(model: SvmModel, path: Path | str) -> Path:
    """Versioned text model file."""
    path = Path(path)
    lines = [
        MODEL_MAGIC,
        f"version {model.version}",
        f"c {model.c!r}",
        f"seed {model.seed}",
        f"trained_revision {'none' if model.trained_revision is None else model.trained_revision}",
        "features " + " ".join(FEATURE_NAMES),
        "norm_mean " + " ".join(repr(v) for v in model.norm_mean),
        "norm_scale " + " ".join(repr(v) for v in model.norm_scale),
        "weights " + " ".join(repr(v) for v in model.weights),
        f"bias {model.bias!r}",
    ]
    path.write_text("\n".join(lines) + "\n")
    return path


def load_model(path: Path | str) -> SvmModel:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != MODEL_MAGIC:
        raise InvalidArgumentError(f"{path}: not a {MODEL_MAGIC} model file")
    fields: dict[str, list[str]] = {}
    for line in lines[1:]:
        if line.strip():
            key, *rest = line.split()
            fields[key] = rest
    trained = fields["trained_revision"][0]
    return SvmModel(
        weights=tuple(float(v) for v in fields["weights"]),
        bias=float(fields["bias"][0]),
        norm_mean=tuple(float(v) for v in fields["norm_mean"]),
        norm_scale=tuple(float(v) for v in fields["norm_scale"]),
        c=float(fields["c"][0]),
        seed=int(fields["seed"][0]),
        version=int(fields["version"][0]),
        trained_revision=None if trained == "none" else int(trained),
    )


def retrain_from_annotations(store: "PrecomputedStore", dataset: str, c: float = 1.0,
                             seed: int = 0, layer: str = "centroids",
                             min_per_class: int = 5) -> tuple[SvmModel, CvReport]:
    """Train a fresh model from the latest human-reviewed labels.

    Joins head-revision point annotations labeled neuron/glia to the
    stored region features by annotation id (``{block}/{label}``), trains
    and cross-validates, then persists the model under the next version.
    """
    head = store.head_revision(dataset, layer)
    annotations = store.read_annotations(dataset, layer)
    feature_index = store.read_region_features(dataset)
    features: list[FeatureVector] = []
    labels: list[str] = []
    counts = {CLASS_NEURON: 0, CLASS_GLIA: 0}
    for ann in annotations:
        if ann.kind != "point" or ann.class_label not in counts:
            continue
        fv = feature_index.get(ann.id)
        if fv is None:
            continue  # human-added points carry no stored features
        features.append(fv)
        labels.append(ann.class_label)
        counts[ann.class_label] += 1
    if min(counts.values()) < min_per_class:
        raise PreconditionFailedError(
            f"need at least {min_per_class} stored-feature examples per class, got {counts}",
            counts=counts,
        )
    model = train_svm(features, labels, c=c, seed=seed)
    report = cross_validate(features, labels, k=5, c=c, seed=seed)
    model = replace(model, trained_revision=head)
    version = store.save_model_version(dataset, model)
    return replace(model, version=version), report
