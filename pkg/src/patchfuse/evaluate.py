"""Cross-validation harness: stratified folds, training wrappers, metrics.

Folds are seeded and stratified: ids are shuffled per class, concatenated,
and dealt round-robin, which keeps both the fold sizes and the per-fold
class counts within one sample of ideal. Inside each training fold the
remaining ids split 80/20 per class into train and validation.

Aggregate metrics pool test predictions across folds rather than averaging
per-fold percentages; each WSI is tested exactly once, so pooling gives the
single-number summary over the whole dataset.

``cross_validate`` runs tile -> train-vit -> train-cnn -> saliency -> fuse
per fold and reports patch-level, fused, and unweighted-majority metrics.
``flip_fraction`` injects adversarial noise before fusion: per WSI, the
predictions of the lowest-saliency verdicts are inverted, and both fusion
and the majority baseline consume the same perturbed verdicts. Patch-level
metrics always score the classifier's true predictions.

Folds are derived from independent seeds, so they could run in parallel;
execution here is sequential for deterministic memory use on small hosts.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .cnn import CnnConfig, CnnWsiClassifier, desk_cnn_config
from .exceptions import EmptyInputError, StageError
from .fusion import FusionConfig, PatchVerdict, fuse, majority_vote, patch_saliency_score
from .tiling import BACKGROUND_MAX_FRACTION, WsiTiler
from .validation import check_binary_labels
from .vit import VitConfig, VitPatchClassifier, desk_config

CSV_HEADER = "method,fold,tp,fp,fn,tn,accuracy,precision,f1,sensitivity,specificity"


@dataclass(frozen=True)
class Fold:
    """One fold: held-out test ids plus the 80/20 train/validation split."""

    index: int
    test_ids: tuple
    train_ids: tuple
    val_ids: tuple


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    folds: tuple

    def to_dict(self):
        return {
            "k": self.k,
            "seed": self.seed,
            "folds": [
                {
                    "index": f.index,
                    "test_ids": list(f.test_ids),
                    "train_ids": list(f.train_ids),
                    "val_ids": list(f.val_ids),
                }
                for f in self.folds
            ],
        }


def _id_labels(dataset):
    if hasattr(dataset, "entries"):
        return {entry.id: int(entry.label) for entry in dataset.entries}
    return {str(key): int(value) for key, value in dict(dataset).items()}


def _derived_seed(*entropy):
    state = np.random.SeedSequence(entropy=[int(e) for e in entropy]).generate_state(
        1, dtype=np.uint64
    )
    return int(state[0])


def make_folds(dataset, k=5, seed=0):
    """Seeded stratified fold plan over a manifest or an {id: label} mapping.

    Deterministic for (dataset, k, seed). The dealt sequence is benign ids
    then malignant ids, each block shuffled, assigned to fold ``j % k``;
    continuing the round-robin across blocks balances fold totals and class
    counts simultaneously.
    """
    labels = _id_labels(dataset)
    n = len(labels)
    if not isinstance(k, (int, np.integer)) or k < 2:
        raise ValueError(f"k must be an int >= 2, got {k!r}")
    if k > n:
        raise ValueError(f"k={k} exceeds dataset size {n}")
    for wsi_id, label in labels.items():
        if label not in (0, 1):
            raise ValueError(f"label for {wsi_id!r} must be 0 or 1, got {label}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), 0)))
    dealt = []
    for cls in (0, 1):
        ids = sorted(i for i, lab in labels.items() if lab == cls)
        dealt.extend(ids[j] for j in rng.permutation(len(ids)))
    test_sets = [[] for _ in range(k)]
    for j, wsi_id in enumerate(dealt):
        test_sets[j % k].append(wsi_id)
    folds = []
    for index in range(k):
        test = set(test_sets[index])
        split_rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), 1 + index)))
        train, val = [], []
        for cls in (0, 1):
            remaining = sorted(i for i, lab in labels.items() if lab == cls and i not in test)
            n_rem = len(remaining)
            n_val = max(1, int(round(0.2 * n_rem))) if n_rem >= 2 else 0
            chosen = set(split_rng.permutation(n_rem)[:n_val])
            for pos, wsi_id in enumerate(remaining):
                (val if pos in chosen else train).append(wsi_id)
        folds.append(
            Fold(
                index=index,
                test_ids=tuple(sorted(test)),
                train_ids=tuple(sorted(train)),
                val_ids=tuple(sorted(val)),
            )
        )
    return FoldPlan(k=int(k), seed=int(seed), folds=tuple(folds))


@dataclass(frozen=True)
class MetricsReport:
    """Confusion counts plus Table-style percentages.

    Ratios with a zero denominator are reported as None (absent), not 0.
    """

    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float | None
    precision: float | None
    f1: float | None
    sensitivity: float | None
    specificity: float | None

    @property
    def n(self):
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self):
        return dataclasses.asdict(self)


def _pct(numerator, denominator):
    return None if denominator == 0 else 100.0 * numerator / denominator


def confusion_metrics(predictions, labels, positive=1):
    """MetricsReport from binary predictions and labels, malignant positive."""
    predictions = check_binary_labels(predictions, name="predictions")
    labels = check_binary_labels(labels, len(predictions), name="labels")
    if len(predictions) == 0:
        raise EmptyInputError("cannot compute metrics over zero samples")
    if positive not in (0, 1):
        raise ValueError(f"positive class must be 0 or 1, got {positive!r}")
    pred_pos = predictions == positive
    lab_pos = labels == positive
    tp = int(np.sum(pred_pos & lab_pos))
    fp = int(np.sum(pred_pos & ~lab_pos))
    tn = int(np.sum(~pred_pos & ~lab_pos))
    fn = int(np.sum(~pred_pos & lab_pos))
    precision = _pct(tp, tp + fp)
    sensitivity = _pct(tp, tp + fn)
    f1 = None
    if precision is not None and sensitivity is not None and precision + sensitivity > 0:
        f1 = 2.0 * precision * sensitivity / (precision + sensitivity)
    return MetricsReport(
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        accuracy=_pct(tp + tn, tp + fp + tn + fn),
        precision=precision,
        f1=f1,
        sensitivity=sensitivity,
        specificity=_pct(tn, tn + fp),
    )


def train_vit(
    train_inputs,
    train_labels,
    val_inputs=None,
    val_labels=None,
    *,
    config=None,
    epochs=20,
    lr=3e-4,
    momentum=0.9,
    batch_size=16,
    seed=0,
):
    """Fit a patch classifier; returns the estimator holding the best checkpoint."""
    model = VitPatchClassifier(
        config=config,
        epochs=epochs,
        batch_size=batch_size,
        lr=lr,
        momentum=momentum,
        seed=seed,
    )
    return model.fit(train_inputs, train_labels, val_inputs, val_labels)


def train_cnn(
    train_images,
    train_labels,
    val_images=None,
    val_labels=None,
    *,
    config=None,
    epochs=30,
    lr=1e-4,
    dropout=0.40,
    batch_size=8,
    seed=0,
):
    """Fit the whole-WSI classifier; returns the estimator with best checkpoint."""
    model = CnnWsiClassifier(
        config=config,
        epochs=epochs,
        batch_size=batch_size,
        lr=lr,
        dropout=dropout,
        seed=seed,
    )
    return model.fit(train_images, train_labels, val_images, val_labels)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a cross-validation run needs besides the samples."""

    k: int = 5
    seed: int = 0
    vit_config: VitConfig = field(default_factory=desk_config)
    vit_epochs: int = 20
    vit_lr: float = 3e-4
    vit_momentum: float = 0.9
    vit_batch_size: int = 16
    cnn_config: CnnConfig = field(default_factory=desk_cnn_config)
    cnn_epochs: int = 30
    cnn_lr: float = 1e-4
    cnn_dropout: float = 0.40
    cnn_batch_size: int = 8
    fusion: FusionConfig = field(default_factory=FusionConfig)
    background_max_fraction: float = BACKGROUND_MAX_FRACTION
    flip_fraction: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.flip_fraction <= 1.0:
            raise ValueError(f"flip_fraction must be in [0, 1], got {self.flip_fraction}")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class WsiOutcome:
    """Per-test-WSI record: both fusers' labels over identical verdicts."""

    wsi_id: str
    fold: int
    label: int
    fused_label: int
    majority_label: int
    fused_score: float
    n_verdicts: int
    n_retained: int
    n_flipped: int


@dataclass(frozen=True)
class FoldReport:
    index: int
    fused: MetricsReport
    majority: MetricsReport
    patch: MetricsReport
    outcomes: tuple


@dataclass(frozen=True)
class CrossValidationResult:
    config: ExperimentConfig
    plan: FoldPlan
    folds: tuple
    fused: MetricsReport
    majority: MetricsReport
    patch: MetricsReport

    def to_dict(self):
        return {
            "config": self.config.to_dict(),
            "plan": self.plan.to_dict(),
            "folds": [
                {
                    "index": fold.index,
                    "fused": fold.fused.to_dict(),
                    "majority": fold.majority.to_dict(),
                    "patch": fold.patch.to_dict(),
                    "outcomes": [dataclasses.asdict(o) for o in fold.outcomes],
                }
                for fold in self.folds
            ],
            "aggregate": {
                "fused": self.fused.to_dict(),
                "majority": self.majority.to_dict(),
                "patch": self.patch.to_dict(),
            },
        }

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def csv_text(self):
        """One row per method and fold plus an aggregate row per method."""
        lines = [CSV_HEADER]
        for method, aggregate in (
            ("fused", self.fused),
            ("majority", self.majority),
            ("patch", self.patch),
        ):
            for fold in self.folds:
                lines.append(_csv_row(method, str(fold.index), getattr(fold, method)))
            lines.append(_csv_row(method, "aggregate", aggregate))
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.csv_text())


def _csv_row(method, fold, report):
    cells = [method, fold, str(report.tp), str(report.fp), str(report.fn), str(report.tn)]
    for value in (
        report.accuracy,
        report.precision,
        report.f1,
        report.sensitivity,
        report.specificity,
    ):
        cells.append("NA" if value is None else f"{value:.2f}")
    return ",".join(cells)


def flip_low_saliency(verdicts, fraction):
    """Invert the predictions of the ceil(fraction * n) lowest-saliency verdicts.

    Ties break by patch id so the perturbation is deterministic. Returns the
    perturbed list and the flip count; fraction 0 returns the input as is.
    """
    if fraction <= 0 or not verdicts:
        return list(verdicts), 0
    n_flip = math.ceil(fraction * len(verdicts))
    order = sorted(range(len(verdicts)), key=lambda i: (verdicts[i].score, verdicts[i].patch_id))
    flip = set(order[:n_flip])
    out = [
        dataclasses.replace(v, y_hat=1 - v.y_hat) if i in flip else v
        for i, v in enumerate(verdicts)
    ]
    return out, n_flip


def _stage(fold, name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(fold, name, exc) from exc


def _patch_arrays(samples, tiler):
    """Tile WSIs one at a time and keep only classifier inputs and labels.

    Raw 400x400 patch pixels are dropped immediately; a full dataset of them
    would not fit in memory on a small host.
    """
    inputs, labels = [], []
    per_wsi = []
    for wsi in samples:
        records = tiler.transform([wsi])[0]
        rows = []
        for rec in records:
            if rec.label is None:
                raise ValueError(f"patch {rec.patch_id} has no label; generated WSIs carry them")
            rows.append((rec.patch_id, rec.region, rec.input, int(rec.label)))
            inputs.append(rec.input)
            labels.append(int(rec.label))
        per_wsi.append(rows)
    stacked = np.stack(inputs) if inputs else np.empty((0, 1, 1, 3))
    return stacked, np.asarray(labels, dtype=np.int64), per_wsi


def _default_patch_model(config, seed):
    return VitPatchClassifier(
        config=config.vit_config,
        epochs=config.vit_epochs,
        batch_size=config.vit_batch_size,
        lr=config.vit_lr,
        momentum=config.vit_momentum,
        seed=seed,
    )


def _default_wsi_model(config, seed):
    return CnnWsiClassifier(
        config=config.cnn_config,
        epochs=config.cnn_epochs,
        batch_size=config.cnn_batch_size,
        lr=config.cnn_lr,
        dropout=config.cnn_dropout,
        seed=seed,
    )


def cross_validate(samples, config=None, plan=None, patch_model_factory=None, wsi_model_factory=None):
    """Run the full pipeline per fold and pool test predictions.

    ``samples`` are WsiSamples with patch_labels (the generator provides
    them). The factories exist for testing: each takes (fold_index, seed)
    and must return an object with the corresponding estimator protocol
    (fit/predict for patches; fit/saliency_map for WSIs). Any stage failure
    aborts the run with a StageError naming the fold and stage.
    """
    config = ExperimentConfig() if config is None else config
    by_id = {}
    for sample in samples:
        if sample.id in by_id:
            raise ValueError(f"duplicate WSI id {sample.id!r}")
        if sample.patch_labels is None:
            raise ValueError(f"WSI {sample.id!r} has no patch labels")
        by_id[sample.id] = sample
    if plan is None:
        plan = make_folds({i: s.label for i, s in by_id.items()}, k=config.k, seed=config.seed)
    missing = {i for f in plan.folds for i in f.test_ids + f.train_ids + f.val_ids} - set(by_id)
    if missing:
        raise ValueError(f"fold plan references unknown WSI ids: {sorted(missing)}")
    tiler = WsiTiler(
        downsample_to=config.vit_config.image_size,
        background_max_fraction=config.background_max_fraction,
    ).fit()

    fold_reports = []
    pooled = {
        "fused": ([], []),
        "majority": ([], []),
        "patch": ([], []),
    }
    for fold in plan.folds:
        train = [by_id[i] for i in fold.train_ids]
        val = [by_id[i] for i in fold.val_ids]
        test = [by_id[i] for i in fold.test_ids]

        train_x, train_y, _ = _stage(fold.index, "tile", _patch_arrays, train, tiler)
        val_x, val_y, _ = _stage(fold.index, "tile", _patch_arrays, val, tiler)
        test_x, test_y, test_rows = _stage(fold.index, "tile", _patch_arrays, test, tiler)

        make_patch = patch_model_factory or (lambda f, s: _default_patch_model(config, s))
        make_wsi = wsi_model_factory or (lambda f, s: _default_wsi_model(config, s))
        patch_model = make_patch(fold.index, _derived_seed(config.seed, fold.index, 0))
        wsi_model = make_wsi(fold.index, _derived_seed(config.seed, fold.index, 1))

        _stage(
            fold.index,
            "train-vit",
            patch_model.fit,
            train_x,
            train_y,
            val_x if len(val_x) else None,
            val_y if len(val_y) else None,
        )
        _stage(
            fold.index,
            "train-cnn",
            wsi_model.fit,
            [s.pixels for s in train],
            np.asarray([s.label for s in train], dtype=np.int64),
            [s.pixels for s in val] if val else None,
            np.asarray([s.label for s in val], dtype=np.int64) if val else None,
        )

        patch_preds = (
            _stage(fold.index, "classify", patch_model.predict, test_x)
            if len(test_x)
            else np.empty(0, dtype=np.int64)
        )
        fold_outcomes = []
        cursor = 0
        for wsi, rows in zip(test, test_rows):
            saliency = _stage(fold.index, "saliency", wsi_model.saliency_map, wsi.pixels, wsi_id=wsi.id)
            verdicts = []
            for patch_id, region, _, _ in rows:
                score = patch_saliency_score(saliency.values, region)
                verdicts.append(
                    PatchVerdict(patch_id=patch_id, y_hat=int(patch_preds[cursor]), score=score)
                )
                cursor += 1
            verdicts, n_flipped = flip_low_saliency(verdicts, config.flip_fraction)
            if verdicts:
                fused_result = _stage(fold.index, "fuse", fuse, verdicts, config.fusion)
                fused_label = fused_result.label
                fused_score = fused_result.s
                n_retained = len(fused_result.retained_ids)
                majority_label = _stage(fold.index, "fuse", majority_vote, verdicts)
            else:
                # every patch was background-excluded: no evidence of malignancy
                fused_label, fused_score, n_retained, majority_label = 0, 0.0, 0, 0
            fold_outcomes.append(
                WsiOutcome(
                    wsi_id=wsi.id,
                    fold=fold.index,
                    label=wsi.label,
                    fused_label=fused_label,
                    majority_label=majority_label,
                    fused_score=fused_score,
                    n_verdicts=len(verdicts),
                    n_retained=n_retained,
                    n_flipped=n_flipped,
                )
            )
        report = FoldReport(
            index=fold.index,
            fused=_metrics_from(fold_outcomes, "fused_label"),
            majority=_metrics_from(fold_outcomes, "majority_label"),
            patch=confusion_metrics(patch_preds, test_y),
            outcomes=tuple(fold_outcomes),
        )
        fold_reports.append(report)
        pooled["fused"][0].extend(o.fused_label for o in fold_outcomes)
        pooled["fused"][1].extend(o.label for o in fold_outcomes)
        pooled["majority"][0].extend(o.majority_label for o in fold_outcomes)
        pooled["majority"][1].extend(o.label for o in fold_outcomes)
        pooled["patch"][0].extend(int(p) for p in patch_preds)
        pooled["patch"][1].extend(int(t) for t in test_y)

    return CrossValidationResult(
        config=config,
        plan=plan,
        folds=tuple(fold_reports),
        fused=confusion_metrics(*pooled["fused"]),
        majority=confusion_metrics(*pooled["majority"]),
        patch=confusion_metrics(*pooled["patch"]),
    )


def _metrics_from(outcomes, attribute):
    return confusion_metrics(
        [getattr(o, attribute) for o in outcomes], [o.label for o in outcomes]
    )
