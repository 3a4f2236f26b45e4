"""Frozen-embedding evaluation: k-nearest neighbours, linear probing and classification metrics.

Precision and F1 are macro averages over every class of the confusion matrix.
"""

from __future__ import annotations

import csv
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Final, Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import nn
from torch.nn import functional as F

from dino_desk.data import LabeledSample, check_finite, normalize, write_tensors
from dino_desk.utils import get_logger
from dino_desk.vit import VisionTransformer

logger = get_logger(__name__)

REPORT_COLUMNS: Final = ("method", "dataset", "accuracy", "precision", "f1")
EMBEDDINGS_FILE: Final = "embeddings.dmxt"


@dataclass(frozen=True)
class EmbeddingSet:
    """CLS vectors with their labels and sample ids, rows in manifest order."""

    vectors: torch.Tensor
    labels: torch.Tensor
    ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.vectors.dim() != 2 or self.vectors.shape[0] < 1:
            raise ValueError(f"Embeddings must be a non-empty [N, d] matrix, got {list(self.vectors.shape)}.")
        if self.labels.shape != (self.vectors.shape[0],) or len(self.ids) != self.vectors.shape[0]:
            raise ValueError("Embeddings, labels and ids must have the same length.")
        check_finite(self.vectors, "embeddings")
        object.__setattr__(self, "labels", self.labels.to(torch.int64))

    def __len__(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


@dataclass(frozen=True)
class ClassificationMetrics:
    accuracy: float
    macro_precision: float
    macro_f1: float
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]


@dataclass(frozen=True)
class EvalReport:
    """Metrics of one evaluation, recomputable from `confusion` (rows are true labels)."""

    method: Literal["knn", "linear"]
    dataset: str
    confusion: torch.Tensor
    metrics: ClassificationMetrics
    objective_history: tuple[float, ...] = field(default=())

    @property
    def accuracy(self) -> float:
        return self.metrics.accuracy

    @property
    def macro_precision(self) -> float:
        return self.metrics.macro_precision

    @property
    def macro_f1(self) -> float:
        return self.metrics.macro_f1

    def per_class(self) -> list[dict[str, float]]:
        """One row per class: support, precision, recall and F1."""
        support = self.confusion.sum(dim=1).tolist()
        return [
            {"class": index, "support": support[index], "precision": p, "recall": r, "f1": f}
            for index, (p, r, f) in enumerate(
                zip(self.metrics.precision, self.metrics.recall, self.metrics.f1, strict=True)
            )
        ]


class ProbeConfig(BaseModel):
    """Full-batch logistic regression on standardized frozen features."""

    model_config = ConfigDict(frozen=True)

    epochs: int = Field(default=500, ge=1)
    lr: float = Field(default=0.1, gt=0)
    weight_decay: float = Field(default=1e-4, ge=0)


def _safe_ratio(numerator: torch.Tensor, denominator: torch.Tensor) -> torch.Tensor:
    # 0/0 counts as 0
    safe = torch.where(denominator > 0, denominator, torch.ones_like(denominator))
    return torch.where(denominator > 0, numerator / safe, torch.zeros_like(numerator))


def classification_metrics(confusion: torch.Tensor) -> ClassificationMetrics:
    """Accuracy and per-class / macro precision, recall and F1 of a confusion matrix."""
    if confusion.dim() != 2 or confusion.shape[0] != confusion.shape[1] or confusion.numel() == 0:
        raise ValueError(f"Confusion matrix must be square and non-empty, got {list(confusion.shape)}.")
    counts = confusion.to(torch.float64)
    if bool((counts < 0).any()) or bool((counts != counts.round()).any()):
        raise ValueError("Confusion matrix entries must be non-negative integers.")
    total = counts.sum()
    if total <= 0:
        raise ValueError("Confusion matrix is empty.")
    hits = counts.diagonal()
    precision = _safe_ratio(hits, counts.sum(dim=0))
    recall = _safe_ratio(hits, counts.sum(dim=1))
    f1 = _safe_ratio(2 * precision * recall, precision + recall)
    return ClassificationMetrics(
        accuracy=float(hits.sum() / total),
        macro_precision=float(precision.mean()),
        macro_f1=float(f1.mean()),
        precision=tuple(precision.tolist()),
        recall=tuple(recall.tolist()),
        f1=tuple(f1.tolist()),
    )


def confusion_matrix(truth: torch.Tensor, predicted: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Counts of (true, predicted) pairs; rows are true labels."""
    flat = truth.to(torch.int64) * num_classes + predicted.to(torch.int64)
    return torch.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def _num_classes(*sets: EmbeddingSet) -> int:
    return int(max(int(s.labels.max()) for s in sets)) + 1


def _report(
    method: Literal["knn", "linear"],
    dataset: str,
    test: EmbeddingSet,
    predicted: torch.Tensor,
    num_classes: int,
    history: Iterable[float] = (),
) -> EvalReport:
    confusion = confusion_matrix(test.labels, predicted, num_classes)
    return EvalReport(
        method=method,
        dataset=dataset,
        confusion=confusion,
        metrics=classification_metrics(confusion),
        objective_history=tuple(history),
    )


@torch.no_grad()
def extract_embeddings(
    model: VisionTransformer,
    samples: Sequence[LabeledSample],
    batch_size: int = 32,
    *,
    normalization: Literal["unit", "standardize"] = "unit",
    mean: Sequence[float] | None = None,
    std: Sequence[float] | None = None,
) -> EmbeddingSet:
    """Run the frozen encoder over `samples` and collect one CLS vector per sample."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive.")
    if not samples:
        raise ValueError("No samples to embed.")
    was_training = model.training
    model.eval()
    rows = []
    try:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            shapes = {tuple(sample.image.pixels.shape) for sample in chunk}
            groups = [chunk] if len(shapes) == 1 else [[sample] for sample in chunk]
            for group in groups:
                images = torch.stack([sample.image.pixels for sample in group])
                rows.append(model(normalize(images, normalization, mean, std)).cls)
    finally:
        model.train(was_training)
    return EmbeddingSet(
        vectors=torch.cat(rows).to(torch.float32),
        labels=torch.tensor([sample.label for sample in samples], dtype=torch.int64),
        ids=tuple(sample.image.source_id for sample in samples),
    )


def cosine_distances(queries: torch.Tensor, references: torch.Tensor) -> torch.Tensor:
    """1 - cos between every query row and every reference row, in float64."""
    q = F.normalize(queries.to(torch.float64), dim=-1)
    r = F.normalize(references.to(torch.float64), dim=-1)
    return 1.0 - q @ r.T


def _vote(labels: np.ndarray, distances: np.ndarray) -> int:
    classes = np.unique(labels)
    counts = np.array([np.sum(labels == c) for c in classes])
    summed = np.array([distances[labels == c].sum() for c in classes])
    best = counts == counts.max()
    # Most votes, then smallest summed distance, then lowest class index
    candidates = sorted(zip(summed[best], classes[best], strict=True))
    return int(candidates[0][1])


def knn_classify(train: EmbeddingSet, test: EmbeddingSet, k: int = 5, *, dataset: str = "") -> EvalReport:
    """Majority vote over the `k` nearest train rows by cosine distance.

    When `test` is `train` each query skips its own row. Separate sets never exclude a
    neighbour, even when ids repeat across them.
    """
    if not 1 <= k <= len(train):
        raise ValueError(f"k={k} must be between 1 and the train size {len(train)}.")
    if train.dim != test.dim:
        raise ValueError(f"Train dim {train.dim} differs from test dim {test.dim}.")
    distances = cosine_distances(test.vectors, train.vectors).numpy()
    train_labels = train.labels.numpy()
    same_set = test is train
    everything = np.arange(len(train))
    predictions = []
    for row, query_id in enumerate(test.ids):
        allowed = everything[everything != row] if same_set else everything
        if allowed.size == 0:
            raise ValueError(f"Query {query_id!r} has no neighbour besides itself.")
        # Distance first, label second keeps the choice independent of row order
        order = allowed[np.lexsort((train_labels[allowed], distances[row, allowed]))][:k]
        predictions.append(_vote(train_labels[order], distances[row, order]))
    report = _report(
        "knn",
        dataset,
        test,
        torch.tensor(predictions, dtype=torch.int64),
        _num_classes(train, test),
    )
    logger.info(
        "kNN (k=%s) on %s: accuracy %.4f, macro F1 %.4f.", k, dataset or "<set>", report.accuracy, report.macro_f1
    )
    return report


def _standardize(train: torch.Tensor, *others: torch.Tensor) -> list[torch.Tensor]:
    mean = train.mean(dim=0)
    std = train.std(dim=0, unbiased=False)
    std = torch.where(std > 0, std, torch.ones_like(std))
    return [(x - mean) / std for x in (train, *others)]


def linear_probe(
    train: EmbeddingSet,
    test: EmbeddingSet,
    config: ProbeConfig | None = None,
    *,
    dataset: str = "",
) -> EvalReport:
    """Multinomial logistic regression trained by full-batch gradient descent with cosine decay.

    The classifier starts at zero, so the result does not depend on any random state. The
    report keeps the regularised objective of every epoch.
    """
    config = config or ProbeConfig()
    if train.labels.unique().numel() < 2:
        raise ValueError("The linear probe needs at least two classes in the train set.")
    if train.dim != test.dim:
        raise ValueError(f"Train dim {train.dim} differs from test dim {test.dim}.")
    num_classes = _num_classes(train, test)
    x_train, x_test = _standardize(train.vectors.to(torch.float32), test.vectors.to(torch.float32))
    classifier = nn.Linear(train.dim, num_classes)
    nn.init.zeros_(classifier.weight)
    nn.init.zeros_(classifier.bias)
    optimizer = torch.optim.SGD(classifier.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.epochs)
    history = []
    for _ in range(config.epochs):
        optimizer.zero_grad()
        loss = F.cross_entropy(classifier(x_train), train.labels)
        penalty = sum(param.pow(2).sum() for param in classifier.parameters())
        history.append(float(loss.detach()) + 0.5 * config.weight_decay * float(penalty))
        loss.backward()
        optimizer.step()
        scheduler.step()
    with torch.no_grad():
        predicted = classifier(x_test).argmax(dim=1)
    report = _report("linear", dataset, test, predicted, num_classes, history)
    logger.info(
        "Linear probe on %s: accuracy %.4f, macro F1 %.4f, final objective %.4f.",
        dataset or "<set>",
        report.accuracy,
        report.macro_f1,
        history[-1],
    )
    return report


def write_report_csv(path: Path, reports: Iterable[EvalReport]) -> Path:
    """Write `method,dataset,accuracy,precision,f1` rows; precision and F1 are macro averages."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(REPORT_COLUMNS)
        for report in reports:
            writer.writerow(
                [
                    report.method,
                    report.dataset,
                    f"{report.accuracy:.6f}",
                    f"{report.macro_precision:.6f}",
                    f"{report.macro_f1:.6f}",
                ]
            )
    return path


def write_embeddings(path: Path, embeddings: EmbeddingSet) -> Path:
    """Store vectors and labels as a tensor container and the ids as a sidecar text file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    write_tensors(path, {"vectors": embeddings.vectors, "labels": embeddings.labels.to(torch.float32)})
    path.with_suffix(".ids.txt").write_text("\n".join(embeddings.ids) + "\n", encoding="utf-8")
    return path
