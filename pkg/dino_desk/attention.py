"""CLS-attention maps, PCA over heads, hysteresis region detection and detection scoring."""

from __future__ import annotations

import csv
import math
from collections import deque
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Final, Literal

import torch
from torch.nn import functional as F

from dino_desk.data import LabeledSample, RoiMask, normalize, write_pgm
from dino_desk.utils import get_logger
from dino_desk.vit import VisionTransformer

logger = get_logger(__name__)

T_LOW: Final = 0.3
T_HIGH: Final = 0.7
DETECTION_COLUMNS: Final = ("image_id", "cluster_id", "centroid_row", "centroid_col", "size", "peak")
SCORE_COLUMNS: Final = ("averaging", "tp", "fp", "fn", "precision", "recall", "f1", "localization")
NEIGHBOURS: Final = ((-1, 0), (1, 0), (0, -1), (0, 1))

type Cell = tuple[int, int]


@dataclass(frozen=True)
class ClsAttentionMaps:
    """One [P, P] map per head: attention from the CLS token to every patch."""

    maps: torch.Tensor

    def __post_init__(self) -> None:
        if self.maps.dim() != 3 or self.maps.shape[1] != self.maps.shape[2]:
            raise ValueError(f"Attention maps must be [H, P, P], got {list(self.maps.shape)}.")

    @property
    def num_heads(self) -> int:
        return int(self.maps.shape[0])

    @property
    def grid(self) -> int:
        return int(self.maps.shape[1])


@dataclass(frozen=True)
class PcaResult:
    """Reduced maps in [0, 1] plus what is needed to undo the projection."""

    maps: torch.Tensor
    scores: torch.Tensor
    loadings: torch.Tensor
    mean: torch.Tensor
    explained_variance_ratio: tuple[float, ...]
    degenerate: bool = False


@dataclass(frozen=True)
class Cluster:
    patches: frozenset[Cell]
    centroid: tuple[float, float]
    peak: float

    @property
    def size(self) -> int:
        return len(self.patches)


@dataclass(frozen=True)
class DetectionResult:
    clusters: tuple[Cluster, ...]
    t_low: float
    t_high: float
    grid: tuple[int, int]


@dataclass(frozen=True)
class ImageDetectionCounts:
    """Matching outcome of one image."""

    tp: int
    fp: int
    fn: int
    overlaps: tuple[float, ...] = ()


@dataclass(frozen=True)
class DetectionScore:
    tp: int
    fp: int
    fn: int
    micro_precision: float
    micro_recall: float
    micro_f1: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    localization: float


def _ratio(numerator: float, denominator: float) -> float:
    return numerator / denominator if denominator > 0 else 0.0


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    return precision, recall, _ratio(2 * precision * recall, precision + recall)


def cls_attention(
    attention: Sequence[torch.Tensor], layer: int = -1, image_index: int = 0
) -> ClsAttentionMaps:
    """Row 0 of every head of `layer` with the CLS column dropped, reshaped to [P, P].

    `attention` holds one [B, H, n, n] tensor per layer, as captured by the encoder.
    """
    if not -len(attention) <= layer < len(attention):
        raise IndexError(f"Layer {layer} is out of range for {len(attention)} layers.")
    stack = attention[layer]
    if stack.dim() != 4:
        raise ValueError(f"Attention must be [B, H, n, n], got {list(stack.shape)}.")
    if not -stack.shape[0] <= image_index < stack.shape[0]:
        raise IndexError(f"Image {image_index} is out of range for a batch of {stack.shape[0]}.")
    rows = stack[image_index, :, 0, 1:]
    grid = math.isqrt(rows.shape[-1])
    if grid * grid != rows.shape[-1]:
        raise ValueError(f"{rows.shape[-1]} patches do not form a square grid.")
    return ClsAttentionMaps(rows.reshape(-1, grid, grid).detach().to(torch.float32))


def pca_reduce(maps: ClsAttentionMaps, n_components: int = 1) -> PcaResult:
    """Project every patch's per-head attention onto the leading principal components.

    Components come from the eigendecomposition of the head covariance. Each loading vector is
    signed so its largest-magnitude entry is positive and each output map is min-max scaled to
    [0, 1]. Zero-variance input gives all-zero maps with `degenerate` set.
    """
    heads, grid = maps.num_heads, maps.grid
    if not 1 <= n_components <= heads:
        raise ValueError(f"n_components={n_components} must be between 1 and {heads}.")
    points = maps.maps.reshape(heads, -1).T.to(torch.float64)
    mean = points.mean(dim=0)
    centered = points - mean
    covariance = centered.T @ centered / max(points.shape[0] - 1, 1)
    eigenvalues, eigenvectors = torch.linalg.eigh(covariance)
    eigenvalues = eigenvalues.flip(0).clamp(min=0.0)
    eigenvectors = eigenvectors.flip(1)
    strongest = eigenvectors.abs().argmax(dim=0)
    signs = torch.sign(eigenvectors[strongest, torch.arange(heads)])
    eigenvectors = eigenvectors * torch.where(signs == 0, torch.ones_like(signs), signs)
    loadings = eigenvectors[:, :n_components]
    scores = centered @ loadings
    total = float(eigenvalues.sum())
    degenerate = total <= 1e-12
    ratios = tuple(float(v) / total if not degenerate else 0.0 for v in eigenvalues[:n_components])

    low = scores.min(dim=0).values
    span = scores.max(dim=0).values - low
    flat = span <= 1e-12
    scaled = torch.where(flat, torch.zeros_like(scores), (scores - low) / torch.where(flat, 1.0, span))
    if degenerate or bool(flat.any()):
        degenerate = True
        logger.warning("Attention maps have no variance along %s component(s); emitting zeros.", int(flat.sum()))
    return PcaResult(
        maps=scaled.T.reshape(n_components, grid, grid).to(torch.float32),
        scores=scores,
        loadings=loadings,
        mean=mean,
        explained_variance_ratio=ratios,
        degenerate=degenerate,
    )


def _flood(grid: torch.Tensor, start: Cell, seen: set[Cell], inside: torch.Tensor) -> set[Cell]:
    rows, cols = grid.shape
    region = {start}
    seen.add(start)
    queue = deque([start])
    while queue:
        row, col = queue.popleft()
        for d_row, d_col in NEIGHBOURS:
            nxt = (row + d_row, col + d_col)
            if 0 <= nxt[0] < rows and 0 <= nxt[1] < cols and nxt not in seen and bool(inside[nxt]):
                seen.add(nxt)
                region.add(nxt)
                queue.append(nxt)
    return region


def connected_components(mask: torch.Tensor) -> list[frozenset[Cell]]:
    """4-connected components of a boolean grid, ordered by their first cell in row-major order."""
    seen: set[Cell] = set()
    components = []
    for row, col in mask.nonzero().tolist():
        if (row, col) not in seen:
            components.append(frozenset(_flood(mask, (row, col), seen, mask)))
    return components


def detect_regions(values: torch.Tensor, t_low: float = T_LOW, t_high: float = T_HIGH) -> DetectionResult:
    """Hysteresis clustering: seeds at or above `t_high` grow over 4-neighbours at or above `t_low`."""
    if values.dim() != 2:
        raise ValueError(f"Detection needs a 2-D map, got {list(values.shape)}.")
    if not 0.0 <= t_low <= t_high <= 1.0:
        raise ValueError(f"Thresholds must satisfy 0 <= t_low ({t_low}) <= t_high ({t_high}) <= 1.")
    values = values.detach().to(torch.float64)
    support = values >= t_low
    seen: set[Cell] = set()
    clusters = []
    for row, col in (values >= t_high).nonzero().tolist():
        if (row, col) in seen:
            continue
        region = _flood(values, (row, col), seen, support)
        weights = torch.tensor([float(values[cell]) for cell in sorted(region)], dtype=torch.float64)
        coords = torch.tensor(sorted(region), dtype=torch.float64)
        centroid = (weights[:, None] * coords).sum(dim=0) / weights.sum()
        clusters.append(
            Cluster(
                patches=frozenset(region),
                centroid=(float(centroid[0]), float(centroid[1])),
                peak=float(weights.max()),
            )
        )
    return DetectionResult(tuple(clusters), t_low, t_high, (int(values.shape[0]), int(values.shape[1])))


def roi_to_patch_grid(roi: RoiMask | torch.Tensor, patch_size: int) -> torch.Tensor:
    """Boolean patch grid; a patch is positive when any of its pixels is."""
    mask = roi.mask if isinstance(roi, RoiMask) else roi != 0
    height, width = mask.shape
    if height % patch_size or width % patch_size:
        raise ValueError(f"ROI {height}x{width} is not divisible by patch size {patch_size}.")
    pooled = F.max_pool2d(mask[None, None].to(torch.float32), kernel_size=patch_size)
    return pooled[0, 0] > 0


def score_detections(result: DetectionResult, truth: torch.Tensor) -> ImageDetectionCounts:
    """Greedy one-to-one matching of clusters to ground-truth components by overlap."""
    if tuple(truth.shape) != result.grid:
        raise ValueError(f"Ground truth grid {list(truth.shape)} does not match detections {list(result.grid)}.")
    components = connected_components(truth != 0)
    pairs = sorted(
        (
            (-len(cluster.patches & component), c_index, g_index)
            for c_index, cluster in enumerate(result.clusters)
            for g_index, component in enumerate(components)
            if cluster.patches & component
        )
    )
    used_clusters: set[int] = set()
    used_components: set[int] = set()
    overlaps = []
    for negative_overlap, c_index, g_index in pairs:
        if c_index in used_clusters or g_index in used_components:
            continue
        used_clusters.add(c_index)
        used_components.add(g_index)
        overlaps.append(-negative_overlap / result.clusters[c_index].size)
    tp = len(overlaps)
    return ImageDetectionCounts(
        tp=tp,
        fp=len(result.clusters) - tp,
        fn=len(components) - tp,
        overlaps=tuple(overlaps),
    )


@dataclass
class DetectionTally:
    """Accumulates per-image counts into micro and macro (per-image mean) scores."""

    images: list[ImageDetectionCounts] = field(default_factory=list)

    def add(self, counts: ImageDetectionCounts) -> None:
        self.images.append(counts)

    def add_counts(self, tp: int, fp: int, fn: int) -> None:
        """Record bare counts of one image; it adds nothing to localization."""
        if min(tp, fp, fn) < 0:
            raise ValueError("Detection counts must be non-negative.")
        self.images.append(ImageDetectionCounts(tp, fp, fn))

    def score(self) -> DetectionScore:
        tp = sum(image.tp for image in self.images)
        fp = sum(image.fp for image in self.images)
        fn = sum(image.fn for image in self.images)
        micro = _prf(tp, fp, fn)
        per_image = [_prf(image.tp, image.fp, image.fn) for image in self.images]
        count = len(per_image)
        macro = tuple(_ratio(sum(values), count) for values in zip(*per_image, strict=True)) if count else (0.0,) * 3
        overlaps = [value for image in self.images for value in image.overlaps]
        return DetectionScore(
            tp=tp,
            fp=fp,
            fn=fn,
            micro_precision=micro[0],
            micro_recall=micro[1],
            micro_f1=micro[2],
            macro_precision=macro[0],
            macro_recall=macro[1],
            macro_f1=macro[2],
            localization=_ratio(sum(overlaps), len(overlaps)),
        )


@dataclass(frozen=True)
class ImageAnalysis:
    image_id: str
    reduction: PcaResult
    detections: DetectionResult
    counts: ImageDetectionCounts | None


@dataclass(frozen=True)
class AnalysisResult:
    images: tuple[ImageAnalysis, ...]
    score: DetectionScore
    scored_images: int


def analyze_image(
    backbone: VisionTransformer,
    pixels: torch.Tensor,
    *,
    n_components: int = 1,
    t_low: float = T_LOW,
    t_high: float = T_HIGH,
    layer: int = -1,
) -> tuple[PcaResult, DetectionResult]:
    """Attention of one normalized [C, H, W] image, reduced and clustered on the first component."""
    with torch.no_grad():
        output = backbone(pixels.unsqueeze(0), capture_attention=True)
    if output.attention is None:
        raise RuntimeError("The encoder did not return attention maps.")
    reduction = pca_reduce(cls_attention(output.attention, layer), n_components)
    return reduction, detect_regions(reduction.maps[0], t_low, t_high)


def analyze_images(
    backbone: VisionTransformer,
    samples: Sequence[LabeledSample],
    *,
    n_components: int = 1,
    t_low: float = T_LOW,
    t_high: float = T_HIGH,
    layer: int = -1,
    normalization: Literal["unit", "standardize"] = "unit",
    mean: Sequence[float] | None = None,
    std: Sequence[float] | None = None,
    samples_dir: Path | None = None,
    results_dir: Path | None = None,
) -> AnalysisResult:
    """Run the per-image pipeline, score images that carry an ROI and write heatmaps and CSVs."""
    was_training = backbone.training
    backbone.eval()
    tally = DetectionTally()
    analyses = []
    try:
        for sample in samples:
            pixels = normalize(sample.image.pixels, normalization, mean, std)
            reduction, detections = analyze_image(
                backbone, pixels, n_components=n_components, t_low=t_low, t_high=t_high, layer=layer
            )
            counts = None
            if sample.roi is not None:
                counts = score_detections(detections, roi_to_patch_grid(sample.roi, backbone.config.patch_size))
                tally.add(counts)
            analyses.append(ImageAnalysis(sample.image.source_id, reduction, detections, counts))
    finally:
        backbone.train(was_training)
    result = AnalysisResult(tuple(analyses), tally.score(), len(tally.images))
    if samples_dir is not None:
        write_heatmaps(samples_dir, result.images)
    if results_dir is not None:
        write_detections_csv(results_dir / "detections.csv", result.images)
        if result.scored_images:
            write_detection_scores(results_dir / "detection_scores.csv", result.score)
    if not result.scored_images:
        logger.warning("No analysed image carries an ROI; detection scores are empty.")
    logger.info(
        "Analysed %s image(s): TP %s FP %s FN %s, micro F1 %.4f, localization %.4f.",
        len(analyses),
        result.score.tp,
        result.score.fp,
        result.score.fn,
        result.score.micro_f1,
        result.score.localization,
    )
    return result


def write_heatmaps(directory: Path, analyses: Iterable[ImageAnalysis]) -> list[Path]:
    """One 8-bit PGM per image and component."""
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for analysis in analyses:
        for component, heatmap in enumerate(analysis.reduction.maps):
            path = directory / f"{analysis.image_id}_attn_pc{component}.pgm"
            write_pgm(path, heatmap)
            written.append(path)
    return written


def write_detections_csv(path: Path, analyses: Iterable[ImageAnalysis]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(DETECTION_COLUMNS)
        for analysis in analyses:
            for index, cluster in enumerate(analysis.detections.clusters):
                writer.writerow(
                    [
                        analysis.image_id,
                        index,
                        f"{cluster.centroid[0]:.4f}",
                        f"{cluster.centroid[1]:.4f}",
                        cluster.size,
                        f"{cluster.peak:.4f}",
                    ]
                )
    return path


def write_detection_scores(path: Path, score: DetectionScore) -> Path:
    """Micro and macro rows; localization is the mean overlap fraction of true positives."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(SCORE_COLUMNS)
        for averaging, values in (
            ("micro", (score.micro_precision, score.micro_recall, score.micro_f1)),
            ("macro", (score.macro_precision, score.macro_recall, score.macro_f1)),
        ):
            writer.writerow(
                [averaging, score.tp, score.fp, score.fn, *(f"{v:.4f}" for v in values), f"{score.localization:.4f}"]
            )
    return path
