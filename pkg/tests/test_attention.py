"""Tests for CLS-attention maps, PCA over heads and region detection."""

from __future__ import annotations

from pathlib import Path

import pytest
import torch

from dino_desk.attention import (
    ClsAttentionMaps,
    DetectionTally,
    ImageDetectionCounts,
    analyze_images,
    cls_attention,
    connected_components,
    detect_regions,
    pca_reduce,
    roi_to_patch_grid,
    score_detections,
    write_detection_scores,
)
from dino_desk.data import RoiMask
from dino_desk.vit import PRESETS, build_vit
from tests.conftest import synthetic_samples


def _plus(size: int = 5, arm: float = 0.5, center: float = 0.8) -> torch.Tensor:
    values = torch.zeros(size, size)
    mid = size // 2
    for row, col in ((mid - 1, mid), (mid + 1, mid), (mid, mid - 1), (mid, mid + 1)):
        values[row, col] = arm
    values[mid, mid] = center
    return values


def _random_maps(heads: int = 4, grid: int = 8, seed: int = 0) -> ClsAttentionMaps:
    generator = torch.Generator().manual_seed(seed)
    return ClsAttentionMaps(torch.rand(heads, grid, grid, generator=generator))


def test_cls_attention_shapes_and_uniform_values() -> None:
    uniform = torch.full((2, 4, 65, 65), 1 / 65)

    maps = cls_attention([uniform, uniform])

    assert maps.maps.shape == (4, 8, 8)
    assert maps.num_heads == 4
    assert maps.grid == 8
    assert torch.allclose(maps.maps, torch.full((4, 8, 8), 1 / 65))


def test_cls_attention_drops_the_cls_column() -> None:
    attention = torch.zeros(1, 1, 5, 5)
    attention[0, 0, 0] = torch.tensor([0.6, 0.1, 0.1, 0.1, 0.1])
    maps = cls_attention([attention], layer=0)
    assert maps.maps.shape == (1, 2, 2)
    assert float(maps.maps.sum()) == pytest.approx(0.4)


def test_cls_attention_errors() -> None:
    stack = [torch.zeros(1, 2, 5, 5)]
    with pytest.raises(IndexError, match="out of range for 1 layers"):
        cls_attention(stack, layer=1)
    with pytest.raises(IndexError, match="batch of 1"):
        cls_attention(stack, image_index=1)
    with pytest.raises(ValueError, match=r"\[B, H, n, n\]"):
        cls_attention([torch.zeros(2, 5, 5)])
    with pytest.raises(ValueError, match="square grid"):
        cls_attention([torch.zeros(1, 2, 4, 4)])
    with pytest.raises(ValueError, match=r"\[H, P, P\]"):
        ClsAttentionMaps(torch.zeros(2, 3, 4))


def test_cls_attention_from_the_encoder() -> None:
    backbone = build_vit(PRESETS["desk-tiny"], seed=0)
    output = backbone(torch.rand(2, 1, 32, 32), capture_attention=True)

    maps = cls_attention(output.attention, image_index=1)

    assert maps.maps.shape == (2, 8, 8)
    assert bool((maps.maps >= 0).all())
    assert bool((maps.maps.sum(dim=(1, 2)) <= 1 + 1e-6).all())


def test_pca_collinear_heads() -> None:
    first = torch.rand(8, 8, generator=torch.Generator().manual_seed(1))
    maps = ClsAttentionMaps(torch.stack([first, 2 * first]))

    result = pca_reduce(maps, 1)

    assert result.explained_variance_ratio[0] == pytest.approx(1.0)
    expected = (first - first.min()) / (first.max() - first.min())
    assert torch.allclose(result.maps[0], expected, atol=1e-5)
    assert not result.degenerate


def test_pca_full_reconstruction() -> None:
    maps = _random_maps()

    result = pca_reduce(maps, 4)

    points = maps.maps.reshape(4, -1).T.to(torch.float64)
    assert torch.allclose(result.scores @ result.loadings.T, points - result.mean, atol=1e-5)
    assert sum(result.explained_variance_ratio) == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(5))
def test_pca_random_maps(seed: int) -> None:
    result = pca_reduce(_random_maps(seed=seed), 1)

    assert 0 < result.explained_variance_ratio[0] <= 1
    assert result.maps.shape == (1, 8, 8)
    assert float(result.maps.min()) == 0.0
    assert float(result.maps.max()) == pytest.approx(1.0)


def test_pca_sign_convention_survives_head_permutation() -> None:
    maps = _random_maps(seed=3)
    permuted = ClsAttentionMaps(maps.maps[torch.tensor([2, 0, 3, 1])])

    assert torch.allclose(pca_reduce(maps, 1).maps, pca_reduce(permuted, 1).maps, atol=1e-5)
    loadings = pca_reduce(maps, 2).loadings
    strongest = loadings.abs().argmax(dim=0)
    assert bool((loadings[strongest, torch.arange(2)] > 0).all())


def test_pca_constant_maps_are_degenerate() -> None:
    result = pca_reduce(ClsAttentionMaps(torch.full((3, 4, 4), 0.25)), 2)

    assert result.degenerate
    assert bool((result.maps == 0).all())
    assert result.explained_variance_ratio == (0.0, 0.0)
    with pytest.raises(ValueError, match="n_components=4"):
        pca_reduce(ClsAttentionMaps(torch.zeros(3, 4, 4)), 4)


def test_detect_regions_examples() -> None:
    assert detect_regions(torch.full((6, 6), 0.2)).clusters == ()

    single = torch.zeros(6, 6)
    single[4, 1] = 0.9
    (cluster,) = detect_regions(single).clusters
    assert cluster.size == 1
    assert cluster.centroid == pytest.approx((4.0, 1.0))
    assert cluster.peak == pytest.approx(0.9)

    (plus,) = detect_regions(_plus()).clusters
    assert plus.size == 5
    assert plus.centroid == pytest.approx((2.0, 2.0))


def test_detect_regions_needs_a_seed() -> None:
    values = torch.zeros(6, 6)
    values[0, :3] = 0.5
    values[5, 3:] = torch.tensor([0.5, 0.75, 0.5])

    (cluster,) = detect_regions(values).clusters

    assert cluster.patches == frozenset({(5, 3), (5, 4), (5, 5)})
    assert cluster.centroid == pytest.approx((5.0, (3 * 0.5 + 4 * 0.75 + 5 * 0.5) / 1.75))


def test_detect_regions_invariants() -> None:
    values = torch.rand(12, 12, generator=torch.Generator().manual_seed(7))
    result = detect_regions(values)

    seen: set[tuple[int, int]] = set()
    for cluster in result.clusters:
        assert not cluster.patches & seen
        seen |= cluster.patches
        assert any(float(values[cell]) >= 0.7 for cell in cluster.patches)
    counts = [len(detect_regions(values, 0.3, t_high).clusters) for t_high in (0.5, 0.7, 0.9, 0.99)]
    assert all(a >= b for a, b in zip(counts, counts[1:], strict=False))


@pytest.mark.parametrize(("t_low", "t_high"), [(0.8, 0.7), (-0.1, 0.5), (0.3, 1.5)])
def test_detect_regions_rejects_thresholds(t_low: float, t_high: float) -> None:
    with pytest.raises(ValueError, match="Thresholds"):
        detect_regions(torch.zeros(3, 3), t_low, t_high)


def test_connected_components() -> None:
    mask = torch.tensor([[1, 1, 0], [0, 0, 0], [1, 0, 1]], dtype=torch.bool)
    assert connected_components(mask) == [
        frozenset({(0, 0), (0, 1)}),
        frozenset({(2, 0)}),
        frozenset({(2, 2)}),
    ]


def test_roi_to_patch_grid() -> None:
    mask = torch.zeros(8, 8, dtype=torch.bool)
    mask[5, 2] = True

    grid = roi_to_patch_grid(RoiMask(mask), 4)

    assert grid.tolist() == [[False, False], [True, False]]
    assert roi_to_patch_grid(mask.float(), 4).equal(grid)
    with pytest.raises(ValueError, match="not divisible"):
        roi_to_patch_grid(mask, 3)


def test_score_detections_cases() -> None:
    values = torch.zeros(5, 5)
    values[1, 1] = 0.9
    truth = torch.zeros(5, 5)
    truth[1, 1] = 1

    perfect = score_detections(detect_regions(values), truth)
    assert (perfect.tp, perfect.fp, perfect.fn) == (1, 0, 0)
    assert perfect.overlaps == (1.0,)

    miss = torch.zeros(5, 5)
    miss[4, 4] = 1
    wrong = score_detections(detect_regions(values), miss)
    assert (wrong.tp, wrong.fp, wrong.fn) == (0, 1, 1)

    with pytest.raises(ValueError, match="does not match"):
        score_detections(detect_regions(values), torch.zeros(4, 4))


def test_score_detections_matches_one_cluster_per_component() -> None:
    values = torch.zeros(5, 5)
    values[0, 0:2] = 0.9
    values[2, 0] = 0.9
    truth = torch.zeros(5, 5)
    truth[0:3, 0] = 1

    counts = score_detections(detect_regions(values), truth)

    # Both clusters touch the single component; only one can claim it
    assert (counts.tp, counts.fp, counts.fn) == (1, 1, 0)
    assert counts.overlaps == (0.5,) or counts.overlaps == (1.0,)
    assert counts.tp + counts.fn == 1
    assert counts.tp + counts.fp == 2


def test_detection_tally_micro_totals() -> None:
    tally = DetectionTally()
    tally.add_counts(1674, 628, 685)

    score = tally.score()

    assert score.micro_precision == pytest.approx(0.7272, abs=1e-4)
    assert score.micro_recall == pytest.approx(0.7096, abs=1e-4)
    assert score.micro_f1 == pytest.approx(0.7183, abs=1e-4)
    assert score.localization == 0.0


def test_detection_tally_macro_is_the_per_image_mean() -> None:
    tally = DetectionTally()
    tally.add(ImageDetectionCounts(tp=1, fp=0, fn=0, overlaps=(1.0,)))
    tally.add(ImageDetectionCounts(tp=1, fp=3, fn=1, overlaps=(0.5,)))

    score = tally.score()

    assert score.macro_precision == pytest.approx((1.0 + 0.25) / 2)
    assert score.macro_recall == pytest.approx((1.0 + 0.5) / 2)
    assert score.micro_precision == pytest.approx(2 / 5)
    assert score.localization == pytest.approx(0.75)
    assert DetectionTally().score().macro_f1 == 0.0
    with pytest.raises(ValueError, match="non-negative"):
        tally.add_counts(-1, 0, 0)


def test_write_detection_scores(tmp_path: Path) -> None:
    tally = DetectionTally()
    tally.add_counts(3, 1, 1)

    lines = write_detection_scores(tmp_path / "scores.csv", tally.score()).read_text(encoding="utf-8").splitlines()

    assert lines[0] == "averaging,tp,fp,fn,precision,recall,f1,localization"
    assert lines[1] == "micro,3,1,1,0.7500,0.7500,0.7500,0.0000"
    assert lines[2].startswith("macro,3,1,1,0.7500")


def test_analyze_images(tmp_path: Path) -> None:
    backbone = build_vit(PRESETS["desk-tiny"], seed=0)
    samples = synthetic_samples(4)

    result = analyze_images(backbone, samples, samples_dir=tmp_path / "samples", results_dir=tmp_path / "results")

    assert len(result.images) == 4
    assert result.scored_images == 2
    assert result.images[1].counts is None
    for analysis in result.images:
        assert analysis.reduction.maps.shape == (1, 8, 8)
        assert analysis.detections.grid == (8, 8)
    assert (tmp_path / "samples" / "blob_000_attn_pc0.pgm").is_file()
    detections = (tmp_path / "results" / "detections.csv").read_text(encoding="utf-8").splitlines()
    assert detections[0] == "image_id,cluster_id,centroid_row,centroid_col,size,peak"
    total_clusters = sum(len(analysis.detections.clusters) for analysis in result.images)
    assert len(detections) == 1 + total_clusters
    assert (tmp_path / "results" / "detection_scores.csv").is_file()
    assert backbone.training
