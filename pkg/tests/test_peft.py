"""Tests for low-rank adapters and layer freezing."""

from __future__ import annotations

import pytest
import torch
from pydantic import ValidationError
from torch import nn

from dino_desk.peft import (
    LoraAdapter,
    LoraConfig,
    LoraLinear,
    adapter_state,
    freeze_backbone_layers,
    inject_lora,
    load_adapter_state,
    lora_forward,
    lora_layers,
    merge_all,
    merge_lora,
    unmerge_all,
    unmerge_lora,
)
from dino_desk.vit import PRESETS, DinoModel, build_head, build_vit, parameter_counts, trainable_parameters


def _model(preset: str = "desk-tiny") -> DinoModel:
    config = PRESETS[preset]
    backbone = build_vit(config, seed=0)
    return DinoModel(backbone, build_head(config.embed_dim, 8, seed=1, hidden_dim=16, bottleneck_dim=8))


def _nudge_adapters(model: nn.Module) -> None:
    with torch.no_grad():
        for layer in lora_layers(model).values():
            layer.adapter.B.normal_(std=0.1)


def test_lora_config() -> None:
    config = LoraConfig(r=4, alpha=8.0, target_projections=("q", "V", "Q"))
    assert config.target_projections == ("Q", "V")
    assert config.scaling == 2.0
    with pytest.raises(ValidationError, match="Unknown LoRA target"):
        LoraConfig(target_projections=("X",))


def test_adapter_starts_as_identity() -> None:
    base = nn.Linear(6, 5)
    layer = LoraLinear(base, LoraConfig(r=2))
    x = torch.randn(3, 6)

    assert torch.allclose(layer(x), base(x))
    assert not base.weight.requires_grad
    assert layer.adapter.A.requires_grad
    assert layer.adapter.B.abs().sum() == 0


def test_lora_forward_matches_dense_update() -> None:
    adapter = LoraAdapter(4, 3, r=2, alpha=4.0)
    with torch.no_grad():
        adapter.B.normal_()
    weight = torch.randn(3, 4)
    x = torch.randn(5, 4)

    out = lora_forward(adapter, weight, x)

    assert torch.allclose(out, x @ (weight + adapter.delta()).T, atol=1e-5)
    with pytest.raises(ValueError, match="does not fit"):
        lora_forward(adapter, torch.randn(4, 4), x)
    with pytest.raises(ValueError, match="features"):
        lora_forward(adapter, weight, torch.randn(5, 3))


def test_full_rank_adapter_is_legal() -> None:
    adapter = LoraAdapter(4, 4, r=4, alpha=4.0)
    assert adapter.delta().shape == (4, 4)


def test_merge_and_unmerge() -> None:
    base = nn.Linear(4, 4)
    layer = LoraLinear(base, LoraConfig(r=2))
    with torch.no_grad():
        layer.adapter.B.normal_()
    original = base.weight.detach().clone()
    x = torch.randn(2, 4)
    expected = layer(x)

    merged = merge_lora(layer)
    assert torch.allclose(merged, original + layer.adapter.delta(), atol=1e-6)
    assert torch.allclose(layer(x), expected, atol=1e-5)
    with pytest.raises(RuntimeError, match="already merged"):
        layer.merge()

    restored = unmerge_lora(layer)
    assert torch.allclose(restored, original, atol=1e-6)
    with pytest.raises(RuntimeError, match="not merged"):
        layer.unmerge()


def test_inject_lora_parameter_count() -> None:
    """Four layers of width 64 with rank 4 on Q and V carry 4096 adapter parameters."""
    model = _model("desk-small")
    config = LoraConfig(r=4)

    inject_lora(model, config)

    layers = lora_layers(model)
    assert sorted(layers) == [(index, target) for index in range(4) for target in ("Q", "V")]
    adapter_params = sum(p.numel() for layer in layers.values() for p in layer.adapter.parameters())
    assert adapter_params == 4096
    head_params = sum(p.numel() for p in model.dino_head.parameters() if p.requires_grad)
    assert parameter_counts(model)[1] == 4096 + head_params
    assert not model.backbone.pos_embed.requires_grad


def test_inject_lora_preserves_outputs_and_refuses_twice() -> None:
    model = _model()
    images = torch.rand(2, 1, 16, 16)
    before = model.backbone(images).cls

    inject_lora(model, LoraConfig(target_projections=("Q", "K", "V", "O")))

    assert torch.allclose(model.backbone(images).cls, before, atol=1e-6)
    with pytest.raises(RuntimeError, match="already injected"):
        inject_lora(model, LoraConfig())
    with pytest.raises(TypeError):
        lora_layers(nn.Linear(2, 2))


def test_merge_all_round_trip() -> None:
    model = _model()
    inject_lora(model, LoraConfig())
    _nudge_adapters(model)
    model.eval()
    images = torch.rand(2, 1, 16, 16)
    adapted = model.backbone(images).cls

    merge_all(model)
    merged = model.backbone(images).cls
    unmerge_all(model)

    assert torch.allclose(merged, adapted, atol=1e-5)
    assert torch.allclose(model.backbone(images).cls, adapted, atol=1e-5)


def test_adapter_state_round_trip() -> None:
    source = _model()
    inject_lora(source, LoraConfig())
    _nudge_adapters(source)
    target = _model()
    inject_lora(target, LoraConfig())

    state = adapter_state(source)
    load_adapter_state(target, state)

    assert sorted(state) == sorted(f"lora.{i}.{t}.{p}" for i in range(2) for t in ("Q", "V") for p in ("A", "B"))
    images = torch.rand(1, 1, 16, 16)
    source.eval()
    target.eval()
    assert torch.allclose(source.backbone(images).cls, target.backbone(images).cls, atol=1e-6)
    with pytest.raises(KeyError, match="lora.0.Q.A"):
        load_adapter_state(target, {})
    merge_all(target)
    with pytest.raises(RuntimeError, match="Unmerge"):
        load_adapter_state(target, state)


def test_freeze_backbone_layers() -> None:
    model = _model()

    trainable = freeze_backbone_layers(model, 1)

    assert trainable == set(trainable_parameters(model))
    assert not any(name.startswith("backbone.blocks.0.") for name in trainable)
    assert "backbone.blocks.1.attn.q.weight" in trainable
    assert "backbone.norm.weight" in trainable
    assert "backbone.pos_embed" not in trainable
    assert "backbone.patch_embed.weight" not in trainable
    assert "dino_head.mlp.0.weight" in trainable


def test_freeze_all_layers_leaves_heads() -> None:
    model = _model()
    trainable = freeze_backbone_layers(model, 2)
    assert trainable
    assert all(name.startswith("dino_head.") for name in trainable)


def test_freeze_zero_layers_is_a_no_op() -> None:
    model = _model()
    assert freeze_backbone_layers(model, 0) == set(trainable_parameters(model))
    with pytest.raises(ValueError, match="Cannot freeze 3 layers"):
        freeze_backbone_layers(model, 3)


def test_freeze_after_lora_freezes_adapters_in_frozen_blocks() -> None:
    model = _model()
    inject_lora(model, LoraConfig())
    trainable = freeze_backbone_layers(model, 1)
    assert "backbone.blocks.0.attn.q.adapter.A" not in trainable
    assert "backbone.blocks.1.attn.q.adapter.A" in trainable
