"""LoRA adapters on the attention projections, and backbone layer freezing."""

from __future__ import annotations

from collections.abc import Mapping
from typing import Final

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator
from torch import nn

from dino_desk.utils import get_logger
from dino_desk.vit import DinoModel, VisionTransformer

logger = get_logger("dino_desk.peft")

# Target letter -> attribute of the attention module
TARGETS: Final = {"Q": "q", "K": "k", "V": "v", "O": "proj"}
TOKEN_PARAMS: Final = ("cls_token", "cls_pos", "pos_embed", "mask_token")


class LoraConfig(BaseModel):
    """Rank, scaling and targets of the adapters."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    r: int = Field(default=4, ge=1)
    alpha: float = Field(default=8.0, gt=0)
    dropout: float = Field(default=0.0, ge=0, lt=1)
    target_projections: tuple[str, ...] = ("Q", "V")

    @field_validator("target_projections")
    @classmethod
    def _known_targets(cls, value: tuple[str, ...]) -> tuple[str, ...]:
        normalized = tuple(dict.fromkeys(target.upper() for target in value))
        unknown = [target for target in normalized if target not in TARGETS]
        if unknown:
            raise ValueError(f"Unknown LoRA target(s) {unknown}; choose from {sorted(TARGETS)}.")
        return normalized

    @property
    def scaling(self) -> float:
        return self.alpha / self.r


class LoraAdapter(nn.Module):
    """Low-rank update B·A for a [d, k] weight; B starts at zero."""

    def __init__(self, in_features: int, out_features: int, r: int, alpha: float, dropout: float = 0.0) -> None:
        """Gaussian A (std 0.02) and zero B."""
        super().__init__()
        if not 1 <= r:
            raise ValueError("LoRA rank must be at least 1.")
        self.A = nn.Parameter(torch.randn(r, in_features) * 0.02)
        self.B = nn.Parameter(torch.zeros(out_features, r))
        self.scaling = alpha / r
        self.dropout = dropout

    def delta(self) -> torch.Tensor:
        """Dense update (alpha / r)·B·A."""
        return self.scaling * (self.B @ self.A)


def lora_forward(
    adapter: LoraAdapter,
    weight: torch.Tensor,
    x: torch.Tensor,
    *,
    bias: torch.Tensor | None = None,
    training: bool = False,
) -> torch.Tensor:
    """h = W_0·x + (alpha / r)·B·(A·x), A applied first; dropout only on the adapter branch."""
    if weight.shape != (adapter.B.shape[0], adapter.A.shape[1]):
        raise ValueError(
            f"Adapter {list(adapter.B.shape)}x{list(adapter.A.shape)} does not fit weight {list(weight.shape)}."
        )
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"Input has {x.shape[-1]} features, weight expects {weight.shape[1]}.")
    branch = F.dropout(x, p=adapter.dropout, training=training)
    return F.linear(x, weight, bias) + adapter.scaling * F.linear(F.linear(branch, adapter.A), adapter.B)


class LoraLinear(nn.Module):
    """A frozen nn.Linear with a trainable low-rank adapter."""

    def __init__(self, base: nn.Linear, config: LoraConfig) -> None:
        """Wrap `base` and freeze its weights."""
        super().__init__()
        self.base = base
        self.adapter = LoraAdapter(base.in_features, base.out_features, config.r, config.alpha, config.dropout)
        self.merged = False
        for param in self.base.parameters():
            param.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.merged:
            return self.base(x)
        return lora_forward(
            self.adapter, self.base.weight, x, bias=self.base.bias, training=self.training
        )

    def merge(self) -> None:
        """Fold the adapter into the base weight."""
        if self.merged:
            raise RuntimeError("Adapter is already merged.")
        with torch.no_grad():
            self.base.weight += self.adapter.delta()
        self.merged = True

    def unmerge(self) -> None:
        """Subtract a previously merged adapter from the base weight."""
        if not self.merged:
            raise RuntimeError("Adapter is not merged.")
        with torch.no_grad():
            self.base.weight -= self.adapter.delta()
        self.merged = False


def merge_lora(layer: LoraLinear) -> torch.Tensor:
    """Merge one adapter and return the merged weight."""
    layer.merge()
    return layer.base.weight


def unmerge_lora(layer: LoraLinear) -> torch.Tensor:
    """Undo `merge_lora` and return the restored base weight."""
    layer.unmerge()
    return layer.base.weight


def _backbone(model: nn.Module) -> VisionTransformer:
    if isinstance(model, DinoModel):
        return model.backbone
    if isinstance(model, VisionTransformer):
        return model
    raise TypeError(f"Expected a DinoModel or VisionTransformer, got {type(model).__name__}.")


def lora_layers(model: nn.Module) -> dict[tuple[int, str], LoraLinear]:
    """Adapted projections keyed by (layer index, target letter)."""
    backbone = _backbone(model)
    found = {}
    for index, block in enumerate(backbone.blocks):
        for target, attribute in TARGETS.items():
            module = getattr(block.attn, attribute)
            if isinstance(module, LoraLinear):
                found[index, target] = module
    return found


def inject_lora(model: nn.Module, config: LoraConfig) -> nn.Module:
    """Wrap the targeted projections of every layer and freeze the rest of the backbone.

    Heads of a DinoModel stay trainable. The model is modified in place and returned.
    """
    backbone = _backbone(model)
    if lora_layers(model):
        raise RuntimeError("LoRA adapters are already injected.")
    for target in config.target_projections:
        if target.upper() not in TARGETS:
            raise ValueError(f"Unknown LoRA target {target!r}.")
    for param in backbone.parameters():
        param.requires_grad_(False)
    # Adapters are created after freezing so they stay trainable
    for block in backbone.blocks:
        for target in config.target_projections:
            attribute = TARGETS[target.upper()]
            setattr(block.attn, attribute, LoraLinear(getattr(block.attn, attribute), config))
    count = sum(p.numel() for layer in lora_layers(model).values() for p in layer.adapter.parameters())
    logger.info(
        "Injected LoRA r=%s into %s with %s adapter parameters.", config.r, list(config.target_projections), count
    )
    return model


def merge_all(model: nn.Module) -> None:
    for layer in lora_layers(model).values():
        layer.merge()


def unmerge_all(model: nn.Module) -> None:
    for layer in lora_layers(model).values():
        layer.unmerge()


def adapter_state(model: nn.Module) -> dict[str, torch.Tensor]:
    """Adapter tensors named `lora.<layer>.<target>.{A,B}`."""
    state = {}
    for (index, target), layer in lora_layers(model).items():
        state[f"lora.{index}.{target}.A"] = layer.adapter.A.detach().clone()
        state[f"lora.{index}.{target}.B"] = layer.adapter.B.detach().clone()
    return state


def load_adapter_state(model: nn.Module, tensors: Mapping[str, torch.Tensor]) -> None:
    """Swap in adapters exported by `adapter_state`; merged adapters are refused."""
    layers = lora_layers(model)
    with torch.no_grad():
        for (index, target), layer in layers.items():
            if layer.merged:
                raise RuntimeError("Unmerge adapters before loading new ones.")
            for name in ("A", "B"):
                key = f"lora.{index}.{target}.{name}"
                if key not in tensors:
                    raise KeyError(f"Missing adapter tensor {key}.")
                getattr(layer.adapter, name).copy_(tensors[key])


def freeze_backbone_layers(model: nn.Module, n: int) -> set[str]:
    """Freeze the patch embedding, token and position parameters and blocks 0..n-1.

    With n equal to the depth the final norm is frozen too, leaving only the heads. Layers
    are only ever frozen here, so adapters inside frozen blocks are frozen as well. Returns
    the names of the parameters that remain trainable.
    """
    backbone = _backbone(model)
    depth = len(backbone.blocks)
    if not 0 <= n <= depth:
        raise ValueError(f"Cannot freeze {n} layers of a {depth}-layer backbone.")
    if n > 0:
        frozen: list[nn.Parameter] = [*backbone.patch_embed.parameters()]
        frozen += [getattr(backbone, name) for name in TOKEN_PARAMS]
        for block in list(backbone.blocks)[:n]:
            frozen += list(block.parameters())
        if n == depth:
            frozen += list(backbone.norm.parameters())
        for param in frozen:
            param.requires_grad_(False)
    return {name for name, param in model.named_parameters() if param.requires_grad}
