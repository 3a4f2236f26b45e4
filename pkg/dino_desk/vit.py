"""Tiny Vision Transformer encoder, DINO projection head and architecture presets.

Blocks are pre-norm with a GELU MLP. Q, K, V and the output projection are separate linear
layers so that low-rank adapters can target each of them by name.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Final, Literal

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import nn

L2_EPS: Final = 1e-6
INIT_STD: Final = 0.02


class ViTConfig(BaseModel):
    """Encoder shape. `base_grid` is the patch grid side of the positional table."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    patch_size: int = Field(default=4, ge=1)
    embed_dim: int = Field(default=64, ge=1)
    depth: int = Field(default=4, ge=1)
    num_heads: int = Field(default=4, ge=1)
    mlp_ratio: float = Field(default=4.0, gt=0)
    in_channels: Literal[1, 3] = 1
    base_grid: int = Field(default=8, ge=1)
    family: Literal["dinov1", "dinov2"] = "dinov2"

    @model_validator(mode="after")
    def _heads_divide_dim(self) -> ViTConfig:
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}."
            )
        return self

    @property
    def head_dim(self) -> int:
        """Per-head key dimension d_k."""
        return self.embed_dim // self.num_heads


# Hub identifiers are kept as names only; every preset is a desk-scale stand-in.
PRESETS: Final[dict[str, ViTConfig]] = {
    "desk-tiny": ViTConfig(embed_dim=32, depth=2, num_heads=2),
    "desk-small": ViTConfig(),
    "tiny-giant": ViTConfig(embed_dim=128, depth=4, num_heads=4),
    "facebook/dino-vits16": ViTConfig(embed_dim=48, depth=4, num_heads=4, family="dinov1"),
    "facebook/dino-vitb16": ViTConfig(embed_dim=64, depth=4, num_heads=4, family="dinov1"),
    "facebook/dino-vitb8": ViTConfig(
        patch_size=2, base_grid=16, embed_dim=64, depth=4, num_heads=4, family="dinov1"
    ),
    "facebook/dinov2-small": ViTConfig(embed_dim=48, depth=4, num_heads=4),
    "facebook/dinov2-base": ViTConfig(embed_dim=64, depth=4, num_heads=4),
    "facebook/dinov2-large": ViTConfig(embed_dim=96, depth=6, num_heads=6),
    "facebook/dinov2-giant": ViTConfig(embed_dim=128, depth=6, num_heads=8),
}


def resolve_preset(name: str) -> ViTConfig:
    """Look up an architecture preset by name."""
    try:
        return PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(PRESETS))
        raise ValueError(f"Unknown model preset {name!r}; known presets: {known}.") from None


def interpolate_pos_embed(pos: torch.Tensor, target_grid: int) -> torch.Tensor:
    """Bilinearly resize a [g*g, d] positional grid to [target*target, d].

    Returns `pos` itself when the grid already has the requested side.
    """
    if target_grid < 1:
        raise ValueError(f"target_grid must be >= 1, got {target_grid}.")
    num, dim = pos.shape
    grid = math.isqrt(num)
    if grid * grid != num:
        raise ValueError(f"Positional table of {num} rows is not a square grid.")
    if grid == target_grid:
        return pos
    planes = pos.reshape(1, grid, grid, dim).permute(0, 3, 1, 2)
    resized = F.interpolate(
        planes, size=(target_grid, target_grid), mode="bilinear", align_corners=False
    )
    return resized.permute(0, 2, 3, 1).reshape(target_grid * target_grid, dim)


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    """Return x / (||x|| + 1e-6) along the last dimension; zero stays zero."""
    return x / (x.norm(dim=-1, keepdim=True) + L2_EPS)


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=INIT_STD)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class Attention(nn.Module):
    """Multi-head self-attention returning both the output and the attention matrix."""

    def __init__(self, dim: int, num_heads: int) -> None:
        """Create the Q, K, V and output projections."""
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Compute softmax(QK^T / sqrt(d_k)) V per head; attention is [B, H, n, n]."""
        batch, tokens, dim = x.shape

        def split(t: torch.Tensor) -> torch.Tensor:
            return t.reshape(batch, tokens, self.num_heads, -1).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(batch, tokens, dim)
        return self.proj(out), attn


class Mlp(nn.Module):
    """Two-layer GELU feed-forward."""

    def __init__(self, dim: int, hidden: int) -> None:
        """Create both layers."""
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Apply fc2(gelu(fc1(x)))."""
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float) -> None:
        """Create the attention and MLP sub-layers."""
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return the block output and its attention matrix."""
        attended, attn = self.attn(self.norm1(x))
        x = x + attended
        return x + self.mlp(self.norm2(x)), attn


@dataclass(frozen=True)
class EncoderOutput:
    """Batched encoder output; `attention` holds one [B, H, n, n] tensor per layer."""

    cls: torch.Tensor
    patch_tokens: torch.Tensor
    attention: tuple[torch.Tensor, ...] | None = None


class VisionTransformer(nn.Module):
    """ViT encoder with CLS token, learned mask token and resizable positional embeddings."""

    def __init__(self, config: ViTConfig) -> None:
        """Build every layer; parameters are initialised by `build_vit`."""
        super().__init__()
        self.config = config
        dim = config.embed_dim
        self.patch_embed = nn.Conv2d(
            config.in_channels, dim, kernel_size=config.patch_size, stride=config.patch_size
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.cls_pos = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(config.base_grid**2, dim))
        self.mask_token = nn.Parameter(torch.zeros(dim))
        self.blocks = nn.ModuleList(
            Block(dim, config.num_heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(dim, eps=1e-6)

    def reset_parameters(self) -> None:
        """Truncated-normal weights, zero biases, zero CLS and mask tokens."""
        self.apply(_init_weights)
        nn.init.trunc_normal_(self.patch_embed.weight, std=INIT_STD)
        nn.init.zeros_(self.patch_embed.bias)
        nn.init.trunc_normal_(self.pos_embed, std=INIT_STD)
        nn.init.trunc_normal_(self.cls_pos, std=INIT_STD)
        nn.init.zeros_(self.cls_token)
        nn.init.zeros_(self.mask_token)

    def grid_size(self, height: int, width: int) -> tuple[int, int]:
        """Patch grid of an input, raising when the size is not divisible by the patch."""
        patch = self.config.patch_size
        if height % patch or width % patch:
            raise ValueError(f"Input {height}x{width} is not divisible by patch size {patch}.")
        return height // patch, width // patch

    def prepare_tokens(
        self, images: torch.Tensor, masks: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Embed patches, substitute masked ones, prepend CLS and add positions.

        `masks` is a boolean [B, num_patches] tensor, True where the patch is masked.
        """
        rows, cols = self.grid_size(images.shape[-2], images.shape[-1])
        if rows != cols:
            raise ValueError(f"Input grid {rows}x{cols} must be square.")
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        if masks is not None:
            if masks.shape != x.shape[:2]:
                raise ValueError(
                    f"Mask shape {list(masks.shape)} does not match patches {list(x.shape[:2])}."
                )
            x = torch.where(masks.unsqueeze(-1), self.mask_token.to(x.dtype), x)
        x = x + interpolate_pos_embed(self.pos_embed, rows)
        cls = (self.cls_token + self.cls_pos).expand(x.shape[0], -1, -1)
        return torch.cat((cls, x), dim=1)

    def forward(
        self,
        images: torch.Tensor,
        masks: torch.Tensor | None = None,
        *,
        capture_attention: bool = False,
    ) -> EncoderOutput:
        """Encode a [B, C, H, W] batch."""
        x = self.prepare_tokens(images, masks)
        maps = []
        for block in self.blocks:
            x, attn = block(x)
            if capture_attention:
                maps.append(attn)
        x = self.norm(x)
        return EncoderOutput(
            cls=x[:, 0],
            patch_tokens=x[:, 1:],
            attention=tuple(maps) if capture_attention else None,
        )


def mask_from_indices(
    indices: list[torch.Tensor] | tuple[torch.Tensor, ...], num_patches: int
) -> torch.Tensor:
    """Turn per-image patch index sets into a boolean [B, num_patches] mask."""
    masks = torch.zeros(len(indices), num_patches, dtype=torch.bool)
    for row, index in enumerate(indices):
        if index.numel() and (int(index.min()) < 0 or int(index.max()) >= num_patches):
            raise IndexError(f"Mask index out of range for {num_patches} patches.")
        masks[row, index] = True
    return masks


class WeightNormLinear(nn.Module):
    """Bias-free linear layer with weight = g * v / ||v|| row-wise."""

    def __init__(self, in_dim: int, out_dim: int, *, fix_scale: bool) -> None:
        """Create direction `weight_v` and scale `weight_g`; a fixed scale stays 1."""
        super().__init__()
        self.weight_v = nn.Parameter(torch.empty(out_dim, in_dim))
        self.weight_g = nn.Parameter(torch.ones(out_dim, 1), requires_grad=not fix_scale)
        nn.init.trunc_normal_(self.weight_v, std=INIT_STD)

    @property
    def weight(self) -> torch.Tensor:
        """Effective weight matrix."""
        return self.weight_g * self.weight_v / self.weight_v.norm(dim=1, keepdim=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Project x."""
        return F.linear(x, self.weight)


class DinoHead(nn.Module):
    """MLP -> L2-normalised bottleneck -> weight-normalised projection to K logits."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        *,
        hidden_dim: int = 256,
        bottleneck_dim: int = 64,
        norm_last_layer: bool = True,
    ) -> None:
        """Build the three-layer MLP and the last layer."""
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, bottleneck_dim),
        )
        self.mlp.apply(_init_weights)
        self.last_layer = WeightNormLinear(bottleneck_dim, out_dim, fix_scale=norm_last_layer)

    def bottleneck(self, feature: torch.Tensor) -> torch.Tensor:
        """Return the L2-normalised bottleneck vector."""
        return l2_normalize(self.mlp(feature))

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        """Map [..., in_dim] features to [..., K] logits."""
        if feature.shape[-1] != self.in_dim:
            raise ValueError(f"Head expects {self.in_dim} features, got {feature.shape[-1]}.")
        return self.last_layer(self.bottleneck(feature))


class DinoModel(nn.Module):
    """Backbone plus DINO head and, when configured, a separate iBOT patch head."""

    def __init__(
        self, backbone: VisionTransformer, dino_head: DinoHead, ibot_head: DinoHead | None = None
    ) -> None:
        """Bundle the parts; names are prefixed backbone., dino_head., ibot_head."""
        super().__init__()
        self.backbone = backbone
        self.dino_head = dino_head
        self.ibot_head = ibot_head

    @property
    def patch_head(self) -> DinoHead:
        """Head applied to patch tokens for the iBOT objective."""
        return self.ibot_head if self.ibot_head is not None else self.dino_head


def build_vit(config: ViTConfig, seed: int) -> VisionTransformer:
    """Create a seeded encoder without touching the global RNG stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = VisionTransformer(config)
        model.reset_parameters()
    return model


def build_head(
    in_dim: int,
    out_dim: int,
    seed: int,
    *,
    hidden_dim: int = 256,
    bottleneck_dim: int = 64,
    norm_last_layer: bool = True,
) -> DinoHead:
    """Create a seeded projection head."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DinoHead(
            in_dim,
            out_dim,
            hidden_dim=hidden_dim,
            bottleneck_dim=bottleneck_dim,
            norm_last_layer=norm_last_layer,
        )


def parameter_counts(model: nn.Module) -> tuple[int, int]:
    """Return (total, trainable) parameter counts."""
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return total, trainable


def trainable_parameters(model: nn.Module) -> dict[str, nn.Parameter]:
    """Trainable parameters by name, in registration order."""
    return {name: p for name, p in model.named_parameters() if p.requires_grad}


def backward(
    model: nn.Module,
    outputs: torch.Tensor | tuple[torch.Tensor, ...],
    grad_outputs: torch.Tensor | tuple[torch.Tensor, ...] | None = None,
) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of `outputs` for every trainable parameter of `model`.

    Frozen parameters receive no entry. Parameters the outputs do not depend on get zeros.
    """
    outs = outputs if isinstance(outputs, tuple) else (outputs,)
    if not all(out.requires_grad and out.grad_fn is not None for out in outs):
        raise RuntimeError("backward called without a recorded forward pass.")
    params = trainable_parameters(model)
    if grad_outputs is not None and not isinstance(grad_outputs, tuple):
        grad_outputs = (grad_outputs,)
    grads = torch.autograd.grad(
        outs, tuple(params.values()), grad_outputs=grad_outputs, allow_unused=True
    )
    return {
        name: grad if grad is not None else torch.zeros_like(param)
        for (name, param), grad in zip(params.items(), grads, strict=True)
    }


def load_matching(model: nn.Module, tensors: Mapping[str, torch.Tensor], prefix: str = "") -> None:
    """Copy `prefix`-named tensors into the model's parameters and buffers, strictly."""
    state = model.state_dict()
    wanted = {f"{prefix}{name}" for name in state}
    missing = sorted(wanted - set(tensors))
    if missing:
        raise KeyError(f"Missing tensors: {', '.join(missing[:5])}.")
    with torch.no_grad():
        for name, value in state.items():
            source = tensors[f"{prefix}{name}"]
            if source.shape != value.shape:
                raise ValueError(
                    f"Shape mismatch for {name}: {list(source.shape)} vs {list(value.shape)}."
                )
            value.copy_(source)
