"""Small patch-token vision transformer producing ``(D, H, W)`` feature maps."""
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import container
from .errors import ConfigError, FormatError

TRAIN_MODES = ("tokens_only", "full", "frozen")


@dataclass
class BackboneConfig:
    patch_size: int = 8
    depth: int = 2
    heads: int = 4
    feat_dim: int = 64
    register_tokens: int = 4
    image_side: int = 64
    train_mode: str = "full"
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.feat_dim % self.heads:
            raise ConfigError(f"feat_dim {self.feat_dim} not divisible by heads {self.heads}")
        if self.image_side % self.patch_size:
            raise ConfigError(f"image side {self.image_side} not divisible by patch size {self.patch_size}")
        if self.train_mode not in TRAIN_MODES:
            raise ConfigError(f"train_mode must be one of {TRAIN_MODES}, got {self.train_mode!r}")

    @property
    def grid(self):
        return self.image_side // self.patch_size


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (d // self.heads) ** -0.5
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ViTBackbone(nn.Module):
    token_params = ("cls_token", "reg_tokens", "pos_embed")

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        d, g = cfg.feat_dim, cfg.grid
        self.patch_embed = nn.Conv2d(3, d, cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.randn(1, 1, d) * 0.02)
        self.reg_tokens = nn.Parameter(torch.randn(1, cfg.register_tokens, d) * 0.02)
        self.pos_embed = nn.Parameter(torch.randn(1, g * g, d) * 0.02)
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)

    def forward(self, x):
        p = self.cfg.patch_size
        if x.shape[-3] != 3 or x.shape[-2] % p or x.shape[-1] % p:
            raise ConfigError(f"image shape {tuple(x.shape[-3:])} incompatible with patch size {p}")
        unbatched = x.dim() == 3
        if unbatched:
            x = x.unsqueeze(0)
        tokens = self.patch_embed(x)
        b, d, h, w = tokens.shape
        if h * w != self.pos_embed.shape[1]:
            raise ConfigError(f"patch grid {h}x{w} does not match position embeddings for {self.cfg.grid}x{self.cfg.grid}")
        tokens = tokens.flatten(2).transpose(1, 2) + self.pos_embed
        n_extra = 1 + self.reg_tokens.shape[1]
        seq = torch.cat([self.cls_token.expand(b, -1, -1), self.reg_tokens.expand(b, -1, -1), tokens], dim=1)
        for block in self.blocks:
            seq = block(seq)
        seq = self.norm(seq)[:, n_extra:]
        z = seq.transpose(1, 2).reshape(b, d, h, w)
        return z[0] if unbatched else z


class PassThroughBackbone(nn.Module):
    """Identity backbone for inputs that already are feature maps."""

    def forward(self, x):
        return x


def embed(x, backbone):
    return backbone(x)


def trainable_parameter_set(backbone, mode=None):
    """Named parameters that receive updates under ``mode``."""
    if isinstance(backbone, PassThroughBackbone):
        return {}
    mode = mode or backbone.cfg.train_mode
    if mode not in TRAIN_MODES:
        raise ConfigError(f"unknown train mode {mode!r}")
    named = dict(backbone.named_parameters())
    if mode == "frozen":
        return {}
    if mode == "full":
        return named
    return {n: named[n] for n in ViTBackbone.token_params}


def apply_train_mode(backbone, mode=None):
    """Set ``requires_grad`` so only the trainable subset collects gradients."""
    keep = trainable_parameter_set(backbone, mode)
    for name, param in backbone.named_parameters():
        param.requires_grad_(name in keep)
    return keep


def export_features(path, features):
    """Write ``{sample_id: (D, H, W) array}`` as ``feat/<sample_id>`` container entries."""
    container.save(path, {f"feat/{k}": np.asarray(v) for k, v in features.items()})


def load_precomputed_features(path, expected_dim=None):
    """Yield ``(sample_id, tensor)`` pairs from a feature container."""
    arrays = container.load(path)
    for name, arr in arrays.items():
        if not name.startswith("feat/"):
            continue
        if arr.ndim != 3:
            raise FormatError(f"feature entry '{name}' has rank {arr.ndim}, expected 3", path)
        if expected_dim is not None and arr.shape[0] != expected_dim:
            raise ConfigError(
                f"feature dimension {arr.shape[0]} of '{name}' does not match model D={expected_dim}"
            )
        yield name[len("feat/"):], torch.from_numpy(arr)
