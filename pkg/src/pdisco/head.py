"""Prototype-based part attention head.

All functions accept an optional leading batch dimension: feature maps are
``(..., D, H, W)``, attention maps ``(..., K+1, H, W)`` and part embeddings
``(..., K+1, D)``. The last attention channel is the background.
"""
from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
from torch import nn

from .errors import ConfigError, NumericError


@dataclass
class ModelConfig:
    K: int = 4
    C: int = 8
    D: int = 64
    H: int = 8
    W: int = 8
    gumbel_enabled: bool = True
    gumbel_temperature: float = 1.0
    part_dropout_rate: float = 0.3
    layernorm_epsilon: float = 1e-5
    modulation_enabled: bool = True

    def __post_init__(self):
        if self.K < 1 or self.C < 2 or self.D < 1 or self.H < 2 or self.W < 2:
            raise ConfigError(
                f"need K>=1, C>=2, D>=1, H>=2, W>=2; got K={self.K} C={self.C} "
                f"D={self.D} H={self.H} W={self.W}"
            )
        if not self.gumbel_temperature > 0:
            raise ConfigError(f"gumbel_temperature must be > 0, got {self.gumbel_temperature}")
        if not 0 <= self.part_dropout_rate < 1:
            raise ConfigError(f"part_dropout_rate must be in [0, 1), got {self.part_dropout_rate}")
        if not self.layernorm_epsilon >= 0:
            raise ConfigError("layernorm_epsilon must be non-negative")


class ClassScores(NamedTuple):
    per_part: torch.Tensor  # (..., K, C)
    mean: torch.Tensor  # (..., C)


class HeadOutput(NamedTuple):
    scores: ClassScores
    attention: torch.Tensor
    modulated: torch.Tensor
    logits: torch.Tensor


def compute_part_logits(z, prototypes):
    """Negative squared Euclidean distance between every patch token and every prototype."""
    if z.dim() < 3:
        raise ConfigError(f"feature map must be (..., D, H, W), got shape {tuple(z.shape)}")
    if z.shape[-3] != prototypes.shape[-1]:
        raise ConfigError(
            f"feature dimension {z.shape[-3]} does not match prototype dimension {prototypes.shape[-1]}"
        )
    # explicit differences rather than the |z|^2 - 2zp + |p|^2 expansion so that
    # a token equal to a prototype yields exactly zero
    diff = z.unsqueeze(-4) - prototypes[:, :, None, None]
    return -(diff * diff).sum(dim=-3)


def sample_gumbel(shape, generator=None, dtype=torch.float32, device=None):
    # -log(E) with E ~ Exp(1) is Gumbel(0, 1)
    e = torch.empty(shape, dtype=dtype, device=device).exponential_(generator=generator)
    return -torch.log(e.clamp_min(torch.finfo(dtype).tiny))


def gumbel_softmax_attention(logits, cfg, generator=None, noise=True):
    """Softmax over the part channel of ``(logits + gumbel) / temperature``.

    Noise is added only when both ``cfg.gumbel_enabled`` and ``noise`` are set;
    evaluation passes ``noise=False`` for deterministic maps.
    """
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite part logits", term="logits")
    if not cfg.gumbel_temperature > 0:
        raise ConfigError("gumbel_temperature must be > 0")
    if cfg.gumbel_enabled and noise:
        logits = logits + sample_gumbel(logits.shape, generator, logits.dtype, logits.device)
    return torch.softmax(logits / cfg.gumbel_temperature, dim=-3)


def pool_part_embeddings(attention, z):
    if attention.shape[-2:] != z.shape[-2:]:
        raise ConfigError(
            f"spatial shapes differ: attention {tuple(attention.shape[-2:])} vs features {tuple(z.shape[-2:])}"
        )
    h, w = z.shape[-2:]
    return torch.einsum("...khw,...dhw->...kd", attention, z) / (h * w)


def modulate(v, weights, biases, eps=1e-5):
    """Standardize jointly over all (K+1)*D entries, then apply a per-part affine map."""
    if weights.shape != v.shape[-2:] or biases.shape != v.shape[-2:]:
        raise ConfigError(
            f"modulation params {tuple(weights.shape)}/{tuple(biases.shape)} do not match embeddings {tuple(v.shape[-2:])}"
        )
    mean = v.mean(dim=(-2, -1), keepdim=True)
    var = v.var(dim=(-2, -1), keepdim=True, unbiased=False)
    return (v - mean) / torch.sqrt(var + eps) * weights + biases


def part_dropout(v_m, rate, generator=None, training=True):
    """Inverted dropout of whole foreground part rows; the background row is kept."""
    if not 0 <= rate < 1:
        raise ConfigError(f"part dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return v_m
    n_fg = v_m.shape[-2] - 1
    keep_shape = v_m.shape[:-2] + (n_fg, 1)
    keep = (torch.rand(keep_shape, generator=generator, dtype=v_m.dtype, device=v_m.device) >= rate)
    scale = keep.to(v_m.dtype) / (1.0 - rate)
    ones = torch.ones(v_m.shape[:-2] + (1, 1), dtype=v_m.dtype, device=v_m.device)
    return v_m * torch.cat([scale, ones], dim=-2)


def classify(v_m, classifier):
    if v_m.shape[-1] != classifier.shape[-1]:
        raise ConfigError(
            f"embedding dimension {v_m.shape[-1]} does not match classifier {tuple(classifier.shape)}"
        )
    per_part = v_m[..., :-1, :] @ classifier.T
    return ClassScores(per_part=per_part, mean=per_part.mean(dim=-2))


def head_forward(z, prototypes, mod_weights, mod_biases, classifier, cfg,
                 generator=None, training=False):
    """Logits, attention, pooling, modulation, part dropout and classification in sequence.

    Gumbel noise and part dropout are active only when ``training`` is set.
    The returned modulated embeddings are taken before part dropout.
    """
    logits = compute_part_logits(z, prototypes)
    attention = gumbel_softmax_attention(logits, cfg, generator, noise=training)
    v = pool_part_embeddings(attention, z)
    if cfg.modulation_enabled:
        v_m = modulate(v, mod_weights, mod_biases, cfg.layernorm_epsilon)
    else:
        v_m = v
    dropped = part_dropout(v_m, cfg.part_dropout_rate, generator, training)
    scores = classify(dropped, classifier)
    return HeadOutput(scores, attention, v_m, logits)


def kmeans(points, n, iters=30, generator=None):
    """Lloyd iterations from farthest-point seeds; returns ``(centers (n, D), assignment (N,))``.

    The first seed is a random point, every further seed is the point farthest
    from the seeds so far. Empty clusters keep their previous centre.
    """
    if points.dim() != 2 or points.shape[0] < n:
        raise ConfigError(f"need at least {n} points of shape (N, D), got {tuple(points.shape)}")
    first = int(torch.randint(points.shape[0], (1,), generator=generator))
    centers = points[first:first + 1]
    dist = torch.cdist(points, centers).squeeze(1)
    for _ in range(n - 1):
        nxt = points[int(dist.argmax())].unsqueeze(0)
        centers = torch.cat([centers, nxt])
        dist = torch.minimum(dist, torch.cdist(points, nxt).squeeze(1))
    for _ in range(iters):
        assign = torch.cdist(points, centers).argmin(dim=1)
        counts = torch.bincount(assign, minlength=n).to(points.dtype)
        sums = torch.zeros_like(centers).index_add_(0, assign, points)
        filled = counts > 0
        centers = torch.where(filled[:, None], sums / counts.clamp_min(1)[:, None], centers)
    return centers, torch.cdist(points, centers).argmin(dim=1)


class PartHead(nn.Module):
    """Learnable parameters of the head: prototypes, per-part modulation and the shared classifier."""

    def __init__(self, cfg: ModelConfig, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.cfg = cfg
        n = cfg.K + 1
        bound = cfg.D ** -0.5
        # same scale as a linear layer's default init; larger prototypes start out one-hot
        self.prototypes = nn.Parameter((torch.rand(n, cfg.D, generator=generator) * 2 - 1) * bound)
        self.mod_weights = nn.Parameter(torch.ones(n, cfg.D))
        self.mod_biases = nn.Parameter(torch.zeros(n, cfg.D))
        self.classifier = nn.Parameter(
            (torch.rand(cfg.C, cfg.D, generator=generator) * 2 - 1) * bound
        )

    def forward(self, z, generator=None):
        return head_forward(
            z, self.prototypes, self.mod_weights, self.mod_biases, self.classifier,
            self.cfg, generator=generator, training=self.training,
        )
