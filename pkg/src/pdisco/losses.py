"""Training objectives for part discovery.

Every loss takes batched tensors (leading batch dimension) unless noted and
averages over the batch. Attention maps are ``(B, K+1, H, W)`` with the
background in the last channel.
"""
import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError, NumericError
from .transforms import warp

LOG_EPS = 1e-8
COS_EPS = 1e-12  # lower bound on norm products in cosine denominators
TERMS = ("cls", "orth", "equiv", "presence_fg", "presence_bg", "entropy", "tv")


@dataclass
class LossWeights:
    w_cls: float = 1.0
    w_orth: float = 1.0
    w_equiv: float = 1.0
    w_presence_fg: float = 1.0
    w_presence_bg: float = 2.0
    w_entropy: float = 1.0
    w_tv: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise ConfigError(f"loss weight {f.name} must be >= 0")

    def weight(self, term):
        return getattr(self, "w_" + term)

    def active_terms(self):
        return [t for t in TERMS if self.weight(t) > 0]


def classification_loss(scores_mean, label):
    """Cross-entropy of the mean class scores; ``label`` is a 0-based class index."""
    unbatched = scores_mean.dim() == 1
    if unbatched:
        scores_mean = scores_mean.unsqueeze(0)
    label = torch.as_tensor(label, dtype=torch.long).reshape(-1)
    n_classes = scores_mean.shape[-1]
    if label.numel() != scores_mean.shape[0]:
        raise InputError(f"{label.numel()} labels for {scores_mean.shape[0]} score rows")
    if ((label < 0) | (label >= n_classes)).any():
        raise InputError(f"label out of range [0, {n_classes})")
    return F.cross_entropy(scores_mean, label)


def orthogonality_loss(v_m):
    """Sum of cosine similarities over all ordered pairs of distinct part embeddings."""
    if v_m.dim() == 2:
        v_m = v_m.unsqueeze(0)
    norms = v_m.norm(dim=-1)
    gram = v_m @ v_m.transpose(-1, -2)
    cos = gram / (norms.unsqueeze(-1) * norms.unsqueeze(-2)).clamp_min(COS_EPS)
    off_diag = cos.sum(dim=(-2, -1)) - cos.diagonal(dim1=-2, dim2=-1).sum(dim=-1)
    return off_diag.mean()


def equivariance_loss(a_orig, a_transformed, t):
    """One minus the mean cosine between original maps and inverse-warped transformed maps.

    Only the K foreground channels take part.
    """
    unbatched = a_orig.dim() == 3
    if a_orig.shape != a_transformed.shape:
        raise ConfigError(f"shape mismatch {tuple(a_orig.shape)} vs {tuple(a_transformed.shape)}")
    if unbatched:
        a_orig, a_transformed = a_orig.unsqueeze(0), a_transformed.unsqueeze(0)
        t = [t]
    fg_orig = a_orig[:, :-1]
    back = warp(a_transformed[:, :-1], t, inverse=True)
    a = fg_orig.flatten(-2)
    b = back.flatten(-2)
    cos = (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1)).clamp_min(COS_EPS)
    return 1 - cos.mean()


def pool_presence(a, kernel=3):
    """Same-size average pooling; the divisor counts only taps inside the grid."""
    h, w = a.shape[-2:]
    if h < kernel or w < kernel:
        return a.mean(dim=(-2, -1), keepdim=True).expand(a.shape)
    lead = a.shape[:-2]
    flat = a.reshape((-1, 1, h, w))
    pooled = F.avg_pool2d(flat, kernel, stride=1, padding=kernel // 2, count_include_pad=False)
    return pooled.reshape(lead + (h, w))


def presence_loss_fg(pooled):
    """``pooled`` is (B, K, H, W): each part should reach 1 somewhere in the batch."""
    peak = pooled.transpose(0, 1).flatten(1).max(dim=1).values
    return 1 - peak.mean()


def center_mask(h, w, dtype=torch.float64):
    """Weight growing quadratically from 0 at the centre to 1 at the corners."""
    if h < 2 or w < 2:
        raise ConfigError(f"center_mask needs H, W >= 2, got ({h}, {w})")
    i = torch.arange(h, dtype=dtype) / (h - 1) - 0.5
    j = torch.arange(w, dtype=dtype) / (w - 1) - 0.5
    return 2 * i.view(h, 1) ** 2 + 2 * j.view(1, w) ** 2


def presence_loss_bg(pooled_bg, mask):
    """``pooled_bg`` is (B, H, W): background must show up towards the borders of every image."""
    if pooled_bg.shape[-2:] != mask.shape:
        raise ConfigError(f"mask {tuple(mask.shape)} does not match maps {tuple(pooled_bg.shape[-2:])}")
    best = (pooled_bg * mask.to(pooled_bg.dtype)).flatten(-2).max(dim=-1).values
    return -torch.log(best + LOG_EPS).mean()


def entropy_loss(a):
    """Per-map pixel entropy summed over locations, averaged over the K+1 channels."""
    if a.dim() == 3:
        a = a.unsqueeze(0)
    plogp = a * torch.log(a.clamp_min(1e-30))
    return -(plogp.sum(dim=(-3, -2, -1)) / a.shape[-3]).mean()


def total_variation_loss(a):
    """Anisotropic L1 total variation with forward differences, normalized by H*W."""
    if a.dim() == 3:
        a = a.unsqueeze(0)
    h, w = a.shape[-2:]
    if h < 2 or w < 2:
        raise ConfigError(f"total variation needs H, W >= 2, got ({h}, {w})")
    dy = (a[..., 1:, :] - a[..., :-1, :]).abs().sum(dim=(-3, -2, -1))
    dx = (a[..., :, 1:] - a[..., :, :-1]).abs().sum(dim=(-3, -2, -1))
    return ((dx + dy) / (h * w)).mean()


def total_loss(parts, weights: LossWeights):
    """Weighted sum of the named terms in ``parts``; zero-weight terms are left out entirely."""
    total = None
    for term in TERMS:
        wt = weights.weight(term)
        if wt == 0:
            continue
        if term not in parts:
            raise ConfigError(f"missing loss term '{term}' with weight {wt}")
        value = parts[term]
        scalar = float(value.detach() if torch.is_tensor(value) else value)
        if not math.isfinite(scalar):
            raise NumericError(f"loss term '{term}' is not finite ({scalar})", term=term)
        total = wt * value if total is None else total + wt * value
    if total is None:
        return torch.zeros(())
    return total
