"""Random affine transforms and bilinear warping about the grid centre.

Translations are expressed as fractions of the grid size and rotation/scale act
about the centre, so one transform applies consistently to an image and to the
patch-grid attention maps computed from it.
"""
import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from .errors import ConfigError


@dataclass(frozen=True)
class AffineTransform:
    rotation: float = 0.0  # radians
    scale: float = 1.0
    translate_x: float = 0.0  # fraction of width
    translate_y: float = 0.0  # fraction of height

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")

    def is_identity(self):
        return (self.rotation == 0.0 and self.scale == 1.0
                and self.translate_x == 0.0 and self.translate_y == 0.0)


@dataclass(frozen=True)
class AffineRanges:
    rotation: Tuple[float, float] = (-math.pi / 6, math.pi / 6)
    scale: Tuple[float, float] = (0.8, 1.2)
    translate_x: Tuple[float, float] = (-0.1, 0.1)
    translate_y: Tuple[float, float] = (-0.1, 0.1)

    def validate(self):
        for name in ("rotation", "scale", "translate_x", "translate_y"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"invalid {name} range ({lo}, {hi})")
        if not self.scale[0] > 0:
            raise ConfigError(f"scale range must be positive, got {self.scale}")


def sample_affine(generator=None, ranges=AffineRanges()):
    ranges.validate()
    u = torch.rand(4, generator=generator, dtype=torch.float64).tolist()

    def pick(bounds, x):
        lo, hi = bounds
        return lo + (hi - lo) * x

    return AffineTransform(
        rotation=pick(ranges.rotation, u[0]),
        scale=pick(ranges.scale, u[1]),
        translate_x=pick(ranges.translate_x, u[2]),
        translate_y=pick(ranges.translate_y, u[3]),
    )


def _params(ts):
    rot = torch.tensor([t.rotation for t in ts], dtype=torch.float64)
    return (torch.cos(rot), torch.sin(rot),
            torch.tensor([t.scale for t in ts], dtype=torch.float64),
            torch.tensor([t.translate_x for t in ts], dtype=torch.float64),
            torch.tensor([t.translate_y for t in ts], dtype=torch.float64))


def _source_coords(ts, h, w, inverse):
    """Source pixel coordinates (x, y), shape (B, H, W), sampled by each output pixel."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys = (torch.arange(h, dtype=torch.float64) - cy).view(1, h, 1)
    xs = (torch.arange(w, dtype=torch.float64) - cx).view(1, 1, w)
    c, s, scale, tx, ty = (v.view(-1, 1, 1) for v in _params(ts))
    tx, ty = tx * w, ty * h
    if inverse:
        # out(p) = in(T p)
        sx = scale * (c * xs - s * ys) + tx
        sy = scale * (s * xs + c * ys) + ty
    else:
        # out(p) = in(T^-1 p)
        px, py = xs - tx, ys - ty
        sx = (c * px + s * py) / scale
        sy = (-s * px + c * py) / scale
    return sx + cx, sy + cy


def _warp_batch(grid, ts, inverse):
    b, c, h, w = grid.shape
    sx, sy = _source_coords(ts, h, w, inverse)
    # grid_sample with align_corners=True maps -1/+1 onto the first/last pixel centres
    norm = torch.stack([2 * sx / (w - 1) - 1, 2 * sy / (h - 1) - 1], dim=-1)
    return F.grid_sample(grid, norm.to(grid.dtype), mode="bilinear", padding_mode="zeros",
                         align_corners=True)


def warp(grid, t: Union[AffineTransform, Sequence[AffineTransform]], inverse=False):
    """Bilinearly resample ``grid`` (``(c, H, W)`` or ``(B, c, H, W)``) under ``t``.

    The forward warp moves content by ``t``; ``inverse=True`` undoes it. Samples
    falling outside the canvas read as zero. For a batch, ``t`` may be a sequence
    with one transform per element.
    """
    if grid.shape[-2] < 2 or grid.shape[-1] < 2:
        raise ConfigError(f"warp needs H, W >= 2, got {tuple(grid.shape[-2:])}")
    if isinstance(t, AffineTransform):
        if t.is_identity():
            return grid.clone()
        flat = grid.reshape((1, -1) + grid.shape[-2:])
        return _warp_batch(flat, [t], inverse).reshape(grid.shape)
    if grid.dim() != 4 or len(t) != grid.shape[0]:
        raise ConfigError("a sequence of transforms needs a (B, c, H, W) grid with one transform per element")
    return _warp_batch(grid, list(t), inverse)
