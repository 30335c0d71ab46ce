"""Synthetic part-structured images and the on-disk dataset layout.

Layout of a dataset directory::

    images/<id>.png     8-bit RGB
    masks/<id>.png      8-bit grayscale, pixel value = part id (0 = background)
    keypoints.csv       id,part_id,x,y,visible   (x, y normalized to [0, 1])
    labels.csv          id,class_id
    split.csv           id,split                 (train | val | test)

Compact objects are blocks of whole patch cells, one rectangular block per
part, posed by whole-cell shifts and dihedral turns, so a patch-grid
assignment can represent their masks exactly. Irregular and multi-instance
objects are a body (part 1) with satellite parts around it, drawn per pixel
with continuous pose.
The part index fixes a base colour shared by every class; the class adds a colour
tint and a stripe texture, so parts are identifiable across classes while the
class stays recoverable from colour. Isolated background cells carry a faded
copy of some part's look, so background and parts are not separable patch by
patch.
"""
import csv
import hashlib
import io
import math
import os
from dataclasses import dataclass
from typing import Iterator, List, Optional

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError, ValidationError

PART_COLORS = np.array([
    [0.85, 0.22, 0.22],
    [0.22, 0.78, 0.30],
    [0.25, 0.35, 0.90],
    [0.92, 0.84, 0.22],
    [0.82, 0.30, 0.85],
    [0.22, 0.82, 0.85],
    [0.95, 0.55, 0.15],
    [0.55, 0.35, 0.20],
])
SPLITS = ("train", "val", "test")


@dataclass
class SynthSpec:
    classes: int = 8
    parts_per_object: int = 4
    images_per_class: int = 250
    image_side: int = 64
    seed: int = 42
    multi_instance: bool = False
    irregular_parts: bool = False
    patch_size: int = 8
    distractors: int = 2

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError("need at least 2 classes")
        if not 1 <= self.parts_per_object <= len(PART_COLORS):
            raise ConfigError(f"parts_per_object must be in [1, {len(PART_COLORS)}]")
        if self.images_per_class < 1:
            raise ConfigError("images_per_class must be >= 1")
        if self.image_side % self.patch_size or self.image_side < 32:
            raise ConfigError(f"image_side must be a multiple of {self.patch_size} and >= 32")
        if self.distractors < 0:
            raise ConfigError("distractors must be >= 0")

    @property
    def num_samples(self):
        return self.classes * self.images_per_class


@dataclass
class AnnotatedSample:
    sample_id: str
    image: np.ndarray  # (M, N, 3) uint8
    class_id: int
    part_mask: Optional[np.ndarray] = None  # (M, N) uint8
    keypoints: Optional[list] = None  # [(part_id, x, y, visible)]
    split: str = "train"

    @property
    def fg_mask(self):
        return None if self.part_mask is None else self.part_mask > 0

    @property
    def pixels(self):
        """Float image ``(3, M, N)`` in [0, 1]."""
        return np.ascontiguousarray(self.image.transpose(2, 0, 1), dtype=np.float32) / 255.0


def sample_rng(seed, index):
    return np.random.default_rng([seed, index])


def split_of(seed, index):
    digest = hashlib.blake2b(f"{seed}:{index}".encode(), digest_size=8).digest()
    u = int.from_bytes(digest, "little") / 2 ** 64
    if u < 0.7:
        return "train"
    if u < 0.8:
        return "val"
    return "test"


def class_palette(spec):
    """Per-class colour tint, stripe orientation and stripe frequency."""
    rng = np.random.default_rng([spec.seed, 7919])
    tints = []
    for c in range(spec.classes):
        if spec.classes <= 8:
            bits = np.array([(c >> b) & 1 for b in range(3)], dtype=np.float64) * 2 - 1
            tint = 0.11 * bits
        else:
            tint = rng.uniform(-0.13, 0.13, size=3)
        tints.append(tint)
    angles = np.arange(spec.classes) * math.pi / spec.classes
    freqs = 3.0 + (np.arange(spec.classes) % 3)
    return np.array(tints), angles, freqs


def _satellite_layout(n_parts):
    """Local (x, y) offsets and radii of the parts of one object, body first."""
    layout = [((0.0, 0.0), (12.0, 9.0))]
    n_sat = n_parts - 1
    radius = 8.0 if n_sat <= 3 else max(4.5, 8.0 - 0.8 * (n_sat - 3))
    for k in range(n_sat):
        ang = 2 * math.pi * k / max(n_sat, 1)
        layout.append(((15.5 * math.cos(ang), 15.5 * math.sin(ang)), (radius, radius)))
    return layout


def _cell_layout(n_parts):
    """Cell grid of part ids for a lattice object: rectangular blocks in a 2-row arrangement."""
    if n_parts <= 4:
        cols, bh, bw = 2, 3, 3
    elif n_parts <= 6:
        cols, bh, bw = 3, 3, 2
    else:
        cols, bh, bw = 4, 3, 2
    cells = np.zeros((2 * bh, cols * bw), dtype=np.uint8)
    for pid in range(1, n_parts + 1):
        r, c = divmod(pid - 1, cols)
        cells[r * bh:(r + 1) * bh, c * bw:(c + 1) * bw] = pid
    rows = np.flatnonzero(cells.any(axis=1))
    used = np.flatnonzero(cells.any(axis=0))
    return cells[rows[0]:rows[-1] + 1, used[0]:used[-1] + 1]


def _render_lattice(label, n_parts, patch, rng):
    cells = np.rot90(_cell_layout(n_parts), int(rng.integers(4)))
    if rng.integers(2):
        cells = np.fliplr(cells)
    side = label.shape[0]
    cell = patch * max(1, side // (8 * patch))
    if max(cells.shape) * cell > side:
        cell = side // max(cells.shape)
    block = np.kron(cells, np.ones((cell, cell), dtype=np.uint8))
    # offsets in whole cells keep part boundaries on patch edges
    n_r = (side - block.shape[0]) // cell
    n_c = (side - block.shape[1]) // cell
    r0 = int(rng.integers(n_r + 1)) * cell
    c0 = int(rng.integers(n_c + 1)) * cell
    label[r0:r0 + block.shape[0], c0:c0 + block.shape[1]] = block


def _place_distractors(label, count, cell, rng):
    """Pick up to ``count`` background cells whose 4-neighbours are background too."""
    side = label.shape[0]
    n = side // cell
    occupied = label[:n * cell, :n * cell].reshape(n, cell, n, cell).any(axis=(1, 3))
    padded = np.pad(occupied, 1)
    near = padded[1:-1, 1:-1] | padded[:-2, 1:-1] | padded[2:, 1:-1] | padded[1:-1, :-2] | padded[1:-1, 2:]
    free = np.flatnonzero(~near.reshape(-1))
    chosen = []
    for idx in rng.permutation(free):
        if len(chosen) == count:
            break
        r, c = divmod(int(idx), n)
        if all(abs(r - r2) + abs(c - c2) > 1 for r2, c2 in chosen):
            chosen.append((r, c))
    return [(r * cell, c * cell) for r, c in chosen]


def _render_object(label, ys, xs, cx, cy, theta, scale, n_parts, irregular, rng):
    c, s = math.cos(theta), math.sin(theta)
    # object-frame coordinates of every pixel centre
    dx, dy = xs - cx, ys - cy
    u = (c * dx + s * dy) / scale
    v = (-s * dx + c * dy) / scale
    for pid, ((ox, oy), (rx, ry)) in enumerate(_satellite_layout(n_parts), start=1):
        if irregular and pid > 1:
            # curved band hugging the body, centred on the satellite direction
            ang = math.atan2(oy, ox)
            r = np.hypot(u, v)
            phi = np.angle(np.exp(1j * (np.arctan2(v, u) - ang)))
            bend = 2.0 * np.sin(3 * phi + rng.uniform(0, 2 * math.pi))
            half_width = math.pi / max(n_parts - 1, 2) * 0.9
            inside = (np.abs(phi) < half_width) & (np.abs(r - 16.0 - bend) < 3.5)
        else:
            inside = ((u - ox) / rx) ** 2 + ((v - oy) / ry) ** 2 <= 1.0
        label[inside] = pid


def render(spec: SynthSpec, index: int, palette=None) -> AnnotatedSample:
    palette = palette or class_palette(spec)
    tints, angles, freqs = palette
    rng = sample_rng(spec.seed, index)
    side = spec.image_side
    class_id = index % spec.classes
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5

    label = np.zeros((side, side), dtype=np.uint8)
    if spec.multi_instance:
        n_obj = int(rng.integers(2, 4))
        centres = [(side * 0.3, side * 0.3), (side * 0.7, side * 0.7), (side * 0.3, side * 0.7), (side * 0.7, side * 0.3)]
        order = rng.permutation(len(centres))[:n_obj]
        for o in order:
            cx, cy = centres[o]
            jitter = rng.uniform(-2.0, 2.0, size=2)
            _render_object(label, ys, xs, cx + jitter[0], cy + jitter[1], rng.uniform(0, 2 * math.pi),
                           rng.uniform(0.5, 0.6) * side / 64, spec.parts_per_object, spec.irregular_parts, rng)
    elif spec.irregular_parts:
        scale = rng.uniform(0.85, 1.1) * side / 64
        margin = 24.0 * scale
        cx = rng.uniform(side / 2 - 6 * side / 64, side / 2 + 6 * side / 64)
        cy = rng.uniform(side / 2 - 6 * side / 64, side / 2 + 6 * side / 64)
        cx = min(max(cx, margin), side - margin)
        cy = min(max(cy, margin), side - margin)
        _render_object(label, ys, xs, cx, cy, rng.uniform(0, 2 * math.pi), scale,
                       spec.parts_per_object, True, rng)
    else:
        _render_lattice(label, spec.parts_per_object, spec.patch_size, rng)

    # own stream, so the distractor count changes nothing else in the image
    clutter_rng = np.random.default_rng([spec.seed, index, 1])
    cell = spec.patch_size * max(1, side // (8 * spec.patch_size))
    clutter = np.zeros((side, side), dtype=np.uint8)
    strength = np.zeros((side, side))
    for r0, c0 in _place_distractors(label, spec.distractors, cell, clutter_rng):
        clutter[r0:r0 + cell, c0:c0 + cell] = clutter_rng.integers(1, spec.parts_per_object + 1)
        strength[r0:r0 + cell, c0:c0 + cell] = clutter_rng.uniform(0.2, 1.0)

    bg_level = rng.uniform(0.38, 0.52)
    img = np.full((side, side, 3), bg_level) + rng.uniform(-0.03, 0.03, size=3)
    phase = rng.uniform(0, 2 * math.pi)
    proj = xs * math.cos(angles[class_id]) + ys * math.sin(angles[class_id])
    stripes = 0.06 * np.sin(2 * math.pi * freqs[class_id] * proj / side + phase)
    fg = label > 0
    part_rgb = PART_COLORS[label[fg] - 1] + tints[class_id]
    img[fg] = part_rgb + stripes[fg, None]
    # distractors fade a part's look into isolated background cells; they stay background in the mask
    dis = clutter > 0
    look = PART_COLORS[clutter[dis] - 1] + tints[class_id] + stripes[dis, None]
    img[dis] += strength[dis, None] * (look - img[dis])
    img += rng.normal(0.0, 0.02, size=img.shape)
    image = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)

    keypoints = []
    for pid in range(1, spec.parts_per_object + 1):
        rr, cc = np.nonzero(label == pid)
        if rr.size == 0:
            keypoints.append((pid, 0.0, 0.0, 0))
            continue
        # mask pixel closest to the part centroid, so the keypoint always lies on the part
        d = (rr - rr.mean()) ** 2 + (cc - cc.mean()) ** 2
        i = int(np.argmin(d))
        keypoints.append((pid, (cc[i] + 0.5) / side, (rr[i] + 0.5) / side, 1))

    return AnnotatedSample(
        sample_id=f"{index:06d}", image=image, class_id=class_id, part_mask=label,
        keypoints=keypoints, split=split_of(spec.seed, index),
    )


def _png_bytes(arr):
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_dataset(out_dir, samples):
    """Write samples in the on-disk layout; masks/keypoints only when present."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    has_masks = any(s.part_mask is not None for s in samples)
    if has_masks:
        os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    for s in samples:
        path = os.path.join(out_dir, "images", f"{s.sample_id}.png")
        try:
            with open(path, "wb") as f:
                f.write(_png_bytes(s.image))
            if s.part_mask is not None:
                with open(os.path.join(out_dir, "masks", f"{s.sample_id}.png"), "wb") as f:
                    f.write(_png_bytes(s.part_mask))
        except OSError as e:
            raise OSError(f"cannot write sample {s.sample_id} under {out_dir}: {e}") from e
    _write_csv(os.path.join(out_dir, "labels.csv"), ["id", "class_id"],
               [(s.sample_id, s.class_id) for s in samples])
    _write_csv(os.path.join(out_dir, "split.csv"), ["id", "split"],
               [(s.sample_id, s.split) for s in samples])
    if any(s.keypoints is not None for s in samples):
        rows = [(s.sample_id, pid, repr(float(x)), repr(float(y)), int(vis))
                for s in samples for pid, x, y, vis in (s.keypoints or [])]
        _write_csv(os.path.join(out_dir, "keypoints.csv"), ["id", "part_id", "x", "y", "visible"], rows)


def generate(spec: SynthSpec, out_dir=None) -> List[AnnotatedSample]:
    """Render every sample of ``spec``; write the dataset to ``out_dir`` when given."""
    palette = class_palette(spec)
    samples = [render(spec, i, palette) for i in range(spec.num_samples)]
    if out_dir is not None:
        write_dataset(out_dir, samples)
    return samples


def _read_csv(path, header):
    try:
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
    except FileNotFoundError:
        raise FormatError("missing file", path) from None
    if not rows or rows[0] != header:
        raise FormatError(f"expected header {','.join(header)}", path)
    return rows[1:]


def _read_png(path, mode, sample_id):
    try:
        with Image.open(path) as im:
            if im.mode != mode:
                raise FormatError(f"sample {sample_id}: expected {mode} image, got {im.mode}", path)
            return np.array(im)
    except FileNotFoundError:
        raise FormatError(f"sample {sample_id}: missing file", path) from None
    except OSError as e:
        raise FormatError(f"sample {sample_id}: unreadable image ({e})", path) from None


def load(data_dir) -> Iterator[AnnotatedSample]:
    """Stream validated samples from a dataset directory in ``labels.csv`` order."""
    labels_path = os.path.join(data_dir, "labels.csv")
    labels = []
    for row in _read_csv(labels_path, ["id", "class_id"]):
        if len(row) != 2:
            raise FormatError(f"malformed row {row}", labels_path)
        try:
            labels.append((row[0], int(row[1])))
        except ValueError:
            raise ValidationError(f"class_id {row[1]!r} is not an integer", row[0]) from None
    split_path = os.path.join(data_dir, "split.csv")
    splits = {}
    for row in _read_csv(split_path, ["id", "split"]):
        if len(row) != 2 or row[1] not in SPLITS:
            raise FormatError(f"malformed row {row}", split_path)
        splits[row[0]] = row[1]

    kp_path = os.path.join(data_dir, "keypoints.csv")
    keypoints = None
    if os.path.exists(kp_path):
        keypoints = {}
        for row in _read_csv(kp_path, ["id", "part_id", "x", "y", "visible"]):
            try:
                sid, pid, x, y, vis = row[0], int(row[1]), float(row[2]), float(row[3]), int(row[4])
            except (ValueError, IndexError):
                raise FormatError(f"malformed row {row}", kp_path) from None
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0) or not all(map(math.isfinite, (x, y))):
                raise ValidationError(f"keypoint ({x}, {y}) of part {pid} outside image bounds", sid)
            keypoints.setdefault(sid, []).append((pid, x, y, vis))

    mask_dir = os.path.join(data_dir, "masks")
    has_masks = os.path.isdir(mask_dir)
    for sid, class_id in labels:
        if sid not in splits:
            raise ValidationError("no split assignment", sid)
        image = _read_png(os.path.join(data_dir, "images", f"{sid}.png"), "RGB", sid)
        mask = None
        if has_masks:
            mask = _read_png(os.path.join(mask_dir, f"{sid}.png"), "L", sid)
            if mask.shape != image.shape[:2]:
                raise ValidationError(f"mask shape {mask.shape} differs from image {image.shape[:2]}", sid)
        kps = None if keypoints is None else keypoints.get(sid, [])
        if kps and mask is not None:
            h, w = mask.shape
            for pid, x, y, vis in kps:
                if not vis:
                    continue
                r, c = min(int(y * h), h - 1), min(int(x * w), w - 1)
                if mask[r, c] != pid:
                    raise ValidationError(f"keypoint of part {pid} falls on mask value {mask[r, c]}", sid)
        yield AnnotatedSample(sid, image, class_id, mask, kps, splits[sid])
