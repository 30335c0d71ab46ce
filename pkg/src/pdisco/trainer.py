"""Training loop with checkpointing, plus the evaluation helpers it drives."""
import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np
import torch
from torch import nn

from . import container
from .backbone import BackboneConfig, PassThroughBackbone, ViTBackbone, apply_train_mode
from .errors import ConfigError, NumericError, VersionError
from .head import ModelConfig, PartHead, compute_part_logits, gumbel_softmax_attention, kmeans
from .losses import (
    TERMS, LossWeights, center_mask, classification_loss, entropy_loss, equivariance_loss,
    orthogonality_loss, pool_presence, presence_loss_bg, presence_loss_fg, total_loss,
    total_variation_loss,
)
from . import metrics
from .transforms import AffineRanges, sample_affine, warp

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "pdisco-checkpoint"
LR_GROUPS = ("backbone_tokens", "backbone_blocks", "prototypes", "modulation_and_classifier")
PROTOTYPE_INITS = ("kmeans", "random")


def default_lrs():
    return {
        "backbone_tokens": 1e-6,
        "backbone_blocks": 1e-4,
        "prototypes": 1e-3,
        "modulation_and_classifier": 1e-2,
    }


@dataclass
class TrainConfig:
    epochs: int = 28
    batch_size: int = 16
    base_lrs: Dict[str, float] = field(default_factory=default_lrs)
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 4
    grad_clip_norm: Optional[float] = 2.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    affine_ranges: AffineRanges = field(default_factory=AffineRanges)
    deterministic: bool = True
    eval_batch_size: int = 64
    prototype_init: str = "kmeans"
    init_images: int = 256

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if isinstance(self.affine_ranges, dict):
            self.affine_ranges = AffineRanges(**{k: tuple(v) for k, v in self.affine_ranges.items()})
        self.betas = tuple(self.betas)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        missing = set(LR_GROUPS) - set(self.base_lrs)
        if missing:
            raise ConfigError(f"missing learning rates for {sorted(missing)}")
        if any(not lr > 0 for lr in self.base_lrs.values()):
            raise ConfigError("all learning rates must be > 0")
        if self.prototype_init not in PROTOTYPE_INITS:
            raise ConfigError(f"prototype_init must be one of {PROTOTYPE_INITS}, got {self.prototype_init!r}")
        if self.init_images < 1:
            raise ConfigError("init_images must be >= 1")


def lr_at(epoch, cfg: TrainConfig):
    """Step schedule: each group's base rate halves every ``lr_decay_every`` epochs."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    factor = cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)
    return {g: lr * factor for g, lr in cfg.base_lrs.items()}


def scale_lr_for_batch(base_lr, batch_size, reference=16):
    """Square-root scaling of a learning rate tuned for ``reference`` images per batch."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    return base_lr * math.sqrt(batch_size / reference)


class PartDiscoveryModel(nn.Module):
    def __init__(self, model_cfg: ModelConfig, backbone_cfg: Optional[BackboneConfig]):
        super().__init__()
        self.model_cfg = model_cfg
        self.backbone_cfg = backbone_cfg
        if backbone_cfg is None:
            self.backbone = PassThroughBackbone()
        else:
            if backbone_cfg.feat_dim != model_cfg.D:
                raise ConfigError(f"backbone feat_dim {backbone_cfg.feat_dim} != model D {model_cfg.D}")
            if backbone_cfg.grid != model_cfg.H or backbone_cfg.grid != model_cfg.W:
                raise ConfigError(f"backbone grid {backbone_cfg.grid} != model H, W ({model_cfg.H}, {model_cfg.W})")
            self.backbone = ViTBackbone(backbone_cfg)
        self.head = PartHead(model_cfg)

    def forward(self, x, generator=None):
        return self.head(self.backbone(x), generator)

    def attention(self, x, generator=None):
        z = self.backbone(x)
        logits = compute_part_logits(z, self.head.prototypes)
        return gumbel_softmax_attention(logits, self.model_cfg, generator, noise=self.training)


def init_prototypes(model: PartDiscoveryModel, x, generator=None):
    """Place the prototypes on k-means centres of the patch tokens of ``x``.

    The cluster whose tokens sit furthest out (highest mean centre-mask weight)
    becomes the background prototype; the rest are ordered the same way.
    """
    with torch.no_grad():
        z = model.backbone(x)
        b, d, h, w = z.shape
        tokens = z.permute(0, 2, 3, 1).reshape(-1, d)
        n = model.head.prototypes.shape[0]
        centers, assign = kmeans(tokens, n, generator=generator)
        border = center_mask(h, w, dtype=tokens.dtype).reshape(-1).repeat(b)
        counts = torch.bincount(assign, minlength=n).to(tokens.dtype)
        score = torch.zeros(n, dtype=tokens.dtype).index_add_(0, assign, border) / counts.clamp_min(1)
        order = torch.argsort(score, stable=True)
        model.head.prototypes.copy_(centers[order].to(model.head.prototypes.dtype))
    return model


def parameter_groups(model: PartDiscoveryModel, cfg: TrainConfig, lrs=None):
    """Adam parameter groups with square-root batch scaling; frozen tensors are omitted."""
    lrs = lrs or cfg.base_lrs
    trainable = apply_train_mode(model.backbone)
    tokens, blocks = [], []
    for name, p in trainable.items():
        (tokens if name in ViTBackbone.token_params else blocks).append(p)
    head = model.head
    groups = {
        "backbone_tokens": tokens,
        "backbone_blocks": blocks,
        "prototypes": [head.prototypes],
        "modulation_and_classifier": [head.mod_weights, head.mod_biases, head.classifier],
    }
    return [
        {"params": ps, "lr": scale_lr_for_batch(lrs[g], cfg.batch_size), "name": g}
        for g, ps in groups.items() if ps
    ]


def set_epoch_lr(optimizer, epoch, cfg):
    lrs = lr_at(epoch, cfg)
    for group in optimizer.param_groups:
        group["lr"] = scale_lr_for_batch(lrs[group["name"]], cfg.batch_size)


def make_optimizer(model, cfg):
    return torch.optim.Adam(parameter_groups(model, cfg), betas=cfg.betas, eps=cfg.adam_eps)


def compute_loss_terms(model, x, labels, cfg: TrainConfig, generator):
    """Forward on the batch (and its transformed twin when equivariance is on); returns named terms."""
    w = cfg.loss_weights
    out = model(x, generator)
    a = out.attention
    terms = {}
    if w.w_cls > 0:
        terms["cls"] = classification_loss(out.scores.mean, labels)
    if w.w_orth > 0:
        terms["orth"] = orthogonality_loss(out.modulated)
    if w.w_presence_fg > 0 or w.w_presence_bg > 0:
        pooled = pool_presence(a)
        if w.w_presence_fg > 0:
            terms["presence_fg"] = presence_loss_fg(pooled[:, :-1])
        if w.w_presence_bg > 0:
            mask = center_mask(a.shape[-2], a.shape[-1], dtype=a.dtype)
            terms["presence_bg"] = presence_loss_bg(pooled[:, -1], mask)
    if w.w_entropy > 0:
        terms["entropy"] = entropy_loss(a)
    if w.w_tv > 0:
        terms["tv"] = total_variation_loss(a)
    if w.w_equiv > 0:
        transforms = [sample_affine(generator, cfg.affine_ranges) for _ in range(x.shape[0])]
        a_t = model.attention(warp(x, transforms), generator)
        terms["equiv"] = equivariance_loss(a, a_t, transforms)
    return terms, out


def train_step(model, optimizer, x, labels, cfg: TrainConfig, generator, batch_index=0):
    """One optimization step. Returns per-term loss values, the total, and the pre-clip gradient norm."""
    if x.shape[0] == 0:
        raise ConfigError("empty batch")
    model.train()
    optimizer.zero_grad(set_to_none=True)
    terms, _ = compute_loss_terms(model, x, labels, cfg, generator)
    try:
        total = total_loss(terms, cfg.loss_weights)
    except NumericError as e:
        raise NumericError(f"{e} at batch {batch_index}", term=e.term) from None
    params = [p for g in optimizer.param_groups for p in g["params"]]
    grad_norm = 0.0
    if total.requires_grad:
        total.backward()
        if cfg.grad_clip_norm:
            grad_norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm))
        else:
            grad_norm = float(torch.nn.utils.get_total_norm([p.grad for p in params if p.grad is not None]))
        optimizer.step()
    logged = {k: float(v.detach()) for k, v in terms.items()}
    logged["total"] = float(total.detach())
    return logged, grad_norm


# ---------------------------------------------------------------- data


@dataclass
class TrainData:
    """Model inputs for every sample plus labels, splits and (optional) annotations."""

    inputs: torch.Tensor  # (N, 3, M, N) uint8 images or (N, D, H, W) float features
    labels: torch.Tensor
    splits: List[str]
    samples: Optional[list] = None

    def indices(self, split):
        return [i for i, s in enumerate(self.splits) if s == split]

    def batch(self, idx):
        x = self.inputs[idx]
        if x.dtype == torch.uint8:
            x = x.to(torch.float32) / 255.0
        return x, self.labels[idx]

    @classmethod
    def from_samples(cls, samples):
        images = torch.from_numpy(np.stack([s.image.transpose(2, 0, 1) for s in samples]))
        labels = torch.tensor([s.class_id for s in samples], dtype=torch.long)
        return cls(images, labels, [s.split for s in samples], list(samples))

    @classmethod
    def from_features(cls, features, samples):
        """Pair precomputed feature maps (``{sample_id: tensor}``) with dataset labels and splits."""
        missing = [s.sample_id for s in samples if s.sample_id not in features]
        if missing:
            raise ConfigError(f"no precomputed features for samples {missing[:5]}")
        inputs = torch.stack([features[s.sample_id].to(torch.float32) for s in samples])
        labels = torch.tensor([s.class_id for s in samples], dtype=torch.long)
        return cls(inputs, labels, [s.split for s in samples], list(samples))


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    model_config: ModelConfig
    backbone_config: Optional[BackboneConfig]
    train_config: TrainConfig
    epoch: int
    rng_state: np.ndarray
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _config_to_json(cfg):
    return None if cfg is None else asdict(cfg)


def save_checkpoint(path, ckpt: Checkpoint):
    meta = {
        "kind": CHECKPOINT_KIND,
        "model": _config_to_json(ckpt.model_config),
        "backbone": _config_to_json(ckpt.backbone_config),
        "train": _config_to_json(ckpt.train_config),
        "epoch": ckpt.epoch,
        "extra": ckpt.extra,
    }
    arrays = {"meta/config": container.pack_json(meta), "rng/torch": np.asarray(ckpt.rng_state, dtype=np.int64)}
    arrays.update({f"param/{k}": v for k, v in ckpt.params.items()})
    arrays.update({f"optim/{k}": v for k, v in ckpt.optimizer.items()})
    container.save(path, arrays)


def load_checkpoint(path) -> Checkpoint:
    arrays = container.load(path)
    if "meta/config" not in arrays:
        raise VersionError("container holds no checkpoint metadata", path)
    meta = container.unpack_json(arrays["meta/config"])
    if meta.get("kind") != CHECKPOINT_KIND:
        raise VersionError(f"not a checkpoint (kind={meta.get('kind')!r})", path)
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    optim = {k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")}
    return Checkpoint(
        params=params,
        model_config=ModelConfig(**meta["model"]),
        backbone_config=None if meta["backbone"] is None else BackboneConfig(**meta["backbone"]),
        train_config=TrainConfig(**meta["train"]),
        epoch=meta["epoch"],
        rng_state=arrays["rng/torch"],
        optimizer=optim,
        extra=meta["extra"],
    )


def _optimizer_arrays(optimizer):
    out = {}
    for idx, st in optimizer.state_dict()["state"].items():
        for key, val in st.items():
            out[f"{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    return out


def _restore_optimizer(optimizer, arrays):
    sd = optimizer.state_dict()
    state = {}
    for name, arr in arrays.items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    sd["state"] = state
    optimizer.load_state_dict(sd)


def make_checkpoint(model, optimizer, train_cfg, epoch, generator, extra=None):
    return Checkpoint(
        params={k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()},
        model_config=model.model_cfg,
        backbone_config=model.backbone_cfg,
        train_config=train_cfg,
        epoch=epoch,
        rng_state=generator.get_state().numpy().astype(np.int64),
        optimizer=_optimizer_arrays(optimizer) if optimizer is not None else {},
        extra=extra or {},
    )


def model_from_checkpoint(ckpt: Checkpoint):
    model = PartDiscoveryModel(ckpt.model_config, ckpt.backbone_config)
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.params.items()})
    model.eval()
    return model


# ---------------------------------------------------------------- evaluation


@torch.no_grad()
def predict(model, data: TrainData, indices, batch_size=64):
    """Deterministic forward: mean class scores and attention maps as numpy arrays."""
    model.eval()
    scores, maps = [], []
    for start in range(0, len(indices), batch_size):
        x, _ = data.batch(indices[start:start + batch_size])
        out = model(x)
        scores.append(out.scores.mean.numpy())
        maps.append(out.attention.numpy())
    if not scores:
        return np.zeros((0, model.model_cfg.C)), np.zeros((0, model.model_cfg.K + 1, model.model_cfg.H, model.model_cfg.W))
    return np.concatenate(scores), np.concatenate(maps)


ALL_METRICS = ("top1", "nmi", "ari", "kp", "fg_miou", "attention_entropy")


def evaluate(model, data: TrainData, split="test", wanted=ALL_METRICS, inject_gt=False,
             batch_size=64):
    """Metric suite on ``split``. Keypoint regression is fitted on the train split.

    With ``inject_gt`` the ground-truth part masks stand in for the predicted
    assignment, which must give perfect clustering and foreground scores.
    """
    idx = data.indices(split)
    if not idx:
        raise ConfigError(f"split '{split}' is empty")
    scores, maps = predict(model, data, idx, batch_size)
    labels = data.labels[idx].numpy()
    samples = [data.samples[i] for i in idx] if data.samples is not None else None
    report = {}
    needs_masks = {"nmi", "ari", "fg_miou"} & set(wanted)
    if needs_masks and (samples is None or any(s.part_mask is None for s in samples)):
        raise ConfigError(f"metrics {sorted(needs_masks)} need part masks")
    if "kp" in wanted and (samples is None or any(s.keypoints is None for s in samples)):
        raise ConfigError("metric kp needs keypoint annotations")

    if "top1" in wanted:
        report["top1"] = metrics.top1_accuracy(scores, labels)
    if inject_gt:
        assignments = [s.part_mask for s in samples]
    else:
        assignments = [metrics.assignment_from_attention(a) for a in maps]
    if "nmi" in wanted or "ari" in wanted:
        acc = metrics.ClusteringAccumulator()
        for asg, s in zip(assignments, samples):
            acc.add(asg, s.part_mask)
        nmi, ari = acc.result()
        if "nmi" in wanted:
            report["nmi"] = nmi
        if "ari" in wanted:
            report["ari"] = ari
    if "fg_miou" in wanted:
        report["fg_miou"] = float(np.mean([
            metrics.foreground_iou(asg, s.part_mask > 0) for asg, s in zip(assignments, samples)
        ]))
    if "kp" in wanted:
        train_idx = data.indices("train")
        _, train_maps = predict(model, data, train_idx, batch_size)
        train_set = [(metrics.centroids(a), data.samples[i].keypoints) for a, i in zip(train_maps, train_idx)]
        test_set = [(metrics.centroids(a), s.keypoints) for a, s in zip(maps, samples)]
        report["kp"] = metrics.keypoint_regression_error(train_set, test_set)
    if "attention_entropy" in wanted:
        report["attention_entropy"] = metrics.attention_entropy_report(maps)
    return report


@torch.no_grad()
def attention_statistics(model, data: TrainData, split="test", batch_size=64):
    """Mean TV, mean per-location entropy and mean background activation on ``split``."""
    _, maps = predict(model, data, data.indices(split), batch_size)
    t = torch.from_numpy(maps).to(torch.float64)
    tv = float(np.mean([float(total_variation_loss(m)) for m in t]))
    return {
        "tv": tv,
        "entropy": metrics.attention_entropy_report(maps),
        "background": float(maps[:, -1].mean()),
    }


# ---------------------------------------------------------------- fit


@dataclass
class FitResult:
    checkpoint_path: str
    best_path: str
    history: List[tuple]  # (epoch, term, value)
    model: PartDiscoveryModel

    def series(self, term):
        return [v for _, t, v in self.history if t == term]


def write_history(path, history):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "term", "value"])
        for epoch, term, value in history:
            w.writerow([epoch, term, repr(float(value))])
    os.replace(tmp, path)


def _seed_everything(seed):
    torch.manual_seed(seed)
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def fit(data: TrainData, model_cfg: ModelConfig, backbone_cfg: Optional[BackboneConfig],
        train_cfg: TrainConfig, out_dir, resume=None, keep_epoch_checkpoints=True,
        progress=None):
    """Train for ``train_cfg.epochs`` epochs, evaluating val top-1 after each one.

    Writes ``last.ckpt`` (and ``epoch_XXX.ckpt`` when requested) every epoch,
    ``best.ckpt`` whenever val top-1 improves, and ``history.csv``. ``resume``
    is a checkpoint path to continue from.
    """
    if train_cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    os.makedirs(out_dir, exist_ok=True)
    train_idx = data.indices("train")
    val_idx = data.indices("val")
    if not train_idx or not val_idx:
        raise ConfigError("dataset needs non-empty train and val splits")

    generator = _seed_everything(train_cfg.seed)
    model = PartDiscoveryModel(model_cfg, backbone_cfg)
    if resume is None and train_cfg.prototype_init == "kmeans":
        x_init, _ = data.batch(train_idx[:train_cfg.init_images])
        init_prototypes(model, x_init, generator)
    optimizer = make_optimizer(model, train_cfg)
    start_epoch, history, best = 0, [], -1.0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.params.items()})
        _restore_optimizer(optimizer, ckpt.optimizer)
        generator.set_state(torch.from_numpy(ckpt.rng_state.astype(np.uint8)))
        start_epoch = ckpt.epoch + 1
        history = [tuple(h) for h in ckpt.extra.get("history", [])]
        best = ckpt.extra.get("best_val_top1", -1.0)

    last_path = os.path.join(out_dir, "last.ckpt")
    best_path = os.path.join(out_dir, "best.ckpt")
    bs = train_cfg.batch_size
    for epoch in range(start_epoch, train_cfg.epochs):
        set_epoch_lr(optimizer, epoch, train_cfg)
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(train_idx))
        sums, n_batches = {}, 0
        for b, start in enumerate(range(0, len(order), bs)):
            idx = [train_idx[i] for i in order[start:start + bs]]
            x, y = data.batch(idx)
            logged, _ = train_step(model, optimizer, x, y, train_cfg, generator, batch_index=b)
            for k, v in logged.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        for term in TERMS + ("total",):
            if term in sums:
                history.append((epoch, term, sums[term] / n_batches))
        val = evaluate(model, data, "val", wanted=("top1",), batch_size=train_cfg.eval_batch_size)["top1"]
        history.append((epoch, "val_top1", val))
        log.info("epoch %d total %.4f val_top1 %.4f", epoch, sums.get("total", 0.0) / n_batches, val)
        if progress is not None:
            progress(epoch, sums, n_batches, val)

        improved = val > best
        best = max(best, val)
        extra = {"history": [list(h) for h in history], "best_val_top1": best}
        ckpt = make_checkpoint(model, optimizer, train_cfg, epoch, generator, extra)
        save_checkpoint(last_path, ckpt)
        if keep_epoch_checkpoints:
            save_checkpoint(os.path.join(out_dir, f"epoch_{epoch:03d}.ckpt"), ckpt)
        if improved:
            save_checkpoint(best_path, ckpt)
        write_history(os.path.join(out_dir, "history.csv"), history)

    model.eval()
    return FitResult(last_path, best_path, history, model)


def ablation_config(train_cfg: TrainConfig, model_cfg: ModelConfig, *, no_tv=False, no_entropy=False,
                    no_equiv=False, no_orth=False, no_presence_fg=False, no_presence_bg=False,
                    no_gumbel=False, no_part_dropout=False, no_modulation=False):
    """Configs with the requested components switched off; everything else untouched."""
    w = train_cfg.loss_weights
    weights = replace(
        w,
        w_tv=0.0 if no_tv else w.w_tv,
        w_entropy=0.0 if no_entropy else w.w_entropy,
        w_equiv=0.0 if no_equiv else w.w_equiv,
        w_orth=0.0 if no_orth else w.w_orth,
        w_presence_fg=0.0 if no_presence_fg else w.w_presence_fg,
        w_presence_bg=0.0 if no_presence_bg else w.w_presence_bg,
    )
    mcfg = replace(
        model_cfg,
        gumbel_enabled=model_cfg.gumbel_enabled and not no_gumbel,
        part_dropout_rate=0.0 if no_part_dropout else model_cfg.part_dropout_rate,
        modulation_enabled=model_cfg.modulation_enabled and not no_modulation,
    )
    return replace(train_cfg, loss_weights=weights), mcfg
