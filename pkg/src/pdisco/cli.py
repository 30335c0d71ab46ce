"""``pdisco`` command line: synth, train, eval and viz.

Every option can also come from a flat ``key=value`` file passed with
``--config`` (``#`` starts a comment). A flag given on the command line wins
over the file, which wins over the built-in default. Exit codes: 0 success,
1 runtime failure, 2 usage error.
"""
import argparse
import logging
import os
import sys
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
import torch
from PIL import Image

from . import metrics, synth
from .backbone import BackboneConfig, load_precomputed_features
from .errors import ConfigError, PdiscoError
from .head import ModelConfig
from .losses import TERMS, LossWeights
from .trainer import (
    ALL_METRICS, TrainConfig, TrainData, ablation_config, evaluate, fit, load_checkpoint,
    model_from_checkpoint,
)

log = logging.getLogger("pdisco")

# overlay colours for parts 1..16, cycled beyond that
PALETTE = np.array([
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (0, 0, 128),
], dtype=np.uint8)
OVERLAY_ALPHA = 0.5

ABLATIONS = ("no_tv", "no_entropy", "no_equiv", "no_orth", "no_presence_fg", "no_presence_bg",
             "no_gumbel", "no_part_dropout", "no_modulation")


class UsageError(Exception):
    pass


def parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Option:
    name: str
    type: Callable[[str], Any]
    default: Any
    help: str
    switch: bool = False  # bare flag meaning true
    required: bool = False


_DEFAULT_LRS = TrainConfig().base_lrs
_DEFAULT_W = LossWeights()

SCHEMA = {
    "synth": [
        Option("out", str, None, "output dataset directory", required=True),
        Option("classes", int, 8, "number of classes"),
        Option("parts", int, 4, "parts per object"),
        Option("images_per_class", int, 250, "images per class"),
        Option("seed", int, 42, "dataset seed"),
        Option("image_side", int, 64, "image side in pixels"),
        Option("irregular_parts", parse_bool, False, "free-form part boundaries", switch=True),
        Option("multi_instance", parse_bool, False, "two objects per image", switch=True),
        Option("distractors", int, 2, "isolated part-coloured background cells per image"),
    ],
    "train": [
        Option("data", str, None, "dataset directory", required=True),
        Option("out", str, None, "run directory", required=True),
        Option("features", str, None, "precomputed feature container; skips the ViT"),
        Option("k", int, 4, "number of foreground parts"),
        Option("epochs", int, 28, "training epochs"),
        Option("batch_size", int, 16, "images per step"),
        Option("seed", int, 0, "training seed"),
        *[Option(f"lr_{g}", float, lr, f"base learning rate of {g}") for g, lr in _DEFAULT_LRS.items()],
        Option("lr_decay_factor", float, 0.5, "step decay factor"),
        Option("lr_decay_every", int, 4, "epochs between decays"),
        Option("grad_clip_norm", float, 2.0, "global gradient norm bound (0 disables)"),
        *[Option(f"w_{t}", float, _DEFAULT_W.weight(t), f"weight of the {t} loss") for t in TERMS],
        Option("part_dropout", float, 0.3, "part dropout rate"),
        Option("gumbel_temperature", float, 1.0, "Gumbel-softmax temperature"),
        Option("prototype_init", str, "kmeans", "kmeans or random"),
        Option("init_images", int, 256, "train images used for k-means init"),
        Option("deterministic", parse_bool, True, "deterministic kernels"),
        Option("patch_size", int, 8, "ViT patch size"),
        Option("depth", int, 2, "ViT blocks"),
        Option("heads", int, 4, "ViT attention heads"),
        Option("feat_dim", int, 64, "ViT feature dimension"),
        Option("register_tokens", int, 4, "ViT register tokens"),
        Option("backbone_train_mode", str, "full", "full, tokens_only or frozen"),
        Option("keep_epoch_checkpoints", parse_bool, True, "keep epoch_XXX.ckpt files"),
        *[Option(a, parse_bool, False, f"ablation: {a.replace('_', ' ')}", switch=True) for a in ABLATIONS],
    ],
    "eval": [
        Option("checkpoint", str, None, "checkpoint file", required=True),
        Option("data", str, None, "dataset directory", required=True),
        Option("features", str, None, "precomputed feature container"),
        Option("split", str, "test", "split to score"),
        Option("metrics", str, ",".join(ALL_METRICS), "comma-separated metric names"),
        Option("inject_gt", parse_bool, False, "score ground-truth masks as predictions", switch=True),
        Option("report", str, None, "report path (default: next to the checkpoint)"),
        Option("batch_size", int, 64, "evaluation batch size"),
    ],
    "viz": [
        Option("checkpoint", str, None, "checkpoint file", required=True),
        Option("image", str, None, "input image", required=True),
        Option("out", str, None, "overlay PNG path", required=True),
        Option("soft_maps", str, None, "directory for per-part grayscale maps"),
    ],
}


def build_parser():
    parser = argparse.ArgumentParser(prog="pdisco", description="Unsupervised part discovery.")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, options in SCHEMA.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="flat key=value file")
        for opt in options:
            flag = "--" + opt.name.replace("_", "-")
            if opt.switch:
                p.add_argument(flag, dest=opt.name, action="store_const", const=True, default=None, help=opt.help)
            else:
                p.add_argument(flag, dest=opt.name, type=opt.type, default=None,
                               metavar=opt.name.upper(), help=opt.help)
    return parser


def read_config_file(path):
    """Parse ``key=value`` lines; keys use underscores or dashes."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def resolve(cmd, flags, file_values):
    """Merge flag > config file > default for every option of ``cmd``."""
    options = {o.name: o for o in SCHEMA[cmd]}
    unknown = sorted(set(file_values) - set(options))
    if unknown:
        raise UsageError(f"unknown config keys for '{cmd}': {', '.join(unknown)}")
    merged = {}
    for name, opt in options.items():
        if flags.get(name) is not None:
            merged[name] = flags[name]
        elif name in file_values:
            try:
                merged[name] = opt.type(file_values[name])
            except ValueError as e:
                raise UsageError(f"config key {name}: {e}") from None
        else:
            merged[name] = opt.default
        if opt.required and merged[name] is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")
    return merged


# ---------------------------------------------------------------- commands


def cmd_synth(cfg):
    try:
        spec = synth.SynthSpec(classes=cfg["classes"], parts_per_object=cfg["parts"],
                               images_per_class=cfg["images_per_class"], seed=cfg["seed"],
                               image_side=cfg["image_side"], irregular_parts=cfg["irregular_parts"],
                               multi_instance=cfg["multi_instance"], distractors=cfg["distractors"])
    except ConfigError as e:
        raise UsageError(str(e)) from None
    samples = synth.generate(spec, cfg["out"])
    counts = {s: sum(x.split == s for x in samples) for s in synth.SPLITS}
    print(f"wrote {len(samples)} samples to {cfg['out']} "
          + " ".join(f"{k}={v}" for k, v in counts.items()))


def _load_data(data_dir, features_path):
    samples = list(synth.load(data_dir))
    if not samples:
        raise ConfigError(f"dataset {data_dir} is empty")
    if features_path is None:
        return TrainData.from_samples(samples)
    return TrainData.from_features(dict(load_precomputed_features(features_path)), samples)


def _train_configs(cfg, data):
    n_classes = int(data.labels.max()) + 1
    weights = LossWeights(**{f"w_{t}": cfg[f"w_{t}"] for t in TERMS})
    train_cfg = TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], seed=cfg["seed"],
        base_lrs={g: cfg[f"lr_{g}"] for g in _DEFAULT_LRS},
        lr_decay_factor=cfg["lr_decay_factor"], lr_decay_every=cfg["lr_decay_every"],
        grad_clip_norm=cfg["grad_clip_norm"] or None, loss_weights=weights,
        prototype_init=cfg["prototype_init"], init_images=cfg["init_images"],
        deterministic=cfg["deterministic"],
    )
    if cfg["features"] is None:
        h, w = data.inputs.shape[-2:]
        if h != w:
            raise ConfigError(f"images must be square, got {h}x{w}")
        backbone_cfg = BackboneConfig(patch_size=cfg["patch_size"], depth=cfg["depth"], heads=cfg["heads"],
                                      feat_dim=cfg["feat_dim"], register_tokens=cfg["register_tokens"],
                                      image_side=int(h), train_mode=cfg["backbone_train_mode"])
        d, grid_h, grid_w = backbone_cfg.feat_dim, backbone_cfg.grid, backbone_cfg.grid
    else:
        backbone_cfg = None
        d, grid_h, grid_w = data.inputs.shape[1:]
    model_cfg = ModelConfig(K=cfg["k"], C=n_classes, D=int(d), H=int(grid_h), W=int(grid_w),
                            gumbel_temperature=cfg["gumbel_temperature"],
                            part_dropout_rate=cfg["part_dropout"])
    train_cfg, model_cfg = ablation_config(train_cfg, model_cfg, **{a: cfg[a] for a in ABLATIONS})
    return train_cfg, model_cfg, backbone_cfg


def cmd_train(cfg):
    data = _load_data(cfg["data"], cfg["features"])
    try:
        train_cfg, model_cfg, backbone_cfg = _train_configs(cfg, data)
    except ConfigError as e:
        raise UsageError(str(e)) from None

    def progress(epoch, sums, n_batches, val):
        print(f"epoch {epoch} total={sums.get('total', 0.0) / n_batches:.6g} val_top1={val:.4f}", flush=True)

    res = fit(data, model_cfg, backbone_cfg, train_cfg, cfg["out"],
              keep_epoch_checkpoints=cfg["keep_epoch_checkpoints"], progress=progress)
    print(f"checkpoints in {cfg['out']} (best: {res.best_path})")


def format_report(report):
    return "".join(f"{k}={float(report[k])!r}\n" for k in ALL_METRICS if k in report)


def cmd_eval(cfg):
    wanted = tuple(m.strip() for m in cfg["metrics"].split(",") if m.strip())
    bad = [m for m in wanted if m not in ALL_METRICS]
    if bad or not wanted:
        raise UsageError(f"unknown metrics {bad}; choose from {', '.join(ALL_METRICS)}")
    ckpt = load_checkpoint(cfg["checkpoint"])
    if ckpt.backbone_config is None and cfg["features"] is None:
        raise ConfigError("checkpoint was trained on precomputed features; pass --features")
    data = _load_data(cfg["data"], cfg["features"] if ckpt.backbone_config is None else None)
    if int(data.labels.max()) >= ckpt.model_config.C:
        raise ConfigError(f"dataset has labels beyond the checkpoint's {ckpt.model_config.C} classes")
    model = model_from_checkpoint(ckpt)
    report = evaluate(model, data, cfg["split"], wanted=wanted, inject_gt=cfg["inject_gt"],
                      batch_size=cfg["batch_size"])
    text = format_report(report)
    path = cfg["report"] or os.path.join(os.path.dirname(os.path.abspath(cfg["checkpoint"])),
                                         f"eval_{cfg['split']}.txt")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)
    sys.stdout.write(text)


def overlay(image, assignment):
    """Blend palette colours into ``image`` where ``assignment`` > 0; background is left as is."""
    out = image.astype(np.float64)
    fg = assignment > 0
    colours = PALETTE[(assignment[fg] - 1) % len(PALETTE)].astype(np.float64)
    out[fg] = (1 - OVERLAY_ALPHA) * out[fg] + OVERLAY_ALPHA * colours
    return np.rint(out).astype(np.uint8)


def cmd_viz(cfg):
    ckpt = load_checkpoint(cfg["checkpoint"])
    if ckpt.backbone_config is None:
        raise ConfigError("viz needs a checkpoint with an image backbone")
    with Image.open(cfg["image"]) as im:
        image = np.asarray(im.convert("RGB"))
    h, w = image.shape[:2]
    side = ckpt.backbone_config.image_side
    model_in = image if (h, w) == (side, side) else np.asarray(
        Image.fromarray(image).resize((side, side), Image.BILINEAR))
    x = torch.from_numpy(model_in.transpose(2, 0, 1).copy()).to(torch.float32).div(255.0)
    model = model_from_checkpoint(ckpt)
    with torch.no_grad():
        attn = model(x[None]).attention[0].numpy()
    assignment = metrics.upsample_nearest(metrics.assignment_from_attention(attn), (h, w))
    Image.fromarray(overlay(image, assignment)).save(cfg["out"], format="PNG")
    if cfg["soft_maps"]:
        os.makedirs(cfg["soft_maps"], exist_ok=True)
        rows = (np.arange(h) * attn.shape[1]) // h
        cols = (np.arange(w) * attn.shape[2]) // w
        for k, channel in enumerate(attn):
            name = "background" if k == len(attn) - 1 else f"part_{k + 1:02d}"
            grey = np.rint(np.clip(channel[rows[:, None], cols[None, :]], 0, 1) * 255).astype(np.uint8)
            Image.fromarray(grey).save(os.path.join(cfg["soft_maps"], f"{name}.png"), format="PNG")
    print(f"wrote {cfg['out']}")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "viz": cmd_viz}


def _set_threads():
    raw = os.environ.get("PDISCO_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"PDISCO_THREADS must be a positive integer, got {raw!r}")
    torch.set_num_threads(n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on malformed flags
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    flags = vars(args)
    try:
        _set_threads()
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve(args.command, flags, file_values)
    except UsageError as e:
        parser.error(str(e))
    except OSError as e:
        parser.error(f"cannot read config: {e}")
    try:
        COMMANDS[args.command](cfg)
    except UsageError as e:
        print(f"pdisco {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (PdiscoError, OSError) as e:
        print(f"pdisco {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
