import math

import numpy as np
import pytest
import torch

from pdisco import trainer
from pdisco.backbone import BackboneConfig
from pdisco.errors import ChecksumError, ConfigError, NumericError, VersionError
from pdisco.head import ModelConfig
from pdisco.losses import TERMS, LossWeights
from pdisco.synth import SynthSpec, generate
from pdisco.trainer import (
    TrainConfig, TrainData, ablation_config, fit, load_checkpoint, lr_at, make_checkpoint,
    make_optimizer, model_from_checkpoint, save_checkpoint, scale_lr_for_batch, train_step,
)

TINY_BACKBONE = BackboneConfig(patch_size=8, feat_dim=16, heads=2, image_side=32, depth=1, register_tokens=2)
TINY_MODEL = ModelConfig(K=2, C=2, D=16, H=4, W=4)


@pytest.fixture(scope="module")
def tiny_data():
    spec = SynthSpec(classes=2, images_per_class=20, image_side=32, parts_per_object=2, seed=1)
    return TrainData.from_samples(generate(spec))


def fresh_model(seed=0, model_cfg=TINY_MODEL):
    torch.manual_seed(seed)
    return trainer.PartDiscoveryModel(model_cfg, TINY_BACKBONE)


def snapshot(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def run_steps(data, cfg, n=3, seed=0):
    model = fresh_model(seed)
    opt = make_optimizer(model, cfg)
    gen = torch.Generator().manual_seed(seed)
    idx = data.indices("train")
    out = []
    for i in range(n):
        x, y = data.batch(idx[4 * i:4 * i + 4])
        out.append(train_step(model, opt, x, y, cfg, gen, batch_index=i))
    return model, out


class TestSchedule:
    def test_epoch_zero_is_base(self):
        cfg = TrainConfig()
        assert lr_at(0, cfg) == cfg.base_lrs

    def test_epoch_four_halves(self):
        cfg = TrainConfig()
        assert lr_at(4, cfg) == {g: lr / 2 for g, lr in cfg.base_lrs.items()}
        assert lr_at(3, cfg) == cfg.base_lrs

    def test_final_epoch(self):
        cfg = TrainConfig()
        for g, lr in lr_at(27, cfg).items():
            assert lr == pytest.approx(cfg.base_lrs[g] / 64, rel=1e-15)

    def test_negative_epoch(self):
        with pytest.raises(ConfigError):
            lr_at(-1, TrainConfig())

    @pytest.mark.parametrize("batch,factor", [(16, 1.0), (64, 2.0), (4, 0.5), (1, 0.25)])
    def test_batch_scaling(self, batch, factor):
        assert scale_lr_for_batch(1e-3, batch) == pytest.approx(1e-3 * factor, rel=1e-15)

    def test_bad_batch(self):
        with pytest.raises(ConfigError):
            scale_lr_for_batch(1e-3, 0)

    def test_group_lrs_follow_schedule(self):
        cfg = TrainConfig(batch_size=64)
        opt = make_optimizer(fresh_model(), cfg)
        trainer.set_epoch_lr(opt, 9, cfg)
        for g in opt.param_groups:
            assert g["lr"] == pytest.approx(cfg.base_lrs[g["name"]] * 2 / 4)


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(batch_size=0), dict(base_lrs={"prototypes": 1.0}),
                                dict(base_lrs={**trainer.default_lrs(), "prototypes": 0.0}),
                                dict(prototype_init="pca"), dict(init_images=0)])
def test_bad_train_config(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


class TestTrainStep:
    def test_zero_weights_leave_parameters(self, tiny_data):
        zero = LossWeights(**{f"w_{t}": 0.0 for t in TERMS})
        cfg = TrainConfig(loss_weights=zero)
        model = fresh_model()
        before = snapshot(model)
        x, y = tiny_data.batch(tiny_data.indices("train")[:4])
        logged, norm = train_step(model, make_optimizer(model, cfg), x, y, cfg, torch.Generator())
        assert norm == 0.0 and logged == {"total": 0.0}
        for k, v in model.state_dict().items():
            assert torch.equal(v, before[k])

    def test_clipping_identity_below_bound(self, tiny_data):
        small = LossWeights(**{f"w_{t}": 1e-3 for t in TERMS})
        a, steps_a = run_steps(tiny_data, TrainConfig(loss_weights=small))
        b, _ = run_steps(tiny_data, TrainConfig(loss_weights=small, grad_clip_norm=None))
        assert all(norm < 2.0 for _, norm in steps_a)
        for k, v in a.state_dict().items():
            assert torch.equal(v, b.state_dict()[k])

    def test_clipped_norm_is_bound(self, tiny_data):
        big = LossWeights(w_cls=500.0)
        cfg = TrainConfig(loss_weights=big)
        model = fresh_model()
        opt = make_optimizer(model, cfg)
        x, y = tiny_data.batch(tiny_data.indices("train")[:4])
        _, norm = train_step(model, opt, x, y, cfg, torch.Generator().manual_seed(0))
        assert norm > 2.0
        used = math.sqrt(sum(float(p.grad.pow(2).sum()) for g in opt.param_groups for p in g["params"]))
        assert abs(used - 2.0) <= 1e-6

    def test_determinism_three_steps(self, tiny_data):
        a, la = run_steps(tiny_data, TrainConfig())
        b, lb = run_steps(tiny_data, TrainConfig())
        assert la == lb
        for k, v in a.state_dict().items():
            assert torch.equal(v, b.state_dict()[k])

    def test_logs_every_active_term(self, tiny_data):
        _, steps = run_steps(tiny_data, TrainConfig(), n=1)
        assert set(steps[0][0]) == set(TERMS) | {"total"}

    def test_non_finite_names_term_and_batch(self, tiny_data):
        cfg = TrainConfig()
        model = fresh_model()
        with torch.no_grad():
            model.head.classifier.fill_(float("nan"))
        x, y = tiny_data.batch(tiny_data.indices("train")[:4])
        with pytest.raises(NumericError, match="batch 7") as err:
            train_step(model, make_optimizer(model, cfg), x, y, cfg, torch.Generator(), batch_index=7)
        assert err.value.term == "cls"

    def test_empty_batch(self, tiny_data):
        cfg = TrainConfig()
        model = fresh_model()
        x, y = tiny_data.batch([])
        with pytest.raises(ConfigError):
            train_step(model, make_optimizer(model, cfg), x, y, cfg, torch.Generator())


class TestAblation:
    FLAGS = ["no_tv", "no_entropy", "no_equiv", "no_orth", "no_presence_fg", "no_presence_bg",
             "no_gumbel", "no_part_dropout", "no_modulation"]

    @staticmethod
    def flat(tc, mc):
        out = {f"w.{k}": v for k, v in vars(tc.loss_weights).items()}
        out.update({f"m.{k}": v for k, v in vars(mc).items()})
        return out

    @pytest.mark.parametrize("flag", FLAGS)
    def test_one_lever_one_change(self, flag):
        base = self.flat(TrainConfig(), ModelConfig())
        changed = self.flat(*ablation_config(TrainConfig(), ModelConfig(), **{flag: True}))
        diff = [k for k in base if base[k] != changed[k]]
        assert len(diff) == 1

    def test_removed_term_absent_from_step(self, tiny_data):
        tc, mc = ablation_config(TrainConfig(), TINY_MODEL, no_tv=True, no_equiv=True)
        model = fresh_model(model_cfg=mc)
        x, y = tiny_data.batch(tiny_data.indices("train")[:4])
        logged, _ = train_step(model, make_optimizer(model, tc), x, y, tc, torch.Generator())
        assert "tv" not in logged and "equiv" not in logged and "orth" in logged


class TestPrototypeInit:
    def test_background_prototype_is_border_cluster(self):
        # two token populations: a constant centre block and a constant border ring
        model = trainer.PartDiscoveryModel(ModelConfig(K=1, C=2, D=3, H=6, W=6), None)
        x = torch.zeros(4, 3, 6, 6)
        x[:, 0] = 5.0
        x[:, :, 2:4, 2:4] = torch.tensor([0.0, 5.0, 0.0]).view(3, 1, 1)
        trainer.init_prototypes(model, x, torch.Generator().manual_seed(0))
        assert torch.allclose(model.head.prototypes[0], torch.tensor([0.0, 5.0, 0.0]))
        assert torch.allclose(model.head.prototypes[1], torch.tensor([5.0, 0.0, 0.0]))

    def test_prototypes_land_on_tokens(self, tiny_data):
        model = fresh_model()
        x, _ = tiny_data.batch(tiny_data.indices("train")[:8])
        trainer.init_prototypes(model, x, torch.Generator().manual_seed(0))
        with torch.no_grad():
            z = model.backbone(x).permute(0, 2, 3, 1).reshape(-1, 16)
            nearest = torch.cdist(model.head.prototypes, z).min(dim=1).values
            spread = torch.cdist(z, z).max()
        assert (nearest < spread).all() and torch.isfinite(model.head.prototypes).all()


class TestCheckpoint:
    def make(self, tiny_data):
        cfg = TrainConfig(batch_size=4)
        model, _ = run_steps(tiny_data, cfg, n=1)
        opt = make_optimizer(model, cfg)
        return model, make_checkpoint(model, opt, cfg, 3, torch.Generator().manual_seed(5), {"note": [1, 2]})

    def test_save_load_save_identical(self, tiny_data, tmp_path):
        _, ckpt = self.make(tiny_data)
        save_checkpoint(tmp_path / "a.ckpt", ckpt)
        save_checkpoint(tmp_path / "b.ckpt", load_checkpoint(tmp_path / "a.ckpt"))
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_round_trip_fields(self, tiny_data, tmp_path):
        model, ckpt = self.make(tiny_data)
        save_checkpoint(tmp_path / "a.ckpt", ckpt)
        back = load_checkpoint(tmp_path / "a.ckpt")
        assert back.model_config == ckpt.model_config and back.backbone_config == ckpt.backbone_config
        assert back.train_config == ckpt.train_config and back.epoch == 3 and back.extra == {"note": [1, 2]}
        assert np.array_equal(back.rng_state, ckpt.rng_state)
        x, _ = tiny_data.batch(tiny_data.indices("test"))
        model.eval()
        with torch.no_grad():
            assert torch.equal(model(x).attention, model_from_checkpoint(back)(x).attention)

    def test_flipped_byte(self, tiny_data, tmp_path):
        _, ckpt = self.make(tiny_data)
        p = tmp_path / "a.ckpt"
        save_checkpoint(p, ckpt)
        data = bytearray(p.read_bytes())
        data[len(data) // 2] ^= 0x10
        p.write_bytes(bytes(data))
        with pytest.raises(ChecksumError):
            load_checkpoint(p)

    def test_not_a_checkpoint(self, tmp_path):
        from pdisco import container
        container.save(tmp_path / "f.bin", {"x": np.zeros(2)})
        with pytest.raises(VersionError):
            load_checkpoint(tmp_path / "f.bin")


class TestFit:
    def test_smoke_ten_samples(self, tiny_data, tmp_path):
        idx = tiny_data.indices("train")[:8] + tiny_data.indices("val")[:2]
        sub = TrainData(tiny_data.inputs[idx], tiny_data.labels[idx],
                        [tiny_data.splits[i] for i in idx], [tiny_data.samples[i] for i in idx])
        res = fit(sub, TINY_MODEL, TINY_BACKBONE, TrainConfig(epochs=1, batch_size=4), tmp_path)
        ckpt = load_checkpoint(res.best_path)
        assert ckpt.epoch == 0
        assert (tmp_path / "history.csv").read_text().startswith("epoch,term,value\n")
        model_from_checkpoint(ckpt)

    def test_history_and_resume(self, tiny_data, tmp_path):
        cfg = TrainConfig(epochs=3, batch_size=8)
        full = fit(tiny_data, TINY_MODEL, TINY_BACKBONE, cfg, tmp_path / "full")
        assert len(full.series("val_top1")) == 3
        for term in TERMS + ("total",):
            assert len(full.series(term)) == 3
        resumed = fit(tiny_data, TINY_MODEL, TINY_BACKBONE, cfg, tmp_path / "resumed",
                      resume=tmp_path / "full" / "epoch_000.ckpt")
        assert resumed.history == full.history
        assert (tmp_path / "full" / "last.ckpt").read_bytes() == (tmp_path / "resumed" / "last.ckpt").read_bytes()

    def test_needs_val_split(self, tiny_data, tmp_path):
        idx = tiny_data.indices("train")
        only_train = TrainData(tiny_data.inputs[idx], tiny_data.labels[idx], ["train"] * len(idx))
        with pytest.raises(ConfigError):
            fit(only_train, TINY_MODEL, TINY_BACKBONE, TrainConfig(epochs=1), tmp_path)

    def test_no_temp_files_left(self, tiny_data, tmp_path):
        fit(tiny_data, TINY_MODEL, TINY_BACKBONE, TrainConfig(epochs=1, batch_size=16), tmp_path,
            keep_epoch_checkpoints=False)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["best.ckpt", "history.csv", "last.ckpt"]


class TestEvaluate:
    def test_injected_truth_is_perfect(self, tiny_data):
        model = fresh_model()
        rep = trainer.evaluate(model, tiny_data, "test", wanted=("nmi", "ari", "fg_miou"), inject_gt=True)
        assert rep == {"nmi": 1.0, "ari": 1.0, "fg_miou": 1.0}

    def test_full_suite_keys(self, tiny_data):
        rep = trainer.evaluate(fresh_model(), tiny_data, "test")
        assert set(rep) == set(trainer.ALL_METRICS)
        assert 0 <= rep["top1"] <= 1

    def test_missing_annotations(self, tiny_data):
        bare = TrainData(tiny_data.inputs, tiny_data.labels, tiny_data.splits)
        assert set(trainer.evaluate(fresh_model(), bare, "test", wanted=("top1",))) == {"top1"}
        with pytest.raises(ConfigError, match="part masks"):
            trainer.evaluate(fresh_model(), bare, "test", wanted=("nmi",))

    def test_empty_split(self, tiny_data):
        with pytest.raises(ConfigError):
            trainer.evaluate(fresh_model(), tiny_data, "holdout")
