import dataclasses
import json

import pytest
import torch

from dcic.errors import ConfigError, TrainingDivergedError, TrainingError
from dcic.quantizer import QuantMode
from dcic.training import (ABLATION_VARIANTS, DivergenceMonitor, TrainConfig,
                           evaluate, format_config, load_config,
                           make_ablation_suite, parse_config, rd_loss, train)
from dcic.transforms import (ChannelPlan, CodecModel, ConditioningFlags,
                             load_checkpoint)


class TestConfigFile:
    def test_parse_minimal(self):
        cfg = parse_config("lambda = 0.01\nsteps = 100\n")
        assert cfg.lambda_value == 0.01
        assert cfg.steps == 100
        assert cfg.flags == ConditioningFlags()

    def test_comments_and_blanks(self):
        cfg = parse_config("# header\n\nlambda = 0.05  # inline\n")
        assert cfg.lambda_value == 0.05

    def test_plan_and_flags(self):
        text = ("n = 32\nc_s = 16\nc_y = 16\nc_z = 8\n"
                "condition_ga = false\ncondition_gs = no\n")
        cfg = parse_config(text)
        assert cfg.plan == ChannelPlan(32, 16, 16, 8)
        assert not cfg.flags.condition_ga
        assert not cfg.flags.condition_gs
        assert cfg.flags.prior_in_entropy

    def test_format_parse_roundtrip(self):
        cfg = TrainConfig(lambda_value=0.025, steps=321, batch_size=3,
                          seed=17, label="x",
                          flags=ConditioningFlags(condition_gs=False),
                          plan=ChannelPlan.tiny())
        assert parse_config(format_config(cfg)) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("wibble = 3\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            parse_config("steps = many\n")
        with pytest.raises(ConfigError):
            parse_config("condition_ga = maybe\n")
        with pytest.raises(ConfigError, match="key = value"):
            parse_config("just a line\n")

    def test_validation(self):
        with pytest.raises(ConfigError):
            parse_config("lambda = -1\n")
        with pytest.raises(ConfigError):
            parse_config("crop_size = 60\n")
        with pytest.raises(ConfigError):
            parse_config("distortion = l1\n")

    def test_load_config_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "nope.conf")


class TestRdLoss:
    def _outputs(self, model, x, seed=0):
        rng = torch.Generator().manual_seed(seed)
        return model(x, QuantMode.NOISE, rng)

    def test_components_and_total(self, tiny_model):
        x = torch.rand(2, 3, 64, 64)
        cfg = TrainConfig(lambda_value=0.01)
        comps = rd_loss(x, self._outputs(tiny_model, x), cfg)
        comps = {k: float(v.detach()) for k, v in comps.items()}
        for name in ("bpp_s", "bpp_z_s", "bpp_y", "bpp_z_y"):
            assert float(comps[name]) > 0
        total = sum(float(comps[f"bpp_{n}"]) for n in ("s", "z_s", "y", "z_y"))
        assert float(comps["bpp_total"]) == pytest.approx(total, rel=1e-6)
        assert float(comps["loss"]) == pytest.approx(
            float(comps["bpp_total"]) + 0.01 * float(comps["distortion"]), rel=1e-6)

    def test_mse_is_8bit_scaled(self, tiny_model):
        x = torch.rand(1, 3, 64, 64)
        out = self._outputs(tiny_model, x)
        comps = rd_loss(x, out, TrainConfig())
        mse_01 = float(torch.mean((out["x_hat"] - x) ** 2).detach())
        assert float(comps["distortion"].detach()) == pytest.approx(
            mse_01 * 255 ** 2, rel=1e-5)

    def test_pruned_branch_rates_zero(self, baseline_model):
        x = torch.rand(1, 3, 64, 64)
        comps = rd_loss(x, self._outputs(baseline_model, x), TrainConfig())
        assert float(comps["bpp_s"].detach()) == 0.0
        assert float(comps["bpp_z_s"].detach()) == 0.0
        assert float(comps["bpp_y"].detach()) > 0

    def test_ms_ssim_distortion(self, tiny_model):
        x = torch.rand(1, 3, 64, 64)
        cfg = TrainConfig(distortion="ms_ssim", lambda_value=8.0)
        # 64x64 inputs only support 3 of the 5 scales; the metric warns once
        with pytest.warns(UserWarning, match="3 scales"):
            comps = rd_loss(x, self._outputs(tiny_model, x), cfg)
        assert 0.0 <= float(comps["distortion"].detach()) <= 1.0

    def test_nonfinite_detected(self, tiny_model):
        x = torch.rand(1, 3, 64, 64)
        out = self._outputs(tiny_model, x)
        out["x_hat"] = out["x_hat"] * float("nan")
        with pytest.raises(TrainingError, match="distortion"):
            rd_loss(x, out, TrainConfig())


class TestDivergenceMonitor:
    def test_trips_after_window(self):
        mon = DivergenceMonitor(bound=10.0, window=5)
        mon.update(1.0)
        for _ in range(4):
            mon.update(20.0)
        with pytest.raises(TrainingDivergedError):
            mon.update(20.0)

    def test_recovery_resets(self):
        mon = DivergenceMonitor(bound=10.0, window=3)
        mon.update(1.0)
        mon.update(20.0)
        mon.update(20.0)
        mon.update(5.0)   # back under the bound
        mon.update(20.0)
        mon.update(20.0)  # window not yet exhausted again
        assert mon.count == 2


class TestTrainLoop:
    def _cfg(self, **kw):
        base = dict(steps=40, batch_size=2, corpus_size=16, eval_every=20,
                    eval_crops=4, log_every=10, seed=3)
        base.update(kw)
        return TrainConfig(**base)

    def test_loss_decreases(self, corpus_dir, tmp_path):
        cfg = self._cfg(steps=150, eval_every=75)
        _, records = train(cfg, corpus_dir, tmp_path / "m.npz")
        trains = [r for r in records if r["kind"] == "train"]
        assert trains[-1]["loss"] < trains[0]["loss"] * 0.5

    def test_reproducible(self, corpus_dir, tmp_path):
        cfg = self._cfg()
        _, r1 = train(cfg, corpus_dir, tmp_path / "a.npz")
        _, r2 = train(cfg, corpus_dir, tmp_path / "b.npz")
        assert r1[-1]["loss"] == pytest.approx(r2[-1]["loss"], abs=0.0)

    def test_seed_changes_run(self, corpus_dir, tmp_path):
        _, r1 = train(self._cfg(seed=3), corpus_dir, tmp_path / "a.npz")
        _, r2 = train(self._cfg(seed=4), corpus_dir, tmp_path / "b.npz")
        assert r1[-1]["loss"] != r2[-1]["loss"]

    def test_checkpoint_written_and_loadable(self, corpus_dir, tmp_path):
        cfg = self._cfg(lambda_value=0.01)
        model, _ = train(cfg, corpus_dir, tmp_path / "m.npz")
        loaded, manifest = load_checkpoint(tmp_path / "m.npz")
        assert loaded.digest() == model.digest()
        assert manifest["extra"]["lambda"] == 0.01
        assert manifest["extra"]["final_eval"]["step"] == cfg.steps
        assert loaded.quality_tag == 2  # 0.01 is index 2 of the grid

    def test_report_jsonl(self, corpus_dir, tmp_path):
        report = tmp_path / "r.jsonl"
        train(self._cfg(), corpus_dir, tmp_path / "m.npz", report_path=report)
        lines = [json.loads(l) for l in report.read_text().splitlines()]
        kinds = {l["kind"] for l in lines}
        assert kinds == {"train", "eval"}
        assert lines[-1]["kind"] == "eval"
        assert lines[-1]["step"] == 40

    def test_lr_drop_applied(self, corpus_dir, tmp_path):
        cfg = self._cfg(steps=20, lr_drop_fraction=0.5, eval_every=10, log_every=1)
        _, records = train(cfg, corpus_dir, tmp_path / "m.npz")
        trains = {r["step"]: r for r in records if r["kind"] == "train"}
        assert trains[10]["lr"] == pytest.approx(1e-4)
        assert trains[11]["lr"] == pytest.approx(1e-5)

    def test_gradient_flow_one_step(self, corpus_dir):
        # every constructed parameter group participates after one step
        torch.manual_seed(0)
        model = CodecModel(ChannelPlan.tiny(), ConditioningFlags())
        x = torch.rand(2, 3, 64, 64)
        rng = torch.Generator().manual_seed(1)
        # ste=True matches the training loop's forward; straight-through
        # rounding must not detach any conditioning path
        comps = rd_loss(x, model(x, QuantMode.NOISE, rng, ste=True), TrainConfig())
        comps["loss"].backward()
        for name, params in model.parameter_groups().items():
            grad_mag = sum(float(p.grad.abs().sum()) for p in params
                           if p.grad is not None)
            assert grad_mag > 0, f"no gradient reached group {name}"

    def test_evaluate_round_mode(self, corpus_dir):
        torch.manual_seed(0)
        model = CodecModel(ChannelPlan.tiny(), ConditioningFlags())
        crops = torch.rand(4, 3, 64, 64)
        stats = evaluate(model, crops, TrainConfig())
        assert stats["bpp_total"] > 0
        assert 0 < stats["psnr"] < 100
        assert stats["loss"] == pytest.approx(
            stats["bpp_total"] + 0.01 * stats["distortion"], rel=1e-6)


class TestAblationSuite:
    def test_six_variants(self):
        suite = make_ablation_suite(TrainConfig(steps=10))
        assert len(suite) == 6
        assert [c.label for c in suite] == [name for name, _ in ABLATION_VARIANTS]

    def test_flag_mapping(self):
        by_label = {c.label: c.flags for c in make_ablation_suite(TrainConfig())}
        assert by_label["full"] == ConditioningFlags()
        assert not by_label["wo_conditional_ga"].condition_ga
        assert by_label["wo_conditional_ga"].condition_gs
        wo_ct = by_label["wo_conditional_transforms"]
        assert not wo_ct.condition_ga and not wo_ct.condition_gs
        assert wo_ct.prior_in_entropy
        assert not by_label["wo_prior_in_entropy"].prior_in_entropy
        assert not by_label["wo_hyper_in_entropy"].hyper_y_in_entropy

    def test_shared_schedule(self):
        base = TrainConfig(lambda_value=0.05, steps=123, seed=9)
        for cfg in make_ablation_suite(base):
            assert (cfg.lambda_value, cfg.steps, cfg.seed) == (0.05, 123, 9)
            assert dataclasses.replace(cfg, flags=base.flags, label=base.label) == base
