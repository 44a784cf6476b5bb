"""Rate-distortion training: the Lagrangian loss over the four rate terms,
the training loop with its divergence guard and eval-mode R-D reporting, the
ablation suite, and the flat key-value config-file format."""

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .analysis import ms_ssim_torch
from .data import CropBank
from .entropy_models import rate_bits
from .errors import ConfigError, TrainingDivergedError, TrainingError
from .quantizer import QuantMode
from .transforms import (ChannelPlan, CodecModel, ConditioningFlags,
                         quality_tag_for, save_checkpoint)

RATE_TERMS = ("s", "z_s", "y", "z_y")
DIVERGENCE_BOUND = 10.0
DIVERGENCE_WINDOW = 1000


@dataclass
class TrainConfig:
    lambda_value: float = 0.01
    distortion: str = "mse"                    # "mse" | "ms_ssim"
    flags: ConditioningFlags = field(default_factory=ConditioningFlags)
    plan: ChannelPlan = field(default_factory=ChannelPlan.tiny)
    steps: int = 20000
    batch_size: int = 8
    crop_size: int = 64
    lr: float = 1e-4
    lr_drop_fraction: float = 0.8              # one 10x decay at 80% of steps
    lr_drop_factor: float = 0.1
    seed: int = 0
    corpus_size: int = 500                     # crops in the training bank
    eval_every: int = 1000
    eval_crops: int = 64
    log_every: int = 100
    label: str = ""

    def validate(self) -> None:
        if not (self.lambda_value > 0 and math.isfinite(self.lambda_value)):
            raise ConfigError(f"lambda must be positive, got {self.lambda_value}")
        if self.distortion not in ("mse", "ms_ssim"):
            raise ConfigError(f"distortion must be mse or ms_ssim, got {self.distortion!r}")
        if self.crop_size % 64:
            raise ConfigError(f"crop size must be divisible by 64, got {self.crop_size}")
        for name in ("steps", "batch_size", "corpus_size", "eval_every",
                     "eval_crops", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 < self.lr_drop_fraction <= 1.0:
            raise ConfigError("lr_drop_fraction must be in (0, 1]")


# -- flat key-value config files -------------------------------------------

_PLAN_KEYS = ("n", "c_s", "c_y", "c_z")
_FLAG_KEYS = ("condition_ga", "condition_gs", "prior_in_entropy", "hyper_y_in_entropy")
_SCALAR_KEYS = {
    "lambda": ("lambda_value", float),
    "distortion": ("distortion", str),
    "steps": ("steps", int),
    "batch_size": ("batch_size", int),
    "crop_size": ("crop_size", int),
    "lr": ("lr", float),
    "lr_drop_fraction": ("lr_drop_fraction", float),
    "lr_drop_factor": ("lr_drop_factor", float),
    "seed": ("seed", int),
    "corpus_size": ("corpus_size", int),
    "eval_every": ("eval_every", int),
    "eval_crops": ("eval_crops", int),
    "log_every": ("log_every", int),
    "label": ("label", str),
}


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"config key {key}: expected a boolean, got {raw!r}")


def parse_config(text: str) -> TrainConfig:
    """Parse the flat `key = value` config format (one key per line,
    '#' comments); unknown keys are errors, everything else defaults."""
    scalars, plan_kw, flag_kw = {}, {}, {}
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {line_no}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in _SCALAR_KEYS:
            attr, conv = _SCALAR_KEYS[key]
            try:
                scalars[attr] = conv(raw)
            except ValueError:
                raise ConfigError(f"config key {key}: cannot parse {raw!r} as {conv.__name__}")
        elif key in _PLAN_KEYS:
            try:
                plan_kw[key] = int(raw)
            except ValueError:
                raise ConfigError(f"config key {key}: cannot parse {raw!r} as int")
        elif key in _FLAG_KEYS:
            flag_kw[key] = _parse_bool(raw, key)
        else:
            raise ConfigError(f"config line {line_no}: unknown key {key!r}")
    cfg = TrainConfig(**scalars)
    if plan_kw:
        cfg.plan = dataclasses.replace(ChannelPlan.tiny(), **plan_kw) \
            if set(plan_kw) != set(_PLAN_KEYS) else ChannelPlan(**plan_kw)
    if flag_kw:
        cfg.flags = dataclasses.replace(ConditioningFlags(), **flag_kw)
    cfg.validate()
    return cfg


def load_config(path) -> TrainConfig:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        return parse_config(fh.read())


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for key, (attr, _) in _SCALAR_KEYS.items():
        lines.append(f"{key} = {getattr(cfg, attr)}")
    for key in _PLAN_KEYS:
        lines.append(f"{key} = {getattr(cfg.plan, key)}")
    for key in _FLAG_KEYS:
        lines.append(f"{key} = {str(getattr(cfg.flags, key)).lower()}")
    return "\n".join(lines) + "\n"


# -- loss -------------------------------------------------------------------


def rd_loss(x: torch.Tensor, outputs: dict, cfg: TrainConfig) -> dict:
    """Loss = sum of the four per-pixel rate terms + lambda * distortion.

    Rates are bits per pixel so lambda transfers across crop sizes.  MSE is
    computed on [0, 1] pixels and scaled to the 8-bit-referenced domain
    (x255^2), the convention the lambda grid is calibrated against.
    Returns the loss together with each logged component.
    """
    b, _, h, w = x.shape
    num_pixels = b * h * w
    zero = torch.zeros((), dtype=x.dtype, device=x.device)
    comps = {}
    bpp_total = zero
    for name in RATE_TERMS:
        p = outputs["likelihoods"][name]
        bpp = rate_bits(p) / num_pixels if p is not None else zero
        comps[f"bpp_{name}"] = bpp
        bpp_total = bpp_total + bpp
    if cfg.distortion == "mse":
        distortion = F.mse_loss(outputs["x_hat"], x) * 255.0 ** 2
    else:
        distortion = 1.0 - ms_ssim_torch(outputs["x_hat"], x)
    loss = bpp_total + cfg.lambda_value * distortion
    comps.update(bpp_total=bpp_total, distortion=distortion, loss=loss)
    for name, value in comps.items():
        if not torch.isfinite(value):
            raise TrainingError(
                f"non-finite loss term '{name}' = {float(value.detach())}")
    return comps


class DivergenceMonitor:
    """Aborts a run whose loss stays above bound x initial-loss for `window`
    consecutive steps."""

    def __init__(self, bound: float = DIVERGENCE_BOUND, window: int = DIVERGENCE_WINDOW):
        self.bound = bound
        self.window = window
        self.initial: Optional[float] = None
        self.count = 0

    def update(self, loss: float) -> None:
        if self.initial is None:
            self.initial = loss
            return
        if loss > self.bound * self.initial:
            self.count += 1
            if self.count >= self.window:
                raise TrainingDivergedError(
                    f"loss {loss:.4g} above {self.bound:.0f}x initial "
                    f"({self.initial:.4g}) for {self.count} consecutive steps")
        else:
            self.count = 0


@torch.no_grad()
def evaluate(model: CodecModel, crops: torch.Tensor, cfg: TrainConfig,
             chunk_size: int = 16) -> dict:
    """ROUND-mode (codec arithmetic) R-D metrics over an eval bank.

    PSNR is averaged over images; rates are bits per pixel over the bank.
    """
    was_training = model.training
    model.eval()
    bits = {name: 0.0 for name in RATE_TERMS}
    mses, msssims = [], []
    pixels = 0
    for chunk in torch.split(crops, chunk_size):
        out = model(chunk, QuantMode.ROUND)
        pixels += chunk.size(0) * chunk.size(2) * chunk.size(3)
        for name in RATE_TERMS:
            p = out["likelihoods"][name]
            if p is not None:
                bits[name] += float(rate_bits(p))
        per_image_mse = ((out["x_hat"] - chunk) ** 2).mean(dim=(1, 2, 3)) * 255.0 ** 2
        mses.extend(per_image_mse.tolist())
        if cfg.distortion == "ms_ssim":
            msssims.extend(
                float(ms_ssim_torch(out["x_hat"][i:i + 1], chunk[i:i + 1]))
                for i in range(chunk.size(0)))
    if was_training:
        model.train()
    result = {f"bpp_{name}": bits[name] / pixels for name in RATE_TERMS}
    result["bpp_total"] = sum(bits.values()) / pixels
    mean_mse = float(np.mean(mses))
    result["psnr"] = float(np.mean(
        [10.0 * math.log10(255.0 ** 2 / m) if m > 0 else math.inf for m in mses]))
    if cfg.distortion == "mse":
        result["distortion"] = mean_mse
    else:
        result["distortion"] = 1.0 - float(np.mean(msssims))
        result["ms_ssim"] = float(np.mean(msssims))
    result["loss"] = result["bpp_total"] + cfg.lambda_value * result["distortion"]
    return result


def train(cfg: TrainConfig, corpus_dir, out_path, report_path=None,
          device: str = "cpu", quiet: bool = True):
    """Train a model from scratch on random crops from `corpus_dir` and write
    the checkpoint (atomically) to `out_path`.

    Returns (model, records) where records are the line-delimited report
    entries (dicts) that were also appended to `report_path` if given.
    Reproducible given (cfg, corpus contents): all sampling and noise come
    from generators seeded by cfg.seed.
    """
    cfg.validate()
    torch.manual_seed(cfg.seed)
    model = CodecModel(cfg.plan, cfg.flags).to(device)
    model.train()
    model.quality_tag = quality_tag_for(cfg.lambda_value, cfg.distortion)

    bank = CropBank.from_folder(corpus_dir, cfg.corpus_size, cfg.crop_size, cfg.seed)
    eval_bank = CropBank.from_folder(corpus_dir, cfg.eval_crops, cfg.crop_size,
                                     cfg.seed + 7919)
    sampler = np.random.default_rng(cfg.seed + 1)
    noise_rng = torch.Generator(device=device)
    noise_rng.manual_seed(cfg.seed + 2)

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    drop_step = int(cfg.lr_drop_fraction * cfg.steps)
    monitor = DivergenceMonitor()
    records: List[dict] = []
    report_fh = open(report_path, "a") if report_path else None

    def emit(record: dict) -> None:
        records.append(record)
        if report_fh is not None:
            report_fh.write(json.dumps(record) + "\n")

    try:
        for step in range(1, cfg.steps + 1):
            if step == drop_step + 1:
                for group in optimizer.param_groups:
                    group["lr"] *= cfg.lr_drop_factor
            batch = bank.sample(cfg.batch_size, sampler).to(device)
            # Noise proxy for the rate terms, straight-through rounding for
            # the decoder-visible path: the distortion is measured on the
            # exact tensors inference will produce.
            outputs = model(batch, QuantMode.NOISE, noise_rng, ste=True)
            comps = rd_loss(batch, outputs, cfg)
            optimizer.zero_grad()
            comps["loss"].backward()
            optimizer.step()
            scalars = {k: float(v.detach()) for k, v in comps.items()}
            monitor.update(scalars["loss"])

            if step == 1 or step % cfg.log_every == 0:
                emit({"kind": "train", "step": step, **scalars,
                      "lr": optimizer.param_groups[0]["lr"]})
            if step % cfg.eval_every == 0 or step == cfg.steps:
                stats = evaluate(model, eval_bank.crops.to(device), cfg)
                emit({"kind": "eval", "step": step, **stats})
                if report_fh is not None:
                    report_fh.flush()
                if not quiet:
                    print(f"step {step}: eval loss {stats['loss']:.4f} "
                          f"bpp {stats['bpp_total']:.4f} psnr {stats['psnr']:.2f}",
                          flush=True)
    except TrainingDivergedError:
        if report_fh is not None:
            report_fh.flush()
        raise
    finally:
        if report_fh is not None:
            report_fh.close()

    final_eval = next(r for r in reversed(records) if r["kind"] == "eval")
    save_checkpoint(model, out_path, extra={
        "lambda": cfg.lambda_value, "distortion": cfg.distortion,
        "seed": cfg.seed, "steps": cfg.steps, "label": cfg.label,
        "final_eval": final_eval,
    })
    return model, records


ABLATION_VARIANTS = (
    ("full", ConditioningFlags()),
    ("wo_conditional_ga", ConditioningFlags(condition_ga=False)),
    ("wo_conditional_gs", ConditioningFlags(condition_gs=False)),
    ("wo_conditional_transforms",
     ConditioningFlags(condition_ga=False, condition_gs=False)),
    ("wo_prior_in_entropy", ConditioningFlags(prior_in_entropy=False)),
    ("wo_hyper_in_entropy", ConditioningFlags(hyper_y_in_entropy=False)),
)


def make_ablation_suite(base: TrainConfig) -> List[TrainConfig]:
    """Six configs (full model + five conditioning ablations) differing only
    in flags and label; lambda, seed and schedule are shared."""
    return [dataclasses.replace(base, flags=flags, label=name)
            for name, flags in ABLATION_VARIANTS]
