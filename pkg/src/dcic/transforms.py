"""Network definitions: prior extractor, conditioned analysis/synthesis,
hyper-transform pairs, entropy parameter heads, and the assembled model with
its checkpoint archive format.

All forward passes are pure functions of (inputs, weights); training is the
only writer.  The assembled `CodecModel` has two quantization modes:

  * NOISE  — additive-uniform proxy, used by the training loss;
  * ROUND  — mean-shifted rounding, the arithmetic the real codec performs.

NOISE mode takes an `ste` option (used by the trainer) that keeps the noise
proxy for the rate terms while routing straight-through-rounded values to
the decoder-visible path, so the reconstruction is optimized on the same
tensors inference produces.

Conditioning flags prune submodules at construction time so that a disabled
path has no parameters at all (an all-off-prior model *is* a plain
mean-scale-hyperprior codec, not a conditioned one with dead weights).
"""

import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .entropy_models import FactorizedDensity, gaussian_likelihood, sigma_from_raw
from .errors import ConfigError
from .layers import GDN, FusionBlock, PriorUpsampler, conv, deconv
from .quantizer import QuantMode, quantize, ste_round

CHECKPOINT_FORMAT_VERSION = 1

# lambda grids from the reference training protocol; index = quality tag
LAMBDA_SET_MSE = (0.003, 0.005, 0.01, 0.025, 0.05)
LAMBDA_SET_MSSSIM = (3.0, 5.0, 8.0, 16.0, 36.0, 64.0)


@dataclass(frozen=True)
class ChannelPlan:
    """Channel widths: base conv width n, prior c_s, detail c_y, hyper c_z."""
    n: int = 192
    c_s: int = 320
    c_y: int = 320
    c_z: int = 192

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 1:
                raise ConfigError(f"ChannelPlan.{name} must be >= 1, got {value}")

    @classmethod
    def tiny(cls) -> "ChannelPlan":
        """Desk-scale configuration: trains on a single machine."""
        return cls(n=64, c_s=48, c_y=48, c_z=24)


@dataclass(frozen=True)
class ConditioningFlags:
    """Which consumers see the decoded structure prior / the y hyper-latent."""
    condition_ga: bool = True
    condition_gs: bool = True
    prior_in_entropy: bool = True
    hyper_y_in_entropy: bool = True

    def __post_init__(self):
        if not (self.prior_in_entropy or self.hyper_y_in_entropy):
            raise ConfigError(
                "entropy model for y needs at least one context source "
                "(prior_in_entropy or hyper_y_in_entropy)")

    @property
    def uses_prior(self) -> bool:
        """True when any consumer reads the prior; otherwise the prior branch
        is dropped entirely and the model degenerates to a plain
        mean-scale-hyperprior codec."""
        return self.condition_ga or self.condition_gs or self.prior_in_entropy

    @classmethod
    def baseline(cls) -> "ConditioningFlags":
        """Unconditioned baseline: no prior anywhere, hyper-only entropy."""
        return cls(condition_ga=False, condition_gs=False,
                   prior_in_entropy=False, hyper_y_in_entropy=True)


class PriorExtractor(nn.Module):
    """Distills the structure prior from the image: four stride-2 conv blocks
    with GDN between them, input (B,3,H,W) -> (B,c_s,H/16,W/16)."""

    def __init__(self, plan: ChannelPlan):
        super().__init__()
        self.net = nn.Sequential(
            conv(3, plan.n), GDN(plan.n),
            conv(plan.n, plan.n), GDN(plan.n),
            conv(plan.n, plan.n), GDN(plan.n),
            conv(plan.n, plan.c_s),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.size(-1) % 16 or x.size(-2) % 16:
            raise ConfigError(f"spatial dims must be divisible by 16, got {tuple(x.shape[-2:])}")
        return self.net(x)


class AnalysisTransform(nn.Module):
    """Detail analysis g_a.  When conditioned, the decoded prior is injected
    once after the first stride-2 block (feature at H/2, prior upsampled 8x)."""

    def __init__(self, plan: ChannelPlan, conditioned: bool):
        super().__init__()
        self.head = nn.Sequential(conv(3, plan.n), GDN(plan.n))
        if conditioned:
            self.prior_up = PriorUpsampler(plan.c_s, 8)
            self.fusion = FusionBlock(plan.n, plan.c_s)
        else:
            self.prior_up = None
            self.fusion = None
        self.tail = nn.Sequential(
            conv(plan.n, plan.n), GDN(plan.n),
            conv(plan.n, plan.n), GDN(plan.n),
            conv(plan.n, plan.c_y),
        )

    def forward(self, x: torch.Tensor, s_hat: Optional[torch.Tensor] = None) -> torch.Tensor:
        f = self.head(x)
        if self.fusion is not None:
            if s_hat is None:
                raise ConfigError("conditioned analysis needs the decoded prior")
            f = self.fusion(f, self.prior_up(s_hat))
        return self.tail(f)


class SynthesisTransform(nn.Module):
    """Synthesis g_s: four stride-2 up-blocks mirroring the analysis
    (transposed conv + inverse GDN).  When conditioned, the prior is upsampled
    (1x, 2x, 4x, 8x) and fused at the input of every up-block."""

    def __init__(self, plan: ChannelPlan, conditioned: bool):
        super().__init__()
        self.blocks = nn.ModuleList([
            nn.Sequential(deconv(plan.c_y, plan.n), GDN(plan.n, inverse=True)),
            nn.Sequential(deconv(plan.n, plan.n), GDN(plan.n, inverse=True)),
            nn.Sequential(deconv(plan.n, plan.n), GDN(plan.n, inverse=True)),
            deconv(plan.n, 3),
        ])
        if conditioned:
            in_chs = (plan.c_y, plan.n, plan.n, plan.n)
            self.prior_ups = nn.ModuleList(
                [PriorUpsampler(plan.c_s, 2 ** k) for k in range(4)])
            self.fusions = nn.ModuleList(
                [FusionBlock(c, plan.c_s) for c in in_chs])
        else:
            self.prior_ups = None
            self.fusions = None

    def forward(self, y_hat: torch.Tensor, s_hat: Optional[torch.Tensor] = None,
                clamp: bool = True) -> torch.Tensor:
        f = y_hat
        for k, block in enumerate(self.blocks):
            if self.fusions is not None:
                if s_hat is None:
                    raise ConfigError("conditioned synthesis needs the decoded prior")
                f = self.fusions[k](f, self.prior_ups[k](s_hat))
            f = block(f)
        return f.clamp(0.0, 1.0) if clamp else f


class HyperAnalysis(nn.Module):
    """Latent -> hyper-latent, two stride-2 stages: (B,C,h,w) -> (B,c_z,h/4,w/4)."""

    def __init__(self, in_ch: int, c_z: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, c_z, 3, padding=1), nn.LeakyReLU(inplace=True),
            conv(c_z, c_z), nn.LeakyReLU(inplace=True),
            conv(c_z, c_z),
        )

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        if v.size(-1) % 4 or v.size(-2) % 4:
            raise ConfigError(f"latent dims must be divisible by 4, got {tuple(v.shape[-2:])}")
        return self.net(v)


class HyperSynthesis(nn.Module):
    """Hyper-latent back to latent resolution with doubled channels, split
    into two per-element feature maps (mean/raw-scale, or l_mean/l_scale)."""

    def __init__(self, c_z: int, out_ch: int):
        super().__init__()
        self.net = nn.Sequential(
            deconv(c_z, out_ch), nn.LeakyReLU(inplace=True),
            deconv(out_ch, out_ch), nn.LeakyReLU(inplace=True),
            nn.Conv2d(out_ch, 2 * out_ch, 3, padding=1),
        )

    def forward(self, z_hat: torch.Tensor):
        return self.net(z_hat).chunk(2, dim=1)


class ParamHead(nn.Module):
    """Entropy parameter head (one for means, one for scales): three 1x1
    convolutions over the channel-concatenation of its enabled inputs."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 1), nn.LeakyReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 1), nn.LeakyReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 1),
        )

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.net(v)


class CodecModel(nn.Module):
    """The assembled codec: prior branch, conditioned transforms, hyper
    branches, parameter heads and factorized densities, pruned per flags."""

    def __init__(self, plan: Optional[ChannelPlan] = None,
                 flags: Optional[ConditioningFlags] = None):
        super().__init__()
        self.plan = plan or ChannelPlan()
        self.flags = flags or ConditioningFlags()
        p, f = self.plan, self.flags

        if f.uses_prior:
            self.prior = PriorExtractor(p)
            self.hyper_a_s = HyperAnalysis(p.c_s, p.c_z)
            self.hyper_s_s = HyperSynthesis(p.c_z, p.c_s)
            self.density_s = FactorizedDensity(p.c_z)
        else:
            self.prior = None
            self.hyper_a_s = None
            self.hyper_s_s = None
            self.density_s = None

        self.analysis = AnalysisTransform(p, conditioned=f.condition_ga)
        self.synthesis = SynthesisTransform(p, conditioned=f.condition_gs)

        if f.hyper_y_in_entropy:
            self.hyper_a_y = HyperAnalysis(p.c_y, p.c_z)
            self.hyper_s_y = HyperSynthesis(p.c_z, p.c_y)
            self.density_y = FactorizedDensity(p.c_z)
        else:
            self.hyper_a_y = None
            self.hyper_s_y = None
            self.density_y = None

        head_in = (p.c_y if f.hyper_y_in_entropy else 0) + \
                  (p.c_s if f.prior_in_entropy else 0)
        self.p_mean = ParamHead(head_in, p.c_y)
        self.p_scale = ParamHead(head_in, p.c_y)

        self.quality_tag = 0

    # -- entropy parameters for y ------------------------------------------

    def entropy_params_y(self, l_mean: Optional[torch.Tensor],
                         l_scale: Optional[torch.Tensor],
                         s_hat: Optional[torch.Tensor]):
        """(mu_y, sigma_y) from whichever context sources the flags enable.
        Input concat order is fixed: hyper features first, then the prior."""
        mean_in, scale_in = [], []
        if self.flags.hyper_y_in_entropy:
            if l_mean is None or l_scale is None:
                raise ConfigError("hyper context enabled but l_mean/l_scale missing")
            mean_in.append(l_mean)
            scale_in.append(l_scale)
        if self.flags.prior_in_entropy:
            if s_hat is None:
                raise ConfigError("prior context enabled but s_hat missing")
            mean_in.append(s_hat)
            scale_in.append(s_hat)
        mu = self.p_mean(torch.cat(mean_in, dim=1))
        sigma = sigma_from_raw(self.p_scale(torch.cat(scale_in, dim=1)))
        return mu, sigma

    # -- full pipeline forward ---------------------------------------------

    def forward(self, x: torch.Tensor, mode: QuantMode = QuantMode.NOISE,
                rng: Optional[torch.Generator] = None, clamp: Optional[bool] = None,
                ste: bool = False):
        """Run the whole pipeline under the given quantization mode.

        Returns a dict with the reconstruction, per-latent likelihoods (None
        for pruned branches) and the quantized latents.  ROUND mode performs
        the same arithmetic the real codec does (mean-shifted rounding with
        hyper-synthesis on the already-quantized hyper-latent).

        `ste=True` (NOISE mode only) keeps the additive-noise proxy for every
        rate term but feeds straight-through-rounded values to everything the
        decoder will replay: hyper-synthesis inputs, the prior entering the
        fusion blocks and parameter heads, and the latents entering the
        synthesis.  Training then optimizes the reconstruction on exactly the
        tensors inference produces, which closes the noise/round gap that
        otherwise lets the model hide information below the rounding
        threshold (zero measured rate, zero survival after rounding).
        """
        if mode is QuantMode.SYMBOLS:
            raise ConfigError("forward runs in NOISE or ROUND mode; coding is the codec's job")
        noisy = mode is QuantMode.NOISE
        if ste and not noisy:
            raise ConfigError("ste quantization is a training-time option of NOISE mode")
        if clamp is None:
            clamp = not noisy

        s_hat = p_s = p_zs = z_s_hat = None
        if self.flags.uses_prior:
            s = self.prior(x)
            z_s = self.hyper_a_s(s)
            if noisy:
                z_s_rate = quantize(z_s, None, QuantMode.NOISE, rng)
                if ste:
                    med = self.density_s.medians().view(1, -1, 1, 1).to(z_s.dtype)
                    z_s_hat = ste_round(z_s, med)
                else:
                    z_s_hat = z_s_rate
            else:
                med = self.density_s.medians().view(1, -1, 1, 1).to(z_s.dtype)
                z_s_hat = quantize(z_s, med, QuantMode.ROUND)
                z_s_rate = z_s_hat
            p_zs = self.density_s.likelihood(z_s_rate)
            mu_s, raw_s = self.hyper_s_s(z_s_hat)
            sigma_s = sigma_from_raw(raw_s)
            if noisy:
                s_rate = quantize(s, None, QuantMode.NOISE, rng)
                s_hat = ste_round(s, mu_s) if ste else s_rate
            else:
                s_hat = quantize(s, mu_s, QuantMode.ROUND)
                s_rate = s_hat
            p_s = gaussian_likelihood(s_rate, mu_s, sigma_s)

        y = self.analysis(x, s_hat if self.flags.condition_ga else None)

        l_mean = l_scale = p_zy = z_y_hat = None
        if self.flags.hyper_y_in_entropy:
            z_y = self.hyper_a_y(y)
            if noisy:
                z_y_rate = quantize(z_y, None, QuantMode.NOISE, rng)
                if ste:
                    med = self.density_y.medians().view(1, -1, 1, 1).to(z_y.dtype)
                    z_y_hat = ste_round(z_y, med)
                else:
                    z_y_hat = z_y_rate
            else:
                med = self.density_y.medians().view(1, -1, 1, 1).to(z_y.dtype)
                z_y_hat = quantize(z_y, med, QuantMode.ROUND)
                z_y_rate = z_y_hat
            p_zy = self.density_y.likelihood(z_y_rate)
            l_mean, l_scale = self.hyper_s_y(z_y_hat)

        mu_y, sigma_y = self.entropy_params_y(
            l_mean, l_scale, s_hat if self.flags.prior_in_entropy else None)
        if noisy:
            y_rate = quantize(y, None, QuantMode.NOISE, rng)
            y_hat = ste_round(y, mu_y) if ste else y_rate
        else:
            y_hat = quantize(y, mu_y, QuantMode.ROUND)
            y_rate = y_hat
        p_y = gaussian_likelihood(y_rate, mu_y, sigma_y)

        x_hat = self.synthesis(
            y_hat, s_hat if self.flags.condition_gs else None, clamp=clamp)

        return {
            "x_hat": x_hat,
            "likelihoods": {"s": p_s, "z_s": p_zs, "y": p_y, "z_y": p_zy},
            "latents": {"s_hat": s_hat, "z_s_hat": z_s_hat,
                        "y_hat": y_hat, "z_y_hat": z_y_hat},
        }

    # -- identity ----------------------------------------------------------

    def digest(self) -> bytes:
        """8-byte identity of (architecture, weights); stable across
        checkpoint save/load round-trips."""
        h = hashlib.sha256()
        h.update(json.dumps({"plan": asdict(self.plan), "flags": asdict(self.flags)},
                            sort_keys=True).encode())
        for name, tensor in sorted(self.state_dict().items()):
            arr = tensor.detach().cpu().numpy()
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.digest()[:8]

    def parameter_groups(self):
        """Named top-level parameter groups that actually exist (for gradient
        bookkeeping)."""
        groups = {}
        for name, module in self.named_children():
            if module is not None and any(True for _ in module.parameters()):
                groups[name] = list(module.parameters())
        return groups


# -- checkpoint archive ----------------------------------------------------


def save_checkpoint(model: CodecModel, path: str, extra: Optional[dict] = None) -> None:
    """Single-archive checkpoint: named parameter arrays + JSON manifest.
    Written atomically (temp file + rename); round-trips bit-exactly."""
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "plan": asdict(model.plan),
        "flags": asdict(model.flags),
        "quality_tag": int(model.quality_tag),
        "extra": extra or {},
    }
    arrays = {f"param/{name}": tensor.detach().cpu().numpy()
              for name, tensor in model.state_dict().items()}
    arrays["__manifest__"] = np.frombuffer(
        json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8).copy()
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str, device: str = "cpu"):
    """Load a checkpoint archive -> (model, manifest).  Refuses archives with
    a different format version or inconsistent parameter sets."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with np.load(path) as zf:
        if "__manifest__" not in zf:
            raise ConfigError(f"{path}: not a checkpoint archive (no manifest)")
        manifest = json.loads(bytes(zf["__manifest__"]).decode())
        version = manifest.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ConfigError(
                f"{path}: checkpoint format {version} not supported "
                f"(expected {CHECKPOINT_FORMAT_VERSION})")
        plan = ChannelPlan(**manifest["plan"])
        flags = ConditioningFlags(**manifest["flags"])
        model = CodecModel(plan, flags)
        state = {}
        for key in zf.files:
            if key.startswith("param/"):
                state[key[len("param/"):]] = torch.from_numpy(zf[key].copy())
        try:
            model.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise ConfigError(f"{path}: parameter set inconsistent with manifest: {exc}")
    model.quality_tag = int(manifest.get("quality_tag", 0))
    model.to(device)
    model.eval()
    return model, manifest


def quality_tag_for(lambda_value: float, distortion: str = "mse") -> int:
    """Index of lambda in the reference grid for the distortion type;
    255 for off-grid values."""
    grid = LAMBDA_SET_MSE if distortion == "mse" else LAMBDA_SET_MSSSIM
    for i, lam in enumerate(grid):
        if abs(lam - lambda_value) < 1e-12:
            return i
    return 255
