"""Building-block layers: GDN, strided conv helpers, prior fusion blocks."""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class _LowerBoundFn(torch.autograd.Function):
    """clamp_min with useful gradients: the gradient passes through whenever
    the input is above the bound, or when it would push the value back up."""

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return x.clamp_min(bound)

    @staticmethod
    def backward(ctx, grad_output):
        (x,) = ctx.saved_tensors
        pass_through = (x >= ctx.bound) | (grad_output < 0)
        return grad_output * pass_through, None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBoundFn.apply(x, bound)


def conv(in_ch: int, out_ch: int, kernel: int = 5, stride: int = 2) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2)


def deconv(in_ch: int, out_ch: int, kernel: int = 5, stride: int = 2) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(
        in_ch, out_ch, kernel,
        stride=stride, padding=kernel // 2, output_padding=stride - 1,
    )


class GDN(nn.Module):
    """Generalized divisive normalization.

    Forward:  y_i = x_i / sqrt(beta_i + sum_j gamma_ij * x_j^2)
    Inverse:  y_i = x_i * sqrt(beta_i + sum_j gamma_ij * x_j^2)

    beta stays strictly positive and gamma non-negative through a sqrt
    reparameterization with a small pedestal; init beta = 1, gamma = 0.1*I.
    """

    PEDESTAL = 2 ** -18
    BETA_MIN = 1e-6

    def __init__(self, channels: int, inverse: bool = False,
                 beta_init: float = 1.0, gamma_init: float = 0.1):
        super().__init__()
        self.inverse = inverse
        self.channels = channels
        beta = torch.full((channels,), float(beta_init))
        gamma = float(gamma_init) * torch.eye(channels)
        self.beta_param = nn.Parameter(torch.sqrt(beta + self.PEDESTAL))
        self.gamma_param = nn.Parameter(torch.sqrt(gamma + self.PEDESTAL))

    @property
    def beta(self) -> torch.Tensor:
        p = lower_bound(self.beta_param, math.sqrt(self.BETA_MIN + self.PEDESTAL))
        return p * p - self.PEDESTAL

    @property
    def gamma(self) -> torch.Tensor:
        p = lower_bound(self.gamma_param, math.sqrt(self.PEDESTAL))
        return p * p - self.PEDESTAL

    def set_values(self, beta, gamma) -> None:
        """Load exact (beta, gamma) values, bypassing random init (tests)."""
        with torch.no_grad():
            beta = torch.as_tensor(beta, dtype=self.beta_param.dtype).reshape(self.channels)
            gamma = torch.as_tensor(gamma, dtype=self.gamma_param.dtype).reshape(
                self.channels, self.channels)
            self.beta_param.copy_(torch.sqrt(beta + self.PEDESTAL))
            self.gamma_param.copy_(torch.sqrt(gamma + self.PEDESTAL))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.size(1) != self.channels:
            raise ValueError(
                f"GDN built for {self.channels} channels, got {x.size(1)}")
        gamma = self.gamma.view(self.channels, self.channels, 1, 1)
        norm = torch.sqrt(F.conv2d(x * x, gamma, self.beta))
        return x * norm if self.inverse else x / norm


class PriorUpsampler(nn.Module):
    """Brings the decoded prior to a target scale: nearest-neighbour upsampling
    by a fixed power-of-two factor, then one 3x3 smoothing convolution."""

    def __init__(self, channels: int, factor: int):
        super().__init__()
        self.factor = factor
        self.smooth = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, prior: torch.Tensor) -> torch.Tensor:
        if self.factor > 1:
            prior = F.interpolate(prior, scale_factor=self.factor, mode="nearest")
        return self.smooth(prior)


class FusionBlock(nn.Module):
    """Concat a backbone feature with the (already upsampled) prior, mix it
    back down to the feature's channel count (two 3x3 convs with a pointwise
    nonlinearity between them), and add the result to the feature.

    The residual connection keeps the unconditioned path representable at any
    mix weights: the backbone feature always reaches the output unchanged, and
    the prior contributes an additive correction."""

    def __init__(self, feature_ch: int, prior_ch: int):
        super().__init__()
        self.mix = nn.Sequential(
            nn.Conv2d(feature_ch + prior_ch, feature_ch, 3, padding=1),
            nn.LeakyReLU(inplace=True),
            nn.Conv2d(feature_ch, feature_ch, 3, padding=1),
        )

    def forward(self, feature: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
        if feature.shape[-2:] != prior.shape[-2:]:
            raise RuntimeError(
                f"fusion expects matching spatial dims, got {tuple(feature.shape[-2:])} "
                f"vs {tuple(prior.shape[-2:])}")
        return feature + self.mix(torch.cat([feature, prior], dim=1))
