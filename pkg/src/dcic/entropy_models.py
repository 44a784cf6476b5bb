"""Probability models and their integer-CDF bridge to the entropy coder.

Two families:
  * a discretized conditional Gaussian (mean/scale per element) for the two
    main latents — likelihood of a quantized value is the Gaussian CDF
    difference over a unit interval;
  * a learned flexible-CDF factorized density, one univariate model per
    channel, for the two hyper-latents.

Both expose a differentiable likelihood for training and a deterministic
integer CDF-table construction for coding.  Tables are pure functions of
(sigma rounded to 1/256) resp. (density weights, medians), so encoder and
decoder always derive identical tables from identical decoded context.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .layers import lower_bound

SIGMA_MIN = 0.11
P_FLOOR = 2.0 ** -15
PRECISION = 16          # CDF table precision in bits
GRANULARITY = 256       # sigma / median rounding denominator for table builds

_SIGMA_MIN_TICKS = math.ceil(SIGMA_MIN * GRANULARITY)  # smallest table sigma


def sigma_from_raw(raw: torch.Tensor) -> torch.Tensor:
    """Map raw scale logits to sigma >= SIGMA_MIN."""
    return SIGMA_MIN + F.softplus(raw)


@dataclass(frozen=True)
class GaussianParams:
    """Per-element (mu, sigma) with sigma bounded away from zero."""
    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ConfigError(
                f"mu/sigma shape mismatch: {tuple(self.mu.shape)} vs {tuple(self.sigma.shape)}")
        if self.sigma.numel() and float(self.sigma.min()) < SIGMA_MIN - 1e-6:
            raise ConfigError(
                f"sigma below SIGMA_MIN={SIGMA_MIN}: min={float(self.sigma.min()):.6f}")


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(x * (-(2 ** -0.5)))


def gaussian_likelihood(v: torch.Tensor, mu: torch.Tensor,
                        sigma: torch.Tensor) -> torch.Tensor:
    """P(v | mu, sigma) for the unit-interval discretization of a Gaussian:
    CDF((v - mu + 1/2)/sigma) - CDF((v - mu - 1/2)/sigma), floored at P_FLOOR.

    Evaluated through the negative half-axis for numerical stability; the
    expression is symmetric about mu so this is exact, not an approximation.
    """
    centered = -(v - mu).abs()
    upper = _std_normal_cdf((centered + 0.5) / sigma)
    lower = _std_normal_cdf((centered - 0.5) / sigma)
    return lower_bound(upper - lower, P_FLOOR)


def rate_bits(p) -> torch.Tensor:
    """Total information content of a likelihood array: sum(-log2 p)."""
    if isinstance(p, torch.Tensor):
        return -torch.log2(p).sum()
    return float(-np.log2(np.asarray(p, dtype=np.float64)).sum())


class FactorizedDensity(nn.Module):
    """Flexible-CDF univariate density, one model per channel.

    The CDF is sigmoid(f_K(...f_1(t))) where each f_k is an affine map with
    softplus-positive weights followed by a bounded monotone perturbation
    x + tanh(a) * tanh(x); monotonicity holds by construction.
    """

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 3.0):
        super().__init__()
        self.channels = channels
        self.filters = tuple(int(f) for f in filters)
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1.0 / (len(self.filters) + 1))
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._factors = nn.ParameterList()
        for k in range(len(self.filters) + 1):
            init = math.log(math.expm1(1.0 / scale / dims[k + 1]))
            matrix = torch.full((channels, dims[k + 1], dims[k]), init)
            self._matrices.append(nn.Parameter(matrix))
            bias = torch.empty((channels, dims[k + 1], 1)).uniform_(-0.5, 0.5)
            self._biases.append(nn.Parameter(bias))
            if k < len(self.filters):
                self._factors.append(nn.Parameter(
                    torch.zeros((channels, dims[k + 1], 1))))

    def _logits_cdf(self, t: torch.Tensor) -> torch.Tensor:
        """Monotone pre-sigmoid CDF logits; t shaped (C, 1, n)."""
        x = t
        for k, matrix in enumerate(self._matrices):
            x = torch.matmul(F.softplus(matrix), x) + self._biases[k]
            if k < len(self._factors):
                x = x + torch.tanh(self._factors[k]) * torch.tanh(x)
        return x

    def cdf(self, t: torch.Tensor) -> torch.Tensor:
        """CDF values for t shaped (C, n)."""
        return torch.sigmoid(self._logits_cdf(t.unsqueeze(1))).squeeze(1)

    def likelihood(self, z: torch.Tensor) -> torch.Tensor:
        """P(z_i) = C(z_i + 1/2) - C(z_i - 1/2) per element, floored at P_FLOOR.

        z is (B, C, H, W); channels are modeled independently.
        """
        b, c, h, w = z.shape
        if c != self.channels:
            raise ConfigError(f"density built for {self.channels} channels, got {c}")
        flat = z.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lo = self._logits_cdf(flat - 0.5)
        up = self._logits_cdf(flat + 0.5)
        # evaluate through whichever sigmoid tail is better conditioned
        sign = -torch.sign(lo + up).detach()
        p = torch.abs(torch.sigmoid(sign * up) - torch.sigmoid(sign * lo))
        p = p.reshape(c, b, h, w).permute(1, 0, 2, 3)
        return lower_bound(p, P_FLOOR)

    forward = likelihood

    @torch.no_grad()
    def medians(self) -> torch.Tensor:
        """Per-channel median of the learned density (logit root by bisection),
        rounded to 1/GRANULARITY so the coding grid is platform-stable."""
        device = self._biases[0].device
        lo = torch.full((self.channels, 1, 1), -64.0, device=device)
        hi = torch.full((self.channels, 1, 1), 64.0, device=device)
        for _ in range(60):
            mid = (lo + hi) / 2
            pos = self._logits_cdf(mid) > 0
            hi = torch.where(pos, mid, hi)
            lo = torch.where(pos, lo, mid)
        med = ((lo + hi) / 2).reshape(self.channels)
        return torch.round(med * GRANULARITY) / GRANULARITY


@dataclass
class CdfTable:
    """Integer cumulative tables for one coded segment.

    rows[t] is a cumulative array of length 2L+3 over the slot alphabet
    (symbols -L..L followed by one escape slot): rows[t][0] = 0,
    rows[t][-1] = 2^precision, strictly increasing (every slot mass >= 1).
    index maps each element (raster order) to its table row.
    """
    rows: np.ndarray      # (T, 2L+3) int64 cumulative
    index: np.ndarray     # (n,) int32
    precision: int
    L: int

    @property
    def n_elements(self) -> int:
        return int(self.index.size)

    @property
    def n_slots(self) -> int:
        return 2 * self.L + 2

    @property
    def escape_slot(self) -> int:
        return 2 * self.L + 1

    def validate(self) -> None:
        total = 1 << self.precision
        if self.rows.shape[1] != self.n_slots + 1:
            raise ConfigError("table width inconsistent with L")
        if not (self.rows[:, 0] == 0).all() or not (self.rows[:, -1] == total).all():
            raise ConfigError("cumulative bounds must be 0 and 2^P")
        if not (np.diff(self.rows, axis=1) >= 1).all():
            raise ConfigError("every slot needs mass >= 1")
        if self.index.size and (self.index.min() < 0 or self.index.max() >= self.rows.shape[0]):
            raise ConfigError("table index out of range")


def _check_table_args(precision: int, L: int) -> None:
    if not 12 <= precision <= 16:
        raise ConfigError(f"CDF precision must be in [12, 16], got {precision}")
    if L < 0:
        raise ConfigError(f"symbol range L must be >= 0, got {L}")
    if 2 * L + 2 >= (1 << precision):
        raise ConfigError(f"alphabet 2L+2={2 * L + 2} cannot fit precision {precision}")


def _quantize_pmf(pmf: np.ndarray, precision: int) -> np.ndarray:
    """Scale a pmf row to integer frequencies summing to exactly 2^precision
    with every slot >= 1."""
    total = 1 << precision
    freqs = np.floor(pmf * total).astype(np.int64)
    np.maximum(freqs, 1, out=freqs)
    diff = total - int(freqs.sum())
    if diff > 0:
        freqs[int(np.argmax(freqs))] += diff
    elif diff < 0:
        order = np.argsort(-freqs)
        i = 0
        while diff < 0:
            j = order[i % order.size]
            take = min(int(freqs[j]) - 1, -diff)
            freqs[j] -= take
            diff += take
            i += 1
    return freqs


def _rows_from_pmf(pmf: np.ndarray, precision: int) -> np.ndarray:
    """pmf (T, 2L+1) over symbols -L..L -> cumulative rows with escape slot."""
    tail = np.clip(1.0 - pmf.sum(axis=1, keepdims=True), 0.0, 1.0)
    slots = np.concatenate([pmf, tail], axis=1)
    rows = np.zeros((slots.shape[0], slots.shape[1] + 1), dtype=np.int64)
    for t in range(slots.shape[0]):
        rows[t, 1:] = np.cumsum(_quantize_pmf(slots[t], precision))
    return rows


def build_gaussian_cdf_table(params: GaussianParams, precision: int = PRECISION,
                             L: int = 0) -> CdfTable:
    """Tables for mean-shifted Gaussian symbols k = round(v - mu).

    The symbol distribution is CDF((k + 1/2)/sigma) - CDF((k - 1/2)/sigma):
    after exact mean-shifting mu cancels, so rows depend only on sigma,
    rounded to 1/GRANULARITY and deduplicated.
    """
    _check_table_args(precision, L)
    from scipy.special import ndtr

    sigma = params.sigma.detach().cpu().numpy().astype(np.float64).ravel()
    if sigma.size and sigma.min() < SIGMA_MIN - 1e-6:
        raise ConfigError(f"degenerate sigma {sigma.min():.6f} < {SIGMA_MIN}")
    ticks = np.floor(sigma * GRANULARITY + 0.5).astype(np.int64)
    np.maximum(ticks, _SIGMA_MIN_TICKS, out=ticks)
    unique, index = np.unique(ticks, return_inverse=True)
    sig = unique[:, None].astype(np.float64) / GRANULARITY
    edges = np.arange(-L - 0.5, L + 1.0)[None, :]      # (1, 2L+2) interval edges
    cdf = ndtr(edges / sig)                            # (U, 2L+2)
    pmf = np.diff(cdf, axis=1)                         # (U, 2L+1)
    return CdfTable(rows=_rows_from_pmf(pmf, precision),
                    index=index.astype(np.int32), precision=precision, L=L)


def build_factorized_cdf_table(density: FactorizedDensity, shape,
                               precision: int = PRECISION, L: int = 0) -> CdfTable:
    """Tables for factorized symbols k = round(z - median_c), one row per
    channel, indexed by the channel of each element of a (C, h, w) latent."""
    _check_table_args(precision, L)
    c, h, w = shape
    if c != density.channels:
        raise ConfigError(f"latent has {c} channels, density models {density.channels}")
    med = density.medians().cpu()                       # (C,)
    with torch.no_grad():
        k = torch.arange(-L, L + 1, dtype=torch.float64)
        grid = med.double()[:, None] + k[None, :]       # (C, 2L+1) value grid
        dev = next(density.parameters()).device
        upper = density.cdf((grid + 0.5).to(dev).float()).double().cpu().numpy()
        lower = density.cdf((grid - 0.5).to(dev).float()).double().cpu().numpy()
    pmf = np.clip(upper - lower, 0.0, 1.0)
    index = np.repeat(np.arange(c, dtype=np.int32), h * w)
    return CdfTable(rows=_rows_from_pmf(pmf, precision),
                    index=index, precision=precision, L=L)


def symbol_range(symbols: np.ndarray) -> int:
    """Per-segment L = max(|symbol|) observed by the encoder (0 when empty)."""
    if symbols.size == 0:
        return 0
    return int(np.abs(symbols).max())
