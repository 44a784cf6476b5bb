"""Metrics and diagnostics: PSNR, MS-SSIM, BD-rate, R-D curve files,
channel-energy profiles and bitstream bit-allocation reports."""

import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError

# conventional 5-scale MS-SSIM weights
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MSSSIM_WIN = 11
MSSSIM_SIGMA = 1.5


# -- PSNR -------------------------------------------------------------------


def psnr(x, x_hat) -> float:
    """PSNR in dB on 8-bit-referenced values: 10*log10(255^2 / MSE) with the
    inputs given in [0, 1].  Identical images return +inf."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((255.0 * (a - b)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


# -- MS-SSIM ----------------------------------------------------------------


def _gaussian_window(dtype, device) -> torch.Tensor:
    half = (MSSSIM_WIN - 1) / 2
    coords = torch.arange(MSSSIM_WIN, dtype=dtype, device=device) - half
    g = torch.exp(-(coords ** 2) / (2 * MSSSIM_SIGMA ** 2))
    return g / g.sum()


def _ssim_pair(x: torch.Tensor, y: torch.Tensor, data_range: float):
    """Per-scale mean SSIM and contrast-structure terms.  The separable
    11-tap Gaussian window runs over a reflection-padded input so the
    smallest usable scale is 10 pixels (not the window size itself)."""
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    ch = x.size(1)
    g = _gaussian_window(x.dtype, x.device)
    kx = g.view(1, 1, 1, -1).expand(ch, 1, 1, -1)
    ky = g.view(1, 1, -1, 1).expand(ch, 1, -1, 1)
    half = MSSSIM_WIN // 2

    def blur(t):
        t = F.pad(t, (half, half, half, half), mode="reflect")
        return F.conv2d(F.conv2d(t, kx, groups=ch), ky, groups=ch)

    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x ** 2
    syy = blur(y * y) - mu_y ** 2
    sxy = blur(x * y) - mu_x * mu_y
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    ssim = ((2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)) * cs
    return ssim.mean(dim=(1, 2, 3)), cs.mean(dim=(1, 2, 3))


def scales_for(height: int, width: int, max_scales: int = 5) -> int:
    """Largest usable MS-SSIM scale count: each scale halves the image and the
    smallest scale still needs the 11-tap window (5 scales from 160 pixels)."""
    limit = min(height, width) // (MSSSIM_WIN - 1)
    scales = 1
    while scales < max_scales and (1 << scales) <= limit:
        scales += 1
    return scales


def ms_ssim_torch(x: torch.Tensor, y: torch.Tensor, data_range: float = 1.0,
                  scales: Optional[int] = None) -> torch.Tensor:
    """Differentiable MS-SSIM over a (B, C, H, W) batch -> per-batch mean."""
    if x.shape != y.shape:
        raise ConfigError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if min(x.size(-2), x.size(-1)) < MSSSIM_WIN // 2 + 1:
        raise ConfigError(f"image too small for SSIM window: {tuple(x.shape[-2:])}")
    usable = scales_for(x.size(-2), x.size(-1))
    if scales is None:
        scales = usable
        if scales < len(MSSSIM_WEIGHTS):
            warnings.warn(
                f"input {x.size(-2)}x{x.size(-1)} too small for 5-scale MS-SSIM; "
                f"using {scales} scales", stacklevel=2)
    elif scales > usable:
        raise ConfigError(f"{scales} scales need min dim >= {(MSSSIM_WIN - 1) << (scales - 1)}")
    weights = torch.tensor(MSSSIM_WEIGHTS[:scales], dtype=x.dtype, device=x.device)
    weights = weights / weights.sum()
    terms = []
    for k in range(scales):
        ssim, cs = _ssim_pair(x, y, data_range)
        terms.append(ssim if k == scales - 1 else cs)
        if k != scales - 1:
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
    stack = torch.stack(terms, dim=0).clamp_min(1e-6)
    return torch.prod(stack ** weights.view(-1, 1), dim=0).mean()


def ms_ssim(x, x_hat) -> float:
    """MS-SSIM between two (3, H, W) arrays in [0, 1]; scale count reduced
    with a warning for small images."""
    a = torch.as_tensor(np.asarray(x, dtype=np.float32)).unsqueeze(0)
    b = torch.as_tensor(np.asarray(x_hat, dtype=np.float32)).unsqueeze(0)
    with torch.no_grad():
        return float(ms_ssim_torch(a, b))


def ms_ssim_db(value: float) -> float:
    """Logarithmic MS-SSIM axis: -10*log10(1 - value)."""
    if value >= 1.0:
        return math.inf
    return -10.0 * math.log10(1.0 - value)


# -- R-D curves -------------------------------------------------------------


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr: float
    ms_ssim: float = float("nan")


@dataclass
class RDCurve:
    label: str
    points: List[RDPoint] = field(default_factory=list)

    def validate(self) -> None:
        if len(self.points) < 3:
            raise ConfigError(
                f"curve '{self.label}' has {len(self.points)} points; need >= 3 "
                "(>= 4 recommended for the cubic fit)")
        bpps = [p.bpp for p in self.points]
        if any(b2 <= b1 for b1, b2 in zip(bpps, bpps[1:])):
            raise ConfigError(f"curve '{self.label}' bpp not strictly increasing: {bpps}")

    def sorted(self) -> "RDCurve":
        return RDCurve(self.label, sorted(self.points, key=lambda p: p.bpp))

    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points], dtype=np.float64)

    def quality(self, metric: str = "psnr") -> np.ndarray:
        if metric == "psnr":
            return np.array([p.psnr for p in self.points], dtype=np.float64)
        if metric == "ms_ssim":
            return np.array([p.ms_ssim for p in self.points], dtype=np.float64)
        raise ConfigError(f"unknown quality metric '{metric}'")


def write_rd_file(path, records: Sequence[tuple]) -> None:
    """Line-delimited R-D records: label, bpp, psnr, ms_ssim (tab-separated)."""
    with open(path, "w") as fh:
        for label, bpp, quality, msv in records:
            fh.write(f"{label}\t{bpp:.8f}\t{quality:.6f}\t{msv:.8f}\n")


def read_rd_file(path) -> List[tuple]:
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ConfigError(f"{path}:{line_no}: expected 4 tab-separated fields")
            label, bpp, quality, msv = parts
            records.append((label, float(bpp), float(quality), float(msv)))
    return records


def curve_from_records(records: Sequence[tuple], label: str = "") -> RDCurve:
    points = [RDPoint(bpp=r[1], psnr=r[2], ms_ssim=r[3]) for r in records]
    curve = RDCurve(label or (records[0][0] if records else ""), points).sorted()
    return curve


# -- BD-rate ----------------------------------------------------------------


def bd_rate_values(anchor_rate, anchor_quality, test_rate, test_quality,
                   piecewise: bool = False) -> float:
    """Average rate difference (%) of test vs anchor at equal quality.

    Classic formulation: fit log-rate as a polynomial in quality (degree
    min(3, n-1)), integrate both fits over the overlapping quality interval,
    compare the mean log-rates.  `piecewise=True` swaps the polynomial for a
    monotone piecewise-cubic (pchip) interpolant for curves where the cubic
    oscillates.
    """
    ra = np.asarray(anchor_rate, dtype=np.float64)
    qa = np.asarray(anchor_quality, dtype=np.float64)
    rt = np.asarray(test_rate, dtype=np.float64)
    qt = np.asarray(test_quality, dtype=np.float64)
    for name, r, q in (("anchor", ra, qa), ("test", rt, qt)):
        if r.size != q.size:
            raise ConfigError(f"{name}: rate/quality length mismatch")
        if r.size < 3:
            raise ConfigError(f"{name}: need >= 3 points, got {r.size}")
        if (r <= 0).any():
            raise ConfigError(f"{name}: rates must be positive")

    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if hi <= lo:
        raise ConfigError(
            f"quality ranges do not overlap: anchor [{qa.min():.4f}, {qa.max():.4f}] "
            f"vs test [{qt.min():.4f}, {qt.max():.4f}]")

    def mean_log_rate(q, log_r):
        if piecewise:
            from scipy.interpolate import PchipInterpolator
            order = np.argsort(q)
            interp = PchipInterpolator(q[order], log_r[order])
            return interp.integrate(lo, hi) / (hi - lo)
        deg = min(3, q.size - 1)
        poly = np.polyfit(q, log_r, deg)
        integral = np.polyint(poly)
        return (np.polyval(integral, hi) - np.polyval(integral, lo)) / (hi - lo)

    avg_diff = mean_log_rate(qt, np.log(rt)) - mean_log_rate(qa, np.log(ra))
    return float((math.exp(avg_diff) - 1.0) * 100.0)


def bd_rate(anchor: RDCurve, test: RDCurve, metric: str = "psnr",
            piecewise: bool = False) -> float:
    anchor = anchor.sorted()
    test = test.sorted()
    anchor.validate()
    test.validate()
    return bd_rate_values(anchor.rates(), anchor.quality(metric),
                          test.rates(), test.quality(metric), piecewise=piecewise)


# -- latent diagnostics -----------------------------------------------------


@dataclass
class EnergyProfile:
    """Per-channel mean squared activation, sorted descending, plus the
    spatial map of the most energetic channel."""
    energies: np.ndarray       # sorted descending
    channel_order: np.ndarray  # original channel index per rank
    peak_map: np.ndarray       # (H, W) activation map of channel_order[0]

    def validate(self) -> None:
        if (self.energies < 0).any():
            raise ConfigError("energies must be non-negative")
        if (np.diff(self.energies) > 1e-12).any():
            raise ConfigError("energies must be sorted descending")


def channel_energy(latent) -> EnergyProfile:
    arr = np.asarray(latent.detach().cpu() if isinstance(latent, torch.Tensor) else latent,
                     dtype=np.float64)
    if arr.ndim != 3:
        raise ConfigError(f"expected (C, H, W) latent, got shape {arr.shape}")
    energies = np.mean(arr ** 2, axis=(1, 2))
    order = np.argsort(-energies, kind="stable")
    return EnergyProfile(energies=energies[order],
                         channel_order=order.astype(np.int32),
                         peak_map=arr[order[0]].copy())


# -- bit allocation ---------------------------------------------------------

SEGMENT_NAMES = ("z_s", "s", "z_y", "y")


@dataclass
class AllocationReport:
    """Fraction of coded payload bits per segment for one image (or, after
    aggregation, a pixel-weighted corpus average)."""
    bits: Dict[str, int]
    fractions: Dict[str, float]
    pixels: int

    @property
    def total_bits(self) -> int:
        return sum(self.bits.values())


def bit_allocation(container) -> AllocationReport:
    bits = {name: 8 * len(container.segments[name].payload) for name in SEGMENT_NAMES}
    total = sum(bits.values())
    if total == 0:
        fractions = {name: 0.0 for name in SEGMENT_NAMES}
    else:
        fractions = {name: bits[name] / total for name in SEGMENT_NAMES}
    return AllocationReport(bits=bits, fractions=fractions,
                            pixels=container.orig_w * container.orig_h)


def aggregate_allocation(reports: Sequence[AllocationReport]) -> AllocationReport:
    """Pixel-count-weighted average of per-image fraction reports."""
    if not reports:
        raise ConfigError("nothing to aggregate")
    total_px = sum(r.pixels for r in reports)
    fractions = {name: sum(r.fractions[name] * r.pixels for r in reports) / total_px
                 for name in SEGMENT_NAMES}
    bits = {name: sum(r.bits[name] for r in reports) for name in SEGMENT_NAMES}
    return AllocationReport(bits=bits, fractions=fractions, pixels=total_px)
