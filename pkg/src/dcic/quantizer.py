"""Quantization: additive-noise training proxy, mean-shifted rounding, and
integer symbolization for the entropy coder.

Rounding is half-away-from-zero throughout (torch.round / np.round are
half-to-even, which would desynchronize the two paths).
"""

import enum
from typing import Optional

import numpy as np
import torch


class QuantMode(enum.Enum):
    NOISE = "noise"      # training proxy: v + U(-1/2, 1/2), mean ignored
    ROUND = "round"      # eval: round(v - mu) + mu
    SYMBOLS = "symbols"  # coding alphabet: round(v - mu) as integers


def _round_half_away(v: torch.Tensor) -> torch.Tensor:
    return torch.sign(v) * torch.floor(v.abs() + 0.5)


def quantize(v: torch.Tensor, mu: Optional[torch.Tensor], mode: QuantMode,
             rng: Optional[torch.Generator] = None) -> torch.Tensor:
    """Quantize `v` in the given mode. `mu` may be None (treated as zero) and
    must broadcast to v's shape otherwise. NOISE mode requires `rng` so that
    training noise is reproducible."""
    if mode is QuantMode.NOISE:
        if rng is None:
            raise ValueError("NOISE mode needs a torch.Generator for reproducibility")
        noise = torch.rand(v.shape, generator=rng, dtype=v.dtype, device=v.device) - 0.5
        return v + noise
    centered = v if mu is None else v - mu
    symbols = _round_half_away(centered)
    if mode is QuantMode.SYMBOLS:
        return symbols.to(torch.int32)
    if mu is not None:
        symbols = symbols + mu
    return symbols


def ste_round(v: torch.Tensor, mu: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean-shifted rounding with a straight-through gradient.

    Forward values equal quantize(v, mu, ROUND) exactly, so training-time
    consumers of the result see the same tensors the decoder will see at
    inference.  The backward pass treats the operation as the identity on
    `v`; `mu` gets no gradient here (it is trained through the rate term).
    Without this, information can ride below the rounding threshold: the
    additive-noise proxy passes sub-bin structure through to the synthesis
    while the rate term never charges for it, and the model collapses to a
    solution that only works before hard rounding.
    """
    with torch.no_grad():
        target = quantize(v, mu, QuantMode.ROUND)
    # (v - v.detach()) is exactly zero in the forward pass, so the output
    # value is bit-identical to `target` while gradients flow through `v`.
    return (v - v.detach()) + target


def dequantize(symbols: torch.Tensor, mu: Optional[torch.Tensor]) -> torch.Tensor:
    """Inverse of SYMBOLS mode: symbols + mu. Composition identity:
    dequantize(quantize(v, mu, SYMBOLS), mu) == quantize(v, mu, ROUND)."""
    out = symbols.to(mu.dtype if mu is not None else torch.float32)
    if mu is not None:
        out = out + mu
    return out


def symbols_to_numpy(symbols: torch.Tensor) -> np.ndarray:
    """Flatten a symbol tensor to int32 in raster order (channel, row, col)."""
    return symbols.detach().cpu().numpy().astype(np.int32).ravel()
