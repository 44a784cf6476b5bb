"""End-to-end encode/decode pipeline and the bitstream container.

Encoding runs: pad -> structure prior (coded via its hyper-latent, then as a
mean-shifted Gaussian) -> conditioned analysis -> detail hyper-latent ->
detail latent (Gaussian with parameters fused from hyper features and the
decoded prior).  Decoding replays the same arithmetic from the container, so
the decoder's reconstruction is bit-identical to the one the encoder could
compute from its own quantized latents.

Container layout (little-endian): 18-byte header [magic "DCIC" | version u8
| model_id 8 bytes | quality_tag u8 | orig_W u16 | orig_H u16], then the
four coded segments in fixed causal order z_s, s, z_y, y.  Pruned branches
ship as empty segments so the layout never changes shape.
"""

import math
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .entropy_models import (GaussianParams, build_factorized_cdf_table,
                             build_gaussian_cdf_table, sigma_from_raw,
                             symbol_range)
from .errors import BitstreamError, ConfigError, ModelMismatchError
from .quantizer import QuantMode, dequantize, quantize, symbols_to_numpy
from .range_coder import CodedSegment, decode_segment, encode_segment
from .transforms import CodecModel

MAGIC = b"DCIC"
CONTAINER_VERSION = 1
PAD_MULTIPLE = 64
SEGMENT_ORDER = ("z_s", "s", "z_y", "y")
L_CAP = 2048                      # table half-range cap; larger symbols escape

_HEADER = struct.Struct("<4sB8sBHH")
_EMPTY_SEGMENT = CodedSegment(0, 0, b"")


# -- padding ----------------------------------------------------------------


def pad_image(x: torch.Tensor, multiple: int = PAD_MULTIPLE):
    """Replicate-pad right/bottom to the next multiple -> (padded, (H, W)).

    Replication (not zeros) keeps the pad region free of artificial edges
    that would leak into the structure prior.
    """
    if x.dim() not in (3, 4):
        raise ConfigError(f"expected (3,H,W) or (1,3,H,W) image, got {tuple(x.shape)}")
    batched = x.dim() == 4
    x4 = x if batched else x.unsqueeze(0)
    h, w = x4.shape[-2:]
    pad_h = -h % multiple
    pad_w = -w % multiple
    if pad_h or pad_w:
        x4 = F.pad(x4, (0, pad_w, 0, pad_h), mode="replicate")
    return (x4 if batched else x4.squeeze(0)), (h, w)


def unpad_image(x: torch.Tensor, orig_dims: Tuple[int, int]) -> torch.Tensor:
    h, w = orig_dims
    return x[..., :h, :w]


# -- container --------------------------------------------------------------


@dataclass
class BitstreamContainer:
    """Parsed form of a .dcic file."""
    model_id: bytes
    quality_tag: int
    orig_w: int
    orig_h: int
    segments: Dict[str, CodedSegment]
    version: int = CONTAINER_VERSION

    def __post_init__(self):
        if len(self.model_id) != 8:
            raise ConfigError("model_id must be 8 bytes")
        if set(self.segments) != set(SEGMENT_ORDER):
            raise ConfigError(f"container needs segments {SEGMENT_ORDER}")
        for name, dim in (("orig_w", self.orig_w), ("orig_h", self.orig_h)):
            if not 1 <= dim < 1 << 16:
                raise ConfigError(f"{name}={dim} outside u16 range")

    def pack(self) -> bytes:
        head = _HEADER.pack(MAGIC, self.version, self.model_id,
                            self.quality_tag, self.orig_w, self.orig_h)
        return head + b"".join(self.segments[n].pack() for n in SEGMENT_ORDER)

    @classmethod
    def unpack(cls, data: bytes) -> "BitstreamContainer":
        header, offset = _parse_header(data)
        segments = {}
        for name in SEGMENT_ORDER:
            segments[name], offset = CodedSegment.unpack(data, offset)
        if offset != len(data):
            raise BitstreamError(f"{len(data) - offset} trailing bytes after last segment")
        return cls(segments=segments, **header)

    @property
    def header_bits(self) -> int:
        return 8 * _HEADER.size

    @property
    def payload_bits(self) -> int:
        """Everything but the container header (includes segment headers)."""
        return sum(8 * self.segments[n].n_bytes for n in SEGMENT_ORDER)

    @property
    def n_bytes(self) -> int:
        return _HEADER.size + sum(self.segments[n].n_bytes for n in SEGMENT_ORDER)

    def bpp(self, include_header: bool = False) -> float:
        bits = self.payload_bits + (self.header_bits if include_header else 0)
        return bits / (self.orig_w * self.orig_h)


def _parse_header(data: bytes):
    if len(data) < _HEADER.size:
        raise BitstreamError(f"file too short for header ({len(data)} bytes)")
    magic, version, model_id, tag, orig_w, orig_h = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}")
    if version != CONTAINER_VERSION:
        raise BitstreamError(f"container version {version} not supported")
    header = {"version": version, "model_id": model_id, "quality_tag": tag,
              "orig_w": orig_w, "orig_h": orig_h}
    return header, _HEADER.size


# -- shared encode/decode arithmetic ----------------------------------------


def _choose_l(symbols: np.ndarray) -> int:
    return min(symbol_range(symbols), L_CAP)


def _code_factorized(v: torch.Tensor, density) -> Tuple[CodedSegment, torch.Tensor]:
    """Quantize a hyper-latent to its channel medians and entropy-code it."""
    med = density.medians().view(1, -1, 1, 1).to(v.dtype)
    sym_t = quantize(v, med, QuantMode.SYMBOLS)
    sym = symbols_to_numpy(sym_t)
    table = build_factorized_cdf_table(density, tuple(v.shape[1:]), L=_choose_l(sym))
    return encode_segment(sym, table), dequantize(sym_t, med)


def _decode_factorized(segment: CodedSegment, density, shape,
                       dtype=torch.float32) -> torch.Tensor:
    _expect_symbols(segment, shape, "hyper-latent")
    table = build_factorized_cdf_table(density, shape, L=segment.L)
    sym = decode_segment(segment, table)
    med = density.medians().view(1, -1, 1, 1).to(dtype)
    return dequantize(torch.from_numpy(sym.reshape((1,) + shape)), med)


def _code_gaussian(v: torch.Tensor, mu: torch.Tensor,
                   sigma: torch.Tensor) -> Tuple[CodedSegment, torch.Tensor]:
    """Mean-shifted quantization + coding; tables depend only on sigma."""
    sym_t = quantize(v, mu, QuantMode.SYMBOLS)
    sym = symbols_to_numpy(sym_t)
    table = build_gaussian_cdf_table(GaussianParams(mu, sigma), L=_choose_l(sym))
    return encode_segment(sym, table), dequantize(sym_t, mu)


def _decode_gaussian(segment: CodedSegment, mu: torch.Tensor,
                     sigma: torch.Tensor) -> torch.Tensor:
    _expect_symbols(segment, tuple(mu.shape[1:]), "latent")
    table = build_gaussian_cdf_table(GaussianParams(mu, sigma), L=segment.L)
    sym = decode_segment(segment, table)
    return dequantize(torch.from_numpy(sym.reshape(mu.shape)), mu)


def _expect_symbols(segment: CodedSegment, shape, what: str) -> None:
    expected = int(np.prod(shape))
    if segment.n_symbols != expected:
        raise BitstreamError(
            f"{what} segment carries {segment.n_symbols} symbols, "
            f"model expects {expected}")


def _latent_hw(orig_h: int, orig_w: int) -> Tuple[int, int]:
    h = math.ceil(orig_h / PAD_MULTIPLE) * PAD_MULTIPLE
    w = math.ceil(orig_w / PAD_MULTIPLE) * PAD_MULTIPLE
    return h, w


def _as_single_image(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.size(0) != 1 or x.size(1) != 3:
        raise ConfigError(f"expected one (3,H,W) image, got {tuple(x.shape)}")
    return x


# -- pipeline ---------------------------------------------------------------


@torch.no_grad()
def encode_image(x: torch.Tensor, model: CodecModel,
                 return_reconstruction: bool = False):
    """Encode one [0,1] image -> BitstreamContainer.

    With return_reconstruction=True also returns the encoder-side x_hat
    computed from the same quantized latents the decoder will see.
    """
    x = _as_single_image(x)
    flags = model.flags
    x_p, (orig_h, orig_w) = pad_image(x)
    if not (1 <= orig_w < 1 << 16 and 1 <= orig_h < 1 << 16):
        raise ConfigError(f"image dims {orig_w}x{orig_h} outside u16 range")

    segments = {"z_s": _EMPTY_SEGMENT, "s": _EMPTY_SEGMENT,
                "z_y": _EMPTY_SEGMENT, "y": _EMPTY_SEGMENT}
    s_hat = None
    if flags.uses_prior:
        s = model.prior(x_p)
        z_s = model.hyper_a_s(s)
        segments["z_s"], z_s_hat = _code_factorized(z_s, model.density_s)
        mu_s, raw_s = model.hyper_s_s(z_s_hat)
        segments["s"], s_hat = _code_gaussian(s, mu_s, sigma_from_raw(raw_s))

    y = model.analysis(x_p, s_hat if flags.condition_ga else None)
    l_mean = l_scale = None
    if flags.hyper_y_in_entropy:
        z_y = model.hyper_a_y(y)
        segments["z_y"], z_y_hat = _code_factorized(z_y, model.density_y)
        l_mean, l_scale = model.hyper_s_y(z_y_hat)

    mu_y, sigma_y = model.entropy_params_y(
        l_mean, l_scale, s_hat if flags.prior_in_entropy else None)
    segments["y"], y_hat = _code_gaussian(y, mu_y, sigma_y)

    container = BitstreamContainer(
        model_id=model.digest(), quality_tag=int(model.quality_tag),
        orig_w=orig_w, orig_h=orig_h, segments=segments)
    if not return_reconstruction:
        return container
    x_hat = model.synthesis(y_hat, s_hat if flags.condition_gs else None,
                            clamp=True)
    return container, unpad_image(x_hat, (orig_h, orig_w)).squeeze(0)


def _check_model(container: BitstreamContainer, model: CodecModel) -> None:
    digest = model.digest()
    if container.model_id != digest:
        raise ModelMismatchError(
            f"bitstream was produced by model {container.model_id.hex()}, "
            f"this model is {digest.hex()}")


@torch.no_grad()
def _decode_prior_latents(container: BitstreamContainer, model: CodecModel):
    """Decode s_hat using only the z_s and s segments."""
    plan = model.plan
    h, w = _latent_hw(container.orig_h, container.orig_w)
    z_s_hat = _decode_factorized(container.segments["z_s"], model.density_s,
                                 (plan.c_z, h // 64, w // 64))
    mu_s, raw_s = model.hyper_s_s(z_s_hat)
    s_hat = _decode_gaussian(container.segments["s"], mu_s, sigma_from_raw(raw_s))
    return s_hat


@torch.no_grad()
def decode_prior(data, model: CodecModel) -> torch.Tensor:
    """Decode only the structure prior s_hat (1, c_s, H/16, W/16).

    Accepts bytes or a parsed container.  When given bytes, parsing stops
    after the s segment: the tail of the file — including every y-segment
    byte — is never read, which is the causal layering the segment order
    guarantees.
    """
    if not model.flags.uses_prior:
        raise ConfigError("model has no prior branch")
    if isinstance(data, BitstreamContainer):
        container = data
    else:
        header, offset = _parse_header(data)
        segments = dict.fromkeys(SEGMENT_ORDER, _EMPTY_SEGMENT)
        for name in ("z_s", "s"):
            segments[name], offset = CodedSegment.unpack(data, offset)
        container = BitstreamContainer(segments=segments, **header)
    _check_model(container, model)
    return _decode_prior_latents(container, model)


@torch.no_grad()
def decode_image(data, model: CodecModel) -> torch.Tensor:
    """Decode a container (or raw bytes) -> (3, orig_H, orig_W) in [0, 1]."""
    container = data if isinstance(data, BitstreamContainer) \
        else BitstreamContainer.unpack(data)
    _check_model(container, model)
    flags, plan = model.flags, model.plan
    h, w = _latent_hw(container.orig_h, container.orig_w)

    s_hat = None
    if flags.uses_prior:
        s_hat = _decode_prior_latents(container, model)
    else:
        for name in ("z_s", "s"):
            if container.segments[name].n_symbols:
                raise BitstreamError(f"unexpected {name} payload for prior-free model")

    l_mean = l_scale = None
    if flags.hyper_y_in_entropy:
        z_y_hat = _decode_factorized(container.segments["z_y"], model.density_y,
                                     (plan.c_z, h // 64, w // 64))
        l_mean, l_scale = model.hyper_s_y(z_y_hat)
    elif container.segments["z_y"].n_symbols:
        raise BitstreamError("unexpected z_y payload for hyper-free model")

    mu_y, sigma_y = model.entropy_params_y(
        l_mean, l_scale, s_hat if flags.prior_in_entropy else None)
    y_hat = _decode_gaussian(container.segments["y"], mu_y, sigma_y)

    x_hat = model.synthesis(y_hat, s_hat if flags.condition_gs else None,
                            clamp=True)
    return unpad_image(x_hat, (container.orig_h, container.orig_w)).squeeze(0)


# -- file helpers -----------------------------------------------------------


def write_bitstream(container: BitstreamContainer, path) -> int:
    blob = container.pack()
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def read_bitstream(path) -> BitstreamContainer:
    with open(path, "rb") as fh:
        return BitstreamContainer.unpack(fh.read())
