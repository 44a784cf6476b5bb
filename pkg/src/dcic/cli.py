"""Command-line entry points.

Subcommands: train, encode, decode, eval, bdrate, analyze, ablate.  Every
path is explicit; the only environment input is DCIC_DEVICE (default compute
device, overridden by --device).

Exit codes: 0 success, 2 usage, 3 missing file, 4 bad config/arguments,
5 bitstream or model mismatch, 6 runtime failure.
"""

import argparse
import os
import sys

import numpy as np
import torch

from . import analysis
from .codec import decode_image, encode_image, read_bitstream, write_bitstream
from .data import list_images, load_image, save_image
from .errors import (BitstreamError, CodingError, ConfigError, TrainingError)
from .training import load_config, make_ablation_suite, train
from .transforms import load_checkpoint

EXIT_OK = 0
EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_BITSTREAM = 5
EXIT_RUNTIME = 6


def _device(args) -> str:
    return args.device or os.environ.get("DCIC_DEVICE", "cpu")


def _load_model(path, device):
    model, _ = load_checkpoint(path, device=device)
    return model


def _load_tensor(path) -> torch.Tensor:
    return torch.from_numpy(load_image(path))


# -- commands ---------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    model, records = train(cfg, args.data, args.out, report_path=args.report,
                           device=_device(args), quiet=False)
    final = next(r for r in reversed(records) if r["kind"] == "eval")
    print(f"saved {args.out}: loss {final['loss']:.4f} "
          f"bpp {final['bpp_total']:.4f} psnr {final['psnr']:.2f}")
    return EXIT_OK


def cmd_encode(args) -> int:
    model = _load_model(args.model, _device(args))
    x = _load_tensor(getattr(args, "in"))
    container = encode_image(x, model)
    n_bytes = write_bitstream(container, args.out)
    print(f"{args.out}: {n_bytes} bytes, {container.bpp():.4f} bpp "
          f"(+{container.header_bits} header bits)")
    return EXIT_OK


def cmd_decode(args) -> int:
    model = _load_model(args.model, _device(args))
    container = read_bitstream(getattr(args, "in"))
    x_hat = decode_image(container, model)
    save_image(x_hat, args.out)
    print(f"{args.out}: {x_hat.shape[-1]}x{x_hat.shape[-2]}")
    return EXIT_OK


def _eval_records(model, data_dir):
    records = []
    for path in list_images(data_dir):
        x = _load_tensor(path)
        container, x_hat = encode_image(x, model, return_reconstruction=True)
        psnr = analysis.psnr(x, x_hat)
        msv = analysis.ms_ssim(x, x_hat)
        records.append((path.name, container.bpp(), psnr, msv))
    return records


def cmd_eval(args) -> int:
    model = _load_model(args.model, _device(args))
    records = _eval_records(model, args.data)
    mean = ("mean",
            float(np.mean([r[1] for r in records])),
            float(np.mean([r[2] for r in records])),
            float(np.mean([r[3] for r in records])))
    analysis.write_rd_file(args.out, records + [mean])
    for label, bpp, psnr, msv in records + [mean]:
        print(f"{label:24s} {bpp:8.4f} bpp  {psnr:7.3f} dB  ms-ssim {msv:.5f}")
    return EXIT_OK


def cmd_bdrate(args) -> int:
    anchor = analysis.curve_from_records(
        analysis.read_rd_file(args.anchor), label="anchor")
    test = analysis.curve_from_records(
        analysis.read_rd_file(args.test), label="test")
    value = analysis.bd_rate(anchor, test, metric=args.metric,
                             piecewise=args.piecewise)
    print(f"BD-rate ({args.metric}): {value:+.3f}%")
    return EXIT_OK


@torch.no_grad()
def _energy_report(model, data_dir, device, top: int = 8):
    from .codec import pad_image
    from .quantizer import QuantMode

    sums = {}
    count = 0
    for path in list_images(data_dir):
        x, _ = pad_image(_load_tensor(path).to(device))
        out = model(x.unsqueeze(0), QuantMode.ROUND)
        count += 1
        for name in ("s_hat", "y_hat"):
            latent = out["latents"][name]
            if latent is None:
                continue
            e = (latent[0] ** 2).mean(dim=(1, 2)).cpu().numpy()
            sums[name] = sums.get(name, 0.0) + e
    for name, total in sums.items():
        mean = total / count
        order = np.argsort(-mean)
        print(f"latent {name}: {mean.size} channels, "
              f"mean energy {mean.mean():.5f}")
        for rank in range(min(top, mean.size)):
            ch = order[rank]
            print(f"  #{rank + 1:2d} channel {ch:3d}  energy {mean[ch]:.5f}")


def _alloc_report(model, data_dir):
    reports = []
    for path in list_images(data_dir):
        container = encode_image(_load_tensor(path), model)
        rep = analysis.bit_allocation(container)
        reports.append(rep)
        fr = rep.fractions
        print(f"{path.name:24s} " +
              "  ".join(f"{n}={fr[n]:.4f}" for n in analysis.SEGMENT_NAMES))
    agg = analysis.aggregate_allocation(reports)
    fr = agg.fractions
    print(f"{'aggregate':24s} " +
          "  ".join(f"{n}={fr[n]:.4f}" for n in analysis.SEGMENT_NAMES))
    prior_share = fr["z_s"] + fr["s"]
    detail_share = fr["z_y"] + fr["y"]
    print(f"prior share (z_s+s) {prior_share:.4f} vs "
          f"detail share (z_y+y) {detail_share:.4f}")


def cmd_analyze(args) -> int:
    device = _device(args)
    model = _load_model(args.model, device)
    if args.report == "energy":
        _energy_report(model, args.data, device)
    else:
        _alloc_report(model, args.data)
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = load_config(args.config)
    os.makedirs(args.out_dir, exist_ok=True)
    device = _device(args)
    rows = []
    for cfg in make_ablation_suite(base):
        ckpt = os.path.join(args.out_dir, f"{cfg.label}.npz")
        report = os.path.join(args.out_dir, f"{cfg.label}.jsonl")
        print(f"training {cfg.label} ({cfg.steps} steps)...", flush=True)
        _, records = train(cfg, args.data, ckpt, report_path=report,
                           device=device)
        final = next(r for r in reversed(records) if r["kind"] == "eval")
        rows.append((cfg.label, final["loss"], final["bpp_total"], final["psnr"]))
    print(f"{'variant':28s} {'loss':>10s} {'bpp':>8s} {'psnr':>8s}")
    for label, loss, bpp, psnr in rows:
        print(f"{label:28s} {loss:10.4f} {bpp:8.4f} {psnr:8.2f}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcic",
        description="structure-prior conditioned image codec: train, code, evaluate")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--device", default=None,
                       help="compute device (default: $DCIC_DEVICE or cpu)")
        return p

    p = add("train", cmd_train, "train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="folder of PNG/PPM images")
    p.add_argument("--out", required=True, help="output checkpoint (.npz)")
    p.add_argument("--report", default=None, help="JSONL training report")

    p = add("encode", cmd_encode, "compress an image to a .dcic bitstream")
    p.add_argument("--model", required=True)
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)

    p = add("decode", cmd_decode, "decompress a .dcic bitstream")
    p.add_argument("--model", required=True)
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "rate/quality per image + mean, written as an R-D file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = add("bdrate", cmd_bdrate, "BD-rate between two R-D files")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--metric", choices=("psnr", "ms_ssim"), default="psnr")
    p.add_argument("--piecewise", action="store_true",
                   help="pchip interpolation instead of the cubic fit")

    p = add("analyze", cmd_analyze, "latent energy or bit-allocation report")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", choices=("energy", "alloc"), required=True)

    p = add("ablate", cmd_ablate, "train the conditioning ablation suite")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"error: bad configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BitstreamError as exc:
        print(f"error: bitstream: {exc}", file=sys.stderr)
        return EXIT_BITSTREAM
    except (TrainingError, CodingError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
