"""Long-horizon R-D comparison protocol shared by the acceptance tests.

Defines the 21 training runs (full model, flag-matched baseline, and the
unconditioned-transforms variant over the lambda grid and seed set) and a
resumable runner that caches one summary JSON per run.  The tests read the
cache; running this file as a script (optionally in the background) fills
it:

    python3 tests/acceptance_protocol.py [--runs-dir runs/acceptance]

Already-summarized runs are skipped, so the runner can be interrupted and
restarted freely.
"""

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

# primed before torch.set_flush_denormal so numpy's cached float limits are
# computed with denormals still enabled
np.finfo(np.float32).smallest_subnormal
np.finfo(np.float64).smallest_subnormal

import torch

from dcic.data import CropBank, make_corpus
from dcic.entropy_models import rate_bits
from dcic.quantizer import QuantMode
from dcic.training import RATE_TERMS, TrainConfig, train
from dcic.transforms import ConditioningFlags

LAMBDA_GRID = (0.003, 0.01, 0.05)
SEEDS = (0, 1, 2)
STEPS = 20000
CROPS = 500
BATCH_SIZE = 4

VARIANTS = {
    "full": ConditioningFlags(),
    "baseline": ConditioningFlags.baseline(),
    "wo_conditional_transforms": ConditioningFlags(condition_ga=False,
                                                   condition_gs=False),
}

DEFAULT_RUNS_DIR = Path(__file__).resolve().parent.parent / "runs" / "acceptance"
DEFAULT_CORPUS_DIR = Path(__file__).resolve().parent.parent / "runs" / "corpus"
CORPUS_IMAGES = 40
CORPUS_SIZE = 256
CORPUS_SEED = 1234


def run_id(variant: str, lambda_value: float, seed: int) -> str:
    return f"{variant}_lam{lambda_value:g}_seed{seed}"


def protocol_runs():
    """(variant, lambda, seed) triples, cheapest/most informative first: one
    full sweep at seed 0 to expose the directional result early, then the
    remaining seeds."""
    runs = []
    for seed in SEEDS:
        for lam in (0.01, 0.003, 0.05):
            runs.append(("baseline", lam, seed))
            runs.append(("full", lam, seed))
            if lam == 0.01:
                runs.append(("wo_conditional_transforms", lam, seed))
    return runs


def config_for(variant: str, lambda_value: float, seed: int) -> TrainConfig:
    return TrainConfig(
        lambda_value=lambda_value,
        flags=VARIANTS[variant],
        steps=STEPS,
        batch_size=BATCH_SIZE,
        seed=seed,
        corpus_size=CROPS,
        eval_every=2000,
        log_every=500,
        label=run_id(variant, lambda_value, seed),
    )


def ensure_corpus(corpus_dir=DEFAULT_CORPUS_DIR):
    corpus_dir = Path(corpus_dir)
    if len(list(corpus_dir.glob("*.png"))) < CORPUS_IMAGES:
        make_corpus(corpus_dir, CORPUS_IMAGES, CORPUS_SIZE, CORPUS_SIZE,
                    CORPUS_SEED)
    return corpus_dir


def summary_path(runs_dir, variant, lambda_value, seed) -> Path:
    return Path(runs_dir) / f"{run_id(variant, lambda_value, seed)}.json"


def checkpoint_path(runs_dir, variant, lambda_value, seed) -> Path:
    return Path(runs_dir) / f"{run_id(variant, lambda_value, seed)}.npz"


def load_summary(runs_dir, variant, lambda_value, seed):
    """The cached summary dict for one run, or None if it has not finished."""
    path = summary_path(runs_dir, variant, lambda_value, seed)
    if not path.exists():
        return None
    with open(path) as fh:
        summary = json.load(fh)
    if summary.get("steps") != STEPS:
        return None
    return summary


@torch.no_grad()
def _noise_bpp(model, crops, cfg, chunk_size: int = 16) -> float:
    """Training-proxy (NOISE + ste) estimated bpp over the eval crops,
    mirroring evaluate()'s chunking; compared against the ROUND-mode bpp to
    monitor the training module's proxy-consistency band (< 15% gap)."""
    model.eval()
    rng = torch.Generator().manual_seed(cfg.seed + 3)
    bits = 0.0
    pixels = 0
    for chunk in torch.split(crops, chunk_size):
        out = model(chunk, QuantMode.NOISE, rng, ste=True)
        pixels += chunk.size(0) * chunk.size(2) * chunk.size(3)
        bits += sum(float(rate_bits(out["likelihoods"][name]))
                    for name in RATE_TERMS
                    if out["likelihoods"][name] is not None)
    return bits / pixels


def execute_run(variant, lambda_value, seed, runs_dir, corpus_dir) -> dict:
    """Train one protocol run and write its summary JSON (atomic)."""
    runs_dir = Path(runs_dir)
    runs_dir.mkdir(parents=True, exist_ok=True)
    cfg = config_for(variant, lambda_value, seed)
    ckpt = checkpoint_path(runs_dir, variant, lambda_value, seed)
    report = ckpt.with_suffix(".jsonl")
    if report.exists():
        report.unlink()
    start = time.time()
    model, records = train(cfg, corpus_dir, ckpt, report)
    final_eval = next(r for r in reversed(records) if r["kind"] == "eval")
    eval_bank = CropBank.from_folder(corpus_dir, cfg.eval_crops,
                                     cfg.crop_size, cfg.seed + 7919)
    noise_bpp = _noise_bpp(model, eval_bank.crops, cfg)
    round_bpp = final_eval["bpp_total"]
    # With straight-through rounding the decoder-visible path (and hence the
    # distortion) is identical under both modes, so the proxy's honesty is a
    # question about the rate term.  Two views of the same discrepancy: the
    # raw relative rate gap, and the gap measured at the R-D objective where
    # the two rates are weighed the way training actually weighs them.  At
    # very low per-element rates the raw relative gap diverges (bounded
    # absolute smear over a vanishing round rate) while the objective-level
    # gap stays scale-coherent across the lambda grid.
    noise_loss = noise_bpp + lambda_value * final_eval["distortion"]
    round_loss = final_eval["loss"]
    summary = {
        "run_id": cfg.label,
        "variant": variant,
        "lambda": lambda_value,
        "seed": seed,
        "steps": cfg.steps,
        "batch_size": cfg.batch_size,
        "final_eval": final_eval,
        "proxy": {
            "noise_bpp": round(noise_bpp, 6),
            "round_bpp": round(round_bpp, 6),
            "gap": round(abs(noise_bpp - round_bpp) / max(round_bpp, 1e-12), 6),
            "loss_gap": round(abs(noise_loss - round_loss) /
                              max(round_loss, 1e-12), 6),
        },
        "wall_seconds": round(time.time() - start, 1),
    }
    path = summary_path(runs_dir, variant, lambda_value, seed)
    tmp = path.with_suffix(".json.tmp")
    with open(tmp, "w") as fh:
        json.dump(summary, fh, indent=1)
    os.replace(tmp, path)
    return summary


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--runs-dir", default=str(DEFAULT_RUNS_DIR))
    parser.add_argument("--corpus-dir", default=str(DEFAULT_CORPUS_DIR))
    args = parser.parse_args(argv)

    torch.set_num_threads(1)
    torch.set_flush_denormal(True)
    corpus_dir = ensure_corpus(args.corpus_dir)
    runs = protocol_runs()
    for i, (variant, lam, seed) in enumerate(runs, 1):
        if load_summary(args.runs_dir, variant, lam, seed) is not None:
            print(f"[{i}/{len(runs)}] {run_id(variant, lam, seed)}: cached",
                  flush=True)
            continue
        print(f"[{i}/{len(runs)}] {run_id(variant, lam, seed)}: training...",
              flush=True)
        summary = execute_run(variant, lam, seed, args.runs_dir, corpus_dir)
        ev = summary["final_eval"]
        print(f"    done in {summary['wall_seconds']:.0f}s: "
              f"loss {ev['loss']:.4f} bpp {ev['bpp_total']:.4f} "
              f"psnr {ev['psnr']:.2f}", flush=True)
    print("protocol complete", flush=True)


if __name__ == "__main__":
    sys.exit(main())
