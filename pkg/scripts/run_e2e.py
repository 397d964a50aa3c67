#!/usr/bin/env python3
"""End-to-end desk-scale run: generate phantoms, fine-tune the diffusion
segmenter with the default config, and score the test split.

Mirrors what `dts gen-data` + `dts train` + `dts eval` do, but in one process
so the trained model never has to round-trip through disk.
"""

import argparse
import time
from dataclasses import replace

from dts.data import PhantomConfig, gen_phantom
from dts.diffusion import build_schedule
from dts.network import ModelConfig
from dts.train import TrainConfig, evaluate_model, train


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=250)
    ap.add_argument("--data-seed", type=int, default=7)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--steps", type=int, default=50,
                    help="reverse-diffusion steps at evaluation")
    ap.add_argument("--out", default="runs/e2e")
    args = ap.parse_args()

    samples = gen_phantom(PhantomConfig(), args.n, args.data_seed)
    n_train = int(round(0.8 * args.n))
    train_s, test_s = samples[:n_train], samples[n_train:]

    cfg = TrainConfig(seed=args.seed)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)

    t0 = time.time()
    model, log_path, ckpt = train(train_s, ModelConfig(), cfg, args.out)
    t1 = time.time()
    print(f"trained {cfg.epochs} epochs in {(t1 - t0) / 60:.1f} min")
    print(f"checkpoint: {ckpt}")
    print(f"run log: {log_path}")

    report = evaluate_model(model, test_s, build_schedule(cfg.diffusion_steps),
                            PhantomConfig().num_classes, steps=args.steps,
                            seed=cfg.seed)
    t2 = time.time()
    print(f"evaluated {len(test_s)} images in {(t2 - t1) / 60:.1f} min")
    print(f"mean foreground dice: {report.mean_dice:.4f}")
    print(f"dice per class: {[round(d, 4) for d in report.dice_per_class]}")
    hd = report.mean_hd
    print(f"mean foreground hausdorff: "
          f"{hd if hd is None else round(hd, 3)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
