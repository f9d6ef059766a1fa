"""Train the full, no-skeleton and no-temporal/global VAE variants on the toy benchmark.

Prints per-rig relative reconstruction error on the 8 held-out rigs.
"""
import argparse
import json

import numpy as np

from mesh4d.config import VaeConfig
from mesh4d.experiments import VARIANTS, run_vae_ablation
from mesh4d.synth import make_benchmark
from mesh4d.vae_train import set_determinism


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-rigs", type=int, default=64)
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    p.add_argument("--out")
    args = p.parse_args()

    set_determinism()
    bench = make_benchmark(args.train_rigs, 8)
    cfg = VaeConfig.toy(lr_decay_steps=args.steps)
    res = run_vae_ablation(bench, cfg, args.steps, args.seed, args.variants)
    ids = [s.identifier for s in bench.test]
    print("rig        " + "  ".join(f"{v:>18}" for v in args.variants))
    for i, rig in enumerate(ids):
        print(f"{rig:<10} " + "  ".join(f"{100 * res.errors[v][i]:17.2f}%" for v in args.variants))
    print("mean       " + "  ".join(f"{100 * res.mean(v):17.2f}%" for v in args.variants))
    if "full" in args.variants and "no_skeleton" in args.variants:
        print(f"full <= no_skeleton on {res.wins('full', 'no_skeleton')}/8 rigs")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"steps": args.steps, "rigs": ids, "errors": res.errors}, fh, indent=2)


if __name__ == "__main__":
    main()
