"""Overfit the toy VAE on four synthetic sequences and report reconstruction error."""
import argparse
import json
import time

import numpy as np

from mesh4d.config import VaeConfig
from mesh4d.synth import evaluation_window, make_sample
from mesh4d.vae_train import reconstruction_error, set_determinism, train_vae


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write a JSON summary here")
    args = p.parse_args()

    set_determinism()
    cfg = VaeConfig.toy(lr=args.lr, lr_decay_steps=args.steps)
    data = [evaluation_window(make_sample(s), cfg.T, 0) for s in (1000, 1001, 1002, 1003)]
    t0 = time.time()

    def report(entry):
        if entry["step"] % 250 == 0:
            print(f"step {entry['step']:5d}  loss {entry['loss']:.5f}  kl {entry['kl']:.3f}", flush=True)

    state = train_vae(data, cfg, args.steps, args.seed, callback=report)
    rel = [reconstruction_error(state.model, w)["relative"] for w in data]
    summary = {"steps": args.steps, "minutes": (time.time() - t0) / 60, "relative_errors": rel,
               "mean_relative_error": float(np.mean(rel))}
    print(json.dumps(summary, indent=2))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(summary, fh, indent=2)


if __name__ == "__main__":
    main()
