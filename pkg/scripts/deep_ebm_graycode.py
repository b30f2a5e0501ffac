"""Deep EBM on a Gray-code discretised 2D density (small scale)."""
import argparse
import json

import numpy as np

from dnfs import ebm
from dnfs.targets import DENSITIES, GrayCode2DTarget


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--density", choices=DENSITIES, default="8gaussians")
    ap.add_argument("--data-size", type=int, default=2000)
    ap.add_argument("--ebm-steps", type=int, default=100)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    target = GrayCode2DTarget(args.density)
    data = target.sample_data(args.data_size, rng)
    held = target.sample_data(args.data_size // 4, rng)
    cfg = ebm.EBMTrainConfig(ebm_steps=args.ebm_steps, lr=args.lr, seed=args.seed)
    res = ebm.train_deep_ebm(data, cfg, held_out=held,
                             callback=lambda r: print(json.dumps(r)) if r["step"] % 20 == 0 else None)
    print(json.dumps(res.history[-1], indent=2))


if __name__ == "__main__":
    main()
