"""Learn the couplings of a lattice Ising model from Gibbs samples."""
import argparse
import json

import numpy as np

from dnfs import ebm
from dnfs.mcmc import gibbs_chain
from dnfs.targets import make_ising


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--grid", type=int, default=4)
    ap.add_argument("--sigma", type=float, default=0.1)
    ap.add_argument("--ebm-steps", type=int, default=100)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="optional CSV for the learned J")
    args = ap.parse_args()

    truth = make_ising(args.grid, args.sigma)
    data = gibbs_chain(truth, 200, 20, np.random.default_rng(args.seed), burn_in=50, thin=2)
    cfg = ebm.EBMTrainConfig(ebm_steps=args.ebm_steps, lr=args.lr, K=16, num_samples=128, batch=256,
                             seed=args.seed)
    res = ebm.train_ising_ebm(data, cfg, J_true=truth.J,
                              callback=lambda r: print(json.dumps(r)) if r["step"] % 20 == 0 else None)
    if args.out:
        ebm.write_matrix_csv(args.out, res.model.J)
    print(json.dumps(res.history[-1], indent=2))


if __name__ == "__main__":
    main()
