"""Amortised MIS on small ER graphs: untrained vs trained vs trained with refinement."""
import argparse
import json

import numpy as np

from dnfs import combopt as co
from dnfs.lenet import NetworkConfig, build_network
from dnfs.train import TrainConfig


def evaluate(net, graphs, opt, refine, seed):
    cfg = co.CombOptConfig(kind="mis", K=32, batch=128, refine_steps=refine)
    res = [co.solve(cfg, g, net, np.random.default_rng(seed)) for g in graphs]
    return {"mean_size": float(np.mean([r["mean_objective"] for r in res])),
            "mean_ratio": float(np.mean([r["mean_objective"] / o for r, o in zip(res, opt)])),
            "best_ratio": float(np.mean([r["objective"] / o for r, o in zip(res, opt)]))}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--num-graphs", type=int, default=20)
    ap.add_argument("--n-min", type=int, default=16)
    ap.add_argument("--n-max", type=int, default=20)
    ap.add_argument("--p", type=float, default=0.25)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    graphs = [co.make_er_graph((args.n_min, args.n_max), args.p, rng) for _ in range(args.num_graphs)]
    opt = [co.exact_mis(g) for g in graphs]
    net = build_network(NetworkConfig(variant="leGF", d=args.n_max, max_d=args.n_max, hidden=32, layers=2,
                                      heads=2))
    report = {"untrained": evaluate(net, graphs, opt, 0, args.seed + 1)}
    tcfg = TrainConfig(K=32, outer_batch=32, inner_batch=64, inner_steps=10, epochs=args.epochs, seed=args.seed)
    co.train_amortised(co.CombOptConfig(kind="mis"), graphs, net, tcfg,
                       callback=lambda r: print(json.dumps(r), flush=True) if r["epoch"] % 20 == 0 else None)
    report["trained"] = evaluate(net, graphs, opt, 0, args.seed + 1)
    report["trained_refine3"] = evaluate(net, graphs, opt, 3, args.seed + 1)
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
