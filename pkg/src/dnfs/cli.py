"""``dnfs`` command-line entry point.

Subcommands: train, sample, eval, combopt, ebm, oracle.  Options may also be
given in a JSON file (``--config``); explicit flags override file values,
which override the built-in defaults.  Exit codes: 0 success, 1 runtime
failure, 2 usage error; failures print an error JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import combopt as co
from . import ctmc, ebm, infer, mcmc, oracle
from .lenet import NetworkConfig, build_network
from .path import AnnealedPath
from .targets import GrayCode2DTarget, QuadraticBinaryTarget, make_ising, target_from_json
from .tensor import load_checkpoint, save_checkpoint
from .train import TrainConfig, train_loop


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


TARGET_DEFAULTS = {"target": "ising", "grid": 4, "sigma": 0.1, "density": "2spirals",
                   "target_file": None, "graphs": None, "instance": 0, "inv_temp": 1.0,
                   "schedule": "linear", "clip": 5.0}
NET_DEFAULTS = {"variant": "leTF", "hidden": 64, "layers": 2, "heads": 2}

DEFAULTS = {
    "train": {**TARGET_DEFAULTS, **NET_DEFAULTS, "steps": 32, "epochs": 200, "outer_batch": 64,
              "inner_batch": 64, "inner_steps": 20, "lr": 1e-3, "weight_decay": 0.01,
              "seed": 0, "out": "run"},
    "sample": {"ckpt": None, "num": 1000, "seed": 0, "out": None, "trajectories": None,
               "refine_steps": 0},
    "eval": {"ckpt": None, "num": 512, "seed": 0, "exact": False, "nll_data": None, "out": None},
    "combopt": {**NET_DEFAULTS, "variant": "leGF", "hidden": 32, "problem": "mis", "graphs": None,
                "num_graphs": 20, "n_min": 16, "n_max": 20, "p": 0.25, "epochs": 0, "steps": 32,
                "batch": 128, "refine_steps": 0, "outer_batch": 32, "inner_batch": 64,
                "inner_steps": 10, "lr": 1e-3, "seed": 0, "out": "combopt_run"},
    "ebm": {"task": "ising", "grid": 4, "sigma": 0.1, "density": "2spirals", "data_size": 2000,
            "ebm_steps": 100, "lr": 0.01, "steps": 16, "num_samples": 128, "batch": 256,
            "seed": 0, "out": "ebm_run"},
    "oracle": {**TARGET_DEFAULTS, "grid": 3, "t": 1.0, "sample": 0, "seed": 0},
}


def _add_target_flags(p):
    p.add_argument("--target", choices=["ising", "graycode", "quadratic", "mis", "maxcut"])
    p.add_argument("--grid", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--density")
    p.add_argument("--target-file", dest="target_file")
    p.add_argument("--graphs")
    p.add_argument("--instance", type=int)
    p.add_argument("--inv-temp", dest="inv_temp", type=float)
    p.add_argument("--schedule", choices=["linear", "cosine"])
    p.add_argument("--clip", type=float)


def _add_net_flags(p):
    p.add_argument("--variant", choices=["leMLP", "leAttn", "leTF", "leGF"])
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dnfs", description="Discrete neural flow samplers",
                     argument_default=argparse.SUPPRESS, allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a sampler", argument_default=argparse.SUPPRESS)
    _add_target_flags(p)
    _add_net_flags(p)
    for name, typ in [("steps", int), ("epochs", int), ("outer-batch", int), ("inner-batch", int),
                      ("inner-steps", int), ("lr", float), ("weight-decay", float), ("seed", int)]:
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=typ)
    p.add_argument("--out")

    p = sub.add_parser("sample", help="draw samples from a checkpoint", argument_default=argparse.SUPPRESS)
    p.add_argument("--ckpt")
    p.add_argument("--num", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--trajectories")
    p.add_argument("--refine-steps", dest="refine_steps", type=int)

    p = sub.add_parser("eval", help="ESS and log Z of a checkpoint", argument_default=argparse.SUPPRESS)
    p.add_argument("--ckpt")
    p.add_argument("--num", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--exact", action="store_true")
    p.add_argument("--nll-data", dest="nll_data")
    p.add_argument("--out")

    p = sub.add_parser("combopt", help="MIS / MaxCut", argument_default=argparse.SUPPRESS)
    _add_net_flags(p)
    p.add_argument("--problem", choices=["mis", "maxcut"])
    p.add_argument("--graphs")
    for name, typ in [("num-graphs", int), ("n-min", int), ("n-max", int), ("p", float),
                      ("epochs", int), ("steps", int), ("batch", int), ("refine-steps", int),
                      ("outer-batch", int), ("inner-batch", int), ("inner-steps", int),
                      ("lr", float), ("seed", int)]:
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=typ)
    p.add_argument("--out")

    p = sub.add_parser("ebm", help="train an energy-based model", argument_default=argparse.SUPPRESS)
    p.add_argument("--task", choices=["ising", "graycode"])
    for name, typ in [("grid", int), ("sigma", float), ("data-size", int), ("ebm-steps", int),
                      ("lr", float), ("steps", int), ("num-samples", int), ("batch", int), ("seed", int)]:
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=typ)
    p.add_argument("--density")
    p.add_argument("--out")

    p = sub.add_parser("oracle", help="exact enumeration utilities", argument_default=argparse.SUPPRESS)
    _add_target_flags(p)
    p.add_argument("--t", type=float)
    p.add_argument("--sample", type=int)
    p.add_argument("--seed", type=int)

    for sp in sub.choices.values():
        sp.add_argument("--config", help="JSON file of option values")
    return parser


def resolve(argv) -> dict:
    ns = vars(build_parser().parse_args(argv))
    cmd = ns.pop("command")
    cfg = dict(DEFAULTS[cmd])
    cfg_file = ns.pop("config", None)
    if cfg_file is not None:
        try:
            with open(cfg_file) as fh:
                extra = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {cfg_file}: {exc}") from None
        if not isinstance(extra, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(extra) - set(cfg) - {"command"})
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
        extra.pop("command", None)
        cfg.update(extra)
    cfg.update(ns)
    cfg["command"] = cmd
    return cfg


# ------------------------------------------------------------------ targets

def build_target(cfg: dict):
    kind = cfg["target"]
    if kind == "ising":
        return make_ising(int(cfg["grid"]), float(cfg["sigma"]))
    if kind == "graycode":
        return GrayCode2DTarget(cfg["density"])
    if kind == "quadratic":
        if not cfg.get("target_file"):
            raise UsageError("--target quadratic needs --target-file")
        with open(cfg["target_file"]) as fh:
            return target_from_json({"kind": "quadratic", **json.load(fh)})
    if kind in ("mis", "maxcut"):
        if not cfg.get("graphs"):
            raise UsageError(f"--target {kind} needs --graphs")
        g = co.read_graphs(cfg["graphs"])[int(cfg["instance"])]
        if kind == "mis":
            return co.mis_target(g, invT=float(cfg["inv_temp"]))
        return co.maxcut_target(g, invT=float(cfg["inv_temp"]))
    raise UsageError(f"unknown target {kind!r}")


def build_path(cfg: dict) -> AnnealedPath:
    return AnnealedPath(build_target(cfg), schedule=cfg["schedule"], clip=cfg["clip"])


def _path_from_json(obj: dict) -> AnnealedPath:
    return AnnealedPath(target_from_json(obj["target"]), schedule=obj["schedule"], clip=obj["clip"])


def _write_json(fname: str, obj) -> None:
    with open(fname, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_metrics(fname: str, rows: list[dict], cols: list[str]) -> None:
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


def load_run(ckpt: str):
    if not ckpt or not os.path.exists(os.path.join(ckpt, "manifest.json")):
        raise UsageError(f"missing checkpoint: {ckpt}")
    params, meta = load_checkpoint(ckpt)
    net = build_network(NetworkConfig(**meta["network"]), params)
    return net, _path_from_json(meta["path"]), meta


# ------------------------------------------------------------------ commands

def cmd_train(cfg: dict) -> dict:
    path = build_path(cfg)
    netcfg = NetworkConfig(variant=cfg["variant"], d=path.d, S=path.S, hidden=cfg["hidden"],
                           layers=cfg["layers"], heads=cfg["heads"], seed=cfg["seed"])
    if netcfg.variant == "leGF":
        raise UsageError("leGF is trained through the combopt subcommand")
    net = build_network(netcfg)
    tcfg = TrainConfig(K=cfg["steps"], outer_batch=cfg["outer_batch"], inner_batch=cfg["inner_batch"],
                       inner_steps=cfg["inner_steps"], epochs=cfg["epochs"], lr=cfg["lr"],
                       weight_decay=cfg["weight_decay"], seed=cfg["seed"])
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "config.json"), cfg)
    meta = {"network": netcfg.to_json(), "path": path.to_json(), "train": tcfg.to_json()}
    ckdir = os.path.join(out, "ckpt")
    metrics = os.path.join(out, "metrics.csv")
    cols = ["epoch", "loss", "mean_abs_ct", "ess"]

    def checkpoint(model, hist):
        save_checkpoint(model.params, ckdir, meta)
        _write_metrics(metrics, hist.epochs, cols)

    hist = train_loop(path, net, tcfg, checkpoint=checkpoint)
    return {"run": out, "epochs": len(hist.epochs),
            "initial_loss": hist.initial_loss if hist.step_loss else None,
            "final_loss": hist.final_loss if hist.epochs else None}


def _refiner(path, steps):
    if steps <= 0:
        return None
    return lambda t, X, g: mcmc.mh_refine(path, t, X, steps, g)


def cmd_sample(cfg: dict) -> dict:
    net, path, meta = load_run(cfg["ckpt"])
    K = meta["train"]["K"]
    rng = np.random.default_rng(cfg["seed"])
    batch = ctmc.simulate_batch(net, path, K, cfg["num"], rng, refine=_refiner(path, cfg["refine_steps"]))
    out = cfg["out"] or os.path.join(os.path.dirname(os.path.abspath(cfg["ckpt"])), "samples.csv")
    ctmc.write_samples_csv(out, batch.final)
    wfile = os.path.splitext(out)[0] + "_weights.csv"
    with open(wfile, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["log_weight"])
        for v in batch.w:
            w.writerow([repr(float(v))])
    if cfg["trajectories"]:
        ctmc.write_trajectories_jsonl(cfg["trajectories"], batch.trajectories())
    return {"samples": out, "weights": wfile, "count": int(len(batch)), "ess": infer.ess(batch.w)}


def cmd_eval(cfg: dict) -> dict:
    net, path, meta = load_run(cfg["ckpt"])
    K = meta["train"]["K"]
    rng = np.random.default_rng(cfg["seed"])
    batch = ctmc.simulate_batch(net, path, K, cfg["num"], rng)
    rep = {"ess": infer.ess(batch.w), "log_z_estimate": infer.estimate_log_z(batch, path.log_z0),
           "log_z_lower_bound": infer.log_z_lower_bound(batch, path)}
    if cfg["exact"]:
        if path.S ** path.d > oracle.MAX_STATES:
            raise RuntimeError("state space too large to enumerate")
        rep["log_z_exact"] = oracle.enumerate_log_z(path, 1.0)
    if cfg["nll_data"]:
        data, _ = ctmc.read_samples_csv(cfg["nll_data"])
        rep["nll"] = infer.elbo_nll(net, path, data, K, np.random.default_rng(cfg["seed"] + 1))
    out = cfg["out"] or os.path.join(os.path.dirname(os.path.abspath(cfg["ckpt"])), "eval.json")
    _write_json(out, rep)
    return rep


def cmd_combopt(cfg: dict) -> dict:
    rng = np.random.default_rng(cfg["seed"])
    if cfg["graphs"]:
        graphs = co.read_graphs(cfg["graphs"])
    else:
        graphs = [co.make_er_graph((cfg["n_min"], cfg["n_max"]), cfg["p"], rng)
                  for _ in range(cfg["num_graphs"])]
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "config.json"), cfg)
    co.write_graphs(os.path.join(out, "graphs.jsonl"), graphs)
    ccfg = co.CombOptConfig(kind=cfg["problem"], K=cfg["steps"], batch=cfg["batch"],
                            refine_steps=cfg["refine_steps"])
    dmax = max(g.n for g in graphs)
    netcfg = NetworkConfig(variant=cfg["variant"], d=dmax, S=2, hidden=cfg["hidden"],
                           layers=cfg["layers"], heads=cfg["heads"], max_d=dmax, seed=cfg["seed"])
    if netcfg.variant != "leGF" and len({g.n for g in graphs}) > 1:
        raise UsageError("only leGF handles graphs of different sizes")
    net = build_network(netcfg)
    tcfg = TrainConfig(K=cfg["steps"], outer_batch=cfg["outer_batch"], inner_batch=cfg["inner_batch"],
                       inner_steps=cfg["inner_steps"], epochs=cfg["epochs"], lr=cfg["lr"], seed=cfg["seed"])
    rows = co.train_amortised(ccfg, graphs, net, tcfg, rng=np.random.default_rng(cfg["seed"] + 1))
    _write_metrics(os.path.join(out, "metrics.csv"), rows, ["epoch", "invT", "loss", "mean_objective"])
    save_checkpoint(net.params, os.path.join(out, "ckpt"), {"network": netcfg.to_json()})
    results = []
    eval_rng = np.random.default_rng(cfg["seed"] + 2)
    for n, g in enumerate(graphs):
        res = co.solve(ccfg, g, net, eval_rng)
        oracle_val = co.exact_mis(g) if ccfg.kind == "mis" else co.exact_maxcut(g) if g.n <= 22 else None
        drop = None if not oracle_val else 1.0 - res["objective"] / oracle_val
        results.append({"instance": n, "objective": res["objective"], "oracle": oracle_val,
                        "drop": drop, "seconds": res["wallclock"]})
    co.write_results_csv(os.path.join(out, "results.csv"), results)
    ratio = [1.0 - r["drop"] for r in results if r["drop"] is not None]
    return {"run": out, "instances": len(graphs),
            "mean_objective": float(np.mean([r["objective"] for r in results])),
            "mean_ratio": float(np.mean(ratio)) if ratio else None}


def cmd_ebm(cfg: dict) -> dict:
    rng = np.random.default_rng(cfg["seed"])
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "config.json"), cfg)
    ecfg = ebm.EBMTrainConfig(ebm_steps=cfg["ebm_steps"], lr=cfg["lr"], K=cfg["steps"],
                              num_samples=cfg["num_samples"], batch=cfg["batch"], seed=cfg["seed"])
    if cfg["task"] == "ising":
        truth = make_ising(cfg["grid"], cfg["sigma"])
        sweeps = max(1, cfg["data_size"] // 200)
        data = mcmc.gibbs_chain(truth, 200, sweeps, rng, burn_in=50)[: cfg["data_size"]]
        res = ebm.train_ising_ebm(data, ecfg, J_true=truth.J)
        ebm.write_matrix_csv(os.path.join(out, "J.csv"), res.model.J)
        summary = res.history.pop()
    else:
        target = GrayCode2DTarget(cfg["density"])
        data = target.sample_data(cfg["data_size"], rng)
        held = target.sample_data(max(1, cfg["data_size"] // 4), rng)
        res = ebm.train_deep_ebm(data, ecfg, held_out=held)
        summary = res.history.pop()
    _write_metrics(os.path.join(out, "metrics.csv"), res.history, ["step", "sampler_loss", "ess", "log_z"])
    save_checkpoint(res.model.params, os.path.join(out, "ebm_ckpt"), {"task": cfg["task"]})
    return {"run": out, **summary}


def cmd_oracle(cfg: dict) -> dict:
    path = build_path(cfg)
    en = oracle.ExactEnumeration(path)
    t = float(cfg["t"])
    rep = {"d": path.d, "S": path.S, "t": t, "log_z": en.log_z(t), "dt_log_z": en.dt_log_z(t)}
    if cfg["sample"]:
        X = en.sample(t, cfg["sample"], np.random.default_rng(cfg["seed"]))
        rep["samples"] = X.tolist()
    return rep


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "combopt": cmd_combopt, "ebm": cmd_ebm, "oracle": cmd_oracle}


def run(argv) -> int:
    try:
        cfg = resolve(argv)
        rep = COMMANDS[cfg["command"]](cfg)
    except UsageError as exc:
        print(json.dumps({"error": str(exc), "kind": "usage"}), file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures are reported, not raised
        print(json.dumps({"error": str(exc), "kind": type(exc).__name__}), file=sys.stderr)
        return 1
    print(json.dumps(rep, sort_keys=True, default=float))
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
