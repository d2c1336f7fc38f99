"""Command-line interface.

Every flag can also be supplied through a JSON config file (--config);
explicit flags win over config values, which win over defaults.
Environment variables are deliberately not consulted. Exit code 0 means
full success.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import bench, cpa_profile
from .decoding import solve as solve_instance
from .env import Solution, validate_solution
from .instances import GenConfig, Instance, Variant, generate, parse_cvrplib
from .model import ModelConfig, init_params, param_count
from .oracle import OracleLimits, brute_force
from .tensor import load_params, save_params
from .training import TrainConfig, train


def _merge(args: argparse.Namespace, defaults: dict) -> dict:
    """Layer CLI > config file > defaults into one option dict."""
    ns = vars(args)
    config = {}
    if ns.get("config"):
        with open(ns["config"], encoding="utf-8") as f:
            config = json.load(f)
        unknown = set(config) - set(defaults)
        if unknown:
            raise SystemExit(f"config file has unknown keys: {sorted(unknown)}")
    out = {}
    for key, default in defaults.items():
        if ns.get(key) is not None:
            out[key] = ns[key]
        elif key in config:
            out[key] = config[key]
        else:
            out[key] = default
    return out


def _model_config(preset: str, variant: Variant) -> ModelConfig:
    if preset == "toy":
        return ModelConfig(variant=variant, d=16, heads=2, layers=2, ff=64,
                           edge_dim=8)
    if preset == "full":
        return ModelConfig.full_scale(variant)
    with open(preset, encoding="utf-8") as f:
        doc = json.load(f)
    doc.setdefault("variant", variant.value)
    return ModelConfig(**doc)


def _load_checkpoint(path):
    params = load_params(path)
    meta_path = Path(str(path) + ".meta.json")
    if not meta_path.exists():
        raise SystemExit(f"missing checkpoint metadata {meta_path}")
    with open(meta_path, encoding="utf-8") as f:
        meta = json.load(f)
    return params, ModelConfig(**meta)


def _save_checkpoint(params, config: ModelConfig, path) -> None:
    save_params(params, path)
    meta = {k: getattr(config, k) for k in
            ("variant", "d", "heads", "layers", "ff", "edge_dim",
             "k_neighbors", "cluster_size", "rounds", "smoothing")}
    meta["variant"] = config.variant.value
    with open(str(path) + ".meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def _read_instance(path) -> Instance:
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        return Instance.from_json(text)
    return parse_cvrplib(text)


# -- subcommands --------------------------------------------------------

def cmd_gen(args) -> int:
    opts = _merge(args, {"variant": "VRP", "n": 20, "seed": 0, "count": 1,
                         "out": ".", "stations": 4, "stops": 5})
    out_dir = Path(opts["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    gen_cfg = GenConfig(n_stations=opts["stations"], n_stops=opts["stops"])
    for i in range(opts["count"]):
        seed = opts["seed"] + i
        inst = generate(opts["variant"], opts["n"], seed=seed, config=gen_cfg)
        name = f"{opts['variant'].lower()}_n{opts['n']}_s{seed}.json"
        (out_dir / name).write_text(inst.to_json(), encoding="utf-8")
        print(name)
    return 0


def cmd_train(args) -> int:
    opts = _merge(args, {"variant": "VRP", "n": 10, "epochs": 5, "seed": 0,
                         "out": "model.ckpt", "metrics": None,
                         "batches": 4, "batch_size": 8, "pomo": 8,
                         "lr": 1e-4, "model": "toy"})
    variant = Variant(opts["variant"])
    mc = _model_config(opts["model"], variant)
    tc = TrainConfig(n_customers=opts["n"], epochs=opts["epochs"],
                     batches_per_epoch=opts["batches"],
                     batch_size=opts["batch_size"], pomo_size=opts["pomo"],
                     lr=opts["lr"], seed=opts["seed"])
    params, _ = train(tc, mc, metrics_path=opts["metrics"])
    _save_checkpoint(params, mc, opts["out"])
    print(f"saved checkpoint to {opts['out']}")
    return 0


def cmd_solve(args) -> int:
    opts = _merge(args, {"instance": None, "checkpoint": None, "pomo": 0,
                         "augment": False, "mode": "greedy", "samples": 16,
                         "seed": 0, "out": None})
    inst = _read_instance(opts["instance"])
    params, mc = _load_checkpoint(opts["checkpoint"])
    if mc.variant != inst.variant:
        raise SystemExit(f"checkpoint is for {mc.variant.value}, "
                         f"instance is {inst.variant.value}")
    if opts["augment"]:
        policy = "pomo-aug"
    elif opts["pomo"]:
        policy = "pomo"
    elif opts["mode"] == "sample":
        policy = "sampling"
    else:
        policy = "greedy"
    sol = solve_instance(inst, params, mc, policy=policy,
                         samples=opts["samples"],
                         pomo_size=opts["pomo"] or None, seed=opts["seed"])
    text = sol.to_json(inst)
    if opts["out"]:
        Path(opts["out"]).write_text(text, encoding="utf-8")
    print(text)
    return 0


def cmd_verify(args) -> int:
    opts = _merge(args, {"instance": None, "solution": None})
    inst = _read_instance(opts["instance"])
    with open(opts["solution"], encoding="utf-8") as f:
        doc = json.load(f)
    sol = Solution(actions=list(doc["actions"]), cost=float(doc["cost"]))
    report = validate_solution(inst, sol)
    if report.ok:
        print("OK")
        return 0
    for family, idx in report.violations:
        print(f"VIOLATION {family} at {idx}")
    return 1


def cmd_oracle(args) -> int:
    opts = _merge(args, {"instance": None, "out": None,
                         "max_customers": 9, "max_optional": 3,
                         "optional_per_route": 2})
    inst = _read_instance(opts["instance"])
    limits = OracleLimits(max_customers=opts["max_customers"],
                          max_optional=opts["max_optional"],
                          optional_per_route=opts["optional_per_route"])
    res = brute_force(inst, limits)
    doc = json.dumps({"optimal_cost": res.optimal_cost,
                      "actions": [int(a) for a in res.optimal_solution.actions],
                      "nodes_expanded": res.nodes_expanded,
                      "proven": res.proven})
    if opts["out"]:
        Path(opts["out"]).write_text(doc, encoding="utf-8")
    print(doc)
    return 0


def cmd_bench(args) -> int:
    opts = _merge(args, {"dataset": None, "checkpoint": None,
                         "policy": "greedy", "reference": None,
                         "reference_file": None, "seed": 0,
                         "out": None, "omit_times": False})
    params, mc = _load_checkpoint(opts["checkpoint"])
    report = bench(opts["dataset"], params, mc, policy=opts["policy"],
                   reference=opts["reference"],
                   reference_file=opts["reference_file"], seed=opts["seed"])
    if opts["omit_times"]:
        # reproducibility mode: identical reruns give identical bytes
        for r in report.rows:
            r.wall_time = 0.0
        report.total_time = 0.0
    if opts["out"]:
        Path(str(opts["out"]) + ".csv").write_text(report.to_csv(),
                                                   encoding="utf-8")
        Path(str(opts["out"]) + ".json").write_text(report.to_json(),
                                                    encoding="utf-8")
    print(report.to_csv(), end="")
    return 0


def cmd_cpa_stats(args) -> int:
    opts = _merge(args, {"n": [50, 100, 500, 1000], "m": 20, "rounds": 1,
                         "smoothing": False, "seed": 0})
    rows = cpa_profile(opts["n"], opts["m"], opts["rounds"],
                       opts["smoothing"], seed=opts["seed"])
    print("n,dense_pairs,cpa_pairs,cpa_pairs_with_depot,reduction_pct")
    for r in rows:
        print(f"{r.n},{r.dense_pairs},{r.cpa_pairs},"
              f"{r.cpa_pairs_with_depot},{r.reduction_pct:.2f}")
    return 0


def cmd_model_info(args) -> int:
    opts = _merge(args, {"model": "full", "variant": "VRP"})
    mc = _model_config(opts["model"], Variant(opts["variant"]))
    counts = param_count(init_params(mc))
    total = counts["total"]
    for name in sorted(k for k in counts if k != "total"):
        share = 100.0 * counts[name] / total
        print(f"{name:8s} {counts[name]:>10,d}  {share:5.2f}%")
    print(f"{'total':8s} {total:>10,d}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neurovrp",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, flags):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON file mirroring the flags")
        for flag, kw in flags.items():
            sp.add_argument(flag, **kw)
        sp.set_defaults(fn=fn)

    variants = [v.value for v in Variant]
    add("gen", cmd_gen, {
        "--variant": {"choices": variants}, "--n": {"type": int},
        "--seed": {"type": int}, "--count": {"type": int},
        "--out": {}, "--stations": {"type": int}, "--stops": {"type": int}})
    add("train", cmd_train, {
        "--variant": {"choices": variants}, "--n": {"type": int},
        "--epochs": {"type": int}, "--seed": {"type": int}, "--out": {},
        "--metrics": {}, "--batches": {"type": int},
        "--batch-size": {"type": int, "dest": "batch_size"},
        "--pomo": {"type": int}, "--lr": {"type": float}, "--model": {}})
    add("solve", cmd_solve, {
        "--instance": {"required": True}, "--checkpoint": {"required": True},
        "--pomo": {"type": int}, "--augment": {"action": "store_const",
                                               "const": True},
        "--mode": {"choices": ["greedy", "sample"]},
        "--samples": {"type": int}, "--seed": {"type": int}, "--out": {}})
    add("verify", cmd_verify, {
        "--instance": {"required": True}, "--solution": {"required": True}})
    add("oracle", cmd_oracle, {
        "--instance": {"required": True}, "--out": {},
        "--max-customers": {"type": int, "dest": "max_customers"},
        "--max-optional": {"type": int, "dest": "max_optional"},
        "--optional-per-route": {"type": int, "dest": "optional_per_route"}})
    add("bench", cmd_bench, {
        "--dataset": {"required": True}, "--checkpoint": {"required": True},
        "--policy": {"choices": ["greedy", "sampling", "pomo", "pomo-aug"]},
        "--reference": {"choices": ["oracle", "file"]},
        "--reference-file": {"dest": "reference_file"},
        "--seed": {"type": int}, "--out": {},
        "--omit-times": {"action": "store_const", "const": True,
                         "dest": "omit_times"}})
    add("cpa-stats", cmd_cpa_stats, {
        "--n": {"type": int, "nargs": "+"}, "--m": {"type": int},
        "--rounds": {"type": int},
        "--smoothing": {"action": "store_const", "const": True},
        "--seed": {"type": int}})
    add("model-info", cmd_model_info, {
        "--model": {}, "--variant": {"choices": variants}})
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
