"""Command-line entry point: gen-channels, train, eval and fl-run.

Each command writes its data files plus a ``<out>.manifest.json`` holding the
merged configuration, seeds, SHA-256 digests of inputs and outputs, the tool
version and a timestamp.  Data files never contain timestamps, so reruns with
the same flags are byte-identical.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .channel import ChannelConfig, ChannelSet, make_channel_set, scale_interference
from .fl_sim import FlConfig, curves_csv, run_fl
from .metrics import SystemConstants
from .numerics import NumericalError
from .policies import DimensionError, GcnPolicy, MlpPolicy, PolicyFormatError, make_policy, save_policy
from .primal_dual import DivergenceError, TrainConfig, evaluate, percentile_floors, train

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3, 4
EVAL_CHUNK = 64  # channels per parallel evaluation task; fixed so results do not depend on --threads


class InputError(Exception):
    """Missing, unreadable or inconsistent input files."""


def dbw_to_watts(dbw: float) -> float:
    return 10.0 ** (dbw / 10.0)


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get("FEDPOWER_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InputError(f"FEDPOWER_THREADS must be an integer, got {env!r}") from None
    return 1


def parallel_map(fn, items, threads: int) -> list:
    """Order-preserving map, threaded when ``threads > 1``."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(fn, items))


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc.strerror or exc}") from None


def write_manifest(out_path, command: str, config: dict, seeds, inputs: list, outputs: list) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seeds": list(seeds),
        "inputs": {str(p): sha256_file(p) for p in inputs if p and Path(p).exists()},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "version": __version__,
        "created": dt.datetime.now(dt.timezone.utc).isoformat(),
    }
    path = Path(str(out_path) + ".manifest.json")
    write_text(path, json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def load_channels(path) -> ChannelSet:
    try:
        return ChannelSet.load(path)
    except FileNotFoundError:
        raise InputError(f"channel file not found: {path}") from None
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"bad channel file {path}: {exc}") from None


def load_policy_file(spec: str):
    try:
        return make_policy(spec)
    except FileNotFoundError:
        raise InputError(f"policy file not found: {spec}") from None
    except (OSError, ValueError, KeyError, TypeError, PolicyFormatError) as exc:
        raise InputError(f"bad policy file {spec}: {exc}") from None


def stored_constants(spec: str) -> SystemConstants | None:
    if spec in ("rand", "orth"):
        return None
    try:
        doc = json.loads(Path(spec).read_text())
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read {spec}: {exc}") from None
    return SystemConstants.from_dict(doc["constants"]) if "constants" in doc else None


# --- commands --------------------------------------------------------------


def cmd_gen_channels(args) -> int:
    if args.count < 0:
        raise argparse.ArgumentTypeError("--count must be non-negative")
    cfg = ChannelConfig(args.workers, args.antennas, args.spread, args.noise_power, args.scale_interference)
    cs = make_channel_set(args.count, cfg, args.seed, tuple(args.split))
    write_text(args.out, cs.to_json())
    write_manifest(args.out, "gen-channels", vars_clean(args), [args.seed], [], [args.out])
    return EXIT_OK


def _constants(args, L: int) -> SystemConstants:
    return SystemConstants(num_workers=L, p_max=args.p_max, waterfall=args.waterfall)


def cmd_train(args) -> int:
    cs = load_channels(args.channels)
    L = cs.num_workers
    consts = _constants(args, L)
    if args.kind == "pdg":
        policy = GcnPolicy.init(consts.p_max, seed=args.seed)
    else:
        policy = MlpPolicy.init(L, consts.p_max, seed=args.seed)
        policy.fit_input_scaling(cs.split("train"))
    if args.rate_floor is not None or args.ee_floor is not None:
        r0 = args.rate_floor or 0.0
        e0 = args.ee_floor or 0.0
    elif args.floors_percentile > 0:
        r0, e0 = percentile_floors(policy, cs.split("train"), consts, args.floors_percentile)
    else:
        r0 = e0 = 0.0
    consts = replace(consts, rate_floor=r0, ee_floor=e0)
    config = TrainConfig(
        epochs=args.epochs,
        patience=args.patience,
        batch_size=args.batch_size,
        lr_theta=args.lr_theta,
        lr_y=args.lr_y,
        lr_r=args.lr_r,
        lr_e=args.lr_e,
        theta_optimizer=args.optimizer,
        seed=args.seed,
    )
    policy, history = train(policy, cs, consts, config)
    hist_path = args.history or str(Path(args.out).with_suffix("")) + ".history.csv"
    save_policy(policy, args.out, constants=consts.to_dict(), best_epoch=history.best_epoch)
    write_text(hist_path, history.to_csv())
    write_manifest(args.out, "train", vars_clean(args), [args.seed], [args.channels], [args.out, hist_path])
    return EXIT_OK


def _eval_channels(args, cs: ChannelSet):
    L = cs.num_workers
    if args.workers_override and args.workers_override != L:
        cfg = replace(cs.config, num_workers=args.workers_override)
        cs = make_channel_set(len(cs.matrices), cfg, cs.seed)
    H = cs.split(args.split)
    if args.scale_interference != 1.0:
        H = scale_interference(H, args.scale_interference)
    return H


def cmd_eval(args) -> int:
    cs = load_channels(args.channels)
    policy = load_policy_file(args.policy)
    H = _eval_channels(args, cs)
    L = H.shape[-1]
    consts = stored_constants(args.policy) or SystemConstants(num_workers=L)
    if args.pmax_dbw is not None:
        consts = replace(consts, p_max=args.p_max)
    consts = consts.with_workers(L)
    if isinstance(policy, MlpPolicy) and policy.num_workers != L:
        raise DimensionError(f"MLP policy is locked to L={policy.num_workers}, channels have L={L}")
    threads = resolve_threads(args.threads)
    chunks = [H[i : i + EVAL_CHUNK] for i in range(0, len(H), EVAL_CHUNK)]
    seeds = np.random.SeedSequence(args.seed).spawn(len(chunks))

    def run(item):
        chunk, ss = item
        rng = np.random.default_rng(ss)
        return chunk, policy_powers(policy, chunk, consts, rng, args.noise_var)

    parts = parallel_map(run, list(zip(chunks, seeds)), threads)
    H_all = np.concatenate([c for c, _ in parts])
    p_all = np.concatenate([p for _, p in parts])
    report = evaluate(_Fixed(p_all), H_all, consts, bins=args.bins)
    doc = report.to_dict()
    doc.update(policy=args.policy, split=args.split, scale_interference=args.scale_interference, noise_var=args.noise_var)
    write_text(args.out, json.dumps(doc, indent=2, sort_keys=True))
    hist_path = args.hist or str(Path(args.out).with_suffix("")) + ".hist.csv"
    lines = ["bin_low,bin_high,count"]
    edges, counts = report.hist_edges, report.hist_counts
    lines += [f"{edges[i]!r},{edges[i + 1]!r},{counts[i]}" for i in range(len(counts))]
    write_text(hist_path, "\n".join(lines) + "\n")
    write_manifest(args.out, "eval", vars_clean(args), [args.seed], [args.channels, args.policy], [args.out, hist_path])
    return EXIT_OK


class _Fixed:
    """Replays precomputed powers so evaluation can be split across threads."""

    def __init__(self, p):
        self.p = p

    def allocate(self, H, consts=None, rng=None):
        return self.p


def policy_powers(policy, H, consts, rng, noise_var: float):
    from .channel import add_estimation_noise

    H_in = add_estimation_noise(H, noise_var, rng) if noise_var > 0 else H
    return np.asarray(policy.allocate(H_in, consts, rng), dtype=np.float64)


def cmd_fl_run(args) -> int:
    specs = [s.strip() for s in args.policies.split(",") if s.strip()]
    if not specs:
        raise argparse.ArgumentTypeError("--policies is empty")
    if args.task not in ("regression", "classification"):
        raise argparse.ArgumentTypeError(f"unknown task {args.task!r}")
    if args.noniid == "dirichlet" and args.task != "classification":
        raise argparse.ArgumentTypeError("--noniid dirichlet needs --task classification")
    policies = {}
    consts = None
    for spec in specs:
        name = spec if spec in ("rand", "orth") else Path(spec).stem
        policies[name] = load_policy_file(spec)
        consts = consts or stored_constants(spec)
    L = args.workers
    if args.channels:
        chan_cfg = replace(load_channels(args.channels).config, num_workers=L)
    else:
        chan_cfg = ChannelConfig(num_workers=L)
    if args.scale_interference != 1.0:
        chan_cfg = replace(chan_cfg, interference_scale=args.scale_interference)
    consts = (consts or SystemConstants(num_workers=L)).with_workers(L)
    if args.pmax_dbw is not None:
        consts = replace(consts, p_max=args.p_max)
    for name, pol in policies.items():
        if isinstance(pol, MlpPolicy) and pol.num_workers != L:
            raise DimensionError(f"MLP policy {name} is locked to L={pol.num_workers}, FL run has L={L}")
    rounds = args.rounds if args.rounds is not None else (50 if args.task == "regression" else 100)
    cfg = FlConfig(
        task=args.task,
        num_workers=L,
        rounds=rounds,
        sample_range=tuple(int(v) for v in args.sample_range),
        classes=args.classes,
        lr=args.lr,
        batch_size=args.batch_size,
        local_steps=args.local_steps,
        noniid=args.noniid,
        kappa=args.kappa,
        eta=tuple(args.eta) if args.eta else None,
        channel=chan_cfg,
    )
    seeds = [args.seed + s for s in range(args.seeds)]
    results = run_fl(cfg, policies, consts, seeds, threads=resolve_threads(args.threads))
    out_dir = Path(args.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create {out_dir}: {exc}") from None
    outputs = []
    for name, res in results.items():
        path = out_dir / f"curves_{name}.csv"
        write_text(path, curves_csv(res))
        outputs.append(path)
    inputs = [s for s in specs if s not in ("rand", "orth")] + ([args.channels] if args.channels else [])
    write_manifest(out_dir / "fl_run", "fl-run", vars_clean(args), seeds, inputs, outputs)
    return EXIT_OK


# --- parsing ---------------------------------------------------------------


def vars_clean(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "config")}


def _add_common(p, seed_default=0):
    p.add_argument("--config", help="JSON file of defaults; explicit flags win")
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--threads", type=int, default=None, help="worker threads (fallback: FEDPOWER_THREADS)")


def _add_power(p, default):
    p.add_argument("--pmax-dbw", type=float, default=default, help="maximum transmit power in dBW")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedpower", description="Power allocation for federated learning over lossy uplinks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-channels", help="sample a channel set")
    _add_common(g)
    g.add_argument("--workers", type=int, default=8)
    g.add_argument("--antennas", type=int, default=10)
    g.add_argument("--count", type=int, default=3000)
    g.add_argument("--spread", type=float, default=ChannelConfig.pathloss_spread, help="path-loss spread (max/min gain)")
    g.add_argument("--noise-power", type=float, default=ChannelConfig.noise_power)
    g.add_argument("--scale-interference", type=float, default=1.0)
    g.add_argument("--split", type=_csv_floats, default=[1 / 3, 1 / 3, 1 / 3], help="train,validation,test fractions")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_channels)

    t = sub.add_parser("train", help="train a PDG or PDM policy")
    _add_common(t)
    _add_power(t, -20.0)
    t.add_argument("--kind", choices=["pdg", "pdm"], default="pdg")
    t.add_argument("--channels", required=True)
    t.add_argument("--epochs", type=int, default=1000)
    t.add_argument("--patience", type=int, default=100)
    t.add_argument("--batch-size", type=int, default=100)
    t.add_argument("--lr-theta", type=float, default=1e-3)
    t.add_argument("--lr-y", type=float, default=1e-4)
    t.add_argument("--lr-r", type=float, default=1e-4)
    t.add_argument("--lr-e", type=float, default=1e-4)
    t.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    t.add_argument("--waterfall", type=float, default=SystemConstants.waterfall)
    t.add_argument("--floors-percentile", type=float, default=30.0, help="0 disables the constraints")
    t.add_argument("--rate-floor", type=float, default=None, help="explicit rate floor in bits/s")
    t.add_argument("--ee-floor", type=float, default=None, help="explicit EE floor in bits/J")
    t.add_argument("--out", required=True)
    t.add_argument("--history", default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a policy on a channel split")
    _add_common(e)
    _add_power(e, None)
    e.add_argument("--policy", required=True, help="policy JSON, 'rand' or 'orth'")
    e.add_argument("--channels", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--scale-interference", type=float, default=1.0)
    e.add_argument("--noise-var", type=float, default=0.0)
    e.add_argument("--workers-override", type=int, default=None)
    e.add_argument("--bins", type=int, default=20)
    e.add_argument("--out", required=True)
    e.add_argument("--hist", default=None)
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fl-run", help="simulate federated learning under each policy")
    _add_common(f)
    _add_power(f, None)
    f.add_argument("--task", default="regression")
    f.add_argument("--policies", required=True, help="comma-separated policy files and/or rand, orth")
    f.add_argument("--rounds", type=int, default=None)
    f.add_argument("--seeds", type=int, default=10)
    f.add_argument("--workers", type=int, default=8)
    f.add_argument("--channels", default=None, help="take channel parameters from this channel file")
    f.add_argument("--scale-interference", type=float, default=1.0)
    f.add_argument("--sample-range", type=_csv_floats, default=[20, 200])
    f.add_argument("--classes", type=int, default=10)
    f.add_argument("--lr", type=float, default=None)
    f.add_argument("--batch-size", type=int, default=None)
    f.add_argument("--local-steps", type=int, default=None)
    f.add_argument("--noniid", choices=["none", "gaussian", "dirichlet"], default="none")
    f.add_argument("--kappa", type=float, default=1.0)
    f.add_argument("--eta", type=_csv_floats, default=None, help="per-worker feature-noise levels")
    f.add_argument("--out-dir", required=True)
    f.set_defaults(func=cmd_fl_run)
    parser.subcommands = sub.choices
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(overrides, dict):
            parser.error("--config must hold a JSON object")
        sub = parser.subcommands[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(k.replace("-", "_") for k in overrides) - known)
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        # config values become defaults, so explicit flags still win
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
        args = parser.parse_args(argv)
    if getattr(args, "pmax_dbw", None) is not None:
        args.p_max = dbw_to_watts(args.pmax_dbw)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    except argparse.ArgumentTypeError as exc:
        print(f"fedpower: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, DimensionError) as exc:
        print(f"fedpower: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DivergenceError, NumericalError) as exc:
        print(f"fedpower: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
