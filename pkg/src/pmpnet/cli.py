"""Command-line entry points: ``gen``, ``train``, ``complete``, ``eval``,
``ablate`` and ``rerun``.

Configuration precedence is built-in defaults, then the ``--config`` file
(``key = value`` lines), then explicit flags.  Every command writes a JSON
run manifest before doing any work; ``pmpnet rerun MANIFEST`` replays it.
"""

import argparse
import csv
import json
import logging
import os
import sys
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import KINDS, generate, is_validation, load_dataset, read_cloud, resample, save_dataset, write_cloud
from .losses import EXACT_EMD_CAP, chamfer, emd_approx, emd_exact
from .net import ConfigError, NetConfig, forward, load_checkpoint
from .train import TrainConfig, evaluate, train

log = logging.getLogger("pmpnet")

METRIC_SCALE = {"cd-l1": 1e3, "cd-l2": 1e4, "emd": 1.0}
AXES = ("steps", "radius", "noise-dim", "noise-std", "rpa-variant", "pmd-weight")


class UsageError(ValueError):
    pass


@dataclass
class RunManifest:
    command: str
    args: dict
    config: dict = field(default_factory=dict)
    seed: int = 0
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    version: str = __version__

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- config


def parse_value(text):
    text = text.strip()
    try:
        return json.loads(text)
    except ValueError:
        pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if "," in text:
        return [parse_value(t) for t in text.split(",")]
    return text


def read_config_file(path):
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = parse_value(value)
    return out


def decade_radii(steps):
    return [10.0 ** -k for k in range(steps)]


def resolve_config(config_file=None, overrides=None, arch="desk"):
    """Merge defaults, config file and flag overrides into ``(NetConfig, TrainConfig)``."""
    merged = dict(NetConfig.full().to_dict() if arch == "full" else {})
    if config_file:
        merged.update(read_config_file(config_file))
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if isinstance(merged.get("radii"), (int, float)):
        merged["radii"] = [merged["radii"]]
    if "steps" in merged and "radii" not in merged:
        merged["radii"] = decade_radii(int(merged["steps"]))
    if "radii" in merged and "steps" not in merged:
        merged["steps"] = len(merged["radii"])
    net_keys = {f.name for f in fields(NetConfig)}
    train_keys = TrainConfig.field_names()
    unknown = set(merged) - net_keys - train_keys
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    net = NetConfig(**{k: v for k, v in merged.items() if k in net_keys})
    tr = TrainConfig(**{k: v for k, v in merged.items() if k in train_keys})
    return net, tr


def default_seed():
    return int(os.environ.get("PMP_SEED", "0"))


def _config_overrides(args):
    names = ("epochs", "lr", "batch_size", "pmd_weight", "emd_weight", "steps", "radii", "noise_dim",
             "noise_std", "rpa_variant", "checkpoint_every", "n_points")
    out = {k: getattr(args, k, None) for k in names}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip().replace("-", "_")] = parse_value(v)
    out["seed"] = args.seed
    return out


def _add_config_flags(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--arch", choices=("desk", "full"), default="desk")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--pmd-weight", type=float)
    p.add_argument("--emd-weight", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--radii", type=lambda s: [float(x) for x in s.split(",")])
    p.add_argument("--noise-dim", type=int)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--rpa-variant", choices=("rpa", "gru", "add", "nopath"))
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--points", dest="n_points", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="any other config key")


def _seed(args):
    if args.seed is None:
        args.seed = default_seed()
    return args.seed


# ---------------------------------------------------------------- commands


def cmd_gen(args):
    seed = _seed(args)
    out = Path(args.out)
    kinds = tuple(k.strip() for k in args.kinds.split(",")) if args.kinds else KINDS
    for k in kinds:
        if k not in KINDS:
            raise UsageError(f"unknown shape kind {k!r}; choose from {','.join(KINDS)}")
    RunManifest("gen", vars(args), seed=seed, outputs=[str(out)]).write(out / "manifest.json")
    pairs = generate(args.count, args.points, np.random.default_rng(seed), kinds, args.keep_fraction)
    save_dataset(pairs, out)
    print(f"wrote {len(pairs)} pairs to {out}")


def _split(pairs, use_val):
    if not use_val:
        return pairs, []
    val = [p for p in pairs if is_validation(p.id)]
    tr = [p for p in pairs if not is_validation(p.id)]
    return (tr, val) if tr else (pairs, [])


def cmd_train(args):
    seed = _seed(args)
    net_cfg, tr_cfg = resolve_config(args.config, _config_overrides(args), args.arch)
    out = Path(args.out)
    manifest = RunManifest("train", vars(args), {"net": net_cfg.to_dict(), "train": tr_cfg.to_dict()},
                           seed, [str(args.data)], [str(out)])
    manifest.write(out / "manifest.json")
    pairs = load_dataset(args.data)
    if not pairs and tr_cfg.epochs > 0:
        raise FileNotFoundError(f"no shape pairs under {args.data}")
    tr, val = _split(pairs, not args.no_val)
    _, history = train(tr, net_cfg, tr_cfg, out, val)
    if history:
        last = history[-1]
        print(f"trained {len(history)} epochs on {len(tr)} pairs: cd_l1 {last.cd_l1:.6f} cd_l2 {last.cd_l2:.6f}")
    else:
        print(f"wrote initial checkpoint to {out / 'model.ckpt'}")


def complete_cloud(cloud, params, net_cfg, repeat, rng):
    """``repeat`` independent passes with fresh noise; returns ``(union, traces per pass)``."""
    passes, all_traces = [], []
    params = params.detached()
    for _ in range(repeat):
        traces = forward(cloud, params, net_cfg, rng)
        passes.append(traces[-1].output.data)
        all_traces.append(traces)
    return np.concatenate(passes, axis=0), all_traces


def cmd_complete(args):
    seed = _seed(args)
    if args.repeat < 1:
        raise UsageError("--repeat must be >= 1")
    out = Path(args.out)
    RunManifest("complete", vars(args), seed=seed, inputs=[args.checkpoint, args.input],
                outputs=[str(out)]).write(Path(str(out) + ".manifest.json"))
    net_cfg, params, _ = load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(seed)
    cloud = resample(read_cloud(args.input), net_cfg.n_points, rng)
    dense, traces = complete_cloud(cloud, params, net_cfg, args.repeat, rng)
    write_cloud(dense, out)
    if args.trace:
        tdir = Path(args.trace)
        tdir.mkdir(parents=True, exist_ok=True)
        for r, steps in enumerate(traces):
            write_cloud(steps[0].input.data, tdir / f"pass{r}_step0.xyz", "xyz")
            for t in steps:
                write_cloud(t.output.data, tdir / f"pass{r}_step{t.step}.xyz", "xyz")
    print(f"wrote {len(dense)} points to {out}")


def metric_value(pred, target, metric):
    if metric == "cd-l1":
        return chamfer(pred, target, "l1").item()
    if metric == "cd-l2":
        return chamfer(pred, target, "l2").item()
    if metric == "emd":
        solver = emd_exact if len(pred) <= EXACT_EMD_CAP else emd_approx
        return solver(pred, target).cost
    raise UsageError(f"unknown metric {metric!r}")


def eval_table(pairs, metric, predictor="model", params=None, net_cfg=None, seed=0):
    """Per-category mean metric (raw units) plus the category average."""
    if not pairs:
        raise ValueError("evaluation dataset is empty")
    rng = np.random.default_rng(seed)
    if params is not None:
        params = params.detached()
    per_cat = defaultdict(list)
    for p in pairs:
        if predictor == "model":
            pred = forward(p.partial, params, net_cfg, rng)[-1].output.data
        elif predictor == "partial":
            pred = p.partial
        elif predictor == "complete":
            pred = p.complete
        else:
            raise UsageError(f"unknown predictor {predictor!r}")
        per_cat[p.category].append(metric_value(pred, p.complete, metric))
    rows = [(c, len(v), float(np.mean(v))) for c, v in sorted(per_cat.items())]
    rows.append(("average", len(pairs), float(np.mean([r[2] for r in rows]))))
    return rows


def cmd_eval(args):
    seed = _seed(args)
    out = Path(args.out)
    RunManifest("eval", vars(args), seed=seed, inputs=[str(args.data)] + ([args.checkpoint] if args.checkpoint else []),
                outputs=[str(out)]).write(Path(str(out) + ".manifest.json"))
    predictor = args.predictor or ("model" if args.checkpoint else None)
    if predictor is None:
        raise UsageError("--checkpoint is required unless --predictor partial|complete")
    params = net_cfg = None
    if predictor == "model":
        if not args.checkpoint:
            raise UsageError("--predictor model needs --checkpoint")
        net_cfg, params, _ = load_checkpoint(args.checkpoint)
    rows = eval_table(load_dataset(args.data), args.metric, predictor, params, net_cfg, seed)
    scale = METRIC_SCALE[args.metric]
    col = f"{args.metric.replace('-', '_')}" + (f"_x{scale:.0e}".replace("+0", "") if scale != 1 else "")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category", "count", col])
        for cat, n, v in rows:
            w.writerow([cat, n, f"{v * scale:.6f}"])
    for cat, n, v in rows:
        print(f"{cat:>12s} {n:5d} {v * scale:12.6f}")


def ablation_values(axis, text):
    if axis not in AXES:
        raise UsageError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")
    if axis == "radius":
        return [[float(x) for x in item.split(",")] for item in text.split(";")]
    items = [t.strip() for t in text.replace(";", ",").split(",") if t.strip()]
    if axis in ("steps", "noise-dim"):
        return [int(v) for v in items]
    if axis in ("noise-std", "pmd-weight"):
        return [float(v) for v in items]
    return items


def _axis_override(axis, value):
    if axis == "steps":
        return {"steps": value, "radii": decade_radii(value)}
    if axis == "radius":
        return {"radii": value, "steps": len(value)}
    return {axis.replace("-", "_"): value}


def run_ablation(pairs, axis, values, base_overrides, seeds, config_file=None, arch="desk", out_dir=None):
    """Train one model per (value, seed); returns rows of ``(value, cd_l1, cd_l2)`` averaged over seeds."""
    rows = []
    for value in values:
        l1, l2 = [], []
        for seed in seeds:
            ov = dict(base_overrides)
            ov.update(_axis_override(axis, value))
            ov["seed"] = seed
            net_cfg, tr_cfg = resolve_config(config_file, ov, arch)
            sub = None
            if out_dir is not None:
                label = ",".join(map(str, value)) if isinstance(value, list) else str(value)
                sub = Path(out_dir) / f"{axis}={label}" / f"seed{seed}"
            params, _ = train(pairs, net_cfg, tr_cfg, sub)
            m = evaluate(pairs, params, net_cfg, seed)
            l1.append(m["cd_l1"])
            l2.append(m["cd_l2"])
        rows.append((value, float(np.mean(l1)), float(np.mean(l2))))
    return rows


def cmd_ablate(args):
    seed = _seed(args)
    values = ablation_values(args.axis, args.values)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [seed]
    out = Path(args.out)
    overrides = _config_overrides(args)
    overrides.pop("seed")
    RunManifest("ablate", vars(args), seed=seed, inputs=[str(args.data)], outputs=[str(out)]).write(out / "manifest.json")
    pairs = load_dataset(args.data)
    if not pairs:
        raise FileNotFoundError(f"no shape pairs under {args.data}")
    rows = run_ablation(pairs, args.axis, values, overrides, seeds, args.config, args.arch, out)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "value", "cd_l1", "cd_l2"])
        for value, l1, l2 in rows:
            label = ",".join(map(str, value)) if isinstance(value, list) else value
            w.writerow([args.axis, label, repr(l1), repr(l2)])
            print(f"{args.axis}={label}: cd_l1 {l1:.6f} cd_l2 {l2:.6f}")


def cmd_rerun(args):
    manifest = json.loads(Path(args.manifest).read_text())
    ns = argparse.Namespace(**manifest["args"])
    COMMANDS[manifest["command"]](ns)


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "complete": cmd_complete,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "rerun": cmd_rerun,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="pmpnet", description="Point cloud completion by learned point moving paths.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--kinds", default=",".join(KINDS))
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--keep-fraction", type=float, default=0.6)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-val", action="store_true", help="train on every pair, no validation split")
    _add_config_flags(p)

    p = sub.add_parser("complete", help="complete one cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--trace", help="directory for per-step clouds")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval", help="evaluate on a dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--metric", choices=tuple(METRIC_SCALE), default="cd-l2")
    p.add_argument("--predictor", choices=("model", "partial", "complete"))
    p.add_argument("--out", default="eval.csv")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("ablate", help="train one model per value of an axis")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, help="comma list; radius schedules separated by ';'")
    p.add_argument("--seeds", help="comma list of seeds to average over")
    p.add_argument("--seed", type=int)
    _add_config_flags(p)

    p = sub.add_parser("rerun", help="replay a run manifest")
    p.add_argument("manifest")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error\tusage\t{exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(f"error\t{type(exc).__name__}\t{exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error\tio\t{exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
