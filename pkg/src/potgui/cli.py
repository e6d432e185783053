"""Command-line front end: ``potgui gen-data | train | eval | ablate | replay``.

Every command writes a JSON manifest next to its outputs; ``potgui replay``
re-runs a manifest and reproduces the outputs byte for byte.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import LAYER_MODES, generate_scenes, read_dataset, synth_features, write_dataset
from .errors import InvalidInputError, PotguiError, SchemaError
from .head import load_head, save_head
from .metrics import report
from .potgen import MODES
from .trainer import TrainConfig, evaluate_head, prepare, summarize, train

ABLATE_AXES = {"k": ("K_sweep", int), "sigma": ("sigma_sweep", float),
               "param-mode": ("param_mode", str), "layer-mode": ("layer_mode", str)}
ABLATE_COLUMNS = ("axis", "value", "miou", "mf1", "epochs_to_90")
_PATH_ARGS = ("data", "out", "out_dir", "checkpoint")


class UsageError(PotguiError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seed_default(fallback):
    env = os.environ.get("POTGUI_SEED")
    if env is None:
        return fallback
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"POTGUI_SEED must be an integer, got {env!r}") from None


def _sigma(text):
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"sigma must lie in [0, 1], got {value}")
    return value


def _add_train_flags(p):
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--wd", type=float, default=1e-4)
    p.add_argument("--sigma", type=_sigma, default=0.5)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--param-mode", choices=MODES, default="two_param")
    p.add_argument("--layer-mode", choices=LAYER_MODES, default="Middle_4")
    p.add_argument("--hidden", type=int, nargs="*", default=[64])
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--eval-fraction", type=float, default=0.2)
    p.add_argument("--baseline", action="store_true",
                   help="plain cross-entropy training without trajectory guidance")
    p.add_argument("--seed", type=int, default=None)


def build_parser():
    parser = _Parser(prog="potgui", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic PGSD dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=32)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--layers", type=int, default=8)
    g.add_argument("--dims", type=int, default=16)
    g.add_argument("--noise", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=None)

    t = sub.add_parser("train", help="train a head; writes record.csv, head.pghd, pot.json")
    _add_train_flags(t)
    t.add_argument("--out-dir", required=True)

    e = sub.add_parser("eval", help="metrics of a head checkpoint on the held-out split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--layer-mode", choices=LAYER_MODES, default="Middle_4")
    e.add_argument("--eval-fraction", type=float, default=0.2)
    e.add_argument("--out", required=True)

    a = sub.add_parser("ablate", help="one training run per value of an axis")
    _add_train_flags(a)
    a.add_argument("--axis", choices=sorted(ABLATE_AXES), required=True)
    a.add_argument("--values", required=True, help="comma-separated list")
    a.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    a.add_argument("--out", required=True)

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest")
    return parser


def _config(args):
    seed = args.seed if args.seed is not None else _seed_default(0)
    k, sigma = (0, 1.0) if args.baseline else (args.k, args.sigma)
    return TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                       beta1=args.beta1, beta2=args.beta2, weight_decay=args.wd,
                       sigma=sigma, K=k, param_mode=args.param_mode, seed=seed,
                       eval_every=args.eval_every, layer_mode=args.layer_mode,
                       hidden=tuple(args.hidden), eval_fraction=args.eval_fraction)


def _write_manifest(path, command, args, outputs, config=None, seed=None):
    resolved = {k: v for k, v in vars(args).items() if k != "command"}
    for key in _PATH_ARGS:
        if resolved.get(key) is not None:
            resolved[key] = str(Path(resolved[key]).resolve())
    if seed is not None:
        resolved["seed"] = seed
    manifest = {"tool": "potgui", "version": __version__, "command": command,
                "args": resolved, "seed": seed, "outputs": [str(Path(o).resolve()) for o in outputs]}
    if config is not None:
        manifest["config"] = config.as_dict()
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args, out=None):
    seed = args.seed if args.seed is not None else _seed_default(7)
    scenes = generate_scenes(args.count, args.height, args.width, args.classes, seed)
    stack = synth_features(scenes, args.layers, args.dims, args.noise, seed)
    path = Path(args.out)
    try:
        write_dataset(path, scenes, stack)
    except OSError as err:
        raise OSError(f"cannot write {path}: {err.strerror}") from None
    _write_manifest(f"{path}.manifest.json", "gen-data", args, [path], seed=seed)
    hist = np.bincount(scenes.labels.ravel(), minlength=scenes.class_count)
    print(f"wrote {path}: {args.count} samples {args.height}x{args.width}, "
          f"{args.layers} layers x {args.dims} dims", file=out)
    for c, n in enumerate(hist):
        print(f"class {c}: {n} px ({n / hist.sum():.1%})", file=out)
    return 0


def _load(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    return read_dataset(path)


def cmd_train(args, out=None):
    config = _config(args)
    dataset = _load(args.data)
    record = train(dataset, config, with_potgui=not args.baseline)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, head_path, pot_path = (out_dir / "record.csv", out_dir / "head.pghd",
                                     out_dir / "pot.json")
    csv_path.write_text(record.to_csv())
    save_head(head_path, record.head)
    pot_path.write_text(json.dumps({"mode": record.stack.mode,
                                    "alpha": [repr(float(a)) for a in record.stack.alpha],
                                    "eta": [repr(float(e)) for e in record.stack.eta]},
                                   indent=2) + "\n")
    _write_manifest(out_dir / "manifest.json", "train", args,
                    [csv_path, head_path, pot_path], config, config.seed)
    if record.epochs:
        last = record.epochs[-1]
        miou = last.eval.miou if last.eval else float("nan")
        print(f"epoch {last.epoch}: loss {last.train_loss:.4f} mIoU {miou:.4f}", file=out)
    return 0


def cmd_eval(args, out=None):
    head = load_head(args.checkpoint)
    dataset = _load(args.data)
    config = TrainConfig(layer_mode=args.layer_mode, eval_fraction=args.eval_fraction)
    features, labels, _, eval_idx, num_classes = prepare(dataset, config)
    widths = head.widths
    if widths[-1] != num_classes:
        raise SchemaError(f"class count mismatch: checkpoint has {widths[-1]}, "
                          f"dataset has {num_classes}")
    if widths[0] != features.shape[-1]:
        raise SchemaError(f"input width mismatch: checkpoint expects {widths[0]}, "
                          f"dataset with {args.layer_mode} gives {features.shape[-1]}")
    metrics = evaluate_head(head, features, labels, eval_idx, num_classes)
    path = Path(args.out)
    path.write_text(metrics.to_csv())
    _write_manifest(f"{path}.manifest.json", "eval", args, [path])
    print(f"mIoU {metrics.miou:.4f} mF1 {metrics.mf1:.4f} "
          f"mPrecision {metrics.mprec:.4f} mRecall {metrics.mrec:.4f}", file=out)
    return 0


def _run_one(job):
    dataset_path, config, with_potgui = job
    return train(read_dataset(dataset_path), config, with_potgui)


def cmd_ablate(args, out=None):
    axis, cast = ABLATE_AXES[args.axis]
    raw = [v.strip() for v in args.values.split(",") if v.strip()]
    if not raw:
        raise UsageError("--values must list at least one value")
    try:
        values = [cast(v) for v in raw]
    except ValueError:
        raise UsageError(f"bad value in --values for axis {args.axis}: {args.values}") from None
    base = _config(args)
    field = {"K_sweep": "K", "sigma_sweep": "sigma"}.get(axis, axis)
    configs = [replace(base, **{field: v}) for v in values]
    with_potgui = not args.baseline
    if args.jobs > 1:
        if not Path(args.data).is_file():
            raise FileNotFoundError(f"dataset not found: {args.data}")
        with ProcessPoolExecutor(args.jobs) as pool:
            records = list(pool.map(_run_one, [(args.data, c, with_potgui) for c in configs]))
    else:
        dataset = _load(args.data)
        records = [train(dataset, c, with_potgui) for c in configs]
    rows = summarize(list(zip(values, records)))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATE_COLUMNS)
    for value, miou, mf1, reach in rows:
        writer.writerow([args.axis, value, repr(miou), repr(mf1), "" if reach is None else reach])
    path = Path(args.out)
    path.write_text(buf.getvalue())
    _write_manifest(f"{path}.manifest.json", "ablate", args, [path], base, base.seed)
    out.write(buf.getvalue())
    return 0


def _argv_from_manifest(manifest):
    argv = [manifest["command"]]
    args = manifest["args"]
    positional = []
    for key, value in args.items():
        flag = "--" + key.replace("_", "-")
        if key == "manifest":
            positional.append(value)
        elif isinstance(value, bool):
            if value:
                argv.append(flag)
        elif isinstance(value, list):
            argv += [flag] + [str(v) for v in value]
        elif value is not None:
            argv += [flag, str(value)]
    return argv + positional


def cmd_replay(args, out=None):
    try:
        manifest = json.loads(Path(args.manifest).read_text())
    except (OSError, ValueError) as err:
        raise UsageError(f"cannot read manifest {args.manifest}: {err}") from None
    if manifest.get("tool") != "potgui" or manifest.get("command") not in COMMANDS:
        raise UsageError(f"{args.manifest} is not a potgui manifest")
    if manifest["command"] == "replay":
        raise UsageError("refusing to replay a replay manifest")
    return dispatch(build_parser().parse_args(_argv_from_manifest(manifest)), out)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "replay": cmd_replay}


def dispatch(args, out=None):
    return COMMANDS[args.command](args, out or sys.stdout)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return dispatch(args)
    except UsageError as err:
        print(f"potgui: error: usage: {err}", file=sys.stderr)
        return 2
    except (PotguiError, InvalidInputError) as err:
        print(f"potgui: error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"potgui: error: io: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
