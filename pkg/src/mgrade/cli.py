"""``mgrade`` command line: gen, train, eval, export-hidden, memplan, gradcheck.

Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numerical failure.
Every command that writes to ``--out`` leaves one ``manifest.json`` there
with the resolved config, seed, toolkit version, input digests, output
paths and timings.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .data import load_dataset, save_dataset
from .model import ConfigError, NetworkConfig, _suggest
from .numcore import NumericalError, ShapeError, save_tensor

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    version: str = __version__
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def digests(path) -> dict:
    p = Path(path)
    files = [p] if p.is_file() else sorted(x for x in p.rglob("*") if x.is_file())
    return {str(f): file_digest(f) for f in files}


def read_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {p} not found")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return data


def check_keys(d: dict, valid, what: str) -> None:
    for key in d:
        if key not in valid:
            raise ConfigError(f"unknown {what} key {key!r}{_suggest(key, valid)}")


def require_path(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} {p} does not exist")
    return p


# -- gen ------------------------------------------------------------------------------

GEN_EXTRA = {"flipflop": {"n": 10000, "n_val": 1000, "val_p_ignore": 0.98},
             "smnist": {"source": None, "n_val": 10000, "limit": None},
             "scifar": {"source": None, "n_val": 5000, "limit": None}}


def cmd_gen(args) -> dict:
    from .tasks import flipflop, lorenz
    from .tasks.images import load_images

    cfg = read_config_file(args.config)
    for key in ("seed", "n", "T", "p_ignore", "n_val", "source", "limit", "dt", "n_trajectories"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if args.task == "flipflop":
        valid = [f.name for f in fields(flipflop.FlipFlopConfig)] + list(GEN_EXTRA["flipflop"])
        check_keys(cfg, valid, "flipflop")
        extra = {k: cfg.pop(k, v) for k, v in GEN_EXTRA["flipflop"].items()}
        fcfg = flipflop.FlipFlopConfig(**cfg)
        from .numcore import Rng
        root = Rng(fcfg.seed)
        train = flipflop.gen_flipflop(fcfg, extra["n"], root.split(0))
        vcfg = flipflop.FlipFlopConfig(fcfg.T, extra["val_p_ignore"], fcfg.seed)
        val = flipflop.gen_flipflop(vcfg, extra["n_val"], root.split(1))
        splits = {"train": train, "val": val}
        resolved = {**asdict(fcfg), **extra}
        resolved["regime"] = "ood-sparse" if fcfg.p_ignore >= flipflop.OOD_P_IGNORE else "dense"
        seed = fcfg.seed
    elif args.task == "lorenz":
        check_keys(cfg, [f.name for f in fields(lorenz.LorenzConfig)], "lorenz")
        if "initial_state" in cfg and cfg["initial_state"] is not None:
            cfg["initial_state"] = tuple(cfg["initial_state"])
        lcfg = lorenz.LorenzConfig(**cfg)
        if lcfg.dt <= 0:
            raise ValueError(f"dt must be positive, got {lcfg.dt}")
        splits = lorenz.gen_lorenz(lcfg)
        resolved, seed = lcfg.to_dict(), lcfg.seed
    else:
        check_keys(cfg, list(GEN_EXTRA[args.task]) + ["seed"], args.task)
        extra = {**GEN_EXTRA[args.task], **cfg}
        if extra["source"] is None:
            raise UsageError(f"gen {args.task} needs --source pointing at the raw files")
        require_path(extra["source"], "image source")
        splits = load_images(args.task, extra["source"], extra["n_val"], extra["limit"])
        resolved, seed = extra, extra.get("seed")
    out = save_dataset(args.out, splits, {"task": args.task, "config": resolved})
    return {"config": resolved, "seed": seed, "outputs": sorted(str(p) for p in out.iterdir())}


# -- train ---------------------------------------------------------------------------------

def resolve_train_config(args):
    from .training import TrainConfig

    raw = read_config_file(args.config)
    check_keys(raw, ["network", "train"], "top-level config")
    net = NetworkConfig.from_dict(raw.get("network", {}))
    tdict = dict(raw.get("train", {}))
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "base_lr"),
                      ("seed", "seed"), ("limit", "limit"), ("target_metric", "target_metric"),
                      ("clip", "clip")):
        val = getattr(args, flag, None)
        if val is not None:
            tdict[key] = val
    return net, TrainConfig.from_dict(tdict)


def cmd_train(args) -> dict:
    from .training import train

    data = require_path(args.data, "data directory")
    net, tcfg = resolve_train_config(args)
    splits, _ = load_dataset(data)
    t0 = time.perf_counter()
    res = train(net, splits, tcfg, out_dir=args.out, resume=args.resume,
                log=(lambda s: print(s, file=sys.stderr)) if args.verbose else None)
    return {"config": {"network": net.to_dict(), "train": tcfg.to_dict()}, "seed": tcfg.seed,
            "inputs": digests(data), "timings": {"train_seconds": time.perf_counter() - t0},
            "summary": {"best_epoch": res.best_epoch, "best_metric": res.best_metric,
                        "epochs_run": len(res.history)}}


# -- eval / export-hidden -------------------------------------------------------------------

def cmd_eval(args) -> dict:
    from .analysis import eval_suite, write_metrics

    ckpt = require_path(args.checkpoint, "checkpoint")
    data = require_path(args.data, "data directory")
    params, meta, _ = load_checkpoint(ckpt)
    splits, _ = load_dataset(data)
    metrics = eval_suite(params, splits, k=args.k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / "metrics.json", metrics)
    print(json.dumps(metrics, sort_keys=True))
    return {"config": params.config.to_dict(), "seed": None,
            "inputs": {**digests(ckpt), **digests(data)}, "outputs": [str(out / "metrics.json")]}


def cmd_export_hidden(args) -> dict:
    from .analysis import hidden_states, pca, write_pca_csv
    from .training import check_compatible

    ckpt = require_path(args.checkpoint, "checkpoint")
    data = require_path(args.data, "data directory")
    params, _, _ = load_checkpoint(ckpt)
    splits, _ = load_dataset(data)
    if args.split not in splits:
        raise ValueError(f"split {args.split!r} not in dataset (have {sorted(splits)})")
    batch = splits[args.split]
    check_compatible(params.config, batch)
    h = hidden_states(params, batch.inputs, args.layer)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [out / "hidden.mgt"]
    save_tensor(outputs[0], h)
    if "states" in batch.extras:
        outputs.append(out / "states.mgt")
        save_tensor(outputs[-1], np.asarray(batch.extras["states"]))
    if args.pca:
        proj, ratios, _ = pca(h.reshape(-1, h.shape[-1]), args.pca)
        outputs.append(out / "pca.csv")
        write_pca_csv(outputs[-1], proj, ratios)
    return {"config": params.config.to_dict(), "seed": None,
            "inputs": {**digests(ckpt), **digests(data)}, "outputs": [str(p) for p in outputs]}


# -- memplan / gradcheck ------------------------------------------------------------------

def cmd_memplan(args) -> dict:
    from .memplan import footprint, reference_report, report_json

    if args.reference:
        text = reference_report()
        print(text, end="")
        return {"config": {"reference": True}, "seed": None, "text": text}
    params = None
    if args.checkpoint:
        params, _, _ = load_checkpoint(require_path(args.checkpoint, "checkpoint"))
        net = params.config
    else:
        raw = read_config_file(args.config)
        net = NetworkConfig.from_dict(raw.get("network", raw))
    rep = footprint(net, params, args.gamma_bound, args.optimizer_state)
    text = report_json(rep)
    if args.bytes:
        text = json.dumps({**rep.to_dict(), **rep.to_bytes(net.precision)}, indent=2, sort_keys=True) + "\n"
    print(text, end="")
    return {"config": net.to_dict(), "seed": None, "text": text}


def cmd_gradcheck(args) -> dict:
    from .gradcheck import full_audit

    rep = full_audit(args.seed)
    for name, err in rep.entries:
        if args.verbose or not err < rep.tolerance:
            print(f"{'ok  ' if err < rep.tolerance else 'FAIL'} {err:.3e} {name}")
    print(f"gradcheck: {len(rep.entries)} checks, max rel error {rep.max_error:.3e}, "
          f"{'passed' if rep.passed else 'FAILED'}")
    result = {"config": {"tolerance": rep.tolerance}, "seed": args.seed, "report": rep.to_dict()}
    if not rep.passed:
        result["failed"] = True
    return result


# -- entry point ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mgrade", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate or ingest a dataset cache")
    g.add_argument("task", choices=["flipflop", "lorenz", "smnist", "scifar"])
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--n", type=int, help="flip-flop training strings")
    g.add_argument("--n-val", type=int)
    g.add_argument("--T", type=int)
    g.add_argument("--p-ignore", type=float)
    g.add_argument("--dt", type=float)
    g.add_argument("--n-trajectories", type=int)
    g.add_argument("--source", help="directory of raw IDX / CIFAR-10 binary files")
    g.add_argument("--limit", type=int)

    t = sub.add_parser("train", help="train a network on a dataset cache")
    t.add_argument("--config", help="JSON with 'network' and 'train' sections")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--limit", type=int)
    t.add_argument("--clip", type=float)
    t.add_argument("--target-metric", type=float)
    t.add_argument("--resume", action="store_true")
    t.add_argument("-v", "--verbose", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--k", type=int, default=20)

    x = sub.add_parser("export-hidden", help="write hidden states (and optional PCA) of a split")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--split", default="val")
    x.add_argument("--layer", type=int, default=-1)
    x.add_argument("--pca", type=int, default=0, help="number of principal components to export")

    m = sub.add_parser("memplan", help="inference memory footprint")
    src = m.add_mutually_exclusive_group(required=True)
    src.add_argument("--config")
    src.add_argument("--checkpoint")
    src.add_argument("--reference", action="store_true", help="reference configurations with expected footprints")
    m.add_argument("--gamma-bound", type=int)
    m.add_argument("--optimizer-state", action="store_true")
    m.add_argument("--bytes", action="store_true")
    m.add_argument("--out")

    c = sub.add_parser("gradcheck", help="finite-difference audit of all gradients")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.add_argument("-v", "--verbose", action="store_true")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "export-hidden": cmd_export_hidden,
            "memplan": cmd_memplan, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    t0 = time.perf_counter()
    try:
        result = COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, CheckpointError, ShapeError, ValueError, KeyError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    out = getattr(args, "out", None)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        if "text" in result:
            (Path(out) / "memplan.txt").write_text(result["text"])
        if "report" in result:
            (Path(out) / "gradcheck.json").write_text(json.dumps(result["report"], indent=2) + "\n")
        timings = {**result.get("timings", {}), "total_seconds": time.perf_counter() - t0}
        outputs = result.get("outputs") or sorted(str(p) for p in Path(out).iterdir()
                                                  if p.name != "manifest.json")
        RunManifest(args.command, result["config"], result.get("seed"), inputs=result.get("inputs", {}),
                    outputs=outputs, timings=timings).write(out)
    return EXIT_NUMERIC if result.get("failed") else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
