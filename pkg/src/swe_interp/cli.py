"""Command-line entry point: ``swe-interp {verify,gendata,train,eval}``.

Settings are merged as: built-in defaults < ``--desk-scale`` preset < ``--config`` file
(key=value lines) < explicit flags.  Exit codes: 0 success, 1 failed check, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import torch
from threadpoolctl import threadpool_limits

from . import verify as checks
from .dataset import DatasetConfig, generate_dataset, load_dataset, save_dataset
from .dynamics import PhysicsParams, energy_drift, flow_map
from .neural_net import ShapeError, load_model, read_model_header, save_model
from .trainer import TrainConfig, evaluate, train, write_text

log = logging.getLogger("swe_interp")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    coarse_elems: int = 75
    fine_elems: int = 300
    dt: float = 0.01
    coriolis: float = 0.1
    gravity: float = 1.0
    levels: int = 10
    count: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    epochs: int = 300
    decay_period: int = 30
    decay_factor: float = 10.0
    sigma: float = 0.0
    seed: int = 0
    s1: int = 0
    s2: int = 0
    threads: int = 1
    eval_batches: int = 3

    @property
    def physics(self) -> PhysicsParams:
        return PhysicsParams(coriolis=self.coriolis, g=self.gravity, dt=self.dt)

    @property
    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(self.coarse_elems, self.fine_elems, self.levels, self.physics)

    def train_config(self) -> TrainConfig:
        return TrainConfig(sigma=self.sigma, batch_size=self.batch_size, epochs=self.epochs, lr=self.lr,
                           decay_period=self.decay_period, decay_factor=self.decay_factor, seed=self.seed,
                           s1=self.s1 or None, s2=self.s2 or None)


def desk_preset(levels: int) -> dict:
    """s1 = 2N, s2 = 8N, 100 epochs; the decay period stays at 30."""
    return {"s1": 2 * levels, "s2": 8 * levels, "epochs": 100}


def parse_config_file(path) -> dict:
    types = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise UsageError(f"{path}:{lineno}: unknown setting {key!r}")
        caster = int if types[key] in (int, "int") else float
        try:
            out[key] = caster(value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc
    return out


def resolve(args, levels: int | None = None) -> RunConfig:
    merged = {}
    if getattr(args, "desk_scale", False):
        merged.update(desk_preset(levels or RunConfig.levels))
    if getattr(args, "config", None):
        merged.update(parse_config_file(args.config))
    for f in fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            merged[f.name] = val
    return replace(RunConfig(), **merged)


def _apply_threads(cfg: RunConfig):
    if cfg.threads < 1:
        raise UsageError("--threads must be >= 1")
    torch.set_num_threads(cfg.threads)
    return threadpool_limits(cfg.threads)


# --- commands ---------------------------------------------------------------------------

def cmd_verify(args) -> int:
    cfg = resolve(args)
    with _apply_threads(cfg):
        try:
            results = checks.run_all(args.mesh, cfg.physics, seed=cfg.seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("ALL CHECKS PASSED" if ok else "SOME CHECKS FAILED")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_gendata(args) -> int:
    cfg = resolve(args)
    if cfg.count < 1:
        raise UsageError("--count must be >= 1")
    try:
        dcfg = cfg.dataset_config
        _ = dcfg.mesh_pair
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    with _apply_threads(cfg):
        ds = generate_dataset(cfg.count, cfg.seed, dcfg, threads=cfg.threads)
    path = save_dataset(ds, args.out)
    drift = max([energy_drift(p.x_f, dcfg.physics.g) for p in ds.pairs]
                + [energy_drift(p.x_c, dcfg.physics.g) for p in ds.pairs]) if dcfg.num_levels > 1 else 0.0
    print(f"wrote {path}: {ds.count} samples ({ds.split_index} train / {ds.count - ds.split_index} validation), "
          f"N={dcfg.num_levels}, D={dcfg.dimension}, max energy drift {drift:.3e}")
    return EXIT_OK


def _load_dataset(path):
    if path is None or not Path(path).exists():
        raise UsageError(f"dataset not found: {path}")
    return load_dataset(path)


def cmd_train(args) -> int:
    ds = _load_dataset(args.data)
    n = ds.config.num_levels
    cfg = resolve(args, levels=n)
    tcfg = cfg.train_config()
    s1, s2 = tcfg.widths(n)
    log.info("training sigma=%g epochs=%d s1=%d s2=%d on %d samples", tcfg.sigma, tcfg.epochs, s1, s2, len(ds.train))
    with _apply_threads(cfg):
        model, report = train(ds, tcfg)
    save_model(model, args.model_out)
    write_text(args.loss_csv, report.loss_csv())
    print(f"final loss {report.final_loss:.6e} after {tcfg.epochs} epochs; model -> {args.model_out}, "
          f"history -> {args.loss_csv}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve(args)
    ds = _load_dataset(args.data)
    if not Path(args.model).exists():
        raise UsageError(f"model not found: {args.model}")
    try:
        hdr = read_model_header(args.model)
        if hdr["n_levels"] != ds.config.num_levels:
            raise ShapeError(f"model expects N={hdr['n_levels']} but dataset has N={ds.config.num_levels}")
        flow = flow_map(ds.config.mesh_pair.fine, ds.config.physics)
        model = load_model(args.model, flow)
    except ShapeError as exc:
        raise UsageError(f"model/dataset mismatch: {exc}") from exc
    with _apply_threads(cfg):
        report = evaluate(model, ds, batches=cfg.eval_batches, batch_size=cfg.batch_size, seed=cfg.seed)
    write_text(args.out, report.eval_csv())
    print(f"wrote {args.out}: {len(report.validation)} rows "
          f"({cfg.eval_batches} batches x {ds.config.num_levels} levels)")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------------------

def _common(p, *names):
    d = RunConfig()
    options = {
        "coarse_elems": (int, "coarse mesh elements (default 75, h=0.04)"),
        "fine_elems": (int, "fine mesh elements (default 300, h=0.01)"),
        "dt": (float, "time step (default 0.01)"),
        "coriolis": (float, "Coriolis parameter f (default 0.1)"),
        "gravity": (float, "reference pressure g (default 1)"),
        "levels": (int, "stored time levels N (default 10)"),
        "count": (int, "number of runs (default 1000)"),
        "batch_size": (int, "batch size (default 16)"),
        "lr": (float, "base learning rate (default 1e-3)"),
        "epochs": (int, "training epochs (default 300; 100 with --desk-scale)"),
        "decay_period": (int, "epochs between learning-rate decays (default 30)"),
        "decay_factor": (float, "learning-rate decay factor (default 10)"),
        "sigma": (float, "energy penalty weight (default 0)"),
        "s1": (int, "UNet width s1 (default 8N = 80; 2N with --desk-scale)"),
        "s2": (int, "UNet width s2 (default 64N = 640; 8N with --desk-scale)"),
        "eval_batches": (int, "number of random validation batches (default 3)"),
    }
    for name in names:
        typ, text = options[name]
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None, help=text)
    p.add_argument("--seed", type=int, default=None, help=f"master seed (default {d.seed})")
    p.add_argument("--threads", type=int, default=None,
                   help="worker/BLAS thread cap (default 1, bitwise deterministic)")
    p.add_argument("--config", default=None, help="key=value settings file; flags override it")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swe-interp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the discretisation and gradient invariant checks")
    p.add_argument("--mesh", type=int, default=300, help="fine mesh elements to check on (default 300)")
    _common(p, "dt", "coriolis", "gravity")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gendata", help="simulate paired coarse/fine trajectories")
    p.add_argument("--out", default="dataset.bin", help="output dataset file (default dataset.bin)")
    _common(p, "count", "coarse_elems", "fine_elems", "levels", "dt", "coriolis", "gravity")
    p.set_defaults(func=cmd_gendata, desk_scale=False)

    p = sub.add_parser("train", help="train the neural interpolant")
    p.add_argument("--data", required=True, help="dataset file from gendata")
    p.add_argument("--model-out", default="model.bin", help="output model file (default model.bin)")
    p.add_argument("--loss-csv", default="loss.csv", help="loss history CSV (default loss.csv)")
    p.add_argument("--desk-scale", action="store_true",
                   help="small preset: s1=2N, s2=8N, 100 epochs (explicit flags still win)")
    _common(p, "sigma", "epochs", "batch_size", "lr", "decay_period", "decay_factor", "s1", "s2")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="validation error and energy statistics")
    p.add_argument("--data", required=True, help="dataset file from gendata")
    p.add_argument("--model", required=True, help="model file from train")
    p.add_argument("--out", default="eval.csv", help="evaluation CSV (default eval.csv)")
    _common(p, "eval_batches", "batch_size")
    p.set_defaults(func=cmd_eval, desk_scale=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"swe-interp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
