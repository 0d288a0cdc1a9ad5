"""Command line interface: ``qpinqi {simulate,train,reconstruct,evaluate,gradcheck}``.

Every command accepts ``--config FILE.json``; explicit flags override values
from the file, which override built-in defaults. The resolved configuration is
printed and written next to the outputs. Exit codes: 0 success, 2 invalid
configuration, 3 numerical failure (including a failed gradient check), 4 I/O
error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .core import SolverError, TensorFormatError, write_tensor

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("qpinqi")


class ConfigError(ValueError):
    pass


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _float_pair(text):
    vals = _float_list(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}")
    return vals


def _default_jobs():
    try:
        return max(1, int(os.environ.get("QPINQI_JOBS", "1")))
    except ValueError:
        return 1


# subcommand -> {option: default}; flags are parsed with default None so that
# explicitly given values can be told apart from defaults
DEFAULTS = {
    "simulate": {"out": None, "n": 16, "size": 64, "coils": 4, "accel": 4, "acs": None,
                 "taus": [0.5, 1.0, 1.5, 2.0, 8.0], "sigma_range": [0.001, 0.04],
                 "mode": "brainlike", "seed": 0, "jobs": None},
    "train": {"data": None, "out": None, "steps": 250, "batch": 4, "lr_prior": 4e-3,
              "lr_lambda": 2e-2, "warmup": 0.1, "weight_decay": 0.01, "ablation": "full",
              "loss": "equal", "n_iter": None, "seed": 0, "val_data": None, "val_every": 50,
              "resume": None, "jobs": None},
    "reconstruct": {"data": None, "ckpt": None, "out": None, "baseline": "none", "ablation": "full",
                    "trace": False, "jobs": None},
    "evaluate": {"pred": None, "ref": None, "out": None, "key": "auto"},
    "gradcheck": {"target": "all", "eps": None, "seed": 0, "out": None},
}
REQUIRED = {"simulate": ("out",), "train": ("data", "out"), "reconstruct": ("data", "out"),
            "evaluate": ("pred", "ref", "out"), "gradcheck": ()}


def build_parser():
    parser = argparse.ArgumentParser(prog="qpinqi", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=None)
        p.add_argument("--config", help="JSON file with option values")
        return p

    p = add("simulate", "generate a synthetic dataset directory")
    p.add_argument("--out")
    p.add_argument("--n", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--coils", type=int)
    p.add_argument("--accel", type=int, help="acceleration factor (1 = fully sampled)")
    p.add_argument("--acs", type=int, help="central lines (default scales 12/10/8 with the grid)")
    p.add_argument("--taus", type=_float_list)
    p.add_argument("--sigma-range", type=_float_pair)
    p.add_argument("--mode", choices=["brainlike", "tubes"])
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)

    p = add("train", "train weights and priors")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr-prior", type=float)
    p.add_argument("--lr-lambda", type=float)
    p.add_argument("--warmup", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--ablation")
    p.add_argument("--loss", choices=["equal", "t1", "t1exact"],
                   help="parameter loss: plain MSE, T1-linearized R1 weights, or exact T1 on the R1 channel")
    p.add_argument("--n-iter", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--val-data")
    p.add_argument("--val-every", type=int)
    p.add_argument("--resume")
    p.add_argument("--jobs", type=int)

    p = add("reconstruct", "reconstruct parameter maps for a dataset")
    p.add_argument("--data")
    p.add_argument("--ckpt", help="checkpoint directory (default: untrained initial model)")
    p.add_argument("--out")
    p.add_argument("--baseline", choices=["none", "zerofill", "cgsense", "both"])
    p.add_argument("--ablation", help="model layout when no checkpoint is given")
    p.add_argument("--trace", action="store_const", const=True)
    p.add_argument("--jobs", type=int)

    p = add("evaluate", "T1 metrics of predicted maps against a reference dataset")
    p.add_argument("--pred")
    p.add_argument("--ref")
    p.add_argument("--out")
    p.add_argument("--key", help="tensor name of the prediction (default p, else p_true)")

    p = add("gradcheck", "finite-difference check of the backward passes")
    p.add_argument("--target", choices=["all", "sigmodel", "prior", "lindc", "nlreg", "endtoend"])
    p.add_argument("--eps", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="optional JSON report path")
    return parser


def resolve(args) -> dict:
    """Merge defaults, the JSON config file and explicit flags (in that order)."""
    cmd = args.command
    cfg = dict(DEFAULTS[cmd])
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(loaded)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if "jobs" in cfg and cfg["jobs"] is None:
        cfg["jobs"] = _default_jobs()
    missing = [k for k in REQUIRED[cmd] if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return cfg


def echo_config(command, cfg, where=None):
    text = json.dumps({"command": command, **cfg}, indent=2, sort_keys=True, default=str)
    print(text)
    if where is not None:
        where = Path(where)
        where.parent.mkdir(parents=True, exist_ok=True)
        where.write_text(text + "\n")


def _map(fn, items, jobs):
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def cmd_simulate(cfg):
    from .synth import PhantomSpec, SimSpec, write_dataset
    try:
        phantom = PhantomSpec(size=cfg["size"], mode=cfg["mode"])
        sim = SimSpec(n_coils=cfg["coils"], accel=cfg["accel"], acs_lines=cfg["acs"],
                      taus=tuple(cfg["taus"]), sigma_range=tuple(cfg["sigma_range"]))
        if cfg["n"] < 1:
            raise ValueError("--n must be at least 1")
        acs = sim.acs_for(phantom.size)
        if sim.accel > 1 and acs > phantom.size // sim.accel:
            raise ValueError(f"{acs} central lines exceed the {phantom.size // sim.accel}-line budget")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(cfg["out"])
    echo_config("simulate", cfg, out / "config.json")
    manifest = write_dataset(out, cfg["n"], cfg["seed"], phantom, sim, jobs=cfg["jobs"])
    print(f"wrote {len(manifest['samples'])} samples to {out} (spec {manifest['spec_hash']})")


def cmd_train(cfg):
    from .pinqi import PinqiConfig
    from .train import TrainConfig, train_loop
    try:
        extra = {"n_iter": cfg["n_iter"]} if cfg["n_iter"] else {}
        pcfg = PinqiConfig.ablation(cfg["ablation"], loss_weighting=cfg["loss"], **extra)
        tcfg = TrainConfig(steps=cfg["steps"], batch=cfg["batch"], lr_prior=cfg["lr_prior"],
                           lr_lambda=cfg["lr_lambda"], warmup_frac=cfg["warmup"],
                           weight_decay=cfg["weight_decay"], seed=cfg["seed"], val_every=cfg["val_every"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(cfg["out"])
    echo_config("train", cfg, out / "cli_config.json")
    state, tlog = train_loop(cfg["data"], tcfg, pcfg, out=out, val_data=cfg["val_data"],
                             resume=cfg["resume"], jobs=cfg["jobs"])
    losses = [v for v in tlog.losses() if np.isfinite(v)]
    if losses:
        print(f"trained {len(tlog.rows)} steps: loss {losses[0]:.6g} -> {losses[-1]:.6g}")
    print(f"checkpoints in {out / 'last'} and {out / 'best'}")


def cmd_reconstruct(cfg):
    from .evaluation import baselines
    from .pinqi import PinqiConfig, init_state, pinqi_reconstruct
    from .synth import Dataset
    from .train import load_checkpoint
    data = Dataset(cfg["data"])
    data.check_consistent()
    if cfg["ckpt"]:
        state, _, _, pcfg, _ = load_checkpoint(cfg["ckpt"])
        if pcfg is None:
            raise ConfigError("checkpoint carries no model configuration")
    else:
        try:
            pcfg = PinqiConfig.ablation(cfg["ablation"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        state = init_state(pcfg, data[0].taus.size)
    which = {"none": (), "both": ("zerofill", "cgsense")}.get(cfg["baseline"], (cfg["baseline"],))
    out = Path(cfg["out"])
    echo_config("reconstruct", cfg, out / "config.json")

    def one(i):
        rec = data[i]
        acq, model = rec.acquisition(), rec.model()
        sdir = out / data.entries[i]["id"]
        sdir.mkdir(parents=True, exist_ok=True)
        trace = pinqi_reconstruct(rec.k, acq, model, state, pcfg)
        write_tensor(trace.p_final, sdir / "p.qten")
        if cfg["trace"]:
            write_tensor(np.stack(trace.ys[1:]), sdir / "trace_y.qten")
            if trace.ps:
                write_tensor(np.stack(trace.ps), sdir / "trace_p.qten")
            write_tensor(trace.lams, sdir / "trace_lambdas.qten")
        for name, (p, flagged) in baselines(rec.k, acq, model, which=which).items():
            write_tensor(p, sdir / f"baseline_{name}.qten")
            write_tensor(flagged.astype(float), sdir / f"baseline_{name}_flagged.qten")
        return {"id": data.entries[i]["id"]}

    entries = _map(one, range(len(data)), cfg["jobs"])
    (out / "manifest.json").write_text(json.dumps(
        {"format": "qpinqi-maps-1", "source": str(cfg["data"]), "samples": entries,
         "baselines": list(which)}, indent=2))
    print(f"reconstructed {len(entries)} samples into {out}")


def cmd_evaluate(cfg):
    from .core import read_tensor
    from .evaluation import roi_stats, score_t1, t1_map, write_metrics_csv, write_roi_csv
    from .synth import TUBE_T1, Dataset
    ref = Dataset(cfg["ref"])
    pred_dir = Path(cfg["pred"])
    out = Path(cfg["out"])
    echo_config("evaluate", cfg, out.with_suffix(".config.json"))
    rows, rois = [], []
    tubes = ref.manifest.get("phantom", {}).get("mode") == "tubes"
    for i, sid in enumerate(ref.ids()):
        rec = ref[i]
        sdir = pred_dir / sid
        key = cfg["key"]
        if key == "auto":
            key = "p" if (sdir / "p.qten").is_file() else "p_true"
        p = read_tensor(sdir / f"{key}.qten")
        sc = score_t1(p, rec.p_true, rec.weight_mask)
        rows.append((sid, ref.entries[i].get("accel", ""), sc))
        print(f"{sid}: nrmse {sc.nrmse:.6f}  mae {sc.mae:.6f} s  ssim {sc.ssim:.6f}")
        if tubes:
            rois.append(roi_stats(t1_map(p), rec.labels))
    write_metrics_csv(rows, out)
    if tubes and rois:
        # ROI means pooled over samples
        pooled = [(lab, float(np.mean([r[j][1] for r in rois])), float(np.mean([r[j][2] for r in rois])),
                   rois[0][j][3]) for j, (lab, *_rest) in enumerate(rois[0])]
        write_roi_csv(pooled, TUBE_T1, out.with_name(out.stem + "_roi.csv"))
    print(f"metrics written to {out}")


def cmd_gradcheck(cfg):
    from .gradcheck import TARGETS, run
    targets = TARGETS if cfg["target"] == "all" else (cfg["target"],)
    echo_config("gradcheck", cfg)
    reports = [run(t, cfg["eps"], cfg["seed"]) for t in targets]
    for rep in reports:
        print(rep.table())
        print()
    if cfg["out"]:
        Path(cfg["out"]).write_text(json.dumps(
            [{"target": r.target, "max_rel_error": r.max_error, "threshold": r.threshold,
              "passed": r.passed} for r in reports], indent=2))
    if not all(r.passed for r in reports):
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "reconstruct": cmd_reconstruct,
            "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        code = COMMANDS[args.command](cfg)
        return EXIT_OK if code is None else code
    except ConfigError as exc:
        print(f"qpinqi {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, FloatingPointError) as exc:
        print(f"qpinqi {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, TensorFormatError) as exc:
        print(f"qpinqi {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"qpinqi {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
