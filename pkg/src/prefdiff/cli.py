"""Command-line driver: collect, slice, train, evaluate and report.

Every command resolves one flat config (defaults, then ``--preset``, then
``--config FILE``, then ``--set key=value`` and command flags, which win)
and stamps the config digest into whatever it writes.

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import pipeline
from .datastore import Dataset, StateNormalizer, apply_slice, load_dataset, save_dataset
from .diffusion import denoiser_from_checkpoint, schedule_from_checkpoint, train_diffusion
from .errors import ConfigError, InputError, MissingArtifact
from .metrics import write_report
from .momdp import collect_dataset
from .netcore import load_checkpoint, save_checkpoint, set_threads
from .normalize import predictor_checkpoint, predictor_from_checkpoint, train_return_predictor
from .planner import Planner, invdyn_checkpoint, invdyn_from_checkpoint, rollout, train_inverse_dynamics, write_trace
from .slider import train_slider

log = logging.getLogger("prefdiff")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3

# fixed artifact names inside a run directory
DIFFUSION, SLIDER, INVDYN, PREDICTOR = "diffusion.ckpt", "slider.ckpt", "invdyn.ckpt", "predictor.ckpt"
NORMALIZATION, RUN_CONFIG = "normalization.json", "config.json"


# ------------------------------------------------------------------ helpers

def _require(path: Path, what: str, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path} (run `{hint}` first)")
    return path


def _resolve(args, flags: dict | None = None) -> dict:
    """Defaults < preset < config file (or the run's stored config) < --set < command flags."""
    path = args.config
    if path is None and getattr(args, "run", None) is not None:
        stored = Path(args.run) / RUN_CONFIG
        path = stored if stored.exists() else None
    overrides = C.parse_assignments(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    overrides.update({k: v for k, v in (flags or {}).items() if v is not None})
    return C.load(path, overrides, args.preset)


def _emit_config(cfg: dict, path: Path) -> str:
    C.write(cfg, path)
    return C.digest(cfg)


def _load_data(stem) -> Dataset:
    return load_dataset(stem)


def _normalized(cfg: dict, dataset: Dataset, run: Path) -> Dataset:
    predictor, ref = None, None
    if cfg["normalize.kind"] == "ppn":
        ppath = _require(run / PREDICTOR, "return predictor", "train-predictor --run DIR")
        predictor, ref = predictor_from_checkpoint(load_checkpoint(ppath)), PREDICTOR
    return pipeline.normalize_for(cfg, dataset, predictor, ref)


def _same(a, b) -> bool:
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_same(a[k], b[k]) for k in a)
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, float) or isinstance(b, float):
        return isinstance(a, (int, float)) and isinstance(b, (int, float)) and float(a) == float(b)
    return a == b


# ------------------------------------------------------------------ commands

def cmd_collect(args) -> int:
    cfg = _resolve(args, {"dataset.quality": args.quality, "dataset.n_traj": args.n})
    ds = collect_dataset(cfg["dataset.quality"], cfg["dataset.n_traj"], cfg["env.episode_len"], cfg["seed"])
    ds.manifest["config_digest"] = _emit_config(cfg, Path(str(args.out) + ".config.json"))
    traj_path, man_path = save_dataset(ds, args.out)
    r = ds.episode_returns
    print(f"collected {len(ds)} trajectories -> {traj_path}")
    if len(ds):
        print(f"return mean {np.round(r.mean(0), 3).tolist()} min {np.round(r.min(0), 3).tolist()} "
              f"max {np.round(r.max(0), 3).tolist()}")
    return EXIT_OK


def cmd_slice(args) -> int:
    cfg = _resolve(args, {"dataset.slice": args.kind, "dataset.m": args.m, "dataset.n_regions": args.n})
    ds = _load_data(args.input)
    out = apply_slice(ds, cfg["dataset.slice"], cfg["dataset.m"], cfg["dataset.n_regions"])
    out.manifest["config_digest"] = _emit_config(cfg, Path(str(args.out) + ".config.json"))
    save_dataset(out, args.out)
    print(f"{cfg['dataset.slice']}: kept {len(out)} of {len(ds)}; removed regions {out.ood_regions}")
    return EXIT_OK


def cmd_train_predictor(args) -> int:
    cfg = _resolve(args)
    ds = _load_data(args.data)
    positive = args.target == "traj_rtg"
    fit = train_return_predictor(ds, cfg["predictor.grad_steps"], cfg["predictor.lr"], target=args.target,
                                 positive=positive, seed=cfg["seed"])
    out = Path(args.out) if args.out else Path(args.run) / PREDICTOR
    digest = C.digest(cfg)
    save_checkpoint(out, predictor_checkpoint(fit, {"config_digest": digest, "target": args.target,
                                                    "dataset_sha256": ds.manifest.get("trajectory_sha256")}))
    print(f"return predictor ({args.target}) fit on {fit.n_train} non-dominated trajectories, "
          f"loss {fit.losses[-1]:.4g} -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = Path(args.run)
    cfg = _resolve(args)
    ds = _load_data(args.data)
    run.mkdir(parents=True, exist_ok=True)
    digest = _emit_config(cfg, run / RUN_CONFIG)
    nds = _normalized(cfg, ds, run)
    norm = nds.manifest["normalization"]
    (run / NORMALIZATION).write_text(json.dumps(
        {"normalization": norm, "config_digest": digest,
         "dataset_sha256": ds.manifest.get("trajectory_sha256")}, indent=2, sort_keys=True) + "\n")
    normalizer = StateNormalizer.fit(nds)
    res = train_diffusion(nds, pipeline.diffusion_config(cfg), normalizer, log=log.info,
                          meta={"config_digest": digest})
    save_checkpoint(run / DIFFUSION, res.checkpoint)
    print(f"denoiser trained {len(res.losses)} steps in {res.seconds:.1f}s, "
          f"final loss {res.checkpoint.meta['final_loss']:.5f} -> {run / DIFFUSION}")
    return EXIT_OK


def cmd_train_slider(args) -> int:
    run = Path(args.run)
    cfg = _resolve(args)
    ckpt = load_checkpoint(_require(run / DIFFUSION, "denoiser checkpoint", "train"))
    ds = _load_data(args.data)
    nds = _checked_normalization(cfg, ds, run, ckpt)
    base = denoiser_from_checkpoint(ckpt)
    normalizer = StateNormalizer.from_dict(ckpt.meta["state_normalizer"])
    res = train_slider(nds, base, normalizer, pipeline.slider_config(cfg), schedule_from_checkpoint(ckpt),
                       base_digest=ckpt.digest, fix_first_state=ckpt.config["train"]["fix_first_state"],
                       log=log.info)
    res.checkpoint.meta["config_digest"] = C.digest(cfg)
    save_checkpoint(run / SLIDER, res.checkpoint)
    print(f"slider trained {len(res.losses)} steps in {res.seconds:.1f}s -> {run / SLIDER}")
    return EXIT_OK


def cmd_train_invdyn(args) -> int:
    run = Path(args.run)
    cfg = _resolve(args)
    ds = _load_data(args.data)
    fit = train_inverse_dynamics(ds, pipeline.invdyn_config(cfg))
    run.mkdir(parents=True, exist_ok=True)
    save_checkpoint(run / INVDYN, invdyn_checkpoint(fit, {"config_digest": C.digest(cfg)}))
    print(f"inverse dynamics final mse {np.mean(fit.losses[-100:]):.3g} -> {run / INVDYN}")
    return EXIT_OK


def _checked_normalization(cfg: dict, ds: Dataset, run: Path, ckpt) -> Dataset:
    """Re-derive the conditions and refuse to continue if they differ from training."""
    stored = json.loads(_require(run / NORMALIZATION, "normalization record", "train").read_text())
    nds = _normalized(cfg, ds, run)
    now = nds.manifest["normalization"]
    if not _same(now, stored["normalization"]) or not _same(now, ckpt.meta.get("normalization")):
        raise ConfigError(f"normalization mismatch: model was trained with {stored['normalization']}, "
                          f"current config and data give {now}")
    return nds


def cmd_eval(args) -> int:
    run = Path(args.run)
    cfg = _resolve(args)
    use_slider = not args.no_slider and cfg["planner.use_slider"]
    ckpt = load_checkpoint(_require(run / DIFFUSION, "denoiser checkpoint", "train"))
    inv = invdyn_from_checkpoint(load_checkpoint(_require(run / INVDYN, "inverse dynamics", "train-invdyn")))
    ds = _load_data(args.data)
    nds = _checked_normalization(cfg, ds, run, ckpt)
    slider = None
    if use_slider:
        sck = load_checkpoint(_require(run / SLIDER, "slider checkpoint", "train-slider"))
        if sck.meta.get("base_digest") != ckpt.digest:
            raise ConfigError("slider was trained against a different denoiser checkpoint")
        slider = denoiser_from_checkpoint(sck)
    models = pipeline.Models(denoiser_from_checkpoint(ckpt), inv,
                             StateNormalizer.from_dict(ckpt.meta["state_normalizer"]), nds.omegas, slider)
    evp = None
    if args.eval_predictor:
        evp = predictor_from_checkpoint(load_checkpoint(_require(Path(args.eval_predictor), "evaluation predictor",
                                                                 "train-predictor --target episode_return")))
    elif ds.ood_regions:
        log.warning("no --eval-predictor given; return deviation is not computed")
    digest = C.digest(cfg)
    res = pipeline.evaluate(cfg, models, use_slider, ood_regions=ds.ood_regions,
                            eval_predictor=evp.predict if evp is not None else None, workers=args.workers)
    name = args.name or ("eval" if use_slider else "eval_noslider")
    summary = write_report(res, run, digest, name, dataset_returns=ds.episode_returns,
                           extra={"slider": use_slider, "n_prefs": cfg["metrics.n_prefs"], "seed": cfg["seed"]})
    C.write(cfg, run / f"{name}.config.json")
    if args.trace:
        planner = Planner(models.base, inv, models.normalizer, pipeline.planner_config(cfg, use_slider),
                          models.dataset_prefs, slider)
        write_trace(rollout(planner, res.solutions.omegas, cfg["env.episode_len"], cfg["seed"]),
                    run / f"{name}.trace.jsonl", digest)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for run in args.run:
        run = Path(run)
        found = sorted(p for p in run.glob("eval*.json") if not p.name.endswith(".config.json"))
        if not found:
            raise MissingArtifact(f"no evaluation summaries in {run} (run `eval` first)")
        for p in found:
            rows.append({"run": str(run), "name": p.stem, **json.loads(p.read_text())})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    print(f"{'run':<28} {'name':<16} {'hv':>10} {'sp':>10} {'rd':>10}")
    for r in rows:
        fmt = [f"{r[k]:10.4g}" if isinstance(r.get(k), (int, float)) else f"{'-':>10}" for k in ("hv", "sp", "rd")]
        print(f"{r['run']:<28} {r['name']:<16} " + " ".join(fmt))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="flat JSON config file")
    common.add_argument("--preset", choices=sorted(C.PRESETS), default=None,
                        help="named override bundle applied under --config and --set")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override (repeatable); wins over --config")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="prefdiff", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", parents=[common], help="roll out the scripted behaviour policy")
    p.add_argument("--quality", choices=("expert", "amateur"))
    p.add_argument("--n", type=int, help="number of trajectories")
    p.add_argument("--out", required=True, help="output stem (writes STEM.jsonl and STEM.manifest.json)")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("slice", parents=[common], help="remove preference regions from a dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--kind", choices=("complete", "shattered", "narrow"))
    p.add_argument("--m", type=float, help="percentage of trajectories removed")
    p.add_argument("--n", type=int, help="number of shattered gaps")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("train-predictor", parents=[common], help="fit a maximum-return predictor")
    p.add_argument("--data", required=True)
    p.add_argument("--target", choices=("traj_rtg", "episode_return"), default="traj_rtg",
                   help="traj_rtg for PPN conditioning, episode_return for return deviation")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--run", help="run directory (writes predictor.ckpt)")
    g.add_argument("--out", help="explicit checkpoint path")
    p.set_defaults(func=cmd_train_predictor)

    for name, func, text in (("train", cmd_train, "train the conditional denoiser"),
                             ("train-slider", cmd_train_slider, "train the slider adapter"),
                             ("train-invdyn", cmd_train_invdyn, "train the inverse-dynamics model")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", required=True)
        p.add_argument("--run", required=True, help="run directory")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", parents=[common], help="preference sweep and metric report")
    p.add_argument("--data", required=True, help="training dataset (for preferences and removed regions)")
    p.add_argument("--run", required=True)
    p.add_argument("--no-slider", action="store_true", help="plain guided sampling (ablation)")
    p.add_argument("--eval-predictor", default=None, help="predictor checkpoint for return deviation")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--name", default=None, help="report file stem")
    p.add_argument("--trace", action="store_true", help="also write per-step rollout traces")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="collect evaluation summaries from run directories")
    p.add_argument("--run", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    logging.captureWarnings(True)
    set_threads(1)
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
