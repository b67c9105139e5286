"""``fusioncast`` command line: synth, prior, train, eval, ablate, predict, verify.

Exit codes: 0 success, 1 verification/metric failure, 2 usage/config error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from .baselines import generate_prior
from . import autodiff as ad
from . import oracles
from .data import (DataError, FrameSequence, GridSpec, StationRecord, SynthParams, grid_station_series,
                   group_stations, load_sequence, load_station_csv, make_windows, save_grid, save_sequence,
                   scene_pwv, screen_stations, synth_scene, write_station_csv)
from .metrics import write_report
from .model import CheckpointError, ConfigError, FusionCast, ModelConfig, load_checkpoint
from .trainer import (SPLITS, CorpusConfig, ExperimentPlan, PlanEntry, Sample, TrainConfig, evaluate_model,
                      gradcheck_suite, predict, run_ablation, train, window_to_sample)

logger = logging.getLogger("fusioncast")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


# -- config plumbing ------------------------------------------------------------

def grid_spec(cfg) -> GridSpec:
    g = cfg["grid"]
    return GridSpec(g["lat_min"], g["lat_max"], g["lon_min"], g["lon_max"], g["n"])


def synth_params(cfg) -> SynthParams:
    d = cfg["data"]
    return SynthParams(n=cfg["grid"]["n"], frames=d["frames"], n_cells=d["n_cells"], velocity=(d["speed"], 0.0),
                       cell_sigma=d["cell_sigma"], growth=d["growth"], n_stations=d["n_stations"],
                       station_noise=d["station_noise"])


def model_config(cfg, variant: str | None = None, seed: int | None = None) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(grid=cfg["grid"]["n"], t_in=m["t_in"], t_out=m["t_out"], enc_channels=m["enc_channels"],
                       prior_channels=m["prior_channels"], hidden=m["hidden"], prior_hidden=m["prior_hidden"],
                       proj_channels=m["proj_channels"], dec_channels=m["dec_channels"],
                       head_channels=m["head_channels"], mlp_reduction=m["mlp_reduction"],
                       share_hc_gates=m["share_hc_gates"], variant=variant or m["variant"],
                       seed=cfg["train"]["seed"] if seed is None else seed)


def train_config(cfg) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(lr=t["lr"], epochs=t["epochs"], batch_size=t["batch_size"], clip_norm=t["clip_norm"],
                       teacher_p=t["teacher_p"], seed=t["seed"], dtype=t["dtype"],
                       checkpoint_every=t["checkpoint_every"])


def corpus_config(cfg) -> CorpusConfig:
    d = cfg["data"]
    return CorpusConfig(synth=synth_params(cfg), train_scenes=d["train_scenes"], val_scenes=d["val_scenes"],
                        test_scenes=d["test_scenes"], t_in=cfg["model"]["t_in"], t_out=cfg["model"]["t_out"],
                        prior_perturb=d["prior_perturb"], idw_k=d["idw_k"])


def load_cfg(args) -> dict:
    return config_mod.load(getattr(args, "config", None), getattr(args, "set", None) or [])


def write_snapshot(out: Path, cfg: dict, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = config_mod.dump(cfg)
    if extra:
        text += "".join(f"# {k} = {json.dumps(v, sort_keys=True, default=str)}\n" for k, v in extra.items())
    (out / "config.resolved").write_text(text)


# -- dataset on disk ------------------------------------------------------------

def _split_counts(n: int) -> list[str]:
    n_train = max(1, round(0.7 * n)) if n else 0
    n_val = round(0.1 * n)
    n_test = max(n - n_train - n_val, 0)
    return ["train"] * n_train + ["val"] * n_val + ["test"] * n_test


def cmd_synth(args) -> int:
    cfg = load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = synth_params(cfg)
    grid = grid_spec(cfg)
    seeds = np.random.SeedSequence(args.seed).generate_state(max(args.scenes, 1))
    per_split: dict[str, int] = {}
    entries = []
    for k, split in enumerate(_split_counts(args.scenes)):
        idx = per_split.get(split, 0)
        per_split[split] = idx + 1
        p = replace(params, start_epoch=SPLITS[split][0] + 86_400 * idx)
        scene = synth_scene(int(seeds[k]), p, grid)
        sid = f"scene{k:03d}"
        sdir = out / sid
        save_sequence(sdir / "radar", scene.radar)
        recs = [StationRecord(st.station_id, st.lat, st.lon, int(t), float(v))
                for st in scene.stations for t, v in zip(st.epochs, st.pwv)]
        write_station_csv(sdir / "stations.csv", recs)
        pwv = scene_pwv(scene, k=cfg["data"]["idw_k"])
        save_sequence(sdir / "pwv", pwv)
        entries.append({"id": sid, "seed": int(seeds[k]), "split": split, "frames": len(scene.radar),
                        "start_epoch": int(scene.radar.epochs[0]), "stations": len(scene.stations)})
    manifest = {"seed": args.seed, "cadence": params.cadence, "grid": grid.__dict__, "scenes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    write_snapshot(out, cfg)
    print(f"wrote {len(entries)} scenes to {out}")
    return EXIT_OK


def read_manifest(data_dir: Path) -> dict:
    path = data_dir / "manifest.json"
    if not path.is_file():
        raise UsageError(f"data directory {data_dir} has no manifest.json (run `fusioncast synth` first)")
    return json.loads(path.read_text())


def regrid_stations(scene_dir: Path, radar: FrameSequence, cfg) -> FrameSequence:
    records, _ = load_station_csv(scene_dir / "stations.csv", grid_spec(cfg))
    stations = screen_stations(group_stations(records), radar.epochs, cfg["data"]["min_availability"])
    return grid_station_series(stations, radar.epochs, grid_spec(cfg), k=cfg["data"]["idw_k"])


def load_priors(prior_dir: Path) -> dict[int, FrameSequence]:
    out = {}
    for issue_dir in sorted(prior_dir.iterdir(), key=lambda p: int(p.name)):
        out[int(issue_dir.name)] = load_sequence(issue_dir)
    return out


def scene_pwv_sequence(sdir: Path, radar: FrameSequence, cfg, need_pwv: bool) -> FrameSequence | None:
    if (sdir / "pwv").is_dir():
        return load_sequence(sdir / "pwv")
    if (sdir / "stations.csv").is_file():
        return regrid_stations(sdir, radar, cfg)
    if need_pwv:
        raise UsageError(f"{sdir} has neither pwv/ grids nor stations.csv")
    return None


def scene_windows(data_dir: Path, cfg, t_in: int, t_out: int, need_pwv: bool = True):
    manifest = read_manifest(data_dir)
    for entry in manifest["scenes"]:
        sdir = data_dir / entry["id"]
        radar = load_sequence(sdir / "radar")
        pwv = scene_pwv_sequence(sdir, radar, cfg, need_pwv)
        prior_dir = sdir / "prior"
        prior = load_priors(prior_dir) if prior_dir.is_dir() else generate_prior
        for w in make_windows(radar, pwv, prior, t_in, t_out, SPLITS):
            yield entry, w


def load_samples(data_dir: Path, cfg, t_in: int, t_out: int, need_pwv: bool = True) -> dict[str, list[Sample]]:
    out: dict[str, list[Sample]] = {"train": [], "val": [], "test": []}
    for _, w in scene_windows(data_dir, cfg, t_in, t_out, need_pwv):
        out.setdefault(w.split, []).append(window_to_sample(w))
    return out


def cmd_prior(args) -> int:
    cfg = load_cfg(args)
    data_dir = Path(args.data or cfg["data"]["dir"])
    manifest = read_manifest(data_dir)
    t_in, t_out = cfg["model"]["t_in"], cfg["model"]["t_out"]
    count = 0
    for entry in manifest["scenes"]:
        sdir = data_dir / entry["id"]
        radar = load_sequence(sdir / "radar")
        for i in range(t_in, len(radar) - t_out + 1):
            hist = radar.slice(i - t_in, i)
            if hist.missing.any():
                continue
            prior = generate_prior(hist, t_out, perturb_sigma=cfg["data"]["prior_perturb"],
                                   seed=entry["seed"] + int(hist.epochs[-1]))
            save_sequence(sdir / "prior" / str(int(hist.epochs[-1])), prior)
            count += 1
    print(f"wrote {count} prior sequences")
    return EXIT_OK


# -- train / eval / predict --------------------------------------------------------

def _run_model_config(ckpt: Path) -> tuple[ModelConfig, dict]:
    meta = ckpt.parent / "model.json"
    if not meta.is_file():
        raise UsageError(f"{meta} not found next to checkpoint")
    info = json.loads(meta.read_text())
    return ModelConfig(**info["model"]), info


def cmd_train(args) -> int:
    cfg = load_cfg(args)
    if args.variant:
        cfg["model"]["variant"] = args.variant
    data_dir = Path(args.data or cfg["data"]["dir"])
    if not data_dir.is_dir():
        raise UsageError(f"data directory {data_dir} does not exist")
    mcfg = model_config(cfg)
    tcfg = train_config(cfg)
    samples = load_samples(data_dir, cfg, mcfg.t_in, mcfg.t_out, mcfg.variant != "no_pwv")
    if not samples["train"]:
        raise UsageError(f"no training windows in {data_dir}")
    out = Path(args.out)
    write_snapshot(out, cfg, {"data_dir": data_dir})
    t0 = time.time()
    res = train(mcfg, tcfg, samples["train"], samples.get("val", []), out)
    info = {"model": mcfg.to_dict(), "data_dir": str(data_dir), "dtype": tcfg.dtype, "best_epoch": res.best_epoch}
    (out / "model.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    print(f"trained {mcfg.variant} on {len(samples['train'])} windows in {time.time() - t0:.1f}s; "
          f"best epoch {res.best_epoch}")
    return EXIT_OK


def _load_model(ckpt: Path) -> tuple[FusionCast, dict]:
    mcfg, info = _run_model_config(ckpt)
    with ad.default_dtype(info.get("dtype", "float64")):
        model = FusionCast(mcfg)
    load_checkpoint(ckpt, model)
    return model, info


def cmd_eval(args) -> int:
    cfg = load_cfg(args)
    ckpt = Path(args.checkpoint)
    model, info = _load_model(ckpt)
    data_dir = Path(args.data or info["data_dir"])
    samples = load_samples(data_dir, cfg, model.cfg.t_in, model.cfg.t_out,
                           model.cfg.variant != "no_pwv").get(args.split, [])
    if not samples:
        raise UsageError(f"no {args.split} windows in {data_dir}")
    agg = args.csi_agg or cfg["eval"]["csi_agg"]
    rep = evaluate_model(model, samples, cfg["eval"]["thresholds"], cfg["eval"]["lead_frames"], agg)
    write_report(rep, Path(args.out), model.cfg.variant)
    print(f"{len(samples)} windows: rmse {rep.rmse:.4f} mae {rep.mae:.4f}")
    strict = args.strict or cfg["eval"]["strict"]
    if strict and rep.undefined:
        print(f"undefined CSI cells: {rep.undefined}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = load_cfg(args)
    ckpt = Path(args.checkpoint)
    model, info = _load_model(ckpt)
    data_dir = Path(args.data or info["data_dir"])
    target = int(args.window)
    for _, w in scene_windows(data_dir, cfg, model.cfg.t_in, model.cfg.t_out, model.cfg.variant != "no_pwv"):
        if w.issue_epoch == target:
            break
    else:
        raise UsageError(f"no window issued at epoch {target}")
    pred = predict(model, [window_to_sample(w)])[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for frame, epoch in zip(pred, w.target.epochs):
        save_grid(out / f"{int(epoch)}.fgrid", frame, int(epoch), "mm/h")
    print(f"wrote {len(pred)} frames to {out}")
    return EXIT_OK


# -- ablate / verify ------------------------------------------------------------

def cmd_ablate(args) -> int:
    cfg = load_cfg(args)
    seeds = tuple(cfg["ablate"]["seeds"])
    plan = ExperimentPlan([PlanEntry(v, train_config(cfg)) for v in cfg["ablate"]["variants"]],
                          model_config(cfg, "full"), corpus_config(cfg), seeds)
    out = Path(args.out)
    write_snapshot(out, cfg, {"seeds_per_variant": {e.variant: list(seeds) for e in plan.entries}})
    t0 = time.time()
    res = run_ablation(plan, out, progress=print)
    print(f"ablation of {len(plan.entries)} variants x {len(seeds)} seeds in {time.time() - t0:.1f}s")
    for v in res.reports:
        m, s = res.mean_se(v, 1.0, cfg["model"]["t_out"])
        print(f"  {v:18s} csi(1.0, t{10 * cfg['model']['t_out']}) = {m:.4f} +/- {s:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    ok = True
    (passed, worst), dt = oracles.timed(oracles.conv_pool_suite)
    print(f"conv/pool oracles: {'PASS' if passed else 'FAIL'} max diff {worst:.2e} ({dt:.2f}s)")
    ok &= passed
    (passed, worst), dt = oracles.timed(oracles.metrics_suite)
    print(f"metric oracles:    {'PASS' if passed else 'FAIL'} max diff {worst:.2e} ({dt:.2f}s)")
    ok &= passed
    results, dt = oracles.timed(gradcheck_suite, model_coords=args.model_coords)
    for r in results:
        print(f"gradcheck {r.name:18s} {'PASS' if r.passed else 'FAIL'} rel err {r.error:.2e} "
              f"(worst {r.worst_param}, {r.seconds:.2f}s)")
        ok &= r.passed
    print(f"gradcheck suite: {dt:.2f}s")
    return EXIT_OK if ok else EXIT_FAIL


# -- entry ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusioncast", description=__doc__,
                                     epilog=config_mod.help_text(),
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prior", help="future-prior generation")
    psub = p.add_subparsers(dest="prior_command", required=True)
    g = psub.add_parser("generate", help="write optical-flow priors into <data>/<scene>/prior/")
    common(g)
    g.add_argument("--data")
    g.set_defaults(func=cmd_prior)

    p = sub.add_parser("train", help="train one variant")
    common(p)
    p.add_argument("--variant")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--csi-agg", choices=("pooled", "mean"))
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate every variant over several seeds")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="forecast one window")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--window", required=True, help="issue epoch (last history frame)")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("verify", help="gradient checks and oracle suites")
    p.add_argument("--model-coords", type=int, default=None,
                   help="sample this many coordinates per model parameter (default: all)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.func(args)
    except (UsageError, ConfigError, config_mod.ConfigKeyError, ValueError) as exc:
        if isinstance(exc, (DataError, CheckpointError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
