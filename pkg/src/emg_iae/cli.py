"""Command-line entry point: ``emg-iae <subcommand> ...``.

Exit codes: 0 success, 2 bad flags, 3 missing input file, 4 invalid
configuration or input data, 5 estimation failed, 6 output directory locked.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from itertools import product
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .baseline import BaselineError, estimate_iz_baseline
from .config import ConfigError, RunConfig, build_config, has_entry, load_config_tree
from .fileio import (
    CHECKPOINT_NAME,
    OutputLockedError,
    RecordingFormatError,
    load_checkpoint,
    output_lock,
    read_json,
    read_recording,
    save_checkpoint,
    write_csv,
    write_json,
    write_recording,
)
from .forward_model import EstimatedParams, GeometryError
from .informed_ae.decoder import physical_scale
from .informed_ae.encoder import EncoderConfig, encoder_forward
from .informed_ae.hyperopt import HyperoptError, default_grid, hyperparameter_search
from .informed_ae.training import TrainingDivergedError, train
from .preprocess import preprocess
from .synth import DegenerateInputError, Recording, generate_motor_unit, rng_stream, simulate_recording

log = logging.getLogger("emg_iae")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_INVALID = 4
EXIT_ESTIMATION = 5
EXIT_LOCKED = 6

ESTIMATE_NAME = "estimate.json"
BASELINE_NAME = "baseline.json"
HISTORY_NAME = "history.csv"


class UsageError(Exception):
    pass


# --- helpers ------------------------------------------------------------------

def _config(args, rec: Recording | None = None) -> tuple[RunConfig, dict]:
    """Config from ``--config`` (or the one stored with the input recording) plus ``--set`` overrides."""
    if args.config is None and rec is not None and "config" in rec.meta:
        tree = rec.meta["config"]
    else:
        tree = load_config_tree(args.config or "default")
    return build_config(tree, args.set), tree


def _require_seed(args, tree: dict, entry: str) -> int:
    """Randomised stages run only with an explicit seed, from the flag or the config file."""
    if args.seed is not None:
        return args.seed
    if has_entry(tree, entry):
        node = tree
        for k in entry.split("."):
            node = node[k]
        return int(node)
    raise UsageError(f"this stage is randomised: pass --seed or set {entry} in the config file")


def _provenance(cfg: RunConfig, seed) -> dict:
    return {"config_hash": cfg.hash(), "seed": seed}


def _load_input(path) -> Recording:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found")
    return read_recording(path)


def _as_preprocessed(rec: Recording) -> tuple[np.ndarray, list]:
    """Matrix fed to the estimators; raw input is preprocessed without noise."""
    if rec.kind == "preprocessed":
        return rec.voltages, []
    log.warning("input is a raw recording; preprocessing it without added noise")
    pre = preprocess(rec.voltages, rec.grid.sample_rate)
    return pre.matrix, [{"step": "preprocess", "snr_db": None}]


def _recording_id(rec: Recording) -> str | None:
    return rec.meta.get("recording_id")


def _say(text: str):
    print(text, flush=True)


# --- subcommands --------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg, tree = _config(args)
    seed = _require_seed(args, tree, "synth.seed")
    synth = cfg.synth.model_copy(update={"seed": seed})
    if args.muscle_id is not None:
        synth = synth.model_copy(update={"muscle_id": args.muscle_id})
    if args.mu_index is not None:
        mu_index, rank = args.mu_index, None
    else:
        indices = synth.extracted_indices()
        if not 0 <= args.mu < len(indices):
            raise UsageError(f"--mu must be in [0, {len(indices) - 1}]")
        mu_index, rank = indices[args.mu], args.mu
    cfg = cfg.model_copy(update={"synth": synth})
    mu = generate_motor_unit(synth, mu_index)
    rec = simulate_recording(mu, cfg.array, cfg.volume_conductor)
    rec.meta = {
        "recording_id": f"muscle{synth.muscle_id}-mu{mu_index}-seed{seed}",
        "muscle_id": synth.muscle_id,
        "mu_index": mu_index,
        "mu_rank": rank,
        "seed": seed,
        "config_hash": cfg.hash(),
        "config": cfg.to_json(),
        "provenance": [{"step": "simulate", "seed": seed, "mu_index": mu_index, "config_hash": cfg.hash()}],
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_recording(out, rec)
    pr = ev.prototype_params(mu)
    _say(f"simulated motor unit {mu_index} ({len(mu)} fibres, iz_pr {pr.iz_pr * 1e3:.4f} mm, "
         f"v_pr {pr.v_pr:.4f} m/s) -> {out} [{rec.voltages.shape[0]}x{rec.voltages.shape[1]}]")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    rec = _load_input(args.inp)
    if rec.kind != "raw":
        raise ValueError(f"{args.inp} is already preprocessed")
    cfg, tree = _config(args, rec)
    snr_db = None if args.no_noise else (args.snr_db if args.snr_db is not None else cfg.synth.snr_db)
    seed, rng = None, None
    if snr_db is not None:
        seed = _require_seed(args, tree, "synth.seed")
        rng = rng_stream(seed, int(rec.meta.get("mu_index", 0)), "noise")
    pre = preprocess(rec.voltages, rec.grid.sample_rate, snr_db=snr_db, rng=rng)
    meta = dict(rec.meta)
    meta["channel_min"] = pre.channel_min.tolist()
    meta["channel_max"] = pre.channel_max.tolist()
    meta["noise_seed"] = seed
    meta["provenance"] = list(meta.get("provenance", [])) + [
        {"step": "double_differences"},
        {"step": "noise", "snr_db": snr_db, "seed": seed},
        {"step": "bandpass", "band_hz": [4.0, 400.0], "order": 8, "zero_phase": True},
        {"step": "minmax"},
    ]
    out_rec = Recording(pre.matrix, rec.array, rec.grid, rec.ground_truth, "preprocessed", meta)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_recording(out, out_rec)
    _say(f"preprocessed {args.inp} (snr {snr_db} dB) -> {out}")
    return EXIT_OK


def _train_outputs(out_dir: Path, res, ctx, bounds, cfg: RunConfig, seed, rec: Recording, extra=None):
    prov = _provenance(cfg, seed)
    cols = ["epoch", "loss", "mse", "cc", "combined", "iz_hat", "v_hat", "switches"]
    write_csv(out_dir / HISTORY_NAME, cols, ([h[c] for c in cols] for h in res.history), prov)
    save_checkpoint(out_dir / CHECKPOINT_NAME, res.params, res.enc_cfg, ctx, bounds,
                    {**prov, "recording_id": _recording_id(rec)})
    est = {
        "iz_hat_mm": res.p_hat.iz_hat * 1e3,
        "v_hat_mps": res.p_hat.v_hat,
        "best_loss": res.best_loss,
        "best_epoch": res.best_epoch,
        "epochs_run": len(res.history),
        "stopped_early": res.stopped_early,
        "encoder": res.enc_cfg.model_dump(mode="json"),
        "recording_id": _recording_id(rec),
        **prov,
        **(extra or {}),
    }
    write_json(out_dir / ESTIMATE_NAME, est)
    return est


def _train_setup(args):
    rec = _load_input(args.inp)
    cfg, tree = _config(args, rec)
    seed = _require_seed(args, tree, "train.seed")
    upd = {"seed": seed}
    if args.epochs is not None:
        upd["epochs"] = args.epochs
        upd["patience"] = min(cfg.train.patience, args.epochs)
    train_cfg = cfg.train.model_copy(update=upd)
    synth = cfg.synth
    if "muscle_id" in rec.meta:
        synth = synth.model_copy(update={"muscle_id": int(rec.meta["muscle_id"])})
    cfg = build_config({**cfg.to_json(), "train": train_cfg.model_dump(mode="json"),
                        "synth": synth.model_dump(mode="json")})
    M, _ = _as_preprocessed(rec)
    ctx = cfg.decoder_context()
    ctx = type(ctx)(rec.array, rec.grid, ctx.template, ctx.vc)
    return rec, cfg, seed, M, ctx


def cmd_train(args) -> int:
    rec, cfg, seed, M, ctx = _train_setup(args)
    enc = cfg.encoder
    upd = {}
    if args.n_l is not None:
        upd["n_l"] = args.n_l
    if args.activation is not None:
        upd["activation"] = args.activation
    enc = EncoderConfig(**{**enc.model_dump(), **upd})
    bounds = cfg.scaler_bounds()
    with output_lock(args.out) as out_dir:
        res = train(M, enc, cfg.train, ctx, bounds)
        est = _train_outputs(out_dir, res, ctx, bounds, cfg, seed, rec)
    _say(f"iz_hat {est['iz_hat_mm']:.4f} mm, v_hat {est['v_hat_mps']:.4f} m/s "
         f"(best loss {res.best_loss:.6g} at epoch {res.best_epoch}) -> {args.out}")
    return EXIT_OK


def cmd_hyperopt(args) -> int:
    rec, cfg, seed, M, ctx = _train_setup(args)
    bounds = cfg.scaler_bounds()
    if args.depths or args.activations:
        grid = [EncoderConfig(**{**cfg.encoder.model_dump(), "n_l": n, "activation": a})
                for n, a in product(args.depths or (1, 2, 3), args.activations or ("relu", "leaky_relu"))]
    else:
        grid = default_grid(cfg.encoder.seed)
    with output_lock(args.out) as out_dir:
        result = hyperparameter_search(lambda c: train(M, c, cfg.train, ctx, bounds), grid)
        prov = _provenance(cfg, seed)
        write_csv(out_dir / "hyperopt.csv", ["n_l", "activation", "best_loss", "error"],
                  ([c["n_l"], c["activation"], c["best_loss"], c["error"]] for c in result.cells), prov)
        est = _train_outputs(out_dir, result.best_result, ctx, bounds, cfg, seed, rec)
    _say(f"best cell n_l={result.best_cfg.n_l} {result.best_cfg.activation}: "
         f"iz_hat {est['iz_hat_mm']:.4f} mm, v_hat {est['v_hat_mps']:.4f} m/s -> {args.out}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    ckpt = Path(args.run) / CHECKPOINT_NAME
    if not ckpt.is_file():
        raise FileNotFoundError(f"{ckpt} not found")
    params, enc, ctx, bounds, meta = load_checkpoint(ckpt)
    rec = _load_input(args.inp)
    M, _ = _as_preprocessed(rec)
    p = physical_scale(encoder_forward(M, params, enc), bounds)
    out = {"iz_hat_mm": p.iz_hat * 1e3, "v_hat_mps": p.v_hat, "recording_id": _recording_id(rec),
           "config_hash": meta.get("config_hash"), "seed": meta.get("seed")}
    if args.out:
        write_json(args.out, out)
    _say(json.dumps(out))
    return EXIT_OK


def cmd_baseline(args) -> int:
    rec = _load_input(args.inp)
    cfg, _ = _config(args, rec)
    res = estimate_iz_baseline(rec, cfg.baseline)
    out = {**res.to_json(), "recording_id": _recording_id(rec), **_provenance(cfg, rec.meta.get("seed"))}
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_json(args.out, out)
    _say(f"clustering estimate iz {out['iz_estimate_mm']:.4f} mm "
         f"({res.n_clustered} of {res.n_candidates} candidates)")
    return EXIT_OK


def _expand(patterns) -> list[Path]:
    out = []
    for pat in patterns:
        hits = sorted(glob.glob(pat))
        out.extend(Path(h) for h in (hits or [pat]))
    return out


def cmd_evaluate(args) -> int:
    truths = {}
    for path in _expand(args.truth):
        rec = _load_input(path)
        if rec.ground_truth is None:
            raise ValueError(f"{path} carries no ground truth")
        truths[_recording_id(rec) or str(path)] = rec
    estimates, baselines = {}, {}
    for run in _expand(args.runs):
        est_path = run / ESTIMATE_NAME
        if not est_path.is_file():
            raise FileNotFoundError(f"{est_path} not found")
        estimates[read_json(est_path).get("recording_id")] = run
        if (run / BASELINE_NAME).is_file():
            b = read_json(run / BASELINE_NAME)
            baselines[b.get("recording_id")] = b
    for path in _expand(args.baselines or []):
        b = read_json(path)
        baselines[b.get("recording_id")] = b

    rows = []
    hashes, seeds = set(), set()
    for rid, rec in truths.items():
        mu = rec.ground_truth
        mu_id = rec.meta.get("mu_rank")
        mu_id = rec.meta.get("mu_index", 0) if mu_id is None else mu_id
        muscle = int(rec.meta.get("muscle_id", 0))
        if rid in baselines:
            rows.append(ev.clustering_row(mu_id, mu, baselines[rid]["iz_estimate_mm"] * 1e-3, muscle))
        if rid in estimates:
            run = estimates[rid]
            est = read_json(run / ESTIMATE_NAME)
            _, _, ctx, _, _ = load_checkpoint(run / CHECKPOINT_NAME)
            M, _ = _as_preprocessed(rec)
            p_hat = EstimatedParams(est["iz_hat_mm"] * 1e-3, est["v_hat_mps"])
            rows.append(ev.iae_row(mu_id, mu, p_hat, M, ctx, muscle_id=muscle))
            hashes.add(est.get("config_hash"))
            seeds.add(est.get("seed"))
        elif rid not in baselines:
            log.warning("no estimate found for %s", rid)
    if not rows:
        raise ValueError("no recording matched any run or baseline result")
    method_rank = {m: i for i, m in enumerate(ev.METHOD_ORDER)}
    rows.sort(key=lambda r: (r.muscle_id, r.mu_id, method_rank.get(r.method, 99)))
    agg = ev.aggregate_results(rows)
    prov = {"config_hash": ",".join(sorted(str(h) for h in hashes)) or None,
            "seed": ",".join(sorted(str(s) for s in seeds)) or None}
    out_dir = Path(args.out)
    with output_lock(out_dir):
        write_csv(out_dir / "table1.csv", ("muscle_id",) + ev.TABLE1_COLUMNS,
                  ([r.muscle_id] + [getattr(r, c) for c in ev.TABLE1_COLUMNS] for r in rows), prov)
        write_csv(out_dir / "table2.csv", ev.TABLE2_COLUMNS + ("n",),
                  ([getattr(r, c) for c in ev.TABLE2_COLUMNS + ("n",)] for r in agg), prov)
        text = ev.render_table(rows, ev.TABLE1_COLUMNS) + "\n\n" + ev.render_table(agg, ev.TABLE2_COLUMNS)
        (out_dir / "tables.txt").write_text(text + "\n")
    _say(text)
    return EXIT_OK


def cmd_landscape(args) -> int:
    rec = _load_input(args.inp)
    cfg, _ = _config(args, rec)
    M, _ = _as_preprocessed(rec)
    ctx = cfg.decoder_context()
    ctx = type(ctx)(rec.array, rec.grid, ctx.template, ctx.vc)
    iz_axis = ev.DEFAULT_IZ_AXIS if args.iz is None else tuple(x * 1e-3 for x in args.iz)
    v_axis = ev.DEFAULT_V_AXIS if args.v is None else tuple(args.v)
    lam = (cfg.train.lambda1, cfg.train.lambda2)
    land = ev.loss_landscape(M, ctx, iz_axis, v_axis, lam)
    iz_min, v_min = land.argmin("mse")
    izc, vc = land.argmin("combined")
    prov = {**_provenance(cfg, rec.meta.get("seed")), "argmin_mse_iz_m": repr(iz_min),
            "argmin_mse_v_mps": repr(v_min), "argmin_combined_iz_m": repr(izc), "argmin_combined_v_mps": repr(vc)}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, ("iz_m", "v_mps", "mse", "cc", "combined"), land.rows(), prov)
    summary = {"argmin_mse": {"iz_mm": iz_min * 1e3, "v_mps": v_min},
               "argmin_combined": {"iz_mm": izc * 1e3, "v_mps": vc}}
    if rec.ground_truth is not None:
        pr = ev.prototype_params(rec.ground_truth)
        summary["prototype"] = {"iz_mm": pr.iz_pr * 1e3, "v_mps": pr.v_pr}
    _say(json.dumps(summary))
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def _common(p, seed=True):
    p.add_argument("--config", help='JSON config file or "default"')
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config entry (value parsed as JSON)")
    if seed:
        p.add_argument("--seed", type=int, help="seed for the randomised parts of this stage")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emg-iae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one motor unit's raw recording")
    _common(p)
    p.add_argument("--mu", type=int, default=0, help="rank among the extracted motor units (default 0)")
    p.add_argument("--mu-index", type=int, help="absolute motor unit index (overrides --mu)")
    p.add_argument("--muscle-id", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("preprocess", help="double differences, noise, band-pass and min-max")
    _common(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--snr-db", type=float)
    p.add_argument("--no-noise", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    for name, func, helptext in (("train", cmd_train, "fit the informed autoencoder to one recording"),
                                 ("hyperopt", cmd_hyperopt, "grid search over encoder depth and activation")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--in", dest="inp", required=True)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--epochs", type=int)
        if name == "train":
            p.add_argument("--n-l", type=int, choices=(1, 2, 3))
            p.add_argument("--activation", choices=("relu", "leaky_relu"))
        else:
            p.add_argument("--depths", type=int, nargs="+", choices=(1, 2, 3))
            p.add_argument("--activations", nargs="+", choices=("relu", "leaky_relu"))
        p.set_defaults(func=func)

    p = sub.add_parser("estimate", help="apply a trained encoder to a recording")
    p.add_argument("--run", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("baseline", help="clustering estimate of the innervation zone")
    _common(p, seed=False)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", help="per-unit and aggregated result tables")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--baselines", nargs="+")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("landscape", help="loss over an (iz, v) grid as CSV")
    _common(p, seed=False)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iz", type=float, nargs=3, metavar=("LO", "HI", "STEP"), help="mm")
    p.add_argument("--v", type=float, nargs=3, metavar=("LO", "HI", "STEP"), help="m/s")
    p.set_defaults(func=cmd_landscape)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except OutputLockedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOCKED
    except (BaselineError, TrainingDivergedError, HyperoptError) as exc:
        print(f"error: estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (ConfigError, RecordingFormatError, GeometryError, DegenerateInputError, ValueError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
