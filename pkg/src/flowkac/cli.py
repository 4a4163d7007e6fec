"""Command-line entry point: ``flowkac {train|eval|reference|benchmark|sample}``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import ConfigError, DegenerateReference, FlowKacError
from .feynman_kac import fk_grid_targets
from .metrics import EvalSpec, cell_centered_grid, evaluate_model, GRID_DEFAULTS
from .models import CATALOG_NAMES, flowkac_transform
from .paths import TimeGrid, make_brownian
from .reference import adi_duffing, analytic_reference, ou_nd_marginal
from .tnf import TnfModel, load_checkpoint, save_checkpoint
from .training import TrainConfig, train, uniform_points

EXIT_CONFIG = 2
EXIT_FAILURE = 1


def _fmt(v) -> str:
    return repr(float(v))


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.get("output", "dir"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    cfg = cfgmod.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def build_reference(cfg, sde, times):
    if sde.name == "duffing":
        ev = cfg.values["eval"]
        return adi_duffing(
            omega=float(sde.params["omega"]), delta=float(ev["adi_delta"]), h=float(ev["adi_h"]),
            T=max(times), store_times=sorted(set([0.0] + list(times))),
        )
    return analytic_reference(sde)


def _check_times(times, horizon):
    for t in times:
        if not 0.0 <= t <= horizon + 1e-12:
            raise DegenerateReference(f"t={t} is outside the reference horizon [0, {horizon}]")


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    sde = cfg.sde()
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.tnf"
    tc = cfg.train_config(checkpoint_path=str(ckpt))
    model, report = train(sde, tc, log=lambda e, l, s: print(f"epoch {e} loss {l:.6g} ({s:.2f}s)", flush=True))
    save_checkpoint(model, ckpt, extra={"config_hash": cfg.hash(), "seed": cfg.seed})
    report.checkpoint = str(ckpt)
    report.write_csv(out / "train_loss.csv", cfgmod.provenance_header(cfg))
    print(f"checkpoint {ckpt}")
    return 0


def _model_for_eval(args, cfg, sde, reference):
    if args.checkpoint in (None, "reference"):
        if args.checkpoint is None:
            raise ConfigError("--checkpoint is required (use 'reference' for a self-comparison)")
        return reference, "reference"
    expect = cfg.train_config().flow_config(sde)
    model, _ = load_checkpoint(args.checkpoint, expect=expect)
    return model, "flowkac"


def cmd_eval(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    sde = cfg.sde()
    ev = cfg.values["eval"]
    times = [float(t) for t in ev["times"]]
    _check_times(times, cfg.train_config().horizon(sde))
    reference = build_reference(cfg, sde, times)
    model, label = _model_for_eval(args, cfg, sde, reference)
    spec = EvalSpec(mode=ev["mode"], n_eval=ev["n_eval"], times=times, seed=int(ev["seed"]))
    series = evaluate_model(model, reference, spec, sde_name=sde.name, model_name=label)
    header = cfgmod.provenance_header(cfg)
    series.write_csv(out / "metrics.csv", header)
    if sde.d <= 2:
        _write_density_grid(out / "density_grid.csv", header, model, reference, sde, spec)
    for t, l2, kl in series.records:
        print(f"t={t:g} l2={l2:.4g} kl={kl:.4g}")
    return 0


def _write_density_grid(path, header, model, reference, sde, spec):
    f_model = model.density if hasattr(model, "density") else model
    if hasattr(reference, "nodes"):
        pts = reference.nodes()
        ref_at = lambda t: reference.slice(t).ravel()
    else:
        pts, _, _ = cell_centered_grid(reference.box, spec.n_eval or GRID_DEFAULTS[sde.d])
        ref_at = lambda t: reference(pts, t)
    with open(path, "w", newline="") as fh:
        fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x_{i + 1}" for i in range(sde.d)] + ["t", "p_theta", "p_ref"])
        for t in spec.times:
            pm, pr = f_model(pts, t), ref_at(t)
            for x, a, b in zip(pts, pm, pr):
                w.writerow([_fmt(v) for v in x] + [_fmt(t), _fmt(a), _fmt(b)])


def cmd_reference(args) -> int:
    cfg = _load(args)
    if args.sde is not None:
        if args.sde not in CATALOG_NAMES:
            raise ConfigError(f"unknown SDE {args.sde!r}")
        v = dict(cfg.values)
        v["sde"] = {"name": args.sde, "params": cfg.values["sde"]["params"] if args.sde == cfg.sde_name else {}}
        if args.sde == "ou_nd" and "d" not in v["sde"]["params"]:
            raise ConfigError("ou_nd needs [sde] params with 'd'")
        cfg = cfgmod.ExperimentConfig(v)
    out = _out_dir(args, cfg)
    sde = cfg.sde()
    header = cfgmod.provenance_header(cfg)
    if sde.name == "duffing":
        times = [0.0, 0.5, 0.75, 1.0]
        sol = build_reference(cfg, sde, times)
        for t in times:
            k = sol.time_index(t)
            one = replace(sol, times=sol.times[k : k + 1], density=sol.density[k : k + 1])
            one.write_csv(out / f"adi_t{t:g}.csv", header)
        print(f"ADI mass {sol.mass.tolist()} clips {sol.clip_count}")
        return 0
    times = [float(t) for t in cfg.values["eval"]["times"]]
    ref = analytic_reference(sde)
    if sde.d > 2:
        with open(out / "reference_moments.csv", "w", newline="") as fh:
            fh.write(header)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "mean", "variance"])
            for t in times:
                m, v = ou_nd_marginal(float(sde.params["a"]), float(sde.params["sigma"]), t)
                w.writerow([_fmt(t), _fmt(m), _fmt(v)])
        return 0
    n = cfg.values["eval"]["n_eval"] or GRID_DEFAULTS[sde.d]
    pts, _, _ = cell_centered_grid(ref.box, n)
    for t in times:
        with open(out / f"reference_t{t:g}.csv", "w", newline="") as fh:
            fh.write(header)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x_{i + 1}" for i in range(sde.d)] + ["p"])
            for x, p in zip(pts, ref(pts, t)):
                w.writerow([_fmt(v) for v in x] + [_fmt(p)])
    return 0


def _targets_for_hash(sde, tc: TrainConfig, mode: str):
    """Epoch-0 targets of the configured C_train under ``mode`` (for the hash rider)."""
    from .feynman_kac import fk_targets_batch
    from .sensitivity import propagate

    fk = flowkac_transform(sde)
    rng = np.random.default_rng([tc.seed, 0])
    box = tc.resolved_box(sde)
    x = uniform_points(tc.n_x, box, rng)
    grid = TimeGrid.from_dt(tc.horizon(sde), tc.dt, rng.uniform(0.0, tc.horizon(sde), tc.n_t))
    bundle = make_brownian(tc.seed, tc.n_W, sde.m, grid)
    if mode == "naive":
        return fk_grid_targets(fk, x, bundle, grid)[0]
    sens = propagate(fk, 0.5 * (box[0] + box[1]), bundle, grid, tc.taylor_order)
    xx = np.repeat(x, len(grid.query_times), axis=0)
    tt = np.tile(grid.query_times, len(x))
    return fk_targets_batch(fk, (xx, tt), sens, bundle, grid).values.reshape(len(x), -1)


def targets_hash(values: np.ndarray) -> str:
    rounded = np.array([float(f"{v:.8g}") for v in np.ravel(values)])
    return hashlib.sha256(rounded.tobytes()).hexdigest()[:16]


def benchmark_epochs(sde, tc: TrainConfig, sizes, n_W: int, modes=("naive", "trick")):
    """Seconds of one training epoch per (mode, |C_train|), warm-up excluded."""
    rows = []
    for n_x, n_t in sizes:
        base = replace(tc, n_x=int(n_x), n_t=int(n_t), n_W=int(n_W), n_epochs=1,
                       batch_size=min(tc.batch_size, int(n_x) * int(n_t)),
                       adaptive=replace(tc.adaptive, enabled=False), checkpoint_every=0)
        secs = {}
        for mode in modes:
            warm = replace(base, mode=mode, n_x=max(1, base.batch_size // base.n_t + 1), n_W=8)
            train(sde, warm)
            t0 = time.perf_counter()
            train(sde, replace(base, mode=mode))
            secs[mode] = time.perf_counter() - t0
        for mode in modes:
            rows.append({
                "kind": "epoch", "mode": mode, "c_train": int(n_x) * int(n_t), "n_W": int(n_W),
                "seconds": secs[mode], "speedup_vs_naive": secs["naive"] / secs[mode],
            })
    return rows


def benchmark_amortization(sde, tc: TrainConfig, model, n_x: int, n_t: int, n_W: int, seed: int = 0):
    """Direct FK on an n_x x n_t query set vs flow evaluation of the same queries."""
    fk = flowkac_transform(sde)
    rng = np.random.default_rng(seed)
    box = tc.resolved_box(sde)
    T = tc.horizon(sde)
    x = uniform_points(n_x, box, rng)
    grid = TimeGrid.from_dt(T, tc.dt, np.linspace(0.0, T, n_t))
    xx = np.repeat(x, n_t, axis=0)
    tt = np.tile(grid.query_times, n_x)
    model.density(xx[:100], tt[:100])  # warm-up
    t0 = time.perf_counter()
    bundle = make_brownian(seed, n_W, sde.m, grid)
    fk_grid_targets(fk, x, bundle, grid)
    s_fk = time.perf_counter() - t0
    t0 = time.perf_counter()
    model.density(xx, tt)
    s_tnf = time.perf_counter() - t0
    return {"kind": "amortization", "n_eval": n_x * n_t, "n_W": n_W, "seconds_fk": s_fk, "seconds_tnf": s_tnf}


def cmd_benchmark(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    sde = cfg.sde()
    ev = cfg.values["eval"]
    tc = cfg.train_config()
    rows = benchmark_epochs(sde, tc, ev["bench_sizes"], ev["bench_n_W"])
    if sde.affine:
        small = replace(tc, n_x=200, n_t=5, n_W=64, batch_size=min(tc.batch_size, 1000))
        h_naive = targets_hash(_targets_for_hash(sde, small, "naive"))
        h_trick = targets_hash(_targets_for_hash(sde, small, "trick"))
        for r in rows:
            r["targets_hash"] = h_naive if r["mode"] == "naive" else h_trick
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint, expect=tc.flow_config(sde))
    else:
        model = TnfModel(tc.flow_config(sde), seed=tc.seed)  # evaluation cost does not depend on weights
    amort = benchmark_amortization(sde, tc, model, ev["amort_n_x"], ev["amort_n_t"], ev["amort_n_W"], cfg.seed)
    with open(out / "benchmark.csv", "w", newline="") as fh:
        fh.write(cfgmod.provenance_header(cfg))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "mode", "c_train", "n_W", "seconds_per_epoch", "speedup_vs_naive",
                    "targets_hash", "n_eval", "seconds_fk", "seconds_tnf"])
        for r in rows:
            w.writerow([r["kind"], r["mode"], r["c_train"], r["n_W"], _fmt(r["seconds"]),
                        _fmt(r["speedup_vs_naive"]), r.get("targets_hash", ""), "", "", ""])
        w.writerow([amort["kind"], "", "", amort["n_W"], "", "", "", amort["n_eval"],
                    _fmt(amort["seconds_fk"]), _fmt(amort["seconds_tnf"])])
    for r in rows:
        print(f"{r['mode']:>6} |C|={r['c_train']} {r['seconds']:.3f}s/epoch speedup {r['speedup_vs_naive']:.1f}x")
    print(f"amortization: fk {amort['seconds_fk']:.3f}s tnf {amort['seconds_tnf']:.4f}s")
    return 0


def cmd_sample(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    sde = cfg.sde()
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for sampling")
    model, _ = load_checkpoint(args.checkpoint, expect=cfg.train_config().flow_config(sde))
    rng = np.random.default_rng(cfg.seed)
    pts = model.sample(args.n, args.t, rng)
    path = out / f"samples_t{args.t:g}.csv"
    with open(path, "w", newline="") as fh:
        fh.write(cfgmod.provenance_header(cfg))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x_{i + 1}" for i in range(sde.d)])
        for x in pts:
            w.writerow([_fmt(v) for v in x])
    print(f"{len(pts)} samples -> {path}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "reference": cmd_reference,
    "benchmark": cmd_benchmark,
    "sample": cmd_sample,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flowkac", description="Fokker-Planck solver via Feynman-Kac targets and a temporal normalizing flow")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="experiment .cfg file")
    ap.add_argument("--checkpoint", default=None, help="model checkpoint path")
    ap.add_argument("--out", default=None, help="output directory (overrides [output] dir)")
    ap.add_argument("--seed", type=int, default=None, help="overrides [train] seed")
    ap.add_argument("--sde", default=None, help="reference: SDE name override")
    ap.add_argument("--n", type=int, default=1000, help="sample: number of points")
    ap.add_argument("--t", type=float, default=0.0, help="sample: time")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: ConfigError: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FlowKacError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
