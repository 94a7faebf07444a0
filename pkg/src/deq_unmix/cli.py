"""Command-line entry point: ``deq-unmix {synth,train,eval,ablate}``.

Every command writes its artifacts under ``--out`` together with a
``manifest.json`` recording the resolved configuration, seeds, paths,
version and wall-clock time. Exit status is 0 on success, 1 on a runtime
failure and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .classical import fcls, vca
from .data import (
    SceneSpec, load_checkpoint, metrics, read_cube, save_checkpoint, synth_scene, write_cube,
)
from .equilibrium import EquilibriumLayer, solve_fixed_point, step_forward
from .errors import ConfigError, UnmixError
from .tensor import make_rng
from .training import (
    TrainConfig, deq_step, initialize, layer_views, ledger_measure, param_count, train_deq,
    train_unrolled, unrolled_gradients, unrolled_params,
)

log = logging.getLogger("deq_unmix")

METHODS = ("deq", "unroll", "unroll-s", "fcls")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _version():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out: Path, command, config, seeds, inputs, outputs, started):
    doc = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": sorted(str(p) for p in outputs),
        "version": _version(),
        "wall_clock_seconds": time.time() - started,
        "argv": sys.argv[1:],
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, default=str))


def write_pgm(path, img):
    """8-bit binary graymap; 0 maps to black and 1 to white."""
    img = np.clip(np.asarray(img, dtype=float), 0.0, 1.0)
    px = np.round(img * 255.0).astype(np.uint8)
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_endmembers_csv(path, m):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["band"] + [f"endmember_{r}" for r in range(m.shape[1])])
        for i, row in enumerate(np.asarray(m, dtype=float)):
            wr.writerow([i] + [repr(float(v)) for v in row])


def _parse_size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size expects HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise UsageError("--size extents must be positive")
    return h, w


def _parse_snr(text):
    if text.lower() in ("inf", "+inf", "infinity"):
        return math.inf
    try:
        v = float(text)
    except ValueError:
        raise UsageError(f"--snr expects a number or 'inf', got {text!r}") from None
    if not math.isfinite(v):
        raise UsageError("--snr must be finite or 'inf'")
    return v


def _load_config(path, overrides):
    base = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                base = tomllib.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from None
        nested = [k for k, v in base.items() if isinstance(v, dict)]
        if nested:
            raise UsageError(f"{path}: config must be flat key = value pairs (found tables {nested})")
    base.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_dict(base)
    except (TypeError, UnmixError) as exc:
        raise UsageError(str(exc)) from None


def _thread_limit():
    n = os.environ.get("DEQ_UNMIX_THREADS")
    if not n:
        return nullcontext()
    try:
        n = int(n)
    except ValueError:
        raise UsageError(f"DEQ_UNMIX_THREADS must be an integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, n))


def _metrics_or_none(ds, a, m):
    if not ds.has_ground_truth:
        return None
    return metrics(a, m, ds.abundances, ds.endmembers).to_dict()


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args):
    started = time.time()
    h, w = _parse_size(args.size)
    spec = SceneSpec(h=h, w=w, L=args.bands, R=args.endmembers, library=args.library,
                     corr_length=args.corr_length, cap=args.cap, snr_db=_parse_snr(args.snr),
                     seed=args.seed)
    try:
        ds = synth_scene(spec)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    side = write_cube(out / "scene.json", ds, seed=args.seed)
    config = {k: getattr(spec, k) for k in spec.__dataclass_fields__}
    config["snr_db"] = "inf" if math.isinf(spec.snr_db) else spec.snr_db
    write_manifest(out, "synth", config, [args.seed], [], [side, side.with_suffix(".raw")], started)
    print(f"wrote {side}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _fcls_baseline(y, R, cfg):
    ext = vca(y, R, make_rng(cfg.seed, 0))
    a = fcls(y, ext.endmembers, delta=cfg.fcls_delta).abundances
    return a, ext.endmembers


def _infer_r(ds, given):
    if given:
        return int(given)
    if ds.endmembers is not None:
        return int(ds.endmembers.shape[1])
    raise UsageError("the cube carries no ground truth to infer R from; pass --endmembers")


def run_one(method, data_path, cfg_dict, depth, run_dir, R=None):
    """Train (or run the baseline) once and write the run directory."""
    started = time.time()
    cfg = TrainConfig.from_dict(cfg_dict)
    ds = read_cube(data_path)
    R = _infer_r(ds, R)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    y = ds.y.astype(cfg.dtype)
    meta = {"method": method, "R": R, "depth": depth, "config": cfg.to_dict()}
    if method == "fcls":
        a, m = _fcls_baseline(y, R, cfg)
        params = {"W": m}
        summary = {"method": "fcls", "epochs": 0, "param_count": int(m.size)}
        buffers = {"a0": a, "abundances": a}
        loss_curve = []
    else:
        if method == "deq":
            rep = train_deq(y, R, cfg)
        else:
            rep = train_unrolled(y, R, cfg, share_params=(method == "unroll-s"), k_layers=depth)
        a, m, params = rep.abundances, rep.endmembers, rep.params
        summary = rep.summary()
        buffers = {"a0": rep.init_abundances, "abundances": a}
        loss_curve = rep.loss_curve
    summary["metrics"] = _metrics_or_none(ds, a, m)
    summary["seed"] = cfg.seed
    ck = save_checkpoint(run_dir / "checkpoint.npz", params, cfg.to_dict(), buffers, meta)
    (run_dir / "report.json").write_text(json.dumps(summary, indent=2, default=float))
    with open(run_dir / "loss.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "loss"])
        for i, v in enumerate(loss_curve):
            wr.writerow([i, repr(float(v))])
    outputs = [ck, run_dir / "report.json", run_dir / "loss.csv"]
    write_manifest(run_dir, f"train/{method}", cfg.to_dict(), [cfg.seed], [data_path], outputs, started)
    return summary


def _aggregate(summaries):
    agg = {"runs": len(summaries), "method": summaries[0]["method"]}
    keys = {"final_loss": [s.get("final_loss") for s in summaries]}
    if all(s.get("metrics") for s in summaries):
        keys["aRMSE"] = [s["metrics"]["aRMSE"] for s in summaries]
        keys["mSAD"] = [s["metrics"]["mSAD"] for s in summaries]
    for k, vals in keys.items():
        if any(v is None for v in vals):
            continue
        agg[f"{k}_mean"] = float(np.mean(vals))
        agg[f"{k}_std"] = float(np.std(vals))
        agg[k] = [float(v) for v in vals]
    return agg


def cmd_train(args):
    started = time.time()
    if args.repeats < 1 or args.jobs < 1:
        raise UsageError("--repeats and --jobs must be positive")
    overrides = {"epochs": args.epochs, "seed": args.seed, "channels": args.channels,
                 "solver_mode": args.solver}
    cfg = _load_config(args.config, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [cfg.seed + i for i in range(args.repeats)]
    jobs = []
    for i, s in enumerate(seeds):
        d = cfg.to_dict()
        d["seed"] = s
        jobs.append((args.method, str(args.data), d, args.depth, str(out / f"run_{i:02d}"), args.endmembers))
    summaries = []
    if args.jobs == 1 or len(jobs) == 1:
        for i, job in enumerate(jobs):
            summaries.append(_run_indexed(i, job))
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            summaries = list(pool.map(_run_indexed, range(len(jobs)), jobs))
    agg = _aggregate(summaries)
    (out / "aggregate.json").write_text(json.dumps(agg, indent=2))
    outputs = [out / "aggregate.json"] + [Path(j[4]) for j in jobs]
    write_manifest(out, "train", cfg.to_dict(), seeds, [args.data], outputs, started)
    line = f"{args.method}: {len(summaries)} run(s)"
    if "aRMSE_mean" in agg:
        line += f", aRMSE {agg['aRMSE_mean']:.4f}, mSAD {agg['mSAD_mean']:.4f}"
    print(line)
    return 0


def _run_indexed(i, job):
    try:
        with _thread_limit():
            return run_one(*job)
    except UnmixError as exc:
        raise type(exc)(f"run {i}: {exc}") from exc


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def predict(ck, y):
    """Abundances and endmembers implied by a checkpoint on cube ``y``."""
    meta = ck.meta
    method = meta.get("method", "deq")
    cfg = TrainConfig.from_dict(meta["config"])
    W = ck.params["W"]
    a0 = ck.buffers["a0"]
    if a0.shape[:2] != y.shape[:2]:
        a0 = fcls(y, W, delta=cfg.fcls_delta).abundances
    if method == "fcls":
        return fcls(y, W, delta=cfg.fcls_delta).abundances, W
    if method == "deq":
        layer = EquilibriumLayer(dict(ck.params), cfg.eta, cfg.gamma)
        a, _ = solve_fixed_point(a0, y, layer, cfg.solver, cfg.solver_mode)
        return a, W
    depth = int(meta["depth"])
    a = a0
    for lay in layer_views(dict(ck.params), depth, method == "unroll-s", cfg.eta, cfg.gamma):
        a = step_forward(a, y, lay)[0]
    return a, W


def cmd_eval(args):
    started = time.time()
    ck = load_checkpoint(args.checkpoint)
    ds = read_cube(args.data)
    y = ds.y.astype(np.float64)
    a, m = predict(ck, y)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mets = _metrics_or_none(ds, a, m)
    if mets is None:
        print("notice: no ground truth in the container; metrics skipped")
    (out / "metrics.json").write_text(json.dumps({"metrics": mets}, indent=2))
    outputs = [out / "metrics.json", out / "endmembers.csv"]
    for r in range(a.shape[2]):
        p = out / f"abundance_{r}.pgm"
        write_pgm(p, a[..., r])
        outputs.append(p)
    write_endmembers_csv(out / "endmembers.csv", m)
    write_manifest(out, "eval", ck.meta.get("config", {}), [ck.meta.get("config", {}).get("seed")],
                   [args.checkpoint, args.data], outputs, started)
    if mets:
        print(f"aRMSE {mets['aRMSE']:.6f} mSAD {mets['mSAD']:.6f}")
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

ABLATE_FIELDS = ["method", "depth", "param_count", "param_mb", "seconds_per_step", "ledger_peak",
                 "aRMSE", "mSAD"]


def ablate_rows(ds, R, cfg, depths):
    rows = []
    y = ds.y.astype(cfg.dtype)
    init = initialize(y, R, cfg)
    for depth in depths:
        for method in ("deq", "unroll", "unroll-s"):
            c = TrainConfig.from_dict({**cfg.to_dict(), "k_max": depth})
            _, a0, layer = init
            fresh = (y, a0, layer.copy())
            if method == "deq":
                rep = train_deq(y, R, c, init=fresh)
                n = param_count(rep.params)
                peak = ledger_measure(lambda led: deq_step(fresh[2].copy(), a0, y, c, led)).peak
            else:
                share = method == "unroll-s"
                rep = train_unrolled(y, R, c, share_params=share, k_layers=depth, init=fresh)
                n = param_count(rep.params)
                params = unrolled_params(layer, depth, share, make_rng(c.seed, 2))
                views = layer_views(params, depth, share, c.eta, c.gamma)
                peak = ledger_measure(lambda led: unrolled_gradients(views, a0, y, c.alpha, led)).peak
            mets = _metrics_or_none(ds, rep.abundances, rep.endmembers) or {}
            rows.append({
                "method": method, "depth": depth, "param_count": n,
                "param_mb": n * np.dtype(c.dtype).itemsize / 2 ** 20,
                "seconds_per_step": float(np.mean(rep.step_seconds)),
                "ledger_peak": peak,
                "aRMSE": mets.get("aRMSE", ""), "mSAD": mets.get("mSAD", ""),
            })
            log.info("ablate %s depth %d done", method, depth)
    return rows


def cmd_ablate(args):
    started = time.time()
    try:
        depths = [int(v) for v in args.depths.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--depths expects comma-separated integers, got {args.depths!r}") from None
    if not depths or min(depths) < 1:
        raise UsageError("--depths must list positive integers")
    cfg = _load_config(args.config, {"epochs": args.epochs, "seed": args.seed, "channels": args.channels})
    ds = read_cube(args.data)
    R = _infer_r(ds, args.endmembers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with _thread_limit():
        rows = ablate_rows(ds, R, cfg, depths)
    with open(out / "ablation.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=ABLATE_FIELDS)
        wr.writeheader()
        wr.writerows(rows)
    write_manifest(out, "ablate", {**cfg.to_dict(), "depths": depths}, [cfg.seed], [args.data],
                   [out / "ablation.csv"], started)
    print(f"wrote {out / 'ablation.csv'} ({len(rows)} rows)")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="deq-unmix", description="Equilibrium-model hyperspectral unmixing.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    s.add_argument("--size", default="100x100", help="HxW (default 100x100)")
    s.add_argument("--bands", type=int, default=224)
    s.add_argument("--endmembers", type=int, default=6)
    s.add_argument("--snr", default="30", help="dB, or 'inf' for a noiseless cube")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cap", type=float, default=0.85)
    s.add_argument("--corr-length", type=float, default=10.0)
    s.add_argument("--library", default=None, help="endmember library CSV (default: built-in)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model or run the VCA+FCLS baseline")
    t.add_argument("--data", required=True)
    t.add_argument("--method", choices=METHODS, default="deq")
    t.add_argument("--config", default=None, help="flat TOML file of training settings")
    t.add_argument("--repeats", type=int, default=1)
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--depth", type=int, default=10, help="layers for unroll/unroll-s")
    t.add_argument("--endmembers", type=int, default=None, help="R, if the cube has no ground truth")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--channels", type=int, default=None)
    t.add_argument("--solver", choices=("anderson", "picard"), default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint and write abundance maps")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="depth sweep over deq / unroll / unroll-s")
    a.add_argument("--data", required=True)
    a.add_argument("--depths", default="2,5,10,20")
    a.add_argument("--config", default=None)
    a.add_argument("--epochs", type=int, default=5)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--channels", type=int, default=None)
    a.add_argument("--endmembers", type=int, default=None)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"deq-unmix: error: {exc}", file=sys.stderr)
        return 2
    except (UnmixError, OSError) as exc:
        print(f"deq-unmix: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
