"""Command-line entry point: bevlocate {synth,train,render,localize,eval,gradcheck,bench}.

Exit codes: 0 success, 1 usage or input error, 2 verification failure. Errors
are reported on stderr as one JSON line {"error": kind, "message": text}.
Every command that writes an output directory leaves exactly one
run_manifest.json in it.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import __version__

log = logging.getLogger("bevlocate")

MANIFEST_NAME = "run_manifest.json"
EXIT_OK, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2


class UsageError(Exception):
    pass


class VerificationFailure(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    build: str
    timings: dict = field(default_factory=dict)

    def write(self, out_dir):
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2, default=str), encoding="utf-8")
        return path


def build_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def thread_cap(requested: int | None = None) -> int:
    """min(requested, BEVLOCATE_THREADS); 1 when neither is given."""
    env = os.environ.get("BEVLOCATE_THREADS")
    cap = None
    if env:
        try:
            cap = max(int(env), 1)
        except ValueError as exc:
            raise UsageError(f"BEVLOCATE_THREADS must be an integer, got {env!r}") from exc
    n = requested if requested is not None else (cap or 1)
    if n < 1:
        raise UsageError("--jobs must be at least 1")
    return min(n, cap) if cap else n


def _manifest(args, command) -> RunManifest:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func",)}
    return RunManifest(command, cfg, getattr(args, "seed", None), build_id())


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _find_map(args):
    from .mapstore import load_map

    return load_map(args.map, args.meta)


# commands

def cmd_synth(args) -> int:
    from .dataset import synth_world, write_world

    t0 = time.perf_counter()
    out = _out_dir(args.out)
    world = synth_world(args.seed, size_m=args.size_m, texture_scale=args.texture_scale,
                        n_frames=args.frames, search_extent_m=args.search_m, with_renders=False)
    write_world(out, world, image_px=args.image_px, seed=args.seed)
    man = _manifest(args, "synth")
    man.timings["total_s"] = time.perf_counter() - t0
    man.write(out)
    print(f"wrote {out / 'map.png'} ({world.raster.shape[1]}x{world.raster.shape[0]} px) "
          f"and {len(world.trajectory)} frames under {out / 'seq'}")
    return EXIT_OK


def _model_for(seq, seed, dtype=np.float32):
    from .model import BevModel

    px = seq.cams["center"].image_w
    if px % 8:
        raise UsageError(f"camera image width {px} is not a multiple of the 8 px patch")
    if px == 224:
        return BevModel.create(cams=seq.cams, seed=seed, dtype=dtype)
    return BevModel.miniature(seed=seed, dtype=dtype, cells=px // 8, cams=seq.cams)


def _load_model(weights, seq):
    from .model import BevModel
    from .nncore import load_weights

    return BevModel.from_store(load_weights(weights), cams=seq.cams)


def cmd_train(args) -> int:
    from .dataset import build_sample, load_sequence, sample_window
    from .nncore import save_weights
    from .training import TrainConfig, train, write_loss_curve

    t0 = time.perf_counter()
    out = _out_dir(args.out)
    raster = _find_map(args)
    seq = load_sequence(args.data)
    model = _model_for(seq, args.seed)
    label_px = model.render_cfg.output_extent(model.enc_cfg.grid.cells_l)
    rng = np.random.default_rng(args.seed)
    idx = range(len(seq)) if args.max_samples is None else range(min(args.max_samples, len(seq)))
    samples = []
    for i in idx:
        s = build_sample(seq, i, raster, rng, label_px=label_px)
        samples.append((sample_window(s), s.label))
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                      optimizer=args.optimizer)
    losses = train(model, samples, cfg)
    save_weights(out / "checkpoint.brw", model.store)
    write_loss_curve(out / "loss.csv", losses)
    man = _manifest(args, "train")
    man.timings["total_s"] = time.perf_counter() - t0
    man.write(out)
    print(f"{len(losses)} steps, loss {losses[0]:.6f} -> {losses[-1]:.6f}; checkpoint {out / 'checkpoint.brw'}")
    return EXIT_OK


def _windows(seq, seed, window_s, n_past):
    from .dataset import window_indices

    rng = np.random.default_rng(seed)
    return [window_indices(seq, i, rng, window_s, n_past) for i in range(len(seq))]


def _neural_bev(model, seq, window, cache):
    frames = []
    for i in window:
        if i not in cache:
            cache[i] = seq.frames[i].window_frame()
        frames.append(cache[i])
    return model.render(frames)


def cmd_render(args) -> int:
    from .dataset import load_sequence
    from .renderer import to_png_bytes_array

    t0 = time.perf_counter()
    out = _out_dir(args.out)
    seq = load_sequence(args.data)
    model = _load_model(args.weights, seq)
    cache = {}
    for window in _windows(seq, args.seed, args.window_s, args.n_past):
        bev = _neural_bev(model, seq, window, cache)
        ts = seq.frames[window[-1]].timestamp
        Image.fromarray(to_png_bytes_array(bev), "RGB").save(out / f"{ts:.3f}_bev.png")
        # frames drop out of the window once newer ones arrive
        for k in [k for k in cache if k < window[0]]:
            del cache[k]
    man = _manifest(args, "render")
    man.timings["total_s"] = time.perf_counter() - t0
    man.write(out)
    print(f"rendered {len(seq)} BEV images into {out}")
    return EXIT_OK


def _to_map_scale(rgb, m_per_px, map_m_per_px):
    if abs(m_per_px - map_m_per_px) < 1e-9:
        return rgb
    z = m_per_px / map_m_per_px
    return np.clip(ndimage.zoom(rgb, (z, z, 1), order=1), 0, 1)


def cmd_localize(args) -> int:
    from .dataset import load_sequence, oracle_render
    from .evaluation import ape_series, summarize
    from .geometry import Pose2
    from .registration import localize, write_predictions

    t0 = time.perf_counter()
    out = _out_dir(args.out)
    raster = _find_map(args)
    seq = load_sequence(args.data)
    jobs = thread_cap(args.jobs)
    rng = np.random.default_rng(args.seed)
    n = len(seq)
    # priors stand in for drifting odometry: ground truth plus a bounded offset
    radius = args.prior_drift_m * np.sqrt(rng.random(n))
    angle = rng.uniform(-math.pi, math.pi, n)
    priors = [Pose2(f.pose.easting + r * math.sin(a), f.pose.northing + r * math.cos(a), f.pose.azimuth)
              for f, r, a in zip(seq.frames, radius, angle)]
    noise_seeds = rng.integers(0, 2**63, n)

    if args.oracle:
        def bev_for(i):
            nrng = np.random.default_rng(noise_seeds[i])
            return oracle_render(raster, seq.frames[i].pose, args.render_px, args.noise_sigma,
                                 args.brightness, nrng)
    else:
        model = _load_model(args.weights, seq)
        windows = _windows(seq, args.seed, args.window_s, args.n_past)

        def bev_for(i):
            bev = _neural_bev(model, seq, windows[i], {})
            return _to_map_scale(bev.rgb, bev.m_per_px, raster.geo.m_per_px)

    def run(i):
        return localize(bev_for(i), priors[i], raster, args.search_m, args.method)

    t1 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(run, range(n)))  # map keeps frame order
    elapsed = time.perf_counter() - t1
    write_predictions(out / "predictions.csv", [(f.timestamp, r) for f, r in zip(seq.frames, results)])

    d = ape_series([[r.position.easting, r.position.northing] for r in results],
                   [[f.pose.easting, f.pose.northing] for f in seq.frames])
    report = summarize(d, args.threshold_m, elapsed / n)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    man = _manifest(args, "localize")
    man.timings.update(total_s=time.perf_counter() - t0, localize_s=elapsed, jobs=jobs)
    man.write(out)
    print(report.table(args.verbose))
    if args.require_match_rate is not None and report.match_rate < args.require_match_rate:
        raise VerificationFailure(f"match rate {report.match_rate:.4f} below required {args.require_match_rate}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate_files

    report = evaluate_files(args.pred, args.poses, args.threshold_m)
    print(report.table(args.verbose))
    if args.out:
        out = _out_dir(args.out)
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
        _manifest(args, "eval").write(out)
    if args.require_match_rate is not None and report.match_rate < args.require_match_rate:
        raise VerificationFailure(f"match rate {report.match_rate:.4f} below required {args.require_match_rate}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_composed_checks, run_op_checks

    t0 = time.perf_counter()
    results = run_op_checks(args.seed) + run_composed_checks(args.seed, args.probes)
    elapsed = time.perf_counter() - t0
    print(format_table(results))
    print(f"{sum(r.passed for r in results)}/{len(results)} passed in {elapsed:.1f} s")
    if args.out:
        out = _out_dir(args.out)
        rows = [{**asdict(r), "passed": r.passed} for r in results]
        (out / "gradcheck.json").write_text(json.dumps(rows, indent=2), encoding="utf-8")
        man = _manifest(args, "gradcheck")
        man.timings["total_s"] = elapsed
        man.write(out)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationFailure(f"gradient checks failed: {', '.join(failed)}")
    return EXIT_OK


def bench_ncc(region_px=874, template_px=None, repeats=5, workers=1, seed=0):
    """Median/min wall time in ms of ncc_map_fast on random data."""
    from .registration import inscribed_square, ncc_map_fast

    template_px = template_px or inscribed_square(224)
    rng = np.random.default_rng(seed)
    region = rng.random((region_px, region_px))
    template = rng.random((template_px, template_px))
    ncc_map_fast(template, region, workers=workers)  # warm plan caches
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        ncc_map_fast(template, region, workers=workers)
        times.append(1e3 * (time.perf_counter() - t))
    return float(np.median(times)), float(np.min(times))


def cmd_bench(args) -> int:
    workers = thread_cap(args.workers)
    rows = []
    for tpl in args.template:
        med, best = bench_ncc(args.region, tpl, args.repeats, workers, args.seed)
        rows.append((args.region, tpl, workers, med, best))
    print(f"{'region':>7} {'template':>8} {'workers':>7} {'median ms':>10} {'min ms':>8}")
    for r in rows:
        print(f"{r[0]:>7} {r[1]:>8} {r[2]:>7} {r[3]:>10.1f} {r[4]:>8.1f}")
    if args.out:
        out = _out_dir(args.out)
        man = _manifest(args, "bench")
        man.timings["ncc_ms"] = [dict(zip(("region", "template", "workers", "median", "min"), r)) for r in rows]
        man.write(out)
    return EXIT_OK


# parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _window_flags(p):
    p.add_argument("--window-s", type=float, default=5.0, help="past-frame window length in seconds")
    p.add_argument("--n-past", type=int, default=5, help="past frames sampled per window")


def _map_flags(p, required=True):
    p.add_argument("--map", required=required, help="map image (PNG)")
    p.add_argument("--meta", required=required, help="map JSON sidecar")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="bevlocate", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-q", "--quiet", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic map and sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size-m", type=float, default=500.0)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--image-px", type=int, default=224, help="camera image side (224 full model, 64 miniature)")
    p.add_argument("--texture-scale", type=float, default=1.0)
    p.add_argument("--search-m", type=float, default=200.0, help="trajectory keeps half this from the border")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train encoder + renderer against map crops")
    _map_flags(p)
    p.add_argument("--data", required=True, help="sequence directory")
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=4e-5)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--optimizer", choices=("sgd", "momentum", "adam"), default="sgd")
    p.add_argument("--max-samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render BEV images for every frame")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _window_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("localize", help="register BEV images against the map")
    _map_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--weights", help="BRW1 checkpoint for neural renders")
    src.add_argument("--oracle", action="store_true", help="use ground-truth map crops as renders")
    p.add_argument("--search-m", type=float, default=200.0)
    p.add_argument("--threshold-m", type=float, default=10.0)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--method", choices=("fast", "reference"), default="fast")
    p.add_argument("--noise-sigma", type=float, default=0.0, help="oracle render Gaussian noise")
    p.add_argument("--brightness", type=float, default=0.0, help="oracle render intensity offset")
    p.add_argument("--render-px", type=int, default=224)
    p.add_argument("--prior-drift-m", type=float, default=0.0, help="max offset of the prior from truth")
    p.add_argument("--require-match-rate", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    _window_flags(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("eval", help="APE and match rate from a predictions CSV")
    p.add_argument("--pred", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--threshold-m", type=float, default=10.0)
    p.add_argument("--out", default=None)
    p.add_argument("--require-match-rate", type=float, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every VJP")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probes", type=int, default=20)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="NCC latency table")
    p.add_argument("--region", type=int, default=874)
    p.add_argument("--template", type=int, nargs="+", default=[158])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)
    return ap


def _fail(kind, message, code):
    print(json.dumps({"error": kind, "message": str(message)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VerificationFailure as exc:
        return _fail("verification", exc, EXIT_VERIFY)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except (OSError, ValueError, KeyError, IndexError) as exc:
        return _fail(type(exc).__name__, exc, EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
