"""ctsynth command line: toy training, generation, VAE round-trip, split
benchmarking, quality checking and phantom export.

Exit codes: 0 success / pass, 1 failed check, 2 nothing checked or usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import diffusion, metrics, presets, synthetic, tsp, vae
from .checkpoint import CheckpointError
from .control import cond_encode, control_forward
from .training import (RunConfig, StageOrderError, load_control, load_vae, require_stage,
                       run_stage)
from .volume import (CtVolume, PrimaryCond, SegMask, VolumeMeta, denormalize_hu,
                     nearest_multiple, normalize_hu, read_mvol, write_mvol)

log = logging.getLogger("ctsynth")


def _ints(text):
    return [int(v) for v in text.split(",") if v]


def _floats(text):
    return [float(v) for v in text.split(",") if v]


def _words(text):
    return [v for v in text.split(",") if v]


def _config(args):
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "checkpoint_dir", None):
        cfg.checkpoint_dir = args.checkpoint_dir
    return cfg


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# -- commands ---------------------------------------------------------------------

def cmd_train_toy(args):
    from .plotting import plot_losses

    cfg = _config(args)
    path, digest, records = run_stage(cfg, args.stage, args.steps, args.resume, args.stop_at)
    fig = plot_losses(records, path.with_name(f"{args.stage}_losses.png"),
                      keys=["recon", "kl", "d_loss", "g_loss"] if args.stage == "vae" else ["loss"])
    _emit({"stage": args.stage, "checkpoint": str(path), "hash": digest, "steps": len(records),
           "first": records[0] if records else None, "last": records[-1] if records else None,
           "figure": str(fig)})
    return 0


def cmd_roundtrip(args):
    from .plotting import plot_slices

    ct = read_mvol(args.input)
    if not isinstance(ct, CtVolume):
        raise SystemExit("roundtrip: input must be a CT volume")
    model, digest, _ = load_vae(args.checkpoint)
    f = model.factor
    if any(n % f for n in ct.meta.dims):
        need = [nearest_multiple(n, f) for n in ct.meta.dims]
        raise ValueError(f"dims {ct.meta.dims} are not divisible by {f}; round to {need}")
    x = normalize_hu(ct)
    stats = vae.encode(model, x)
    y = vae.decode(model, stats.mu)
    report = {"checkpoint": digest,
              "psnr": metrics.psnr(x, y, 1.0),
              "ssim": metrics.ssim3d(x, y, 1.0),
              "l1": float(np.mean(np.abs(x.astype(np.float64) - y)))}
    if args.tsp:
        y_tsp = vae.decode_tsp(model, stats.mu, args.tsp, workers=args.workers)
        report["tsp_segments"] = args.tsp
        report["tsp_max_abs_diff"] = float(np.max(np.abs(y_tsp - y)))
        y = y_tsp
    out = Path(args.output or Path(args.input).with_suffix(".recon.mvol"))
    recon = denormalize_hu(np.clip(y, 0.0, 1.0), ct.meta)
    write_mvol(out, recon)
    report["output"] = str(out)
    report["figure"] = str(plot_slices([ct.grid, recon.grid], ["input", "recon"], out.with_suffix(".png")))
    _emit(report)
    return 0


def cmd_generate(args):
    from .plotting import plot_slices

    cfg = _config(args)
    dims = tuple(args.dims)
    meta = VolumeMeta(dims, tuple(args.spacing), args.top, args.bottom)
    need = cfg.vae_factor * 2 ** 2
    if any(n % need for n in dims):
        raise ValueError(f"dims {dims} must be divisible by {need}")
    prereq = require_stage(cfg, "cn")  # vae + dm, hash-chained
    model, vhash, _ = prereq["vae"]
    unet, uhash, _ = prereq["dm"]
    sched = cfg.schedule()
    cond = PrimaryCond.from_regions(args.top, args.bottom, args.spacing)
    latent_dims = tuple(n // model.factor for n in dims)
    forward, chash = None, None
    if args.mask:
        mask = read_mvol(args.mask)
        if not isinstance(mask, SegMask) or mask.meta.dims != dims:
            raise ValueError(f"mask must be a label volume with dims {dims}")
        cm, chash, _ = load_control(cfg.ckpt_path("cn"), unet, uhash)
        c_f = cond_encode(cm, mask).data

        def forward(z, t, c):
            return control_forward(cm, z, t, c, c_f)

    z = diffusion.generate(unet, sched, latent_dims, cond, args.seed, forward)
    n_vox = int(np.prod(dims))
    if n_vox > cfg.tsp_threshold:
        y = vae.decode_tsp(model, z, cfg.tsp_segments, workers=cfg.workers)
    else:
        y = vae.decode(model, z)
    ct = denormalize_hu(np.clip(y, 0.0, 1.0), meta)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_mvol(out, ct)
    manifest = {"seed": args.seed, "T": sched.T, "dims": list(dims), "c_p": cond.to_dict(),
                "output": str(out), "tsp": n_vox > cfg.tsp_threshold,
                "checkpoints": {"vae": vhash, "unet": uhash, "control": chash}}
    out.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if args.figure:
        plot_slices([ct.grid], ["generated"], out.with_suffix(".png"))
    _emit(manifest)
    return 0


def cmd_benchmark_tsp(args):
    from .plotting import plot_benchmark

    chain, shape = presets.make_preset(args.chain, args.seed)
    shape = list(shape)
    if args.extent:
        shape[2] = args.extent
    x = np.random.default_rng(args.seed).standard_normal(shape).astype(np.float32)
    rows = tsp.run_benchmark(chain, x, args.segments, args.mode, args.chain, args.workers)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=tsp.BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(buf.getvalue())
        fig = plot_benchmark(rows, Path(args.figure or Path(args.out).with_suffix(".png")))
        log.info("wrote %s and %s", args.out, fig)
    elif args.figure:
        plot_benchmark(rows, args.figure)
    sys.stdout.write(buf.getvalue())
    worst = max(r["max_abs_diff_vs_monolithic"] for r in rows)
    return 1 if worst > 1e-5 else 0


def cmd_check_quality(args):
    ct, mask = read_mvol(args.ct), read_mvol(args.mask)
    if not isinstance(ct, CtVolume) or not isinstance(mask, SegMask):
        raise ValueError("check-quality needs a CT volume and a mask")
    ranges = metrics.QualityRanges.load(args.ranges) if args.ranges else metrics.ILLUSTRATIVE_RANGES
    try:
        report = metrics.quality_check(ct, mask, ranges)
    except metrics.NothingCheckedError as exc:
        _emit({"pass": None, "error": str(exc)})
        return 2
    _emit(report)
    return 0 if report["pass"] else 1


def cmd_synth(args):
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        ct, mask = synthetic.blob_phantom(rng, tuple(args.dims))
        write_mvol(out / f"phantom_{i:03d}.mvol", ct)
        write_mvol(out / f"phantom_{i:03d}.mask.mvol", mask)
    _emit({"out": str(out), "count": args.count, "dims": args.dims})
    return 0


# -- parser -------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="ctsynth", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-toy", help="train one pipeline stage (vae, dm, cn)")
    s.add_argument("--stage", choices=("vae", "dm", "cn"), required=True)
    s.add_argument("--config", help="RunConfig JSON")
    s.add_argument("--checkpoint-dir")
    s.add_argument("--steps", type=int, help="override the configured step count")
    s.add_argument("--resume", action="store_true", help="continue from an existing stage checkpoint")
    s.add_argument("--stop-at", type=int, help="halt after this many steps (the schedule still spans --steps)")
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("generate", help="sample a CT volume")
    s.add_argument("--dims", type=_ints, required=True, help="d,h,w")
    s.add_argument("--spacing", type=_floats, default=[1.5, 1.0, 1.0], help="sz,sy,sx in mm")
    s.add_argument("--top", required=True)
    s.add_argument("--bottom", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--mask", help="label mvol; enables the control branch")
    s.add_argument("--output", default="generated.mvol")
    s.add_argument("--figure", action="store_true", help="also write slice previews")
    s.add_argument("--config")
    s.add_argument("--checkpoint-dir")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("roundtrip", help="encode and decode a CT volume")
    s.add_argument("--input", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--tsp", type=int, default=0, help="decode with N depth segments")
    s.add_argument("--workers", type=int)
    s.add_argument("--output")
    s.set_defaults(func=cmd_roundtrip)

    s = sub.add_parser("benchmark-tsp", help="memory/time/equivalence table for a preset chain")
    s.add_argument("--chain", default="conv4", choices=sorted(presets.PRESETS))
    s.add_argument("--extent", type=int, help="input depth extent")
    s.add_argument("--segments", type=_ints, default=[1, 2, 4, 8])
    s.add_argument("--mode", type=_words, default=["monolithic", "sequential", "parallel"])
    s.add_argument("--workers", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="CSV path (a PNG figure is written beside it)")
    s.add_argument("--figure", help="figure path")
    s.set_defaults(func=cmd_benchmark_tsp)

    s = sub.add_parser("check-quality", help="organ median-HU gate")
    s.add_argument("--ct", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--ranges", help="JSON {label: [lo, hi]}; defaults to illustrative ranges")
    s.set_defaults(func=cmd_check_quality)

    s = sub.add_parser("synth", help="write seeded phantom CT/mask pairs")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--dims", type=_ints, default=[32, 32, 32])
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (StageOrderError, CheckpointError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
