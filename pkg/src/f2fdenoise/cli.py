"""Command-line front end: ``f2f <command> ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Every command writes a JSON run manifest next to its main output; ``f2f
replay MANIFEST`` re-runs it.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, synth
from .errors import DataError, NumericalError
from .flow import FlowConfig, tvl1_flow, write_flo
from .frames import load_sequence, read_pgm, save_sequence
from .metrics import psnr, write_csv
from .model import ModelConfig, denoise, load_weights, save_weights
from .noise import (KINDS, Constant, LinearRamp, NoiseSpec, Switch, load_schedule,
                    schedule_eval)
from .trainer import (CSV_COLUMNS, FinetuneConfig, PretrainConfig, corrupt_video,
                      denoising_gain, finetune, pretrain)
from .warp import OcclusionConfig, build_pair, save_mask_pgm

logger = logging.getLogger("f2f")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# -- helpers -------------------------------------------------------------------

def _resolve_seed(seed):
    if seed is not None:
        return seed
    env = os.environ.get("F2F_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise DataError(f"F2F_SEED must be an integer, got {env!r}") from None


def _manifest_path(output) -> Path:
    """``name.manifest.json`` next to a file, ``manifest.json`` next to a frame pattern."""
    out = Path(str(output))
    if "%" in out.name:
        return out.parent / "manifest.json"
    return out.with_name(out.name + ".manifest.json")


def _write_manifest(args, argv, inputs, outputs, extra=None):
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "argv")}
    manifest = {
        "command": args.command,
        "tool_version": __version__,
        "seed": args.seed,
        "flags": flags,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "argv": list(argv),
    }
    if extra:
        manifest.update(extra)
    path = _manifest_path(outputs[0])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _spec(kind, sigma8, p, quality, radius) -> NoiseSpec:
    return NoiseSpec(kind, sigma=sigma8 / 255.0, p=p, quality=quality, disk_radius=radius)


def _schedule(args, n_frames):
    if args.noise_config:
        return load_schedule(args.noise_config)
    if args.noise == "switch":
        if args.at is None:
            raise DataError("--noise switch needs --at FRAME")
        first = _spec("awgn", args.sigma, args.p, args.quality, args.radius)
        second = _spec(args.then, args.then_sigma if args.then_sigma is not None else args.sigma,
                       args.p, args.quality, args.radius)
        return Switch(first, second, args.at)
    if args.noise == "ramp":
        if args.sigma_end is None:
            raise DataError("--noise ramp needs --sigma-end")
        end = args.ramp_end if args.ramp_end is not None else n_frames
        # ramps interpolate sigma of AWGN; other kinds need a schedule file
        return LinearRamp(_spec("awgn", args.sigma, args.p, args.quality, args.radius),
                          _spec("awgn", args.sigma_end, args.p, args.quality, args.radius),
                          args.ramp_start, end)
    return Constant(_spec(args.noise, args.sigma, args.p, args.quality, args.radius))


def _flow_cfg(args) -> FlowConfig:
    return FlowConfig(prefilter_downscale=args.flow_downscale, n_warps=args.flow_warps,
                      n_iters=args.flow_iters)


def _occ_cfg(args) -> OcclusionConfig:
    return OcclusionConfig(tau_div=args.tau_div, dilation_radius=args.dilation)


def _load_corpus(source) -> list[np.ndarray]:
    path = Path(source)
    if path.is_dir():
        files = sorted(path.glob("*.pgm"))
        if not files:
            raise DataError(f"no .pgm files in {path}")
        return [read_pgm(f) for f in files]
    return load_sequence(str(source))


def _nan_to_blank(rows):
    return [{k: ("" if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()}
            for r in rows]


# -- commands ------------------------------------------------------------------

def cmd_corrupt(args):
    clean = load_sequence(args.input)
    schedule = _schedule(args, len(clean))
    noisy = corrupt_video(clean, schedule, seed=args.seed)
    save_sequence(noisy, args.output, bits=args.bits)
    labels = {t: schedule_eval(schedule, t).describe() for t in range(1, len(clean) + 1)}
    log = Path(args.output).parent / "noise_log.csv"
    write_csv([{"frame_index": t, "active_noise_spec": s} for t, s in labels.items()], log,
              ["frame_index", "active_noise_spec"])
    print(f"corrupted {len(clean)} frames -> {args.output}")
    return [args.input], [args.output, log], {}


def cmd_pretrain(args):
    corpus = _load_corpus(args.corpus)
    held = corpus[-args.holdout:] if 0 < args.holdout < len(corpus) else corpus
    train = corpus[:-args.holdout] if 0 < args.holdout < len(corpus) else corpus
    mcfg = ModelConfig(depth=args.depth, width=args.width, use_norm=not args.no_norm)
    pcfg = PretrainConfig(sigma=args.sigma / 255.0, crop_size=args.crop, batch=args.batch,
                          steps=args.steps, lr=args.lr)

    def progress(step, loss):
        if step % 100 == 0:
            logger.info("step %d loss %.5f", step, loss)

    params = pretrain(train, pcfg, seed=args.seed, model_config=mcfg, progress=progress)
    save_weights(params, args.out)
    gain = denoising_gain(params, held, pcfg.sigma, seed=args.seed)
    print(f"held-out PSNR gain at sigma={args.sigma:g}: {gain:.2f} dB")
    extra = {"heldout_gain_db": round(gain, 4)}
    if args.require_gain is not None and not gain >= args.require_gain:
        _write_manifest(args, args.argv, [args.corpus], [args.out], extra)
        raise NumericalError(f"pretraining gain {gain:.2f} dB below required {args.require_gain:g} dB")
    return [args.corpus], [args.out], extra


def cmd_finetune(args):
    noisy = load_sequence(args.input)
    clean = load_sequence(args.clean) if args.clean else None
    if clean is not None and (len(clean) != len(noisy) or clean[0].shape != noisy[0].shape):
        raise DataError("--clean sequence does not match the noisy sequence")
    params0 = load_weights(args.weights)
    cfg = FinetuneConfig(lr=args.lr, n_iters=args.iters, mode=args.mode, epochs=args.epochs,
                         loss=args.loss, symmetric=args.symmetric, carry_adam=not args.reset_adam,
                         freeze_after=args.freeze_after, freeze_norm_stats=args.freeze_norm_stats,
                         seed=args.seed)
    label = None
    if args.noise_config:
        sched = load_schedule(args.noise_config)
        label = lambda t: schedule_eval(sched, t).describe()  # noqa: E731
    kwargs = dict(clean=clean, label=label, workers=args.threads)
    res = finetune(noisy, params0, _flow_cfg(args), _occ_cfg(args), cfg, **kwargs)
    outputs = []
    if args.out_frames:
        save_sequence(res.denoised, args.out_frames, bits=args.bits)
        outputs.append(args.out_frames)
    columns = list(CSV_COLUMNS) if clean is not None else [
        c for c in CSV_COLUMNS if not c.startswith("psnr")]
    write_csv(_nan_to_blank(res.csv_rows()), args.out_csv, columns)
    outputs.insert(0, args.out_csv)
    if args.out_weights:
        save_weights(res.params, args.out_weights)
        outputs.append(args.out_weights)
    extra = {}
    if clean is not None:
        extra["mean_psnr_finetuned"] = round(float(np.mean(res.psnr())), 4)
        extra["mean_psnr_pretrained"] = round(float(np.mean(res.column("psnr_pretrained"))), 4)
        print(f"mean PSNR fine-tuned {extra['mean_psnr_finetuned']:.2f} dB, "
              f"pretrained {extra['mean_psnr_pretrained']:.2f} dB")
    inputs = [args.input, args.weights] + ([args.clean] if args.clean else [])
    return inputs, outputs, extra


def cmd_denoise(args):
    noisy = load_sequence(args.input)
    params = load_weights(args.weights)
    save_sequence([denoise(params, f) for f in noisy], args.output, bits=args.bits)
    print(f"denoised {len(noisy)} frames -> {args.output}")
    return [args.input, args.weights], [args.output], {}


def cmd_flow(args):
    target, reference = read_pgm(args.target), read_pgm(args.reference)
    flow = tvl1_flow(target, reference, _flow_cfg(args))
    write_flo(args.out_flo, flow)
    outputs = [args.out_flo]
    pair = build_pair(target, reference, occ_cfg=_occ_cfg(args), flow=flow)
    if args.out_mask:
        save_mask_pgm(args.out_mask, pair.mask)
        outputs.append(args.out_mask)
    mag = flow.magnitude()
    print(f"mean |flow| {mag.mean():.3f} px, masked fraction {pair.masked_fraction:.3f}")
    return [args.target, args.reference], outputs, {"masked_fraction": round(pair.masked_fraction, 6)}


def cmd_eval(args):
    cand, ref = load_sequence(args.candidate), load_sequence(args.reference)
    if len(cand) != len(ref):
        raise DataError(f"frame count mismatch: {len(cand)} candidate vs {len(ref)} reference")
    rows = []
    for t, (c, r) in enumerate(zip(cand, ref), start=1):
        if c.shape != r.shape:
            raise DataError(f"frame {t}: dims {c.shape} vs {r.shape}")
        rows.append({"frame_index": t, "psnr": psnr(c, r)})
    values = np.array([r["psnr"] for r in rows])
    mean, std = float(values.mean()), float(values.std())
    write_csv(rows, args.out_csv, ["frame_index", "psnr"])
    with open(args.out_csv, "a") as fh:
        fh.write(f"mean,{mean:.4f}\nstd,{std:.4f}\n")
    print(f"{len(rows)} frames: mean PSNR {mean:.4f} dB, std {std:.4f} dB")
    return [args.candidate, args.reference], [args.out_csv], {"mean_psnr": round(mean, 4),
                                                              "std_psnr": round(std, 4)}


def cmd_synth(args):
    h, w = args.size
    if args.kind == "video":
        frames = synth.video(args.frames, (h, w), seed=args.seed)
    else:
        frames = synth.corpus(args.frames, (h, w), seed=args.seed)
    save_sequence(frames, args.output, bits=args.bits)
    print(f"wrote {len(frames)} {args.kind} frames -> {args.output}")
    return [], [args.output], {}


def cmd_replay(args):
    manifest = json.loads(Path(args.manifest).read_text())
    argv = manifest.get("argv")
    if not argv or argv[0] == "replay":
        raise DataError(f"{args.manifest}: no replayable command")
    return main(argv)


# -- parser ----------------------------------------------------------------------

def _noise_flags(p):
    g = p.add_argument_group("noise")
    g.add_argument("--noise", default="awgn", choices=list(KINDS) + ["switch", "ramp"],
                   help="noise kind, or a switch/ramp schedule (default: awgn)")
    g.add_argument("--sigma", type=float, default=25.0, help="std on the 8-bit scale (default: 25)")
    g.add_argument("--p", type=float, default=0.25, help="salt-and-pepper probability (default: 0.25)")
    g.add_argument("--quality", type=int, default=10, help="JPEG quality (default: 10)")
    g.add_argument("--radius", type=float, default=2.0, help="correlated-noise disk radius")
    g.add_argument("--then", default="salt_pepper", choices=KINDS,
                   help="kind after the switch (default: salt_pepper)")
    g.add_argument("--then-sigma", type=float, default=None, help="sigma after the switch")
    g.add_argument("--at", type=int, default=None, help="switch frame (1-based)")
    g.add_argument("--sigma-end", type=float, default=None, help="ramp end sigma (8-bit scale)")
    g.add_argument("--ramp-start", type=int, default=1, help="first ramp frame (default: 1)")
    g.add_argument("--ramp-end", type=int, default=None, help="last ramp frame (default: last frame)")
    g.add_argument("--noise-config", default=None, help="key=value schedule file (overrides flags)")


def _registration_flags(p):
    g = p.add_argument_group("registration")
    g.add_argument("--flow-downscale", type=int, default=2, help="flow resolution divisor (default: 2)")
    g.add_argument("--flow-warps", type=int, default=5)
    g.add_argument("--flow-iters", type=int, default=50)
    g.add_argument("--tau-div", type=float, default=0.5, help="divergence threshold (default: 0.5)")
    g.add_argument("--dilation", type=int, default=1, help="mask dilation radius (default: 1)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="master seed (default: $F2F_SEED or 0)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads; 1 guarantees bit-reproducibility")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="f2f", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("corrupt", parents=[common], help="add synthetic noise to a sequence")
    p.add_argument("input", help="clean frame pattern, e.g. clean/%%03d.pgm")
    p.add_argument("output", help="noisy frame pattern")
    p.add_argument("--bits", type=int, choices=(8, 16), default=16)
    _noise_flags(p)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("pretrain", parents=[common], help="supervised AWGN pretraining")
    p.add_argument("corpus", help="directory of clean .pgm images or a frame pattern")
    p.add_argument("--out", required=True, help="weights file to write")
    p.add_argument("--sigma", type=float, default=25.0, help="training noise std, 8-bit scale")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--crop", type=int, default=48)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--depth", type=int, default=7)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--no-norm", action="store_true", help="disable batch normalization")
    p.add_argument("--holdout", type=int, default=1, help="images held out for the gain metric")
    p.add_argument("--require-gain", type=float, nargs="?", const=3.0, default=None, metavar="DB",
                   help="exit 4 if the held-out gain is below DB (default when given: 3)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="frame-to-frame fine-tuning")
    p.add_argument("input", help="noisy frame pattern")
    p.add_argument("--weights", required=True, help="pretrained weights")
    p.add_argument("--mode", choices=("online", "offline"), default="online")
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--iters", type=int, default=20, help="Adam steps per frame (online)")
    p.add_argument("--epochs", type=int, default=20, help="passes over all pairs (offline)")
    p.add_argument("--loss", choices=("l1", "l2"), default="l1")
    p.add_argument("--symmetric", action="store_true", help="also train on the forward pair")
    p.add_argument("--freeze-after", type=int, default=None, metavar="T0")
    p.add_argument("--freeze-norm-stats", action="store_true")
    p.add_argument("--reset-adam", action="store_true", help="fresh Adam moments every frame")
    p.add_argument("--clean", default=None, help="clean frame pattern for PSNR columns")
    p.add_argument("--noise-config", default=None, help="schedule file used to label rows")
    p.add_argument("--out-frames", default=None)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-weights", default=None)
    p.add_argument("--bits", type=int, choices=(8, 16), default=16)
    _registration_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("denoise", parents=[common], help="frame-wise denoising with fixed weights")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--weights", required=True)
    p.add_argument("--bits", type=int, choices=(8, 16), default=16)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("flow", parents=[common], help="dump TV-L1 flow and occlusion mask")
    p.add_argument("target", help="frame f_t (.pgm)")
    p.add_argument("reference", help="frame f_ref (.pgm)")
    p.add_argument("--out-flo", required=True)
    p.add_argument("--out-mask", default=None)
    _registration_flags(p)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("eval", parents=[common], help="per-frame PSNR against a reference")
    p.add_argument("candidate")
    p.add_argument("reference")
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic clean video or corpus")
    p.add_argument("output", help="frame pattern")
    p.add_argument("--kind", choices=("video", "corpus"), default="video")
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    p.add_argument("--bits", type=int, choices=(8, 16), default=16)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if args.command == "replay":
        try:
            return args.func(args)
        except (DataError, OSError, ValueError) as exc:
            print(f"f2f: error: {exc}", file=sys.stderr)
            return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        args.seed = _resolve_seed(args.seed)
        if args.threads < 1:
            raise DataError("--threads must be >= 1")
        args.argv = argv
        with threadpool_limits(limits=args.threads):
            inputs, outputs, extra = args.func(args)
        _write_manifest(args, argv, inputs, outputs, extra)
    except NumericalError as exc:
        print(f"f2f: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError) as exc:
        print(f"f2f: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
