"""Command-line entry point (``ringsvbrdf``)."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .calibration import GrayCardSpec, RadiometricCurve, calibrate_light_intensity, fit_radiometric
from .latent import LatentMaps, decode
from .losses import l1, one_minus_ssim
from .optim import Adam, OptimizationDiverged, finetune_step, optimize_network_weights, optimize_svbrdf_direct
from .render import N_LIGHTS, LightRig, SceneGeometry, render_lights
from .styled_net import ARCHS, NetConfig, StyledNet
from .synth import EVEN_LIGHTS, ODD_LIGHTS, light_subset, make_training_example, procedural_material

log = logging.getLogger("ringsvbrdf")

METRICS = ("ssim", "l1")


def parse_lights(spec: str) -> list[int]:
    named = {"even": list(EVEN_LIGHTS), "odd": list(ODD_LIGHTS), "all": list(range(N_LIGHTS))}
    if spec in named:
        return named[spec]
    try:
        lights = [int(s) for s in spec.split(",") if s.strip()]
    except ValueError:
        raise ValueError(f"bad light list {spec!r}: use even, odd, all or comma-separated indices") from None
    if not lights or any(not 0 <= k < N_LIGHTS for k in lights) or len(set(lights)) != len(lights):
        raise ValueError(f"bad light list {spec!r}")
    return lights


def _load_rig(path) -> tuple[LightRig, RadiometricCurve]:
    if path is None:
        return LightRig.ring(), RadiometricCurve.identity()
    return fileio.load_rig(path)


def _held_out(inputs):
    return [k for k in range(N_LIGHTS) if k not in inputs]


def image_metrics(pred, target, metrics=METRICS) -> dict:
    """Per-light and mean metrics over stacks of linear images in [0, 1]."""
    out = {}
    for name in metrics:
        fn = one_minus_ssim if name == "ssim" else l1
        vals = [float(fn(p, t)) for p, t in zip(pred, target)]
        key = "one_minus_ssim" if name == "ssim" else "l1"
        out[key] = {"mean": float(np.mean(vals)), "per_light": vals}
    return out


def requantize(linear, curve: RadiometricCurve) -> np.ndarray:
    """Send linear images through the 8-bit raw encoding and back."""
    raw = fileio.quantize(curve.inverse(np.clip(linear, 0.0, None)), fileio.U8)
    return np.clip(curve(raw.astype(np.float64) / fileio.U8), 0.0, None)


def _odd_report(maps, images, rig, geom, lights, curve):
    if not lights:
        return None
    pred = requantize(render_lights(maps, rig, geom, lights), curve)
    return image_metrics(np.clip(pred, 0, 1), np.clip(images[lights], 0, 1))


# ---------------------------------------------------------------- commands

def cmd_render(args):
    maps = fileio.load_svbrdf(args.svbrdf)
    rig, curve = _load_rig(args.rig)
    geom = SceneGeometry(args.depth, maps.resolution[0], strict_depth=not args.allow_any_depth)
    lit = rig.scaled(args.level)
    with fileio.output_dir(args.out, args.force) as tmp:
        if args.all_lights:
            imgs = render_lights(maps, lit, geom, range(N_LIGHTS))
            fileio.save_capture_set(tmp, imgs, args.depth, args.level, curve)
        else:
            if args.light is None:
                raise ValueError("give --light K or --all-lights")
            img = render_lights(maps, lit, geom, [args.light])[0]
            raw = fileio.quantize(curve.inverse(np.clip(img, 0, None)), fileio.U8)
            fileio._write_png(tmp / fileio.image_name(args.light), raw)
            fileio.write_json(tmp / "meta.json", {
                "depth_mm": float(args.depth), "light_intensity_level": float(args.level),
                "resolution": int(geom.resolution), "radiometric": curve.coeffs.tolist(),
                "lights": [args.light],
            })
    print(args.out)


def cmd_gen_synth(args):
    rig, curve = _load_rig(args.rig)
    if args.pool:
        pool = fileio.load_pool(args.pool)
        res = pool[0].resolution[0] // 2
    else:
        res = args.resolution
        rng = np.random.default_rng(args.seed)
        seeds = rng.integers(2**31, size=args.pool_size)
        pool = [procedural_material(2 * res, int(s)) for s in seeds]
    lights = light_subset(args.inputs)
    rng = np.random.default_rng(args.seed + 1)
    with fileio.output_dir(args.out, args.force) as tmp:
        index = []
        for i in range(args.count):
            seed = int(rng.integers(2**31))
            ex = make_training_example(pool, seed, args.inputs, res, rig, lights)
            base = rig if args.no_jitter else ex.rig_jittered
            imgs = render_lights(ex.gt_maps, rig, ex.geom, range(N_LIGHTS))
            imgs[lights] = render_lights(ex.gt_maps, base, ex.geom, lights)
            d = tmp / f"ex_{i:04d}"
            fileio.save_capture_set(d / "capture", imgs, ex.geom.depth_mm, 1.0, curve,
                                    {"input_lights": lights, "seed": seed})
            fileio.save_svbrdf(d / "gt", ex.gt_maps)
            fileio.save_rig(d / "rig_inputs.json", base, curve)
            index.append({"name": d.name, "seed": seed, "depth_mm": ex.geom.depth_mm})
        fileio.write_json(tmp / "index.json", {"examples": index, "inputs": lights, "resolution": res})
    print(args.out)


def cmd_calibrate_radiometric(args):
    raw, ref = fileio.load_samples_csv(args.samples)
    curve = fit_radiometric(raw, ref)
    rig = fileio.load_rig(args.rig)[0] if args.rig else LightRig.ring()
    fileio.check_writable(args.out, args.force)
    fileio.save_rig(args.out, rig, curve)
    print(fileio.dumps({"coeffs": curve.coeffs.tolist(), "monotone": curve.is_monotone(),
                        "residual_rms": fileio._rms_list(curve)}), end="")


def cmd_calibrate_intensity(args):
    rig, curve = fileio.load_rig(args.rig)
    images, geom, meta = fileio.load_capture_set(args.graycard, curve)
    level = float(meta["light_intensity_level"])
    inten = calibrate_light_intensity(images, rig, geom, GrayCardSpec(args.reflectance)) / level
    out = args.out or args.rig
    if args.out:
        fileio.check_writable(out, args.force)
    fileio.save_rig(out, rig.copy(intensities=inten), curve)
    print(fileio.dumps({"intensities": inten.tolist(), "rig": str(out)}), end="")


def _load_capture_for(args):
    rig, curve = _load_rig(args.rig)
    images, geom, meta = fileio.load_capture_set(args.capture, curve)
    return images, geom, meta, fileio.capture_rig(rig, meta), curve


def cmd_optimize_direct(args):
    images, geom, meta, rig, curve = _load_capture_for(args)
    inputs = parse_lights(args.inputs)
    held = _held_out(inputs)
    init = LatentMaps.initial(geom.resolution)
    before = _odd_report(decode(init), images, rig, geom, held, curve)
    res = optimize_svbrdf_direct(images[inputs], rig, geom, inputs, args.iters, args.patience, args.lr, init)
    after = _odd_report(res.maps, images, rig, geom, held, curve)
    report = {
        "command": "optimize direct",
        "inputs": inputs,
        "held_out_lights": held,
        "iterations": len(res.trace),
        "stopped_early": res.stopped_early,
        "initial_loss": res.trace[0],
        "best_loss": res.best_loss,
        "held_out_before": before,
        "held_out_after": after,
    }
    with fileio.output_dir(args.out, args.force) as tmp:
        fileio.save_svbrdf(tmp, res.maps)
        fileio.write_trace_csv(tmp / "loss_trace.csv", res.trace)
        fileio.write_json(tmp / "report.json", report)
    print(fileio.dumps(report), end="")


def cmd_optimize_network(args):
    images, geom, meta, rig, curve = _load_capture_for(args)
    model = fileio.load_checkpoint(args.weights)
    inputs = parse_lights(args.inputs)
    if model.config.arch == "fixed" and len(inputs) != model.config.n_inputs:
        raise ValueError(f"fixed model needs {model.config.n_inputs} inputs, got {len(inputs)}")
    held = _held_out(inputs)
    before = _odd_report(model.predict(list(images[inputs])), images, rig, geom, held, curve)
    res = optimize_network_weights(model, images[inputs], rig, geom, inputs, args.iters, args.lr)
    after = _odd_report(res.maps, images, rig, geom, held, curve)
    report = {
        "command": "optimize network",
        "inputs": inputs,
        "held_out_lights": held,
        "iterations": args.iters,
        "initial_loss": res.trace[0],
        "final_loss": res.trace[-1],
        "held_out_before": before,
        "held_out_after": after,
    }
    with fileio.output_dir(args.out, args.force) as tmp:
        fileio.save_svbrdf(tmp, res.maps)
        fileio.write_trace_csv(tmp / "loss_trace.csv", res.trace)
        fileio.save_checkpoint(tmp / "weights", res.model)
        fileio.write_json(tmp / "report.json", report)
    print(fileio.dumps(report), end="")


def cmd_eval(args):
    maps = fileio.load_svbrdf(args.pred)
    images, geom, meta, rig, curve = _load_capture_for(args)
    if maps.resolution[0] != geom.resolution:
        raise ValueError(f"prediction is {maps.resolution[0]} px, capture is {geom.resolution} px")
    lights = parse_lights(args.lights)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in METRICS]
    if bad or not metrics:
        raise ValueError(f"unknown metrics {bad}; choose from {','.join(METRICS)}")
    pred = requantize(render_lights(maps, rig, geom, lights), curve)
    report = {"command": "eval", "lights": lights,
              "metrics": image_metrics(np.clip(pred, 0, 1), np.clip(images[lights], 0, 1), metrics)}
    if args.out:
        fileio.check_writable(args.out, args.force)
        fileio.write_json(args.out, report)
    print(fileio.dumps(report), end="")


def cmd_train_toy(args):
    rig, _ = _load_rig(args.rig)
    res = args.resolution
    if args.pool:
        pool = fileio.load_pool(args.pool)
        if pool[0].resolution[0] != 2 * res:
            raise ValueError(f"pool materials must be {2 * res} px for --resolution {res}")
    else:
        rng = np.random.default_rng(args.seed)
        pool = [procedural_material(2 * res, int(s)) for s in rng.integers(2**31, size=args.pool_size)]
    cfg = NetConfig(arch=args.arch, n_inputs=args.inputs)
    model = StyledNet(cfg, seed=args.seed)
    adam = Adam(args.lr)
    rng = np.random.default_rng(args.seed + 1)
    trace = []
    for step in range(args.steps):
        batch = [make_training_example(pool, int(rng.integers(2**31)), args.inputs, res, rig)
                 for _ in range(args.batch)]
        trace.append(finetune_step(model, adam, batch, "synthetic"))
        log.info("step %d loss %.5f", step, trace[-1])
    fileio.check_writable(Path(args.out).with_suffix(".bin"), args.force)
    fileio.save_checkpoint(args.out, model)
    report = {"command": "train-toy", "arch": args.arch, "inputs": args.inputs, "steps": args.steps,
              "num_params": model.num_params(), "loss_trace": trace}
    print(fileio.dumps(report), end="")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ringsvbrdf", description="Ring-light SVBRDF capture toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def out_args(q, required=True):
        q.add_argument("--out", required=required)
        q.add_argument("--force", action="store_true", help="overwrite existing output")
        q.add_argument("--seed", type=int, default=0)

    q = sub.add_parser("render", help="render an SVBRDF archive")
    q.add_argument("--svbrdf", required=True)
    q.add_argument("--rig")
    q.add_argument("--depth", type=float, required=True)
    q.add_argument("--light", type=int)
    q.add_argument("--all-lights", action="store_true")
    q.add_argument("--level", type=float, default=1.0, choices=fileio.LIGHT_LEVELS)
    q.add_argument("--allow-any-depth", action="store_true")
    out_args(q)
    q.set_defaults(func=cmd_render)

    q = sub.add_parser("gen-synth", help="generate synthetic captures with ground truth")
    q.add_argument("--pool")
    q.add_argument("--pool-size", type=int, default=8)
    q.add_argument("--resolution", type=int, default=64)
    q.add_argument("--count", type=int, required=True)
    q.add_argument("--inputs", type=int, default=6)
    q.add_argument("--rig")
    q.add_argument("--no-jitter", action="store_true")
    out_args(q)
    q.set_defaults(func=cmd_gen_synth)

    q = sub.add_parser("calibrate", help="radiometric or light-intensity calibration")
    csub = q.add_subparsers(dest="what", required=True)
    c = csub.add_parser("radiometric")
    c.add_argument("--samples", required=True)
    c.add_argument("--rig")
    out_args(c)
    c.set_defaults(func=cmd_calibrate_radiometric)
    c = csub.add_parser("intensity")
    c.add_argument("--graycard", required=True)
    c.add_argument("--rig", required=True)
    c.add_argument("--reflectance", type=float, default=0.18)
    out_args(c, required=False)
    c.set_defaults(func=cmd_calibrate_intensity)

    q = sub.add_parser("optimize", help="recover maps from a capture set")
    osub = q.add_subparsers(dest="how", required=True)
    o = osub.add_parser("direct")
    o.add_argument("--capture", required=True)
    o.add_argument("--rig")
    o.add_argument("--inputs", default="even")
    o.add_argument("--iters", type=int, default=2000)
    o.add_argument("--patience", type=int, default=100)
    o.add_argument("--lr", type=float, default=0.2)
    out_args(o)
    o.set_defaults(func=cmd_optimize_direct)
    o = osub.add_parser("network")
    o.add_argument("--capture", required=True)
    o.add_argument("--weights", required=True)
    o.add_argument("--rig")
    o.add_argument("--inputs", default="even")
    o.add_argument("--iters", type=int, default=100)
    o.add_argument("--lr", type=float, default=1e-3)
    out_args(o)
    o.set_defaults(func=cmd_optimize_network)

    q = sub.add_parser("eval", help="held-out light metrics for predicted maps")
    q.add_argument("--pred", required=True)
    q.add_argument("--capture", required=True)
    q.add_argument("--rig")
    q.add_argument("--lights", default="odd")
    q.add_argument("--metrics", default="ssim,l1")
    out_args(q, required=False)
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("train-toy", help="train a toy styled network on synthetic data")
    q.add_argument("--pool")
    q.add_argument("--pool-size", type=int, default=8)
    q.add_argument("--arch", choices=ARCHS, default="dynamic")
    q.add_argument("--inputs", type=int, default=2)
    q.add_argument("--steps", type=int, default=20)
    q.add_argument("--batch", type=int, default=4)
    q.add_argument("--resolution", type=int, default=32)
    q.add_argument("--lr", type=float, default=1e-3)
    q.add_argument("--rig")
    out_args(q)
    q.set_defaults(func=cmd_train_toy)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, OptimizationDiverged, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
