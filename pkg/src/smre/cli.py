"""Command-line surface.

Subcommands: count (complexity accounting), train, infer, eval, and
route-stats. Machine-readable line-delimited JSON goes to stdout; human
summaries go to stderr so the record stream stays parseable. Every run
writes a JSON manifest sufficient to replay it.

Exit codes: 0 success, 2 configuration problem, 3 data problem
(unreadable images, bad checkpoints, empty datasets), 4 violated
--expect bound.
"""

import argparse
import datetime
import json
import os
import sys

import numpy as np

from . import __version__
from . import autodiff as ad
from .errors import (CheckpointError, ConfigError, DataError,
                     ExpectationError)
from .imaging import (ImagePlane, bicubic_resize, load_png, psnr_from_y,
                      rgb_to_y, save_png, ssim_from_y)
from .model import (ModelConfig, PRESETS, build, cost_report,
                    load_checkpoint, preset_config, save_checkpoint)
from .training import PairedDataset, TrainConfig, train

TRAIN_KEYS = ("patch", "batch", "iters", "lr0", "milestones", "fft_weight",
              "seed", "augment")
_INT_TUPLE_KEYS = {"ranks", "milestones"}
_FLOAT_KEYS = {"lr0", "fft_weight"}
_BOOL_KEYS = {"augment"}


def _json_safe(value):
    # strict JSON has no Infinity/NaN literals; use string sentinels
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, float) and not np.isfinite(value):
        return "inf" if value > 0 else ("-inf" if value < 0 else "nan")
    return value


def emit(record):
    sys.stdout.write(json.dumps(_json_safe(record), sort_keys=True,
                                allow_nan=False) + "\n")
    sys.stdout.flush()


def note(text):
    sys.stderr.write(text + "\n")


# ---------------------------------------------------------------------------
# config plumbing


def _parse_value(key, raw):
    raw = raw.strip()
    if key in _INT_TUPLE_KEYS:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if key in _FLOAT_KEYS:
        return float(raw)
    if key in _BOOL_KEYS:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError("expected a boolean for %s, got %r" % (key, raw))
    try:
        return int(raw)
    except ValueError:
        raise ConfigError("expected an integer for %s, got %r" % (key, raw))


def read_config_file(path):
    """Flat key = value lines; '#' starts a comment."""
    known = set(ModelConfig.FIELDS) | set(TRAIN_KEYS)
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError("cannot read config file %s: %s" % (path, exc))
    for lineno, line in enumerate(lines, 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError("%s:%d: expected key = value, got %r"
                              % (path, lineno, line.rstrip()))
        key, raw = body.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ConfigError("%s:%d: unknown key %r" % (path, lineno, key))
        values[key] = _parse_value(key, raw)
    return values


def _apply_overrides(values, overrides):
    known = set(ModelConfig.FIELDS) | set(TRAIN_KEYS)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError("--set expects key=value, got %r" % item)
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in known:
            raise ConfigError("--set: unknown key %r" % key)
        values[key] = _parse_value(key, raw)
    return values


def resolve_configs(source, scale=None, overrides=None):
    """Preset name or config-file path -> (ModelConfig, train-key dict)."""
    if source in PRESETS:
        values = dict(PRESETS[source])
    elif os.path.isfile(source):
        values = read_config_file(source)
    else:
        raise ConfigError("%r is neither a preset (%s) nor a config file"
                          % (source, "/".join(sorted(PRESETS))))
    _apply_overrides(values, overrides)
    if scale is not None:
        values["scale"] = int(scale)
    train_values = {k: values.pop(k) for k in list(values) if k in TRAIN_KEYS}
    model_cfg = ModelConfig(**values).validate()
    return model_cfg, train_values


def _utcnow():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def write_manifest(path, command, config, seed, started, artifacts,
                   train_config=None):
    doc = {
        "command": command,
        "config": config,
        "train_config": train_config,
        "seed": seed,
        "started": started,
        "finished": _utcnow(),
        "artifacts": [str(a) for a in artifacts],
        "version": __version__,
    }
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, str(path))
    return str(path)


# ---------------------------------------------------------------------------
# commands


def _parse_out_res(text):
    try:
        w_s, h_s = text.lower().split("x", 1)
        w, h = int(w_s), int(h_s)
    except ValueError:
        raise ConfigError("--out-res expects WIDTHxHEIGHT, got %r" % text)
    if w < 1 or h < 1:
        raise ConfigError("--out-res dimensions must be positive, got %r" % text)
    return w, h


def cmd_count(args):
    started = _utcnow()
    config, _ = resolve_configs(args.model, args.scale, args.set)
    out_w, out_h = _parse_out_res(args.out_res)
    report = cost_report(config, out_h, out_w, mode=args.mode)
    for name, (p, m) in report.breakdown.items():
        emit({"record": "module", "name": name, "params": p, "macs": m})
    emit({"record": "totals", "params": report.params, "macs": report.macs,
          "out_res": "%dx%d" % (out_w, out_h), "mode": args.mode,
          "scale": config.scale})
    note("%s scale %d at %dx%d (%s): %s params, %s MACs"
         % (args.model, config.scale, out_w, out_h, args.mode,
            "{:,}".format(report.params), "{:,}".format(report.macs)))
    manifest = args.manifest or "smre_count_manifest.json"
    write_manifest(manifest, "count", config.to_dict(), None, started, [])
    for label, actual, bound in (("params", report.params, args.expect_params),
                                 ("macs", report.macs, args.expect_macs)):
        if bound is None:
            continue
        rel = abs(actual - bound) / bound
        if rel > args.tolerance:
            raise ExpectationError(
                "%s %d deviates %.1f%% from expected %d (tolerance %.1f%%)"
                % (label, actual, 100 * rel, bound, 100 * args.tolerance))
    return 0


def cmd_train(args):
    started = _utcnow()
    config, train_values = resolve_configs(args.model, args.scale, args.set)
    for key in ("iters", "seed", "batch", "patch"):
        flag = getattr(args, key)
        if flag is not None:
            train_values[key] = flag
    if args.fft_weight is not None:
        train_values["fft_weight"] = args.fft_weight
    if args.no_augment:
        train_values["augment"] = False
    tc = TrainConfig(**train_values)
    dataset = PairedDataset.from_dir(args.data, config.scale,
                                     min_lr_side=tc.patch)
    model = build(config, seed=tc.seed)
    history = train(model, dataset, tc, emit=emit,
                    checkpoint_path=args.ckpt,
                    checkpoint_every=args.save_every)
    note("trained %d iterations, final loss %.6f, checkpoint %s"
         % (tc.iters, history[-1], args.ckpt))
    manifest = args.manifest or str(args.ckpt) + ".manifest.json"
    write_manifest(manifest, "train", config.to_dict(), tc.seed, started,
                   [args.ckpt],
                   train_config={k: (list(v) if isinstance(v, tuple) else v)
                                 for k, v in vars(tc).items()})
    return 0


def _input_images(path):
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.endswith(".png"))
        if not names:
            raise DataError("no PNG files in %s" % path)
        return [(n, os.path.join(path, n)) for n in names]
    if os.path.isfile(path):
        return [(os.path.basename(path), path)]
    raise DataError("input %s does not exist" % path)


def _sr_image(model, img):
    lr = ad.Tensor(img.to_unit_floats()[None])
    with ad.no_grad():
        sr, records = model.forward(lr, "infer")
    out = ImagePlane.from_unit_floats(np.asarray(sr.data[0], dtype=np.float64))
    return out, records


def cmd_infer(args):
    started = _utcnow()
    model = load_checkpoint(args.ckpt)
    if args.scale is not None and args.scale != model.config.scale:
        raise ConfigError("checkpoint was trained at scale %d, not %d"
                          % (model.config.scale, args.scale))
    os.makedirs(args.out, exist_ok=True)
    artifacts = []
    for name, path in _input_images(args.input):
        img = load_png(path)
        sr, records = _sr_image(model, img)
        out_path = os.path.join(args.out, name)
        save_png(sr, out_path)
        artifacts.append(out_path)
        record = {"record": "infer", "image": name,
                  "in_size": "%dx%d" % (img.width, img.height),
                  "out_size": "%dx%d" % (sr.width, sr.height)}
        if args.dump_routes:
            record["routes"] = [{"layer": r.layer_index, "chosen": int(r.chosen),
                                 "weights": [float(w) for w in r.weights]}
                                for r in records]
        emit(record)
    note("wrote %d image(s) to %s" % (len(artifacts), args.out))
    manifest = args.manifest or os.path.join(args.out, "manifest.json")
    write_manifest(manifest, "infer", model.config.to_dict(), None, started,
                   artifacts)
    return 0


def _eval_pairs(hr_dir, scale):
    """Sorted (name, hr, lr) triples; LR from the sibling dir or derived."""
    if not os.path.isdir(hr_dir):
        raise DataError("HR directory %s does not exist" % hr_dir)
    names = sorted(n for n in os.listdir(hr_dir) if n.endswith(".png"))
    if not names:
        raise DataError("no PNG files in %s" % hr_dir)
    lr_dir = hr_dir.rstrip("/\\") + "_lrx%d" % scale
    out = []
    for name in names:
        hr = load_png(os.path.join(hr_dir, name))
        trim_h = hr.height - hr.height % scale
        trim_w = hr.width - hr.width % scale
        if (trim_h, trim_w) != (hr.height, hr.width):
            hr = ImagePlane(hr.pixels[:trim_h, :trim_w].copy())
        lr_path = os.path.join(lr_dir, name)
        if os.path.isfile(lr_path):
            lr = load_png(lr_path)
            if (lr.height, lr.width) != (hr.height // scale, hr.width // scale):
                raise DataError("LR file %s is %dx%d, expected %dx%d"
                                % (lr_path, lr.height, lr.width,
                                   hr.height // scale, hr.width // scale))
        else:
            lr = bicubic_resize(hr, 1, scale)
        out.append((name, hr, lr))
    return out


def cmd_eval(args):
    started = _utcnow()
    model = load_checkpoint(args.ckpt)
    scale = args.scale if args.scale is not None else model.config.scale
    if scale != model.config.scale:
        raise ConfigError("checkpoint was trained at scale %d, not %d"
                          % (model.config.scale, scale))
    crop = args.crop if args.crop is not None else scale
    rows = []
    for name, hr, lr in _eval_pairs(args.hr, scale):
        sr, _ = _sr_image(model, lr)
        base = bicubic_resize(lr, scale, 1)
        y_hr = rgb_to_y(hr)
        row = {"record": "eval", "image": name,
               "psnr": psnr_from_y(rgb_to_y(sr), y_hr, crop),
               "ssim": ssim_from_y(rgb_to_y(sr), y_hr, crop),
               "psnr_bicubic": psnr_from_y(rgb_to_y(base), y_hr, crop),
               "ssim_bicubic": ssim_from_y(rgb_to_y(base), y_hr, crop)}
        rows.append(row)
        emit(row)
        note("%-24s psnr %7.3f ssim %.5f | bicubic %7.3f / %.5f"
             % (name, row["psnr"], row["ssim"], row["psnr_bicubic"],
                row["ssim_bicubic"]))
    mean = {"record": "mean", "images": len(rows)}
    for key in ("psnr", "ssim", "psnr_bicubic", "ssim_bicubic"):
        mean[key] = float(np.mean([r[key] for r in rows]))
    emit(mean)
    note("mean over %d image(s): psnr %.3f ssim %.5f | bicubic %.3f / %.5f"
         % (len(rows), mean["psnr"], mean["ssim"], mean["psnr_bicubic"],
            mean["ssim_bicubic"]))
    manifest = args.manifest or "smre_eval_manifest.json"
    write_manifest(manifest, "eval", model.config.to_dict(), None, started, [])
    return 0


def cmd_route_stats(args):
    started = _utcnow()
    model = load_checkpoint(args.ckpt)
    scale = args.scale if args.scale is not None else model.config.scale
    if scale != model.config.scale:
        raise ConfigError("checkpoint was trained at scale %d, not %d"
                          % (model.config.scale, scale))
    n_layers = model.config.n_rg
    n_experts = model.config.n_experts
    counts = np.zeros((n_layers, n_experts), dtype=np.int64)
    n_images = 0
    for name, _, lr in _eval_pairs(args.hr, scale):
        _, records = _sr_image(model, lr)
        n_images += 1
        for rec in records:
            # reuse the mixture's own masking rule (stable ties) to find
            # which experts actually fired for this image
            masked = ad.mask_top_k(ad.Tensor(rec.weights[None, :]),
                                   model.config.topk)
            for j in np.flatnonzero(masked.data[0]):
                counts[rec.layer_index, int(j)] += 1
    for layer in range(n_layers):
        emit({"record": "route", "layer": layer,
              "counts": [int(c) for c in counts[layer]],
              "images": n_images})
        note("layer %2d: %s" % (layer, "  ".join(
            "e%d:%d" % (j, counts[layer, j]) for j in range(n_experts))))
    manifest = args.manifest or "smre_route_stats_manifest.json"
    write_manifest(manifest, "route-stats", model.config.to_dict(), None,
                   started, [])
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="smre",
        description="Sparse mixture-of-rank-experts super-resolution toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_model_arg(p):
        p.add_argument("model", help="preset name (T/B/L) or config file path")
        p.add_argument("--scale", type=int, default=None,
                       help="upscaling factor (2, 3, or 4)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
        p.add_argument("--manifest", default=None, help="manifest output path")

    p = sub.add_parser("count", help="parameter and MAC accounting")
    add_model_arg(p)
    p.add_argument("--out-res", default="1280x720", metavar="WxH")
    p.add_argument("--mode", choices=("sparse", "dense"), default="sparse")
    p.add_argument("--expect-params", type=int, default=None)
    p.add_argument("--expect-macs", type=int, default=None)
    p.add_argument("--tolerance", type=float, default=0.15)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("train", help="train a model")
    add_model_arg(p)
    p.add_argument("--data", required=True, help="directory of HR PNGs")
    p.add_argument("--ckpt", default="model.smre", help="checkpoint path")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--fft-weight", type=float, default=None)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--save-every", type=int, default=0,
                   help="also checkpoint every N iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="super-resolve images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True,
                   help="input PNG or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scale", type=int, default=None,
                   help="assert the checkpoint scale")
    p.add_argument("--dump-routes", action="store_true",
                   help="include per-layer routing decisions in records")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="Y-channel PSNR/SSIM against HR images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--hr", required=True, help="directory of HR PNGs")
    p.add_argument("--scale", type=int, default=None)
    p.add_argument("--crop", type=int, default=None,
                   help="border crop in pixels (default: scale)")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("route-stats", help="per-layer expert usage histogram")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--hr", required=True, help="directory of HR PNGs")
    p.add_argument("--scale", type=int, default=None)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_route_stats)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        note("config error: %s" % exc)
        return 2
    except (DataError, CheckpointError, OSError) as exc:
        note("data error: %s" % exc)
        return 3
    except ExpectationError as exc:
        note("expectation violated: %s" % exc)
        return 4


if __name__ == "__main__":
    sys.exit(main())
