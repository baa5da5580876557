"""Command-line interface: ``gazedetr synth | train | eval | infer | attn-export``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
from PIL import Image, ImageDraw

from .checkpoint import CheckpointError, load_checkpoint, load_model_state, model_state, save_checkpoint
from .config import ConfigError, build_config, config_from_dict, diff_model_config
from .data import DatasetFormatError, PlacementError, load_image, read_dataset, save_pgm, write_dataset
from .model import GazeDETR
from .tensor import no_grad
from .train import NumericalFailure, evaluate_model, record_to_json, synth_samples, train_model

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("gazedetr")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p):
    p.add_argument("--config", default=None, help="INI-style config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable)")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="gazedetr", description="Desk-scale gaze target detection.", formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset", formatter_class=fmt)
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=100, help="number of scenes")
    p.add_argument("--seed", type=int, default=None, help="dataset seed (overrides synth.seed)")
    p.add_argument("--start", type=int, default=0, help="index of the first scene")

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    _add_config_flags(p)
    p.add_argument("--out", default=None, help="run directory (overrides train.out_dir)")
    p.add_argument("--data", default=None, help="training dataset directory (default: in-memory synthetic)")
    p.add_argument("--epochs", type=int, default=None, help="overrides train.epochs")
    p.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    p.add_argument("--fine-tune", action="store_true", help="use the low fine-tuning learning rates")

    p = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", default=None, help="dataset directory (default: held-out synthetic scenes)")
    p.add_argument("--out", required=True, help="output directory for the report and prediction dump")
    p.add_argument("--batch-size", type=int, default=32, help="evaluation batch size")

    p = sub.add_parser("infer", help="predict on one image", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--image", required=True, help="input image")
    p.add_argument("--score-thresh", type=float, default=0.5, help="minimum head score (0 keeps every query)")
    p.add_argument("--output", default=None, help="write JSON lines here instead of stdout")
    p.add_argument("--overlay", default=None, help="write an overlay image with boxes and gaze rays")

    p = sub.add_parser("attn-export", help="export cross-attention maps", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--image", required=True, help="input image")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--score-thresh", type=float, default=0.5, help="select queries with head score above this")
    p.add_argument("--queries", default=None, help="comma-separated query indices (overrides --score-thresh)")
    p.add_argument("--dump-raw", action="store_true", help="also save per-head maps as attention.npz")
    return parser


def _overrides(pairs):
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _load_model(path):
    try:
        cfg_dict, params, _ = load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except CheckpointError as exc:
        raise DataError(str(exc)) from None
    cfg = config_from_dict(cfg_dict)
    model = GazeDETR(cfg.model)
    load_model_state(model, params)
    model.eval()
    return cfg, model


def _load_input_image(path):
    try:
        return load_image(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None


# -- synth -----------------------------------------------------------------

def cmd_synth(args):
    ov = _overrides(args.overrides)
    if args.seed is not None:
        ov["synth.seed"] = str(args.seed)
    cfg = build_config(args.config, ov)
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    samples = synth_samples(cfg.synth, args.count, args.start)
    try:
        write_dataset(args.out, samples, header=[f"synthetic scenes, seed {cfg.synth.seed}"])
        manifest = {"seed": cfg.synth.seed, "count": args.count, "start": args.start,
                    "synth": cfg.synth.to_dict()}
        with open(os.path.join(args.out, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise DataError(f"cannot write dataset to {args.out}: {exc}") from None
    log.info("wrote %d scenes to %s", args.count, args.out)
    return EXIT_OK


# -- train -----------------------------------------------------------------

def cmd_train(args):
    ov = _overrides(args.overrides)
    if args.epochs is not None:
        ov["train.epochs"] = str(args.epochs)
    if args.seed is not None:
        ov["train.seed"] = str(args.seed)
    if args.out is not None:
        ov["train.out_dir"] = args.out
    if args.data is not None:
        ov["train.train_dir"] = args.data
    if args.fine_tune:
        ov["optim.fine_tune"] = "true"
    cfg = build_config(args.config, ov)
    out = cfg.train.out_dir
    try:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "config.ini"), "w") as fh:
            fh.write(cfg.to_ini())
    except OSError as exc:
        raise DataError(f"cannot write to run directory {out}: {exc}") from None
    if cfg.train.train_dir:
        samples = _read_dataset(cfg.train.train_dir)
    else:
        samples = synth_samples(cfg.synth, cfg.train.synth_count)
    progress = (lambda r: log.info("epoch %d total %.4f (%.1fs)", r["epoch"], r["total"], r["seconds"]))
    model, opt, _ = train_model(cfg, samples, log_path=os.path.join(out, "train_log.jsonl"),
                                checkpoint_dir=out, progress=progress)
    save_checkpoint(os.path.join(out, "final.ckpt"), cfg.to_dict(), model_state(model), opt.state_arrays())
    log.info("saved %s", os.path.join(out, "final.ckpt"))
    return EXIT_OK


def _read_dataset(root):
    try:
        samples = read_dataset(root)
    except (OSError, DatasetFormatError) as exc:
        raise DataError(str(exc)) from None
    if not samples:
        raise DataError(f"dataset {root} has no annotated images")
    return samples


# -- eval ------------------------------------------------------------------

def cmd_eval(args):
    ckpt_cfg, model = _load_model(args.checkpoint)
    if args.config or args.overrides:
        cfg = build_config(args.config, _overrides(args.overrides))
        diff = diff_model_config(cfg.model.to_dict(), ckpt_cfg.model.to_dict())
        if diff:
            fields = "; ".join(f"model.{k}: {getattr(cfg.model, k)!r} vs {getattr(ckpt_cfg.model, k)!r}"
                               for k in diff)
            raise UsageError(f"config does not match checkpoint in {fields}")
        match_cfg = cfg.match
    else:
        cfg, match_cfg = ckpt_cfg, ckpt_cfg.match
    if args.data:
        samples = _read_dataset(args.data)
    else:
        samples = synth_samples(cfg.synth, cfg.train.eval_count, cfg.train.eval_seed)
    try:
        report, records = evaluate_model(model, samples, match_cfg, args.batch_size)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    try:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.txt"), "w") as fh:
            fh.write(report.to_text())
        with open(os.path.join(args.out, "metrics.json"), "w") as fh:
            json.dump({"metrics": report.to_dict(), "config": cfg.to_dict(),
                       "checkpoint": os.path.basename(args.checkpoint)}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(args.out, "predictions.jsonl"), "w") as fh:
            for rec in records:
                fh.write(json.dumps(record_to_json(rec), sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write evaluation output to {args.out}: {exc}") from None
    sys.stdout.write(report.to_text())
    return EXIT_OK


# -- infer -----------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def detections(model, image, score_thresh):
    """Kept queries of one image as plain dicts, in query order."""
    with no_grad():
        out = model(image[None], [image.shape[1:]])
    scores = _sigmoid(out.head_logits.data[0])
    gaze = out.gaze_points(model.config.heatmap_size)[0]
    inout = _sigmoid(out.inout_logits.data[0])
    keep = np.ones_like(scores, dtype=bool) if score_thresh <= 0 else scores > score_thresh
    return [{"query": int(q), "box": out.boxes.data[0, q].tolist(), "score": float(scores[q]),
             "gaze": gaze[q].tolist(), "inout": float(inout[q])} for q in np.nonzero(keep)[0]]


OVERLAY_COLOR = (0, 0, 255)


def draw_primitives(draw, dets, W, H, fill):
    """Boxes plus a ray from each head center to its gaze point."""
    for d in dets:
        cx, cy, w, h = d["box"]
        draw.rectangle([(cx - w / 2) * W, (cy - h / 2) * H, (cx + w / 2) * W, (cy + h / 2) * H], outline=fill)
        draw.line([cx * W, cy * H, d["gaze"][0] * W, d["gaze"][1] * H], fill=fill)


def render_overlay(image, dets):
    """``(overlay uint8 [H, W, 3], drawn mask [H, W])`` for ``[3, H, W]`` image data."""
    arr = np.clip(np.round(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    H, W = arr.shape[:2]
    canvas = Image.fromarray(arr, "RGB")
    draw_primitives(ImageDraw.Draw(canvas), dets, W, H, OVERLAY_COLOR)
    mask = Image.new("L", (W, H), 0)
    draw_primitives(ImageDraw.Draw(mask), dets, W, H, 255)
    return np.asarray(canvas), np.asarray(mask) > 0


def cmd_infer(args):
    _, model = _load_model(args.checkpoint)
    image = _load_input_image(args.image)
    try:
        dets = detections(model, image, args.score_thresh)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    lines = "".join(json.dumps(d) + "\n" for d in dets)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(lines)
    else:
        sys.stdout.write(lines)
    if args.overlay:
        overlay, _ = render_overlay(image, dets)
        Image.fromarray(overlay, "RGB").save(args.overlay)
    return EXIT_OK


# -- attention export ------------------------------------------------------

def attention_maps(model, image):
    """Per-head last-layer cross-attention of both decoders for one image.

    Returns ``(head [h, N, Hv, Wv], gaze [h, N, Hv, Wv], scores [N])`` cropped
    to the valid feature extent.
    """
    with no_grad():
        out = model(image[None], [image.shape[1:]])
    Hf, Wf = out.feature_hw
    hv, wv = out.valid_feature_hw[0]

    def grid(maps):
        a = maps[-1][0]
        return a.reshape(a.shape[0], a.shape[1], Hf, Wf)[:, :, :hv, :wv]

    return grid(out.head_attention), grid(out.gaze_attention), _sigmoid(out.head_logits.data[0])


def minmax_normalize(a):
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros(a.shape)
    return (a - lo) / (hi - lo)


def cmd_attn_export(args):
    _, model = _load_model(args.checkpoint)
    image = _load_input_image(args.image)
    try:
        head, gaze, scores = attention_maps(model, image)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if args.queries:
        try:
            queries = [int(q) for q in args.queries.split(",") if q.strip()]
        except ValueError:
            raise UsageError(f"--queries expects comma-separated integers, got {args.queries!r}") from None
        bad = [q for q in queries if not 0 <= q < len(scores)]
        if bad:
            raise UsageError(f"query index {bad[0]} outside [0, {len(scores)})")
    else:
        queries = [int(q) for q in np.nonzero(scores > args.score_thresh)[0]]
    if not queries:
        log.warning("no query scores above %.3f; nothing exported", args.score_thresh)
        return EXIT_OK
    os.makedirs(args.out, exist_ok=True)
    for q in queries:
        save_pgm(os.path.join(args.out, f"head_q{q:03d}.pgm"), minmax_normalize(head[:, q].mean(axis=0)))
        save_pgm(os.path.join(args.out, f"gaze_q{q:03d}.pgm"), minmax_normalize(gaze[:, q].mean(axis=0)))
    if args.dump_raw:
        np.savez(os.path.join(args.out, "attention.npz"), head=head, gaze=gaze,
                 queries=np.asarray(queries), scores=scores)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "infer": cmd_infer, "attn-export": cmd_attn_export}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except (DataError, PlacementError) as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
    except NumericalFailure as exc:
        sys.stderr.write(f"numeric failure: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
