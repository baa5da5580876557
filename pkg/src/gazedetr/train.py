"""Training loop and evaluation runner."""

from __future__ import annotations

import json
import math
import os
import time

import numpy as np

from .checkpoint import model_state, save_checkpoint
from .data import augment, batch_pad, synth_generate
from .matching import MatchConfig, hungarian_assign, match_batch, matching_cost_matrix, prediction_slice, total_loss
from .metrics import evaluate_records
from .model import GazeDETR
from .optim import AdamW
from .tensor import no_grad


class NumericalFailure(FloatingPointError):
    """Raised when a loss term turns non-finite; ``term`` names it."""

    def __init__(self, term, epoch, step):
        super().__init__(f"loss term {term!r} became non-finite at epoch {epoch}, step {step}")
        self.term = term


# Output field -> the loss term it feeds, for naming non-finite failures.
_OUTPUT_TERMS = (("boxes", "bbox"), ("head_logits", "class"), ("inout_logits", "inout"),
                 ("gaze", "gaze"), ("heatmaps", "heatmap"))


def _check_outputs(out, epoch, step):
    for field, term in _OUTPUT_TERMS:
        t = getattr(out, field)
        if t is not None and not np.all(np.isfinite(t.data)):
            raise NumericalFailure(term, epoch, step)


def synth_samples(synth_cfg, count, start=0):
    return [synth_generate(synth_cfg, i) for i in range(start, start + count)]


def build_optimizer(model, cfg):
    lr, lr_bb = cfg.optim.rates()
    return AdamW([
        {"params": model.transformer_params(), "lr": lr},
        {"params": model.backbone_params(), "lr": lr_bb},
    ], weight_decay=cfg.optim.weight_decay)


def _epoch_batches(n, batch_size, seed, epoch):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_model(cfg, samples, log_path=None, checkpoint_dir=None, model=None, progress=None):
    """Train on ``samples``; returns ``(model, optimizer, history)``.

    ``history`` holds one dict per epoch with the mean of every loss term.
    When ``log_path`` is set each record is appended as a JSON line.
    Augmentation draws from a generator keyed by (seed, epoch, sample index);
    with ``batch_scale`` the resize target is drawn once per batch so images
    in a batch share a scale and padding stays small.
    """
    tc = cfg.train
    model = model or GazeDETR(cfg.model)
    model.train()
    opt = build_optimizer(model, cfg)
    history = []
    log_fh = open(log_path, "w") if log_path else None
    drop_epoch = max(1, int(round(cfg.optim.lr_drop_at * tc.epochs)))
    try:
        for epoch in range(tc.epochs):
            opt.set_lr_scale(cfg.optim.lr_drop_factor if epoch >= drop_epoch else 1.0)
            t0 = time.perf_counter()
            sums, n_batches, grad_norm = {}, 0, 0.0
            for step, idx in enumerate(_epoch_batches(len(samples), tc.batch_size, tc.seed, epoch)):
                short = None
                if tc.augment and tc.batch_scale:
                    a = cfg.augment
                    short = int(np.random.default_rng([tc.seed, epoch, step, 1]).integers(a.min_size, a.max_size + 1))
                batch = []
                for i in idx:
                    s = samples[int(i)]
                    if tc.augment:
                        s = augment(s, cfg.augment, np.random.default_rng([tc.seed, epoch, int(i)]), short)
                    batch.append(s)
                images, _, valid = batch_pad(batch)
                targets = [s.targets() for s in batch]
                out = model(images, valid)
                _check_outputs(out, epoch, step)
                assignments = match_batch(out, targets, cfg.match)
                loss, terms = total_loss(out, targets, assignments, cfg.loss, cfg.match)
                for k, v in terms.items():
                    if not math.isfinite(v):
                        raise NumericalFailure(k, epoch, step)
                opt.zero_grad()
                loss.backward()
                grad_norm += opt.clip_grad_norm(cfg.optim.clip_norm)
                opt.step()
                for k, v in terms.items():
                    sums[k] = sums.get(k, 0.0) + v
                n_batches += 1
            record = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()},
                      "grad_norm": grad_norm / n_batches,
                      "lr": opt.groups[0]["lr"], "seconds": time.perf_counter() - t0}
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if progress:
                progress(record)
            if checkpoint_dir and tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
                save_checkpoint(os.path.join(checkpoint_dir, f"epoch{epoch + 1:04d}.ckpt"),
                                cfg.to_dict(), model_state(model), opt.state_arrays())
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return model, opt, history


def predict(model, samples, batch_size=32):
    """Per-image numpy predictions (boxes, scores, gaze, inout, heatmaps).

    Images are grouped in input order into padded batches.
    """
    out_list = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            images, _, valid = batch_pad(chunk)
            out = model(images, valid)
            gaze = out.gaze_points(model.config.heatmap_size)
            for b in range(len(chunk)):
                sl = prediction_slice(out, b)
                out_list.append({
                    "boxes": sl["boxes"].copy(),
                    "logits": sl["logits"].copy(),
                    "scores": 1.0 / (1.0 + np.exp(-sl["logits"])),
                    "gaze": gaze[b].copy(),
                    "inout": sl["inout"].copy(),
                    "heatmaps": None if sl["heatmaps"] is None else sl["heatmaps"].copy(),
                })
    return out_list


def build_records(predictions, samples, match_cfg=None):
    """Join predictions with ground truth; gts are paired with queries by
    a head-only (class and box) assignment."""
    head_only = MatchConfig(**{**(match_cfg or MatchConfig()).to_dict(), "strategy": "BM1"})
    records = []
    for pred, s in zip(predictions, samples):
        gt = s.targets()
        match = {}
        if len(gt["boxes"]):
            asg = hungarian_assign(matching_cost_matrix(pred, gt, head_only))
            match = asg.pairs
        hm = pred["heatmaps"]
        s_hm = None
        if hm is not None:
            side = int(round(math.sqrt(hm.shape[-1])))
            s_hm = hm.reshape(-1, side, side)
        records.append({
            "path": s.path or f"synthetic/{s.index:06d}",
            "pred_boxes": pred["boxes"], "pred_scores": pred["scores"], "pred_gaze": pred["gaze"],
            "pred_inout": pred["inout"], "pred_heatmaps": s_hm,
            "gt_boxes": gt["boxes"], "gt_inframe": [i.in_frame for i in s.instances],
            "gt_gaze_sets": [i.gaze_points for i in s.instances], "match": match,
        })
    return records


def evaluate_model(model, samples, match_cfg=None, batch_size=32):
    """``(MetricReport, records)`` for ``samples``."""
    records = build_records(predict(model, samples, batch_size), samples, match_cfg)
    return evaluate_records(records), records


def record_to_json(rec):
    """Plain-JSON view of one evaluation record for the prediction dump."""
    out = {}
    for k, v in rec.items():
        if k == "pred_heatmaps":
            continue
        if isinstance(v, np.ndarray):
            v = v.tolist()
        elif k == "match":
            v = {str(a): int(b) for a, b in v.items()}
        elif k == "gt_gaze_sets":
            v = [[list(p) for p in pts] for pts in v]
        out[k] = v
    return out
