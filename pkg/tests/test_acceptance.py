"""Acceptance suite: one verdict line per criterion, printed in the pytest
terminal summary (or directly when this file is run as a script).

Criterion 6 trains the default model on the default synthetic set and takes
up to half an hour; criterion 7 trains two half-schedule models. Both are marked
``slow`` and can be skipped with ``-m "not slow"``.
"""

import hashlib
import itertools
import subprocess
import sys
import time

import numpy as np
import pytest

from gazedetr.checkpoint import load_checkpoint, load_model_state, model_state, save_checkpoint
from gazedetr.config import build_config
from gazedetr.data import SynthConfig, batch_pad, synth_generate
from gazedetr.matching import (
    LossWeights,
    MatchConfig,
    hungarian_assign,
    match_batch,
    total_loss,
)
from gazedetr.metrics import all_points_ap, auc_heatmap, gt_label_grid, map_detection
from gazedetr.model import GazeDETR, ModelConfig, ModelOutput
from gazedetr.nn import DropoutState
from gazedetr.tensor import Tensor, grad_check, matmul, no_grad, transpose
from gazedetr.train import evaluate_model, synth_samples, train_model
from gazedetr.transformer import (
    EncoderLayer,
    GazeCrossAttention,
    GazeDecoderLayer,
    GazeSelfAttention,
    HeadDecoderLayer,
    MultiHeadAttention,
    PlainGazeCrossAttention,
    _segment_heads,
    sine_positional_encoding,
)

TITLES = {
    1: "gradient integrity",
    2: "fused-memory logit identity",
    3: "matching oracle",
    4: "head-only matching invariance",
    5: "metric oracles",
    6: "synthetic end-to-end",
    7: "ablation direction D vs A (diagnostic)",
    8: "determinism and round-trips",
}
RESULTS = {}
GRAD_TOL = 1e-4
OFF = DropoutState(p=0.0, training=False)


def record(criterion, ok, detail, blocking=True):
    """Fold one check into its criterion's verdict."""
    prev = RESULTS.get(criterion)
    if prev is None:
        RESULTS[criterion] = {"ok": ok, "details": [detail], "blocking": blocking}
    else:
        prev["ok"] = prev["ok"] and ok
        prev["details"].append(detail)


def verdict_lines():
    lines = []
    for c in sorted(RESULTS):
        r = RESULTS[c]
        word = "PASS" if r["ok"] else ("FAIL" if r["blocking"] else "FAIL (diagnostic, non-blocking)")
        lines.append(f"criterion {c} [{TITLES[c]}]: {word} | " + "; ".join(r["details"]))
    return lines


# -- 1 ------------------------------------------------------------------

def _probe(rng, shape):
    return Tensor(rng.standard_normal(shape))


def _module_checks(rng):
    """``(name, loss_fn, tensors)`` for every differentiable block at d=8."""
    d, h, nq, hw = 8, 2, 3, 4
    p_k = sine_positional_encoding(2, 2, d)
    checks = []

    mha = MultiHeadAttention(rng, d, h)
    q, k, v = _probe(rng, (1, nq, d)), _probe(rng, (1, hw, d)), _probe(rng, (1, hw, d))
    c = _probe(rng, (1, nq, d))
    checks.append(("multi-head attention", lambda: (mha(q, k, v)[0] * c).sum(),
                   [q, k, v] + mha.parameters()))

    enc = EncoderLayer(rng, d, h, 16, OFF)
    x, ce = _probe(rng, (1, hw, d)), _probe(rng, (1, hw, d))
    pos = p_k.reshape(1, hw, d)
    checks.append(("encoder layer", lambda: (enc(x, pos) * ce).sum(), [x] + enc.parameters()))

    hd = HeadDecoderLayer(rng, d, h, 16, OFF)
    E, p_q, mem = _probe(rng, (1, nq, d)), _probe(rng, (nq, d)), _probe(rng, (1, hw, d))
    checks.append(("head decoder layer", lambda: (hd(E, p_q, mem, p_k)[0] * c).sum(),
                   [E, p_q, mem] + hd.parameters()))

    sa = GazeSelfAttention(rng, d, h, OFF)
    checks.append(("gaze self-attention", lambda: (sa(E, p_q)[0] * c).sum(), [E, p_q] + sa.parameters()))

    M = _probe(rng, (1, hw, 2 * d))
    c_q = _probe(rng, (1, nq, d))
    ca = GazeCrossAttention(rng, d, h, OFF)
    for first in (True, False):
        checks.append((f"gaze cross-attention first={first}",
                       lambda first=first: (ca(c_q, E, p_q, M, p_k, first)[0] * c).sum(),
                       [c_q, E, p_q, M] + ca.parameters()))
    plain = PlainGazeCrossAttention(rng, d, h, OFF)
    checks.append(("plain gaze cross-attention", lambda: (plain(c_q, E, p_q, mem, p_k, True)[0] * c).sum(),
                   [c_q, E, p_q, mem] + plain.parameters()))

    for fused in (True, False):
        layer = GazeDecoderLayer(rng, d, h, 16, OFF, fused_memory=fused)
        memory = M if fused else mem
        checks.append((f"gaze decoder layer fused={fused}",
                       lambda layer=layer, memory=memory: (layer(E, p_q, memory, p_k, True)[0] * c).sum(),
                       [E, p_q, memory] + layer.parameters()))
    return checks


def _loss_checks(rng):
    B, nq, s = 2, 4, 4
    targets = [{"boxes": np.array([[0.3, 0.4, 0.2, 0.3]]), "gaze": np.array([[0.7, 0.6]]), "inout": np.array([1.0])},
               {"boxes": np.array([[0.6, 0.5, 0.3, 0.2], [0.2, 0.2, 0.2, 0.2]]),
                "gaze": np.array([[0.1, 0.8], [0.5, 0.5]]), "inout": np.array([1.0, 0.0])}]
    fields = {
        "boxes": Tensor(np.concatenate([rng.uniform(0.3, 0.7, (B, nq, 2)), rng.uniform(0.1, 0.4, (B, nq, 2))], -1)),
        "head_logits": _probe(rng, (B, nq)),
        "inout_logits": _probe(rng, (B, nq)),
        "gaze": Tensor(rng.uniform(0.05, 0.95, (B, nq, 2))),
        "heatmaps": Tensor(rng.uniform(0.05, 0.95, (B, nq, s * s))),
    }
    out = ModelOutput(**fields)
    checks = []
    for strategy in ("BM1", "BM6"):
        cfg = MatchConfig(strategy=strategy, heatmap_size=s)
        asg = match_batch(out, targets, cfg)
        checks.append((f"total loss {strategy}",
                       lambda cfg=cfg, asg=asg: total_loss(out, targets, asg, LossWeights(), cfg)[0],
                       list(fields.values())))
    return checks


def _tiny_model(variant):
    cfg = ModelConfig(d=8, n_heads=2, n_queries=4, n_enc_layers=1, n_dec_layers=1, d_ff=16, variant=variant,
                      backbone_channels=(4, 4), backbone_strides=(2, 2), dropout=0.0, min_image_size=8,
                      heatmap_output=True, heatmap_size=4)
    return GazeDETR(cfg).eval()


def _full_model_check(rng):
    m = _tiny_model("D")
    # biases drawn away from zero so no LayerNorm sits at its degenerate point
    for name, p in m.named_parameters():
        if name.endswith("bias") or name.endswith("beta"):
            p.data[:] = rng.normal(0.0, 0.1, p.shape)
    img = rng.random((2, 3, 8, 8))
    targets = [{"boxes": np.array([[0.3, 0.4, 0.2, 0.3]]), "gaze": np.array([[0.7, 0.6]]), "inout": np.array([1.0])},
               {"boxes": np.array([[0.6, 0.5, 0.3, 0.2]]), "gaze": np.array([[0.1, 0.8]]), "inout": np.array([0.0])}]
    cfg = MatchConfig(strategy="BM3", heatmap_size=4)
    with no_grad():
        asg = match_batch(m(img), targets, cfg)
    return ("full tiny model", lambda: total_loss(m(img), targets, asg, LossWeights(), cfg)[0], m.parameters())


class TestCriterion1Gradients:
    def test_gradient_suite(self):
        rng = np.random.default_rng(2024)
        t0 = time.perf_counter()
        worst, worst_name, n_tensors, failures = 0.0, "", 0, []
        for name, fn, tensors in _module_checks(rng) + _loss_checks(rng) + [_full_model_check(rng)]:
            for i, t in enumerate(tensors):
                err = grad_check(lambda _: fn(), t)
                n_tensors += 1
                if err > worst:
                    worst, worst_name = err, name
                if not err < GRAD_TOL:
                    failures.append(f"{name}[{i}]={err:.2e}")
        elapsed = time.perf_counter() - t0
        ok = not failures and elapsed < 300.0
        record(1, ok, f"{n_tensors} tensors, max rel err {worst:.2e} ({worst_name}), {elapsed:.0f}s")
        assert not failures, failures
        assert elapsed < 300.0


# -- 2 ------------------------------------------------------------------

class TestCriterion2LogitIdentity:
    def test_hundred_random_instances(self):
        rng = np.random.default_rng(77)
        worst = 0.0
        for trial in range(100):
            d, h = [(8, 2), (8, 4), (16, 4), (12, 3)][trial % 4]
            nq, hw = int(rng.integers(1, 6)), int(rng.integers(1, 10))
            ca = GazeCrossAttention(rng, d, h, OFF)
            c_q, E = _probe(rng, (1, nq, d)), _probe(rng, (1, nq, d))
            p_q, M, p_k = _probe(rng, (nq, d)), _probe(rng, (1, hw, 2 * d)), _probe(rng, (hw, d))
            first = bool(trial % 2)
            qs, ks, _ = ca.segments(c_q, E, p_q, M, p_k, first)
            joint = matmul(_segment_heads(qs, h), transpose(_segment_heads(ks, h), (0, 1, 3, 2))).data[0]
            # term-by-term from raw weights: c.m1 + c.m2 + E.p_k per head
            c = c_q.data[0] + (p_q.data if first else 0.0)
            cq = c @ ca.w_qc.weight.data
            k1 = M.data[0, :, :d] @ ca.w_km.weight.data
            k2 = M.data[0, :, d:] @ ca.w_km.weight.data
            eq = E.data[0] @ ca.w_qe.weight.data
            kp = p_k.data @ ca.w_kp.weight.data
            dh = d // h
            for i in range(h):
                s = slice(i * dh, (i + 1) * dh)
                terms = cq[:, s] @ k1[:, s].T + cq[:, s] @ k2[:, s].T + eq[:, s] @ kp[:, s].T
                worst = max(worst, float(np.abs(joint[i] - terms).max()))
        ok = worst < 1e-12
        record(2, ok, f"100 instances, max abs diff {worst:.1e}")
        assert ok


# -- 3 ------------------------------------------------------------------

def brute_force_total(cost):
    n, m = cost.shape
    return min(sum(cost[i, cols[i]] for i in range(n)) for cols in itertools.permutations(range(m), n))


class TestCriterion3Matching:
    def test_against_enumeration(self):
        rng = np.random.default_rng(3)
        mismatches = 0
        n_cases = 600
        for trial in range(n_cases):
            n = int(rng.integers(1, 8))
            m = int(rng.integers(n, 8))
            cost = rng.integers(0, 5, (n, m)).astype(float) if trial % 3 == 0 else rng.standard_normal((n, m))
            asg = hungarian_assign(cost)
            got = sum(cost[i, asg.query_indices[i]] for i in range(n))
            mismatches += got != brute_force_total(cost)
            mismatches += len(set(asg.query_indices.tolist())) != n
        ok = mismatches == 0
        record(3, ok, f"{n_cases} matrices up to 7x7, {mismatches} mismatches")
        assert ok


# -- 4 ------------------------------------------------------------------

def _gaze_branch(model):
    return [p for n, p in model.named_parameters() if n.startswith(("gaze_decoder.", "scene_encoder."))]


def _batch(seed, n=4):
    samples = [synth_generate(SynthConfig(head_count=(2, 4)), seed * 100 + i) for i in range(n)]
    images, _, valid = batch_pad(samples)
    return images, valid, [s.targets() for s in samples]


def _assign(model, images, valid, targets, strategy):
    with no_grad():
        out = model(images, valid)
    return [a.query_indices.tolist() for a in match_batch(out, targets, MatchConfig(strategy=strategy))]


def _perturb(params, rng, scale):
    for p in params:
        p.data += rng.normal(0.0, scale, p.shape)


class TestCriterion4MatchInvariance:
    def test_bm1_never_changes(self):
        changed, trials = 0, 0
        for seed in range(4):
            model = GazeDETR(ModelConfig(seed=seed)).eval()
            images, valid, targets = _batch(seed)
            base = _assign(model, images, valid, targets, "BM1")
            rng = np.random.default_rng(seed)
            for _ in range(5):
                _perturb(_gaze_branch(model), rng, 0.5)
                changed += _assign(model, images, valid, targets, "BM1") != base
                trials += 1
        ok = changed == 0
        record(4, ok, f"BM1 unchanged in {trials - changed}/{trials} perturbed batches")
        assert ok

    def test_bm4_counterexample_found(self):
        found = None
        for seed in range(4):
            model = GazeDETR(ModelConfig(seed=seed)).eval()
            images, valid, targets = _batch(seed)
            base4 = _assign(model, images, valid, targets, "BM4")
            base1 = _assign(model, images, valid, targets, "BM1")
            rng = np.random.default_rng(100 + seed)
            for k in range(10):
                _perturb(_gaze_branch(model), rng, 0.5)
                if _assign(model, images, valid, targets, "BM4") != base4:
                    found = (seed, k, _assign(model, images, valid, targets, "BM1") == base1)
                    break
            if found:
                break
        ok = found is not None and found[2]
        detail = "no BM4 counterexample" if found is None else \
            f"BM4 assignment changed (batch seed {found[0]}, step {found[1]}) while BM1 held"
        record(4, ok, detail)
        assert ok


# -- 5 ------------------------------------------------------------------

def sweep_auc(scores, labels):
    pos, neg = labels.sum(), (~labels).sum()
    pts = [(0.0, 0.0)]
    for t in sorted(set(scores.tolist()), reverse=True):
        sel = scores >= t
        pts.append(((sel & ~labels).sum() / neg, (sel & labels).sum() / pos))
    return sum((x1 - x0) * (y0 + y1) / 2 for (x0, y0), (x1, y1) in zip(pts, pts[1:]))


def _rec(pred_boxes, scores, pred_gaze, gt_boxes, gt_gaze, inframe):
    return {"pred_boxes": np.asarray(pred_boxes, float), "pred_scores": np.asarray(scores, float),
            "pred_gaze": np.asarray(pred_gaze, float), "gt_boxes": np.asarray(gt_boxes, float),
            "gt_gaze_sets": [np.asarray(g, float).reshape(-1, 2) for g in gt_gaze],
            "gt_inframe": np.asarray(inframe, bool)}


G1, G2, G3 = [0.25, 0.25, 0.2, 0.2], [0.75, 0.75, 0.2, 0.2], [0.5, 0.5, 0.3, 0.3]
AWAY = [0.9, 0.1, 0.1, 0.1]


class TestCriterion5Metrics:
    def test_auc_exhaustive_4x4(self):
        rng = np.random.default_rng(5)
        worst, n = 0.0, 0
        for trial in range(300):
            hm = rng.random((4, 4)) if trial % 2 else rng.integers(0, 3, (4, 4)).astype(float)
            pts = [tuple(p) for p in rng.random((int(rng.integers(1, 4)), 2))]
            lab = gt_label_grid(pts, 4, 4).reshape(-1)
            got = auc_heatmap(hm, pts, grid=None)
            if got is None:
                continue
            worst = max(worst, abs(got - sweep_auc(hm.reshape(-1), lab)))
            n += 1
        ok = worst < 1e-9
        record(5, ok, f"AUC vs threshold sweep on {n} grids, max diff {worst:.1e}")
        assert ok

    def test_hand_walked_pr_curves(self):
        cases = []
        # three gts, four ranked predictions: TP, FP (box), TP, FP (gaze)
        # precision at recall steps 1/3 and 2/3 is 1 and 2/3, AP = 5/9
        cases.append(([_rec([G1, AWAY, G2, G3], [0.9, 0.8, 0.7, 0.6],
                            [[0.2, 0.2], [0.2, 0.2], [0.6, 0.6], [0.9, 0.9]],
                            [G1, G2, G3], [[0.2, 0.2], [0.6, 0.6], [0.3, 0.3]], [1, 1, 1])], 5 / 9))
        # two images, five predictions: TP, duplicate FP, gaze FP, TP, TP
        # precision 1, 2/4, 3/5 at recalls 1/3, 2/3, 1: AP = 0.7
        img1 = _rec([G1, G1, G2], [0.95, 0.9, 0.8], [[0.2, 0.2], [0.2, 0.2], [0.6, 0.6]],
                    [G1, G2], [[0.2, 0.2], [0.6, 0.6]], [1, 1])
        img2 = _rec([G3, G3], [0.85, 0.7], [[0.9, 0.1], [0.3, 0.3]], [G3], [[0.3, 0.3]], [1])
        cases.append(([img1, img2], 0.7))
        # out-of-frame gt: gaze gate skipped, far gaze still a hit; FP, TP, FP gives 1/2
        cases.append(([_rec([AWAY, G3, G1], [0.9, 0.5, 0.3], [[0.5, 0.5]] * 3, [G3], [[1.4, 0.5]], [0])], 0.5))
        diffs = [abs(map_detection(recs) - want) for recs, want in cases]
        # tied scores collapse to one precision-recall step
        diffs.append(abs(all_points_ap([0.5, 0.5, 0.5], [True, False, True], 2) - 2 / 3))
        worst = max(diffs)
        ok = worst < 1e-12
        record(5, ok, f"{len(diffs)} hand-walked AP cases, max diff {worst:.1e}")
        assert ok

    def test_dual_gate_boundaries(self):
        gt_box = [0.5, 0.5, 0.5, 0.5]
        half = [0.375, 0.5, 0.25, 0.5]          # IoU with gt_box exactly 0.5
        gt_gaze = [[0.0, 0.5]]
        iou_edge = map_detection([_rec([half], [1.0], [[0.0, 0.5]], [gt_box], gt_gaze, [1])])
        l2_edge = map_detection([_rec([gt_box], [1.0], [[0.15, 0.5]], [gt_box], gt_gaze, [1])])
        inside = map_detection([_rec([gt_box], [1.0], [[0.1499, 0.5]], [gt_box], gt_gaze, [1])])
        ok = iou_edge == 0.0 and l2_edge == 0.0 and inside == 1.0
        record(5, ok, f"IoU=0.5 -> AP {iou_edge}, L2=0.15 -> AP {l2_edge}, just inside -> AP {inside}")
        assert ok


# -- 6 ------------------------------------------------------------------

HEAD_AP_MIN = 0.90
GAZE_RATIO_MAX = 0.5
MAP_MIN = 0.60
BUDGET_SECONDS = 1800.0


@pytest.mark.slow
class TestCriterion6EndToEnd:
    def test_default_run(self):
        cfg = build_config(environ={})
        train_set = synth_samples(cfg.synth, cfg.train.synth_count)
        eval_set = synth_samples(cfg.synth, cfg.train.eval_count, start=cfg.train.eval_seed)
        t0 = time.perf_counter()
        model, _, history = train_model(cfg, train_set)
        elapsed = time.perf_counter() - t0
        rep, _ = evaluate_model(model, eval_set, cfg.match)
        ratio = rep.gaze_l2 / rep.center_l2
        checks = {
            "time": elapsed <= BUDGET_SECONDS,
            "head_ap": rep.head_ap >= HEAD_AP_MIN,
            "gaze": ratio <= GAZE_RATIO_MAX,
            "map": rep.map >= MAP_MIN,
        }
        ok = all(checks.values())
        record(6, ok, f"train {elapsed:.0f}s/{BUDGET_SECONDS:.0f}s, head AP {rep.head_ap:.3f} (>= {HEAD_AP_MIN}), "
                      f"gaze L2 {rep.gaze_l2:.3f} = {ratio:.2f}x center baseline {rep.center_l2:.3f} "
                      f"(<= {GAZE_RATIO_MAX}), mAP {rep.map:.3f} (>= {MAP_MIN}), "
                      f"loss {history[0]['total']:.2f} -> {history[-1]['total']:.2f}")
        assert ok, checks


# -- 7 ------------------------------------------------------------------

ABLATION = {"train.synth_count": "2000", "train.epochs": "30"}


@pytest.mark.slow
class TestCriterion7Ablation:
    def test_d_not_below_a(self):
        maps = {}
        for variant in "DA":
            cfg = build_config(overrides={**ABLATION, "model.variant": variant}, environ={})
            train_set = synth_samples(cfg.synth, cfg.train.synth_count)
            eval_set = synth_samples(cfg.synth, cfg.train.eval_count, start=cfg.train.eval_seed)
            model, _, _ = train_model(cfg, train_set)
            maps[variant] = evaluate_model(model, eval_set, cfg.match)[0].map
        ok = maps["D"] >= maps["A"]
        record(7, ok, f"mAP D {maps['D']:.3f} vs A {maps['A']:.3f} "
                      f"({ABLATION['train.synth_count']} scenes, {ABLATION['train.epochs']} epochs, same seed)",
               blocking=False)
        # ordering is reported, not enforced
        if not ok:
            import warnings
            warnings.warn(f"variant D mAP {maps['D']:.3f} below variant A {maps['A']:.3f}")


# -- 8 ------------------------------------------------------------------

TINY = {"model.d": "8", "model.n_heads": "2", "model.n_queries": "4", "model.n_enc_layers": "1",
        "model.n_dec_layers": "1", "model.d_ff": "16", "model.backbone_channels": "4,8,8,8",
        "train.batch_size": "4", "train.epochs": "2"}

_SYNTH_DIGEST = """
import hashlib, sys
from gazedetr.data import SynthConfig, synth_generate
h = hashlib.sha256()
for i in range(20):
    s = synth_generate(SynthConfig(), i)
    h.update(s.image.tobytes())
    h.update(repr([(x.head_box, x.gaze_points, x.in_frame) for x in s.instances]).encode())
sys.stdout.write(h.hexdigest())
"""


class TestCriterion8Determinism:
    def test_training_log_bit_identical(self):
        cfg = build_config(overrides=TINY, environ={})
        samples = synth_samples(cfg.synth, 8)
        runs = [train_model(cfg, samples) for _ in range(2)]
        strip = [[{k: v for k, v in r.items() if k != "seconds"} for r in run[2]] for run in runs]
        same_log = strip[0] == strip[1]
        same_params = all(a.data.tobytes() == b.data.tobytes()
                          for a, b in zip(runs[0][0].parameters(), runs[1][0].parameters()))
        ok = same_log and same_params
        record(8, ok, f"fixed-seed training: log identical={same_log}, weights identical={same_params}")
        assert ok

    def test_checkpoint_round_trip(self, tmp_path):
        model = GazeDETR(ModelConfig(seed=4))
        for p in model.parameters():
            p.data += np.random.default_rng(p.size).standard_normal(p.shape)
        save_checkpoint(tmp_path / "m.ckpt", {"model": model.config.to_dict()}, model_state(model))
        _, params, _ = load_checkpoint(tmp_path / "m.ckpt")
        other = GazeDETR(ModelConfig(seed=9))
        load_model_state(other, params)
        ok = all(a.data.tobytes() == b.data.tobytes() for a, b in zip(model.parameters(), other.parameters()))
        record(8, ok, f"checkpoint round-trip bit-exact={ok}")
        assert ok

    def test_dataset_cross_run(self):
        runs = [subprocess.run([sys.executable, "-c", _SYNTH_DIGEST], capture_output=True, text=True, check=True).stdout
                for _ in range(2)]
        h = hashlib.sha256()
        for i in range(20):
            s = synth_generate(SynthConfig(), i)
            h.update(s.image.tobytes())
            h.update(repr([(x.head_box, x.gaze_points, x.in_frame) for x in s.instances]).encode())
        ok = runs[0] == runs[1] == h.hexdigest()
        record(8, ok, f"synthetic data identical across 3 interpreters={ok}")
        assert ok

    def test_padded_vs_single(self):
        model = GazeDETR(ModelConfig()).eval()
        samples = [synth_generate(SynthConfig(image_size=s), i) for i, s in enumerate((40, 64, 52, 64))]
        images, _, valid = batch_pad(samples)
        worst = 0.0
        with no_grad():
            batched = model(images, valid)
            for b, s in enumerate(samples):
                single = model(s.image[None])
                for f in ("boxes", "head_logits", "gaze", "inout_logits"):
                    worst = max(worst, float(np.abs(getattr(batched, f).data[b] - getattr(single, f).data[0]).max()))
        ok = worst < 1e-9
        record(8, ok, f"padded vs single max diff {worst:.1e}")
        assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"] + sys.argv[1:]))
