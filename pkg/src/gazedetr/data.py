"""Synthetic scenes, augmentation, padded batching and annotation I/O.

Scenes are drawn from a SplitMix64 counter generator keyed on
``(seed, index)``, so a given scene is identical across runs and platforms
and can be produced independently of every other scene.

Annotation files hold one instance per line::

    image_path cx cy w h gx gy in_frame group_id

Lines of one image sharing a ``group_id`` form a multi-annotator gaze set.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from PIL import Image
from scipy.ndimage import map_coordinates

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x):
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class CounterRNG:
    """Output ``k`` is ``splitmix64(key + k * GOLDEN)`` with
    ``key = splitmix64(seed ^ splitmix64(stream))``."""

    def __init__(self, seed, stream=0):
        self.key = splitmix64((int(seed) & MASK64) ^ splitmix64(int(stream) & MASK64))
        self.counter = 0

    def next_u64(self):
        self.counter += 1
        return splitmix64((self.key + self.counter * GOLDEN) & MASK64)

    def uniform(self, lo=0.0, hi=1.0):
        return lo + (hi - lo) * ((self.next_u64() >> 11) * (1.0 / (1 << 53)))

    def integer(self, lo, hi):
        """Uniform integer in ``[lo, hi]``."""
        return lo + self.next_u64() % (hi - lo + 1)


@dataclass
class GroundTruthInstance:
    head_box: tuple
    gaze_points: list
    in_frame: bool

    def __post_init__(self):
        self.head_box = tuple(float(v) for v in self.head_box)
        self.gaze_points = [tuple(float(c) for c in p) for p in self.gaze_points]
        self.in_frame = bool(self.in_frame)
        if not self.gaze_points:
            raise ValueError("an instance needs at least one gaze point")

    @property
    def gaze(self):
        return tuple(np.mean(np.asarray(self.gaze_points), axis=0).tolist())


@dataclass
class SceneSample:
    image: np.ndarray
    instances: list
    seed: int = 0
    index: int = 0
    trail: list = field(default_factory=list)
    render: dict = field(default_factory=dict)
    path: str = ""

    @property
    def hw(self):
        return self.image.shape[1], self.image.shape[2]

    def targets(self):
        """Arrays consumed by matching and the loss."""
        n = len(self.instances)
        return {
            "boxes": np.array([i.head_box for i in self.instances], dtype=np.float64).reshape(n, 4),
            "gaze": np.array([i.gaze for i in self.instances], dtype=np.float64).reshape(n, 2),
            "inout": np.array([1.0 if i.in_frame else 0.0 for i in self.instances]),
        }


@dataclass
class SynthConfig:
    image_size: int = 64
    head_count: tuple = (1, 3)
    head_radius: tuple = (0.08, 0.12)
    out_of_frame_prob: float = 0.2
    distractors: int = 2
    target_size: float = 0.08
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        self.head_count = tuple(int(v) for v in self.head_count)
        self.head_radius = tuple(float(v) for v in self.head_radius)
        if not 0.0 <= self.out_of_frame_prob <= 1.0:
            raise ValueError("out_of_frame_prob must lie in [0, 1]")
        if self.head_count[0] < 1 or self.head_count[0] > self.head_count[1]:
            raise ValueError(f"invalid head_count range {self.head_count}")
        if not 0 < self.head_radius[0] <= self.head_radius[1] < 0.5:
            raise ValueError(f"invalid head_radius range {self.head_radius}")
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")

    def to_dict(self):
        out = asdict(self)
        out["head_count"] = list(self.head_count)
        out["head_radius"] = list(self.head_radius)
        return out


class PlacementError(RuntimeError):
    pass


class CropError(ValueError):
    """A crop would drop every head; the caller should pick another crop."""


HEAD_RGB = (0.92, 0.72, 0.55)
PUPIL_RGB = (0.05, 0.05, 0.12)
TARGET_RGB = (0.95, 0.12, 0.10)
DISTRACTOR_RGB = ((0.15, 0.75, 0.20), (0.15, 0.35, 0.95))


def _disc(img, cx, cy, r, rgb):
    H, W = img.shape[1:]
    ys, xs = np.mgrid[0:H, 0:W]
    m = (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= r * r
    img[:, m] = np.asarray(rgb)[:, None]


def _square(img, cx, cy, half, rgb):
    H, W = img.shape[1:]
    ys, xs = np.mgrid[0:H, 0:W]
    m = (np.abs(xs + 0.5 - cx) <= half) & (np.abs(ys + 0.5 - cy) <= half)
    img[:, m] = np.asarray(rgb)[:, None]


def _exit_distance(x, y, dx, dy):
    """Distance along unit ``(dx, dy)`` from ``(x, y)`` to the unit square's border."""
    ts = []
    for p, dp in ((x, dx), (y, dy)):
        if dp > 1e-12:
            ts.append((1.0 - p) / dp)
        elif dp < -1e-12:
            ts.append(-p / dp)
    return min(ts)


def synth_generate(cfg: SynthConfig, index):
    """Render scene ``index``: heads are skin discs with a dark pupil offset
    toward their gaze target, in-frame targets are red squares, distractors
    are green or blue discs. Deterministic in ``(cfg, index)``."""
    rng = CounterRNG(cfg.seed, index)
    S = cfg.image_size
    img = np.empty((3, S, S))
    base = [rng.uniform(0.3, 0.6) for _ in range(3)]
    gx_, gy_ = rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15)
    ramp = np.linspace(-0.5, 0.5, S)
    for c in range(3):
        img[c] = base[c] + gx_ * ramp[None, :] + gy_ * ramp[:, None]

    k = rng.integer(cfg.head_count[0], cfg.head_count[1])
    half_t = cfg.target_size * 0.5
    heads = []
    for _ in range(k):
        for _attempt in range(cfg.max_retries):
            r = rng.uniform(*cfg.head_radius)
            cx, cy = rng.uniform(r + 0.01, 1 - r - 0.01), rng.uniform(r + 0.01, 1 - r - 0.01)
            if all(math.hypot(cx - hx, cy - hy) > r + hr + 0.04 for hx, hy, hr in heads):
                heads.append((cx, cy, r))
                break
        else:
            raise PlacementError(f"scene {index}: could not place head {len(heads) + 1} of {k} "
                                 f"after {cfg.max_retries} tries")

    def clear_of_heads(x, y, pad):
        return all(math.hypot(x - hx, y - hy) > hr + pad for hx, hy, hr in heads)

    targets = []
    for hx, hy, hr in heads:
        out = rng.uniform() < cfg.out_of_frame_prob
        for _attempt in range(cfg.max_retries):
            if out:
                ang = rng.uniform(0.0, 2 * math.pi)
                dx, dy = math.cos(ang), math.sin(ang)
                dist = _exit_distance(hx, hy, dx, dy) + rng.uniform(0.1, 0.4)
                targets.append((hx + dist * dx, hy + dist * dy, False))
                break
            tx, ty = rng.uniform(half_t + 0.02, 1 - half_t - 0.02), rng.uniform(half_t + 0.02, 1 - half_t - 0.02)
            if (math.hypot(tx - hx, ty - hy) > 2.5 * hr and clear_of_heads(tx, ty, half_t * 1.5 + 0.02)
                    and all(math.hypot(tx - ox, ty - oy) > 3 * half_t for ox, oy, o_in in targets if o_in)):
                targets.append((tx, ty, True))
                break
        else:
            raise PlacementError(f"scene {index}: could not place an in-frame gaze target")

    distractors = []
    for _ in range(cfg.distractors):
        for _attempt in range(cfg.max_retries):
            x, y = rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)
            colour = rng.integer(0, len(DISTRACTOR_RGB) - 1)
            if clear_of_heads(x, y, half_t + 0.03) and all(
                    math.hypot(x - tx, y - ty) > 3 * half_t for tx, ty, inf in targets if inf):
                distractors.append((x, y, colour))
                break
        else:
            raise PlacementError(f"scene {index}: could not place distractor")

    for x, y, colour in distractors:
        _disc(img, x * S, y * S, half_t * S, DISTRACTOR_RGB[colour])
    for tx, ty, inf in targets:
        if inf:
            _square(img, tx * S, ty * S, half_t * S, TARGET_RGB)
    instances = []
    pupils = []
    for (hx, hy, hr), (tx, ty, inf) in zip(heads, targets):
        _disc(img, hx * S, hy * S, hr * S, HEAD_RGB)
        ang = math.atan2(ty - hy, tx - hx)
        px, py = hx + 0.55 * hr * math.cos(ang), hy + 0.55 * hr * math.sin(ang)
        _disc(img, px * S, py * S, 0.38 * hr * S, PUPIL_RGB)
        pupils.append((px, py))
        instances.append(GroundTruthInstance((hx, hy, 2 * hr, 2 * hr), [(tx, ty)], inf))
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return SceneSample(image=img, instances=instances, seed=cfg.seed, index=index,
                       render={"pupils": pupils, "distractors": distractors})


# -- augmentation -------------------------------------------------------

def flip_horizontal(sample):
    """Mirror image and annotations left-right."""
    inst = [GroundTruthInstance((1.0 - i.head_box[0],) + i.head_box[1:],
                                [(1.0 - x, y) for x, y in i.gaze_points], i.in_frame)
            for i in sample.instances]
    return replace(sample, image=np.ascontiguousarray(sample.image[:, :, ::-1]), instances=inst,
                   trail=sample.trail + ["flip"], render={})


def resize_image(image, out_h, out_w):
    """Bilinear resampling with pixel-center alignment; identity when sizes match."""
    C, H, W = image.shape
    if (H, W) == (out_h, out_w):
        return image.copy()
    ys = (np.arange(out_h) + 0.5) * (H / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (W / out_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([map_coordinates(image[c], [yy, xx], order=1, mode="nearest") for c in range(C)])


def crop_resize(sample, rect, size):
    """Crop ``rect = (x0, y0, x1, y1)`` (pixels) and resize to ``size = (h, w)``.

    Heads whose center leaves the crop are dropped; boxes are clipped to the
    crop; in-frame targets that leave it become out-of-frame.
    """
    x0, y0, x1, y1 = rect
    H, W = sample.hw
    if not (0 <= x0 < x1 <= W and 0 <= y0 < y1 <= H):
        raise ValueError(f"crop {rect} outside image {W}x{H}")
    cw, ch = x1 - x0, y1 - y0
    nx = lambda v: (v * W - x0) / cw  # noqa: E731
    ny = lambda v: (v * H - y0) / ch  # noqa: E731
    kept = []
    for inst in sample.instances:
        cx, cy, w, h = inst.head_box
        ncx, ncy = nx(cx), ny(cy)
        if not (0.0 <= ncx <= 1.0 and 0.0 <= ncy <= 1.0):
            continue
        bx0, bx1 = max(0.0, nx(cx - w / 2)), min(1.0, nx(cx + w / 2))
        by0, by1 = max(0.0, ny(cy - h / 2)), min(1.0, ny(cy + h / 2))
        if (bx0, bx1, by0, by1) == (nx(cx - w / 2), nx(cx + w / 2), ny(cy - h / 2), ny(cy + h / 2)):
            box = (ncx, ncy, w * W / cw, h * H / ch)
        else:
            box = ((bx0 + bx1) / 2, (by0 + by1) / 2, bx1 - bx0, by1 - by0)
        pts = [(nx(x), ny(y)) for x, y in inst.gaze_points]
        inside = all(0.0 <= px <= 1.0 and 0.0 <= py <= 1.0 for px, py in pts)
        kept.append(GroundTruthInstance(box, pts, inst.in_frame and inside))
    if not kept:
        raise CropError(f"crop {rect} removes every head")
    img = resize_image(sample.image[:, y0:y1, x0:x1], size[0], size[1])
    return replace(sample, image=img, instances=kept,
                   trail=sample.trail + [f"crop {x0},{y0},{x1},{y1}->{size[0]}x{size[1]}"], render={})


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    crop_prob: float = 0.5
    crop_min_scale: float = 0.7
    min_size: int = 48
    max_size: int = 96
    max_long: int = 96
    crop_retries: int = 8

    def to_dict(self):
        return asdict(self)


def augment(sample, cfg: AugmentConfig, rng: np.random.Generator, short_side=None):
    """Random flip, random crop and random resize into the configured band.

    ``short_side`` fixes the resize target instead of drawing it, so a batch
    can share one scale.
    """
    if rng.random() < cfg.flip_prob:
        sample = flip_horizontal(sample)
    H, W = sample.hw
    rect = (0, 0, W, H)
    if rng.random() < cfg.crop_prob:
        for _ in range(cfg.crop_retries):
            cw = int(rng.integers(int(math.ceil(cfg.crop_min_scale * W)), W + 1))
            ch = int(rng.integers(int(math.ceil(cfg.crop_min_scale * H)), H + 1))
            x0 = int(rng.integers(0, W - cw + 1))
            y0 = int(rng.integers(0, H - ch + 1))
            try:
                crop_resize(sample, (x0, y0, x0 + cw, y0 + ch), (ch, cw))
            except CropError:
                continue
            rect = (x0, y0, x0 + cw, y0 + ch)
            break
    short = int(rng.integers(cfg.min_size, cfg.max_size + 1))
    if short_side is not None:
        short = int(short_side)
    ch, cw = rect[3] - rect[1], rect[2] - rect[0]
    scale = short / min(ch, cw)
    if max(ch, cw) * scale > cfg.max_long:
        scale = cfg.max_long / max(ch, cw)
    size = (max(32, int(round(ch * scale))), max(32, int(round(cw * scale))))
    if rect == (0, 0, W, H) and size == (H, W):
        return sample
    return crop_resize(sample, rect, size)


# -- batching -----------------------------------------------------------

def batch_pad(samples):
    """Zero-pad images to the per-dimension maxima.

    Returns ``(batch [B, C, H, W], mask [B, H, W], valid_hw)`` where the mask
    is True exactly on each sample's own pixels.
    """
    if not samples:
        raise ValueError("batch_pad needs at least one sample")
    images = [s.image if isinstance(s, SceneSample) else np.asarray(s) for s in samples]
    C = images[0].shape[0]
    if any(im.shape[0] != C for im in images):
        raise ValueError("batch_pad: samples differ in channel count")
    H = max(im.shape[1] for im in images)
    W = max(im.shape[2] for im in images)
    batch = np.zeros((len(images), C, H, W))
    mask = np.zeros((len(images), H, W), dtype=bool)
    for b, im in enumerate(images):
        batch[b, :, :im.shape[1], :im.shape[2]] = im
        mask[b, :im.shape[1], :im.shape[2]] = True
    return batch, mask, [(im.shape[1], im.shape[2]) for im in images]


# -- disk I/O -----------------------------------------------------------

ANNOTATION_FILE = "annotations.txt"


class DatasetFormatError(ValueError):
    pass


def save_ppm(path, image):
    arr = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path, format="PPM")


def load_image(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_pgm(path, gray):
    arr = np.clip(np.round(np.asarray(gray) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "L").save(path, format="PPM")


def write_dataset(root, samples, annotation_name=ANNOTATION_FILE, header=None):
    """Write images as P6 pixmaps under ``root/images`` plus one annotation file."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    lines = [f"# {h}" for h in (header or [])]
    lines.append("# image_path cx cy w h gx gy in_frame group_id")
    for n, s in enumerate(samples):
        rel = f"images/{n:06d}.ppm"
        save_ppm(os.path.join(root, rel), s.image)
        for g, inst in enumerate(s.instances):
            for gx, gy in inst.gaze_points:
                vals = " ".join(f"{v:.6f}" for v in (*inst.head_box, gx, gy))
                lines.append(f"{rel} {vals} {int(inst.in_frame)} {g}")
    path = os.path.join(root, annotation_name)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_annotations(path):
    """Parse an annotation file into ``{image_path: [GroundTruthInstance]}`` (file order)."""
    groups = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 9:
                raise DatasetFormatError(f"{path}:{lineno}: expected 9 fields, got {len(parts)}")
            try:
                nums = [float(v) for v in parts[1:7]]
                inf = int(parts[7])
                gid = parts[8]
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
            if inf not in (0, 1):
                raise DatasetFormatError(f"{path}:{lineno}: in_frame must be 0 or 1")
            per_image = groups.setdefault(parts[0], {})
            if gid in per_image:
                per_image[gid]["points"].append((nums[4], nums[5]))
            else:
                per_image[gid] = {"box": tuple(nums[:4]), "points": [(nums[4], nums[5])], "in": bool(inf)}
    return {img: [GroundTruthInstance(g["box"], g["points"], g["in"]) for g in gs.values()]
            for img, gs in groups.items()}


def read_dataset(root, annotation_name=ANNOTATION_FILE):
    """Load every annotated image under ``root`` as a :class:`SceneSample`."""
    ann = read_annotations(os.path.join(root, annotation_name))
    samples = []
    for n, (rel, inst) in enumerate(ann.items()):
        full = os.path.join(root, rel)
        if not os.path.exists(full):
            raise FileNotFoundError(f"missing image file {full}")
        samples.append(SceneSample(image=load_image(full), instances=inst, index=n, path=rel))
    return samples
