"""GazeDETR assembly: backbone, head predictor, scene encoder, gaze decoder.

Variants follow the module ablation:

======= ============== ===================
variant scene encoder  gaze decoder query
======= ============== ===================
A       no (uses e1)   shared head query
B       no (uses e1)   fresh gaze query
C       yes            fresh gaze query
D       yes            shared head query
======= ============== ===================
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import MLP, DropoutState, LayerNorm, Linear, Module, he_uniform, parameter, xavier_uniform
from .tensor import Tensor, concat, conv2d, mask_fill, relu, sigmoid, transpose
from .transformer import (
    GazeDecoderLayer,
    HeadDecoderLayer,
    TransformerEncoder,
    batched_positional_encoding,
)

VARIANTS = ("A", "B", "C", "D")
MIN_IMAGE_SIZE = 32


@dataclass
class ModelConfig:
    d: int = 32
    n_heads: int = 4
    n_queries: int = 16
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    variant: str = "D"
    gaze_location: bool = True
    heatmap_output: bool = False
    heatmap_size: int = 16
    backbone_channels: tuple = (16, 32, 64, 64)
    backbone_strides: tuple = (2, 2, 2, 1)
    dropout: float = 0.0
    min_image_size: int = MIN_IMAGE_SIZE
    seed: int = 0

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        self.backbone_strides = tuple(int(s) for s in self.backbone_strides)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.d % 4:
            raise ValueError(f"d={self.d} must be divisible by 4 for the positional encoding")
        if len(self.backbone_channels) != len(self.backbone_strides):
            raise ValueError("backbone_channels and backbone_strides differ in length")
        if self.min_image_size < 1:
            raise ValueError("min_image_size must be positive")
        if not (self.gaze_location or self.heatmap_output):
            raise ValueError("at least one gaze output (location or heatmap) is required")

    @property
    def uses_scene_encoder(self):
        return self.variant in ("C", "D")

    @property
    def shares_query(self):
        return self.variant in ("A", "D")

    @property
    def total_stride(self):
        return int(np.prod(self.backbone_strides))

    def to_dict(self):
        out = asdict(self)
        out["backbone_channels"] = list(self.backbone_channels)
        out["backbone_strides"] = list(self.backbone_strides)
        return out


@dataclass
class ModelOutput:
    """Batched predictions; ``boxes`` are ``(cx, cy, w, h)`` relative to each image."""

    boxes: Tensor
    head_logits: Tensor
    inout_logits: Tensor
    gaze: Tensor | None
    heatmaps: Tensor | None
    head_attention: list = field(default_factory=list)
    gaze_attention: list = field(default_factory=list)
    feature_hw: tuple = (0, 0)
    valid_feature_hw: list = field(default_factory=list)
    key_mask: np.ndarray | None = None

    def gaze_points(self, heatmap_size=None):
        """Gaze coordinates as an array; decoded from heatmap peaks when the
        model has no location head."""
        if self.gaze is not None:
            return self.gaze.data
        hm = self.heatmaps.data
        s = heatmap_size or int(round(np.sqrt(hm.shape[-1])))
        idx = hm.argmax(axis=-1)
        return np.stack([(idx % s + 0.5) / s, (idx // s + 0.5) / s], axis=-1)


def conv_out_extent(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


class Backbone(Module):
    """Small from-scratch CNN: 3x3 convs with ReLU, total stride from config.

    Convolutions use He-uniform init; Xavier shrinks activations by roughly
    an order of magnitude per ReLU layer at this depth.

    Activations outside each sample's valid extent are zeroed after every
    layer, which keeps padded batches numerically identical to single images.
    """

    def __init__(self, rng, channels, strides):
        self.strides = tuple(strides)
        c_in = 3
        for i, c_out in enumerate(channels):
            w = he_uniform(rng, (c_out, c_in, 3, 3), c_in * 9)
            setattr(self, f"conv{i}_w", parameter(w))
            setattr(self, f"conv{i}_b", parameter(np.zeros(c_out)))
            c_in = c_out
        self.out_channels = c_in

    def __call__(self, x, valid_hw):
        valid = list(valid_hw)
        for i, s in enumerate(self.strides):
            x = relu(conv2d(x, getattr(self, f"conv{i}_w"), getattr(self, f"conv{i}_b"), stride=s, padding=1))
            valid = [(conv_out_extent(h, 3, s, 1), conv_out_extent(w, 3, s, 1)) for h, w in valid]
            x = mask_fill(x, _spatial_mask(valid, x.shape[2], x.shape[3])[:, None])
        return x, valid


def _spatial_mask(valid_hw, H, W):
    m = np.zeros((len(valid_hw), H, W), dtype=bool)
    for b, (h, w) in enumerate(valid_hw):
        m[b, :h, :w] = True
    return m


def _tokens(fmap):
    """``[B, C, H, W] -> [B, H*W, C]``."""
    B, C, H, W = fmap.shape
    return transpose(fmap.reshape(B, C, H * W), (0, 2, 1))


class Conv1x1(Module):
    def __init__(self, rng, c_in, c_out):
        self.weight = parameter(xavier_uniform(rng, (c_out, c_in, 1, 1), c_in, c_out))
        self.bias = parameter(np.zeros(c_out))

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias)


class HeadPredictor(Module):
    def __init__(self, rng, cfg, c_in, drop):
        d = cfg.d
        self.input_proj = Conv1x1(rng, c_in, d)
        self.encoder = TransformerEncoder(rng, d, cfg.n_heads, cfg.d_ff, cfg.n_enc_layers, drop)
        self.query = parameter(xavier_uniform(rng, (cfg.n_queries, d)), name="spatial_query")
        self.decoder = [HeadDecoderLayer(rng, d, cfg.n_heads, cfg.d_ff, drop) for _ in range(cfg.n_dec_layers)]
        self.decoder_norm = LayerNorm(d)
        self.class_head = Linear(rng, d, 1)
        self.box_head = MLP(rng, d, d, 4, 3)

    def __call__(self, f1, pos, key_mask):
        z1_map = self.input_proj(f1)
        z1 = _tokens(z1_map)
        e1 = self.encoder(z1, pos, key_mask)
        B = f1.shape[0]
        E = Tensor(np.zeros((B,) + self.query.shape))
        maps = []
        for layer in self.decoder:
            E, w = layer(E, self.query, e1, pos, key_mask)
            maps.append(w)
        E = self.decoder_norm(E)
        boxes = sigmoid(self.box_head(E))
        logits = self.class_head(E).reshape(B, -1)
        return boxes, logits, z1, e1, maps


class SceneEncoder(Module):
    """Second encoder over ``f1`` fused with the head predictor's features:
    ``m1 = proj(z1) + e2``, ``m2 = proj(e1) + z2``, ``M = [m1 | m2]``."""

    def __init__(self, rng, cfg, c_in, drop):
        d = cfg.d
        self.input_proj = Conv1x1(rng, c_in, d)
        self.encoder = TransformerEncoder(rng, d, cfg.n_heads, cfg.d_ff, cfg.n_enc_layers, drop)
        self.proj_z1 = Linear(rng, d, d)
        self.proj_e1 = Linear(rng, d, d)

    def __call__(self, f1, z1, e1, pos, key_mask):
        z2 = _tokens(self.input_proj(f1))
        e2 = self.encoder(z2, pos, key_mask)
        m1 = self.proj_z1(z1) + e2
        m2 = self.proj_e1(e1) + z2
        return concat([m1, m2], axis=-1), m1, m2


class GazeDecoder(Module):
    def __init__(self, rng, cfg, drop):
        d = cfg.d
        self.layers = [GazeDecoderLayer(rng, d, cfg.n_heads, cfg.d_ff, drop, cfg.uses_scene_encoder)
                       for _ in range(cfg.n_dec_layers)]
        self.norm = LayerNorm(d)
        self.gaze_head = MLP(rng, d, d, 2, 3) if cfg.gaze_location else None
        self.inout_head = Linear(rng, d, 1)
        self.heatmap_head = MLP(rng, d, d, cfg.heatmap_size ** 2, 2) if cfg.heatmap_output else None

    def __call__(self, memory, query, pos, key_mask):
        B = memory.shape[0]
        E = Tensor(np.zeros((B,) + query.shape))
        maps = []
        for i, layer in enumerate(self.layers):
            E, w = layer(E, query, memory, pos, i == 0, key_mask)
            maps.append(w)
        E = self.norm(E)
        gaze = sigmoid(self.gaze_head(E)) if self.gaze_head is not None else None
        inout = self.inout_head(E).reshape(B, -1)
        heat = sigmoid(self.heatmap_head(E)) if self.heatmap_head is not None else None
        return gaze, inout, heat, maps


class GazeDETR(Module):
    """Full model. Call with a ``[B, 3, H, W]`` image batch and each image's
    valid ``(h, w)`` extent (defaults to the full batch extent)."""

    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        self.drop = DropoutState(p=cfg.dropout, rng=np.random.default_rng(cfg.seed + 1))
        self.backbone = Backbone(rng, cfg.backbone_channels, cfg.backbone_strides)
        C = self.backbone.out_channels
        self.head_predictor = HeadPredictor(rng, cfg, C, self.drop)
        self.scene_encoder = SceneEncoder(rng, cfg, C, self.drop) if cfg.uses_scene_encoder else None
        if cfg.shares_query:
            self.gaze_query = self.head_predictor.query
        else:
            self.gaze_query = parameter(xavier_uniform(rng, (cfg.n_queries, cfg.d)), name="gaze_query")
        self.gaze_decoder = GazeDecoder(rng, cfg, self.drop)

    def train(self, mode=True):
        self.drop.training = mode
        return self

    def eval(self):
        return self.train(False)

    @property
    def training(self):
        return self.drop.training

    def backbone_params(self):
        return [p for n, p in self.named_parameters() if n.startswith("backbone.")]

    def transformer_params(self):
        return [p for n, p in self.named_parameters() if not n.startswith("backbone.")]

    def __call__(self, images, valid_hw=None):
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=np.float64))
        if images.ndim == 3:
            images = images.reshape((1,) + images.shape)
        B, _, H, W = images.shape
        if valid_hw is None:
            valid_hw = [(H, W)] * B
        lo = self.config.min_image_size
        if min(min(hw) for hw in valid_hw) < lo:
            raise ValueError(f"images must be at least {lo}px on each side, got {valid_hw}")
        pix_mask = _spatial_mask(valid_hw, H, W)[:, None]
        x = mask_fill((images - 0.5) * 2.0, pix_mask)
        f1, valid = self.backbone(x, valid_hw)
        Hf, Wf = f1.shape[2], f1.shape[3]
        key_mask = _spatial_mask(valid, Hf, Wf).reshape(B, Hf * Wf)
        pos = batched_positional_encoding(valid, Hf, Wf, self.config.d)

        boxes, head_logits, z1, e1, head_maps = self.head_predictor(f1, pos, key_mask)
        if self.scene_encoder is not None:
            memory, _, _ = self.scene_encoder(f1, z1, e1, pos, key_mask)
        else:
            memory = e1
        gaze, inout, heat, gaze_maps = self.gaze_decoder(memory, self.gaze_query, pos, key_mask)
        return ModelOutput(boxes=boxes, head_logits=head_logits, inout_logits=inout, gaze=gaze,
                           heatmaps=heat, head_attention=head_maps, gaze_attention=gaze_maps,
                           feature_hw=(Hf, Wf), valid_feature_hw=valid, key_mask=key_mask)

    def backbone_forward(self, image):
        """Feature map ``f1`` for one ``[3, H, W]`` image (or a batch)."""
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image, dtype=np.float64))
        single = image.ndim == 3
        x = image.reshape((1,) + image.shape) if single else image
        B, _, H, W = x.shape
        lo = self.config.min_image_size
        if min(H, W) < lo:
            raise ValueError(f"images must be at least {lo}px on each side, got {H}x{W}")
        f1, _ = self.backbone((x - 0.5) * 2.0, [(H, W)] * B)
        return f1.reshape(f1.shape[1:]) if single else f1
