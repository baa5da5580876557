"""Attention building blocks.

All sequence tensors are batched ``[B, n, d]``. Spatial memories carry a
boolean key mask ``[B, n_k]`` that is False on zero-padded positions, so
padded keys receive exactly zero attention weight.

The gaze decoder's cross-attention keeps three ``d``-wide segments in its
keys and queries (head memory, scene memory, position). Each attention head
takes its ``d / n_heads`` slice from every segment, so per head the logit is
the sum of three segment dot products.
"""

from __future__ import annotations

import math

import numpy as np

from .nn import DropoutState, LayerNorm, Linear, Module
from .tensor import Tensor, add, concat, matmul, relu, softmax_lastdim, transpose


def sine_positional_encoding(H, W, d, temperature=10000.0):
    """2-D sinusoidal encoding of an ``H x W`` grid, shape ``[H*W, d]``.

    The first ``d/2`` channels encode the row, the rest the column; within
    each half, even channels are sines and odd channels cosines. Positions
    start at 0 and are scaled by ``2*pi / extent``.
    """
    if d % 4:
        raise ValueError(f"positional encoding width must be divisible by 4, got {d}")
    npf = d // 2
    dim_t = temperature ** (2 * (np.arange(npf) // 2) / npf)
    y = np.arange(H, dtype=np.float64) * (2 * math.pi / H)
    x = np.arange(W, dtype=np.float64) * (2 * math.pi / W)
    py = y[:, None] / dim_t
    px = x[:, None] / dim_t
    py[:, 0::2], py[:, 1::2] = np.sin(py[:, 0::2]), np.cos(py[:, 1::2])
    px[:, 0::2], px[:, 1::2] = np.sin(px[:, 0::2]), np.cos(px[:, 1::2])
    enc = np.concatenate([np.repeat(py, W, axis=0), np.tile(px, (H, 1))], axis=1)
    return Tensor(enc)


def batched_positional_encoding(valid_hw, H, W, d):
    """Per-sample encodings laid into an ``H x W`` padded grid, ``[B, H*W, d]``.

    Each sample is encoded over its own valid extent so a padded sample sees
    the same encodings it would alone.
    """
    out = np.zeros((len(valid_hw), H, W, d))
    for b, (h, w) in enumerate(valid_hw):
        out[b, :h, :w] = sine_positional_encoding(h, w, d).data.reshape(h, w, d)
    return Tensor(out.reshape(len(valid_hw), H * W, d))


def split_heads(x, n_heads):
    """``[B, n, d] -> [B, h, n, d/h]``."""
    B, n, d = x.shape
    return transpose(x.reshape(B, n, n_heads, d // n_heads), (0, 2, 1, 3))


def merge_heads(x):
    """``[B, h, n, dh] -> [B, n, h*dh]``."""
    B, h, n, dh = x.shape
    return transpose(x, (0, 2, 1, 3)).reshape(B, n, h * dh)


def attend(qh, kh, vh, key_mask=None, scale=None, drop=None):
    """Scaled dot-product attention on head-split tensors.

    Returns the ``[B, h, n_q, dv]`` output and the ``[B, h, n_q, n_k]``
    weight array (before dropout).
    """
    if scale is None:
        scale = 1.0 / math.sqrt(qh.shape[-1])
    logits = matmul(qh, transpose(kh, (0, 1, 3, 2))) * scale
    mask = None if key_mask is None else key_mask[:, None, None, :]
    weights = softmax_lastdim(logits, mask)
    w = weights if drop is None else drop(weights)
    return matmul(w, vh), weights.data


def _batch(x, B):
    """Lift an unbatched ``[n, d]`` tensor to ``[B, n, d]``."""
    if x.ndim == 3:
        return x
    return add(Tensor(np.zeros((B,) + x.shape)), x)


class MultiHeadAttention(Module):
    """Standard multi-head attention with input and output projections."""

    def __init__(self, rng, d, n_heads, d_q=None, d_v=None, drop=None):
        if d % n_heads:
            raise ValueError(f"model width {d} not divisible by {n_heads} heads")
        d_q = d if d_q is None else d_q
        d_v = d if d_v is None else d_v
        self.n_heads = n_heads
        self.d = d
        self.q_proj = Linear(rng, d_q, d)
        self.k_proj = Linear(rng, d_q, d)
        self.v_proj = Linear(rng, d_v, d)
        self.out_proj = Linear(rng, d, d)
        self.drop = drop

    def __call__(self, queries, keys, values, key_mask=None):
        if queries.shape[-1] != keys.shape[-1]:
            raise ValueError(f"mha: query width {queries.shape[-1]} != key width {keys.shape[-1]}")
        if keys.shape[-2] != values.shape[-2]:
            raise ValueError(f"mha: {keys.shape[-2]} keys but {values.shape[-2]} values")
        h = self.n_heads
        out, weights = attend(split_heads(self.q_proj(queries), h), split_heads(self.k_proj(keys), h),
                              split_heads(self.v_proj(values), h), key_mask, drop=self.drop)
        return self.out_proj(merge_heads(out)), weights


def mha(queries, keys, values, params, key_mask=None):
    """Functional form of :class:`MultiHeadAttention` for unbatched or batched inputs."""
    single = queries.ndim == 2
    if single:
        queries, keys, values = (t.reshape((1,) + t.shape) for t in (queries, keys, values))
        key_mask = None if key_mask is None else np.asarray(key_mask)[None]
    out, weights = params(queries, keys, values, key_mask)
    if single:
        return out.reshape(out.shape[1:]), weights[0]
    return out, weights


class FeedForward(Module):
    def __init__(self, rng, d, d_ff, drop):
        self.lin1 = Linear(rng, d, d_ff)
        self.lin2 = Linear(rng, d_ff, d)
        self.drop = drop

    def __call__(self, x):
        return self.lin2(self.drop(relu(self.lin1(x))))


class EncoderLayer(Module):
    """Post-norm self-attention encoder layer; positions enter queries and keys only."""

    def __init__(self, rng, d, n_heads, d_ff, drop):
        self.self_attn = MultiHeadAttention(rng, d, n_heads, drop=drop)
        self.norm1 = LayerNorm(d)
        self.ffn = FeedForward(rng, d, d_ff, drop)
        self.norm2 = LayerNorm(d)
        self.drop = drop

    def __call__(self, x, pos, key_mask=None):
        qk = x + pos
        sa, _ = self.self_attn(qk, qk, x, key_mask)
        x = self.norm1(x + self.drop(sa))
        return self.norm2(x + self.drop(self.ffn(x)))


class TransformerEncoder(Module):
    def __init__(self, rng, d, n_heads, d_ff, n_layers, drop):
        self.layers = [EncoderLayer(rng, d, n_heads, d_ff, drop) for _ in range(n_layers)]

    def __call__(self, x, pos, key_mask=None):
        for layer in self.layers:
            x = layer(x, pos, key_mask)
        return x


class HeadDecoderLayer(Module):
    """DETR decoder layer: learned spatial queries are added to queries and keys."""

    def __init__(self, rng, d, n_heads, d_ff, drop):
        self.self_attn = MultiHeadAttention(rng, d, n_heads, drop=drop)
        self.norm1 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(rng, d, n_heads, drop=drop)
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(rng, d, d_ff, drop)
        self.norm3 = LayerNorm(d)
        self.drop = drop

    def __call__(self, E, p_q, memory, p_k, key_mask=None):
        qk = E + p_q
        sa, _ = self.self_attn(qk, qk, E)
        E = self.norm1(E + self.drop(sa))
        ca, weights = self.cross_attn(E + p_q, memory + p_k, memory, key_mask)
        E = self.norm2(E + self.drop(ca))
        E = self.norm3(E + self.drop(self.ffn(E)))
        return E, weights


class GazeSelfAttention(Module):
    """Self-attention whose keys and queries mix the previous embeddings with
    the head predictor's spatial query through separate projections::

        K = E W_KE + p_q W_Kp        Q = E W_QE + p_q W_Qp        V = E W_V

    Returns ``c_q = norm(E + attn)``.
    """

    def __init__(self, rng, d, n_heads, drop):
        self.n_heads = n_heads
        self.w_ke = Linear(rng, d, d, bias=False)
        self.w_kp = Linear(rng, d, d, bias=False)
        self.w_qe = Linear(rng, d, d, bias=False)
        self.w_qp = Linear(rng, d, d, bias=False)
        self.w_v = Linear(rng, d, d)
        self.out_proj = Linear(rng, d, d)
        self.norm = LayerNorm(d)
        self.drop = drop

    def keys_queries(self, E, p_q):
        return self.w_ke(E) + self.w_kp(p_q), self.w_qe(E) + self.w_qp(p_q)

    def __call__(self, E, p_q):
        h = self.n_heads
        K, Q = self.keys_queries(E, p_q)
        out, weights = attend(split_heads(Q, h), split_heads(K, h), split_heads(self.w_v(E), h),
                              drop=self.drop)
        return self.norm(E + self.drop(self.out_proj(merge_heads(out)))), weights


def _segment_heads(segments, n_heads):
    """Concatenate per-head slices of each ``[B, n, d]`` segment: ``[B, h, n, k*d/h]``."""
    return concat([split_heads(s, n_heads) for s in segments], axis=-1)


class GazeCrossAttention(Module):
    """Cross-attention into the fused memory ``M = [m1 | m2]`` (width ``2d``)::

        K = [m1 W_KM | m2 W_KM | p_k W_Kp]
        Q = [c W_Qc  | c W_Qc  | E W_QE]
        V = M W_V                      (2d -> d)

    so each logit is ``c.m1 + c.m2 + E.p_k`` in projected space. On the first
    layer ``c = c_q + p_q``, afterwards ``c = c_q``.
    """

    n_segments = 3

    def __init__(self, rng, d, n_heads, drop):
        if d % n_heads:
            raise ValueError(f"model width {d} not divisible by {n_heads} heads")
        self.d = d
        self.n_heads = n_heads
        self.w_km = Linear(rng, d, d, bias=False)
        self.w_kp = Linear(rng, d, d, bias=False)
        self.w_qc = Linear(rng, d, d, bias=False)
        self.w_qe = Linear(rng, d, d, bias=False)
        self.w_v = Linear(rng, 2 * d, d)
        self.out_proj = Linear(rng, d, d)
        self.drop = drop

    def segments(self, c_q, E_prev, p_q, M, p_k, first_layer):
        """Projected ``(query_segments, key_segments, value)`` before the head split."""
        d = self.d
        if M.shape[-1] != 2 * d:
            raise ValueError(f"gaze cross-attention needs memory width 2d={2 * d}, got {M.shape[-1]}")
        B = M.shape[0]
        c = c_q + p_q if first_layer else c_q
        cq = self.w_qc(c)
        qs = [cq, cq, self.w_qe(E_prev)]
        ks = [self.w_km(M[:, :, :d]), self.w_km(M[:, :, d:]), _batch(self.w_kp(p_k), B)]
        return qs, ks, self.w_v(M)

    def scale(self):
        return 1.0 / math.sqrt(self.n_segments * self.d // self.n_heads)

    def __call__(self, c_q, E_prev, p_q, M, p_k, first_layer, key_mask=None):
        h = self.n_heads
        qs, ks, V = self.segments(c_q, E_prev, p_q, M, p_k, first_layer)
        out, weights = attend(_segment_heads(qs, h), _segment_heads(ks, h), split_heads(V, h),
                              key_mask, scale=self.scale(), drop=self.drop)
        return self.out_proj(merge_heads(out)), weights


class PlainGazeCrossAttention(GazeCrossAttention):
    """Cross-attention into the head predictor's own memory ``e1`` (width ``d``),
    used when the scene encoder is ablated::

        K = [e1 W_KM | p_k W_Kp]      Q = [c W_Qc | p_q W_Qp]      V = e1 W_V
    """

    n_segments = 2

    def __init__(self, rng, d, n_heads, drop):
        if d % n_heads:
            raise ValueError(f"model width {d} not divisible by {n_heads} heads")
        self.d = d
        self.n_heads = n_heads
        self.w_km = Linear(rng, d, d, bias=False)
        self.w_kp = Linear(rng, d, d, bias=False)
        self.w_qc = Linear(rng, d, d, bias=False)
        self.w_qp = Linear(rng, d, d, bias=False)
        self.w_v = Linear(rng, d, d)
        self.out_proj = Linear(rng, d, d)
        self.drop = drop

    def segments(self, c_q, E_prev, p_q, M, p_k, first_layer):
        if M.shape[-1] != self.d:
            raise ValueError(f"plain gaze cross-attention needs memory width d={self.d}, got {M.shape[-1]}")
        B = M.shape[0]
        c = c_q + p_q if first_layer else c_q
        qs = [self.w_qc(c), _batch(self.w_qp(p_q), B)]
        ks = [self.w_km(M), _batch(self.w_kp(p_k), B)]
        return qs, ks, self.w_v(M)


class GazeDecoderLayer(Module):
    def __init__(self, rng, d, n_heads, d_ff, drop, fused_memory=True):
        self.self_attn = GazeSelfAttention(rng, d, n_heads, drop)
        cls = GazeCrossAttention if fused_memory else PlainGazeCrossAttention
        self.cross_attn = cls(rng, d, n_heads, drop)
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(rng, d, d_ff, drop)
        self.norm3 = LayerNorm(d)
        self.drop = drop

    def __call__(self, E, p_q, memory, p_k, first_layer, key_mask=None):
        c_q, _ = self.self_attn(E, p_q)
        ca, weights = self.cross_attn(c_q, E, p_q, memory, p_k, first_layer, key_mask)
        E = self.norm2(c_q + self.drop(ca))
        E = self.norm3(E + self.drop(self.ffn(E)))
        return E, weights


def default_dropout(p=0.1, seed=0):
    return DropoutState(p=p, rng=np.random.default_rng(seed))


__all__ = [
    "sine_positional_encoding", "batched_positional_encoding", "split_heads", "merge_heads",
    "attend", "MultiHeadAttention", "mha", "EncoderLayer", "TransformerEncoder",
    "HeadDecoderLayer", "GazeSelfAttention", "GazeCrossAttention", "PlainGazeCrossAttention",
    "GazeDecoderLayer", "FeedForward", "default_dropout",
]
