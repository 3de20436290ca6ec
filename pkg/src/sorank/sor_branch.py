"""Ranking branch: visual-token embedding stages and the attention encoder.

Three ways to give the per-proposal token its positional information:

* coordinate channels pooled with the features, fused by convolution
  (the position-preserved path; default),
* concatenating the normalized box center/size onto a semantic-only token,
* adding learnable look-up embeddings indexed by a quantized box center
  (and optionally quantized box size).

Tokens then pass through a post-LN transformer encoder (multi-head
self-attention + GELU feed-forward) so each proposal sees the others
before a linear head scores the six rank classes (background + ranks 1-5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Conv2d, EmbeddingTable, LayerNorm, Linear, Module
from .tensor import (ShapeError, Tensor, concat, cross_entropy, embedding,
                     gelu, matmul, narrow, relu, reshape, softmax, transpose)

N_RANK_CLASSES = 6   # background + ranks 1..5


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 3
    num_heads: int = 4
    d_token: int = 128
    d_ffn: int = 512

    def __post_init__(self):
        if self.d_token % self.num_heads:
            raise ValueError("d_token must be divisible by num_heads")


class ConvTrunk(Module):
    """Four 3x3 conv+relu layers then two FC layers to a flat vector.

    Strides (1, 2, 1, 2) take a 14x14 patch down to 4x4 before flattening.
    """

    def __init__(self, c_in: int, c_mid: int, p: int, d_out: int, rng,
                 fc_hidden: int = 256, dtype=np.float32):
        strides = (1, 2, 1, 2)
        convs = []
        c = c_in
        spatial = p
        for s in strides:
            convs.append(Conv2d(c, c_mid, 3, rng, stride=s, pad=1, dtype=dtype))
            c = c_mid
            spatial = (spatial + 2 - 3) // s + 1
        self.convs = convs
        self.flat_dim = c_mid * spatial * spatial
        self.fc1 = Linear(self.flat_dim, fc_hidden, rng, dtype=dtype)
        self.fc2 = Linear(fc_hidden, d_out, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        """[N, c_in, P, P] -> [N, d_out]."""
        for conv in self.convs:
            x = relu(conv(x))
        x = reshape(x, (x.shape[0], self.flat_dim))
        return self.fc2(relu(self.fc1(x)))


class PositionEmbeddingStage(Module):
    """Fuse pooled coordinate channels into the semantic features.

    Splits the (C+2)-channel patch into features and coordinates, lifts
    the 2 coordinate channels with a conv+relu, concatenates raw
    coordinates with that lift, fuses everything through the conv trunk,
    and emits one d_token vector per proposal.
    """

    def __init__(self, c_sem: int, p: int, d_token: int, rng,
                 c_pos: int = 16, dtype=np.float32):
        self.c_sem = c_sem
        self.pos_conv = Conv2d(2, c_pos, 3, rng, stride=1, pad=1, dtype=dtype)
        self.trunk = ConvTrunk(c_sem + 2 + c_pos, c_sem, p, d_token, rng,
                               dtype=dtype)

    def __call__(self, roi: Tensor) -> Tensor:
        """[N, C+2, P, P] -> [N, d_token]."""
        if roi.shape[1] != self.c_sem + 2:
            raise ShapeError(
                f"expected {self.c_sem + 2} channels, got {roi.shape[1]}")
        fea = narrow(roi, 1, 0, self.c_sem)
        pos = narrow(roi, 1, self.c_sem, 2)
        pos_fea = relu(self.pos_conv(pos))
        pos_embedding = concat([pos, pos_fea], axis=1)
        return self.trunk(concat([fea, pos_embedding], axis=1))


class SemanticEmbedding(Module):
    """Token from semantic channels only (baseline; no positional path)."""

    def __init__(self, c_sem: int, p: int, d_token: int, rng, dtype=np.float32):
        self.c_sem = c_sem
        self.trunk = ConvTrunk(c_sem, c_sem, p, d_token, rng, dtype=dtype)

    def __call__(self, roi_sem: Tensor) -> Tensor:
        return self.trunk(roi_sem)


class BoxConcatEmbedding(Module):
    """Semantic token with the normalized box descriptor appended.

    With centers_only, appends (cx/W, cy/H); otherwise (cx/W, cy/H, w/W, h/H).
    """

    def __init__(self, c_sem: int, p: int, d_token: int, rng,
                 centers_only: bool = False, dtype=np.float32):
        self.n_geom = 2 if centers_only else 4
        self.centers_only = centers_only
        self.trunk = ConvTrunk(c_sem, c_sem, p, d_token - self.n_geom, rng,
                               dtype=dtype)
        self.dtype = dtype

    def box_descriptor(self, boxes, img_w: float, img_h: float) -> np.ndarray:
        boxes = np.asarray(boxes, dtype=np.float64)
        cx = 0.5 * (boxes[:, 0] + boxes[:, 2]) / img_w
        cy = 0.5 * (boxes[:, 1] + boxes[:, 3]) / img_h
        if self.centers_only:
            geom = np.stack([cx, cy], axis=1)
        else:
            w = (boxes[:, 2] - boxes[:, 0]) / img_w
            h = (boxes[:, 3] - boxes[:, 1]) / img_h
            geom = np.stack([cx, cy, w, h], axis=1)
        return geom.astype(self.dtype)

    def __call__(self, roi_sem: Tensor, boxes, img_w, img_h) -> Tensor:
        sem = self.trunk(roi_sem)
        geom = Tensor(self.box_descriptor(boxes, img_w, img_h))
        return concat([sem, geom], axis=1)


def quantize_index(cx: float, cy: float, q: int, img_w: float,
                   img_h: float) -> int:
    """Flat cell index floor(cx*q/W)*q + floor(cy*q/H), clamped to the grid."""
    ix = min(int(np.floor(cx * q / img_w)), q - 1)
    iy = min(int(np.floor(cy * q / img_h)), q - 1)
    return ix * q + iy


class LookupEmbedding(Module):
    """Semantic token plus a learnable table row per quantized box center.

    With use_scale, a second table indexed by the quantized (w, h) is added
    as well.
    """

    def __init__(self, c_sem: int, p: int, d_token: int, rng, q: int = 8,
                 q_scale: int = 4, use_scale: bool = False, dtype=np.float32):
        self.trunk = ConvTrunk(c_sem, c_sem, p, d_token, rng, dtype=dtype)
        self.q = q
        self.q_scale = q_scale
        self.use_scale = use_scale
        self.pos_table = EmbeddingTable(q * q, d_token, rng, dtype=dtype,
                                        zero_init=True)
        if use_scale:
            self.scale_table = EmbeddingTable(q_scale * q_scale, d_token, rng,
                                              dtype=dtype, zero_init=True)

    def indices(self, boxes, img_w, img_h):
        boxes = np.asarray(boxes, dtype=np.float64)
        pos_idx = []
        scale_idx = []
        for x1, y1, x2, y2 in boxes:
            cx, cy = 0.5 * (x1 + x2), 0.5 * (y1 + y2)
            pos_idx.append(quantize_index(cx, cy, self.q, img_w, img_h))
            scale_idx.append(quantize_index(x2 - x1, y2 - y1, self.q_scale,
                                            img_w, img_h))
        return np.array(pos_idx), np.array(scale_idx)

    def __call__(self, roi_sem: Tensor, boxes, img_w, img_h) -> Tensor:
        token = self.trunk(roi_sem)
        pos_idx, scale_idx = self.indices(boxes, img_w, img_h)
        token = token + embedding(self.pos_table.table, pos_idx)
        if self.use_scale:
            token = token + embedding(self.scale_table.table, scale_idx)
        return token


class MultiHeadSelfAttention(Module):
    def __init__(self, d: int, num_heads: int, rng, dtype=np.float32):
        self.num_heads = num_heads
        self.d_head = d // num_heads
        self.wq = Linear(d, d, rng, dtype=dtype)
        self.wk = Linear(d, d, rng, dtype=dtype)
        self.wv = Linear(d, d, rng, dtype=dtype)
        self.wo = Linear(d, d, rng, dtype=dtype)

    def __call__(self, x: Tensor, return_attention: bool = False):
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        scale = 1.0 / np.sqrt(self.d_head)
        heads = []
        attns = []
        for h in range(self.num_heads):
            lo = h * self.d_head
            qh = narrow(q, 1, lo, self.d_head)
            kh = narrow(k, 1, lo, self.d_head)
            vh = narrow(v, 1, lo, self.d_head)
            attn = softmax(matmul(qh, transpose(kh)) * scale, axis=-1)
            attns.append(attn)
            heads.append(matmul(attn, vh))
        out = self.wo(concat(heads, axis=1))
        if return_attention:
            return out, attns
        return out


class EncoderLayer(Module):
    def __init__(self, cfg: EncoderConfig, rng, dtype=np.float32):
        self.attn = MultiHeadSelfAttention(cfg.d_token, cfg.num_heads, rng,
                                           dtype=dtype)
        self.ln1 = LayerNorm(cfg.d_token, dtype=dtype)
        self.ffn1 = Linear(cfg.d_token, cfg.d_ffn, rng, dtype=dtype)
        self.ffn2 = Linear(cfg.d_ffn, cfg.d_token, rng, dtype=dtype)
        self.ln2 = LayerNorm(cfg.d_token, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        # post-LN residual placement
        x = self.ln1(x + self.attn(x))
        x = self.ln2(x + self.ffn2(gelu(self.ffn1(x))))
        return x


class Encoder(Module):
    """Stack of self-attention + feed-forward layers; no token-order
    positional encoding is added (order is meaningless for proposals)."""

    def __init__(self, cfg: EncoderConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.enc_layers = [EncoderLayer(cfg, rng, dtype=dtype)
                           for _ in range(cfg.num_layers)]

    def __call__(self, tokens: Tensor) -> Tensor:
        if tokens.shape[0] == 0:
            raise ShapeError("encoder needs at least one token")
        x = tokens
        for layer in self.enc_layers:
            x = layer(x)
        return x

    def attention_matrices(self, tokens: Tensor) -> list[np.ndarray]:
        """Per-head attention of the first layer (diagnostics only)."""
        _, attns = self.enc_layers[0].attn(tokens, return_attention=True)
        return [a.data for a in attns]


class RankHead(Module):
    """Single linear map from contextual token to the 6 rank-class logits."""

    def __init__(self, d_token: int, rng, dtype=np.float32):
        self.fc = Linear(d_token, N_RANK_CLASSES, rng, dtype=dtype)

    def __call__(self, tokens: Tensor) -> Tensor:
        return self.fc(tokens)


def sor_loss(logits: Tensor, targets) -> Tensor:
    """Cross-entropy over the 6 rank classes, mean over proposals."""
    return cross_entropy(logits, targets)
