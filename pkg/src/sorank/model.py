"""Assembled two-branch model: shared backbone, detection, and ranking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .backbone import Backbone, FeatureMap, roi_pool_many, strip_position
from .det_branch import DetHead, DetOutput
from .sor_branch import (BoxConcatEmbedding, Encoder, EncoderConfig,
                         LookupEmbedding, PositionEmbeddingStage, RankHead,
                         SemanticEmbedding)
from .tensor import Tensor

EMBEDDING_SCHEMES = (
    "ppa",
    "bbox_concat",
    "bbox_concat_centers_only",
    "learnable_pos",
    "learnable_pos_scale",
)


@dataclass(frozen=True)
class ModelConfig:
    pool_size: int = 14
    d_token: int = 128
    embedding_scheme: str = "ppa"
    use_position: bool = True    # ppa scheme only: coordinate-channel path
    use_attention: bool = True
    c_pos: int = 16
    lookup_q: int = 8
    lookup_q_scale: int = 4
    backbone_channels: tuple[int, ...] = (16, 16, 32, 32)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.embedding_scheme not in EMBEDDING_SCHEMES:
            raise ValueError(
                f"unknown embedding scheme {self.embedding_scheme!r}")


class SorModel:
    """Backbone + detection head + ranking branch under one config."""

    def __init__(self, cfg: ModelConfig, seed: int, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        p = cfg.pool_size

        def init_rng(name):
            return rng_mod.stream(seed, "init", name)

        self.backbone = Backbone(init_rng("backbone"),
                                 channels=cfg.backbone_channels, dtype=dtype)
        c = self.backbone.out_channels
        self.c_sem = c
        self.det_head = DetHead(c, p, init_rng("det"), dtype=dtype)

        scheme = cfg.embedding_scheme
        if scheme == "ppa":
            if cfg.use_position:
                self.embedding = PositionEmbeddingStage(
                    c, p, cfg.d_token, init_rng("embed"), c_pos=cfg.c_pos,
                    dtype=dtype)
            else:
                self.embedding = SemanticEmbedding(
                    c, p, cfg.d_token, init_rng("embed"), dtype=dtype)
        elif scheme in ("bbox_concat", "bbox_concat_centers_only"):
            self.embedding = BoxConcatEmbedding(
                c, p, cfg.d_token, init_rng("embed"),
                centers_only=(scheme == "bbox_concat_centers_only"),
                dtype=dtype)
        else:
            self.embedding = LookupEmbedding(
                c, p, cfg.d_token, init_rng("embed"), q=cfg.lookup_q,
                q_scale=cfg.lookup_q_scale,
                use_scale=(scheme == "learnable_pos_scale"), dtype=dtype)

        self.encoder = (Encoder(cfg.encoder, init_rng("encoder"), dtype=dtype)
                        if cfg.use_attention else None)
        self.rank_head = RankHead(cfg.d_token, init_rng("rank_head"),
                                  dtype=dtype)

    # -- parameters ----------------------------------------------------

    def named_parameters(self):
        groups = [("backbone", self.backbone), ("det_head", self.det_head),
                  ("embedding", self.embedding)]
        if self.encoder is not None:
            groups.append(("encoder", self.encoder))
        groups.append(("rank_head", self.rank_head))
        out = []
        for prefix, module in groups:
            out.extend((f"{prefix}.{n}", p)
                       for n, p in module.named_parameters())
        return out

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None

    def sor_param_names(self) -> set[str]:
        return {n for n, _ in self.named_parameters()
                if n.split(".", 1)[0] in ("embedding", "encoder", "rank_head")}

    # -- forward -------------------------------------------------------

    def extract(self, image: Tensor) -> FeatureMap:
        return self.backbone(image)

    def pool(self, fmap: FeatureMap, boxes, img_w, img_h) -> Tensor:
        return roi_pool_many(fmap, boxes, self.cfg.pool_size, img_w, img_h)

    def tokens(self, roi: Tensor, boxes, img_w, img_h) -> Tensor:
        scheme = self.cfg.embedding_scheme
        if scheme == "ppa":
            if self.cfg.use_position:
                return self.embedding(roi)
            return self.embedding(strip_position(roi, self.c_sem))
        roi_sem = strip_position(roi, self.c_sem)
        return self.embedding(roi_sem, boxes, img_w, img_h)

    def rank_logits(self, roi: Tensor, boxes, img_w, img_h) -> Tensor:
        t = self.tokens(roi, boxes, img_w, img_h)
        if self.encoder is not None:
            t = self.encoder(t)
        return self.rank_head(t)

    def detect(self, roi: Tensor) -> DetOutput:
        return self.det_head(strip_position(roi, self.c_sem))

    def forward_image(self, fmap: FeatureMap, boxes, img_w, img_h):
        """Both branches for one image's proposals."""
        roi = self.pool(fmap, boxes, img_w, img_h)
        det = self.detect(roi)
        logits = self.rank_logits(roi, boxes, img_w, img_h)
        return det, logits
