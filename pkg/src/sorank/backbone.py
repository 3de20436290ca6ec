"""Feature extraction with appended coordinate channels, and ROI pooling.

The backbone is a small conv stack with total stride 4. Before any pooling,
two extra channels holding the normalized X and Y coordinates of each
feature cell are concatenated onto the semantic channels, so a pooled
patch keeps the absolute position of its box. The detection branch strips
those channels back off; the ranking branch consumes them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Conv2d, Module
from .tensor import ShapeError, Tensor, concat, narrow, relu

BACKBONE_STRIDE = 4


class DegenerateBoxError(ValueError):
    """Box collapses below one pixel after clipping to the image."""


def make_coord_maps(w_f: int, h_f: int, dtype=np.float32) -> Tensor:
    """[2, H_f, W_f] pixel-center coordinates normalized to (0, 1).

    Channel 0 is X: value (j+0.5)/W_f at column j. Channel 1 is Y.
    """
    xs = (np.arange(w_f, dtype=dtype) + 0.5) / w_f
    ys = (np.arange(h_f, dtype=dtype) + 0.5) / h_f
    grid = np.empty((2, h_f, w_f), dtype=dtype)
    grid[0] = xs[None, :]
    grid[1] = ys[:, None]
    return Tensor(grid)


@dataclass
class FeatureMap:
    tensor: Tensor        # [(C+2), H_f, W_f] or [B, C+2, H_f, W_f]
    stride: int
    n_semantic: int       # C; channels C and C+1 are the coordinate maps


@dataclass
class RoiFeature:
    proposal_id: int
    tensor: Tensor        # [(C+2), P, P]
    bbox: tuple[float, float, float, float]


class Backbone(Module):
    """Four 3x3 conv+relu blocks, stride 2 at blocks 2 and 4."""

    def __init__(self, rng, channels=(16, 16, 32, 32), dtype=np.float32):
        strides = (1, 2, 1, 2)
        c_in = 3
        blocks = []
        for c_out, s in zip(channels, strides):
            blocks.append(Conv2d(c_in, c_out, 3, rng, stride=s, pad=1,
                                 dtype=dtype))
            c_in = c_out
        self.blocks = blocks
        self.out_channels = c_in
        self.dtype = dtype

    def __call__(self, image: Tensor) -> FeatureMap:
        """image is [3, H, W] or [B, 3, H, W]; H, W divisible by 4."""
        h, w = image.shape[-2:]
        if h % BACKBONE_STRIDE or w % BACKBONE_STRIDE:
            raise ShapeError(
                f"image size {w}x{h} not divisible by stride {BACKBONE_STRIDE}")
        x = image
        for block in self.blocks:
            x = relu(block(x))
        coords = make_coord_maps(w // BACKBONE_STRIDE, h // BACKBONE_STRIDE,
                                 dtype=self.dtype)
        axis = x.data.ndim - 3
        if x.data.ndim == 4:
            b = x.shape[0]
            coords = Tensor(np.broadcast_to(
                coords.data[None], (b,) + coords.data.shape).copy())
        return FeatureMap(tensor=concat([x, coords], axis=axis),
                          stride=BACKBONE_STRIDE,
                          n_semantic=self.out_channels)


def clip_box(bbox, img_w: float, img_h: float):
    x1, y1, x2, y2 = bbox
    return (min(max(x1, 0.0), img_w), min(max(y1, 0.0), img_h),
            min(max(x2, 0.0), img_w), min(max(y2, 0.0), img_h))


def roi_pool_many(fmap: FeatureMap, boxes, p: int, img_w: float,
                  img_h: float) -> Tensor:
    """Bilinear average pooling of N boxes onto P x P grids: [N, C+2, P, P].

    One sample per grid cell, taken at the cell center mapped into feature
    coordinates. Differentiable w.r.t. the feature map. Boxes are clipped
    to the image; a box below one pixel in either dimension is rejected.
    """
    fm = fmap.tensor
    if fm.data.ndim != 3:
        raise ShapeError("roi_pool_many expects an unbatched feature map")
    c_all, h_f, w_f = fm.shape
    stride = fmap.stride
    boxes = np.asarray(boxes, dtype=np.float64)
    clipped = np.empty_like(boxes)
    for i, b in enumerate(boxes):
        cb = clip_box(b, img_w, img_h)
        if cb[2] - cb[0] < 1.0 or cb[3] - cb[1] < 1.0:
            raise DegenerateBoxError(
                f"box {tuple(b)} degenerate after clipping to "
                f"{img_w}x{img_h}")
        clipped[i] = cb
    n = len(boxes)
    px = (np.arange(p) + 0.5) / p
    # sample coordinates in image pixels, then feature cells
    xs = clipped[:, 0:1] + px[None, :] * (clipped[:, 2:3] - clipped[:, 0:1])
    ys = clipped[:, 1:2] + px[None, :] * (clipped[:, 3:4] - clipped[:, 1:2])
    xf = xs / stride - 0.5
    yf = ys / stride - 0.5
    # corner indices stay in range while the fractional weights may leave
    # [0, 1]: samples in the half-cell band beyond the border extrapolate
    # linearly, which keeps pooled coordinate means exact for edge boxes
    x0 = np.clip(np.floor(xf), 0, max(w_f - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(yf), 0, max(h_f - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w_f - 1)
    y1 = np.minimum(y0 + 1, h_f - 1)
    wx = (xf - x0).astype(fm.dtype)     # [N, P]
    wy = (yf - y0).astype(fm.dtype)

    # bilinear sampling as one sparse gather matrix: every output cell is
    # a 4-corner weighted sum of feature cells, shared across channels
    y0g = np.broadcast_to(y0[:, :, None], (n, p, p))
    x0g = np.broadcast_to(x0[:, None, :], (n, p, p))
    y1g = np.broadcast_to(y1[:, :, None], (n, p, p))
    x1g = np.broadcast_to(x1[:, None, :], (n, p, p))
    wyg = np.broadcast_to(wy[:, :, None], (n, p, p))
    wxg = np.broadcast_to(wx[:, None, :], (n, p, p))

    m = n * p * p
    rows = np.arange(m)
    gather = np.zeros((m, h_f * w_f), dtype=fm.dtype)
    for yg, xg, wgt in (
            (y0g, x0g, (1 - wyg) * (1 - wxg)),
            (y0g, x1g, (1 - wyg) * wxg),
            (y1g, x0g, wyg * (1 - wxg)),
            (y1g, x1g, wyg * wxg)):
        flat = (yg * w_f + xg).reshape(m)
        np.add.at(gather, (rows, flat), wgt.reshape(m))

    data = fm.data
    out = data.reshape(c_all, -1) @ gather.T                # [C, M]
    out = np.ascontiguousarray(
        out.reshape(c_all, n, p, p).transpose(1, 0, 2, 3))  # [N, C, P, P]

    def backward(g):
        if not fm._needs_graph():
            return
        gt = g.transpose(1, 0, 2, 3).reshape(c_all, m)
        fm._accumulate((gt @ gather).reshape(data.shape))

    from .tensor import _make
    return _make(out, (fm,), backward)


def roi_pool(fmap: FeatureMap, bbox, p: int, img_w: float, img_h: float,
             proposal_id: int = 0) -> RoiFeature:
    pooled = roi_pool_many(fmap, [bbox], p, img_w, img_h)
    return RoiFeature(proposal_id=proposal_id,
                      tensor=narrow(pooled, 0, 0, 1).reshape(
                          (pooled.shape[1], p, p)),
                      bbox=tuple(bbox))


def strip_position(roi: Tensor, n_semantic: int) -> Tensor:
    """First C channels of [N, C+2, P, P] (or [C+2, P, P]) pooled features."""
    axis = roi.data.ndim - 3
    return narrow(roi, axis, 0, n_semantic)
