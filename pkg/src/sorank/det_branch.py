"""Detection branch: object/background classifier and box regression.

Operates on position-stripped ROI features only, so its outputs cannot
depend on where a proposal sits in the image. Box deltas follow the usual
detector parameterization (center offsets normalized by the proposal size,
log size ratios).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Conv2d, Linear, Module
from .tensor import Tensor, cross_entropy, embedding, relu, reshape, smooth_l1

SMOOTH_L1_BETA = 1.0


@dataclass
class DetOutput:
    cls_logits: Tensor    # [N, 2]: background / object
    box_deltas: Tensor    # [N, 4]: (t_x, t_y, t_w, t_h)


class DetHead(Module):
    """Two stride-2 convs then FC heads for class logits and box deltas."""

    def __init__(self, c_sem: int, p: int, rng, fc_hidden: int = 128,
                 dtype=np.float32):
        self.conv1 = Conv2d(c_sem, c_sem, 3, rng, stride=2, pad=1, dtype=dtype)
        self.conv2 = Conv2d(c_sem, c_sem, 3, rng, stride=2, pad=1, dtype=dtype)
        spatial = p
        for _ in range(2):
            spatial = (spatial + 2 - 3) // 2 + 1
        self.flat_dim = c_sem * spatial * spatial
        self.fc = Linear(self.flat_dim, fc_hidden, rng, dtype=dtype)
        self.cls = Linear(fc_hidden, 2, rng, dtype=dtype)
        self.box = Linear(fc_hidden, 4, rng, dtype=dtype)

    def __call__(self, roi_sem: Tensor) -> DetOutput:
        """[N, C, P, P] position-stripped features -> DetOutput."""
        x = relu(self.conv1(roi_sem))
        x = relu(self.conv2(x))
        x = relu(self.fc(reshape(x, (x.shape[0], self.flat_dim))))
        return DetOutput(cls_logits=self.cls(x), box_deltas=self.box(x))


def box_deltas_encode(proposal, gt) -> np.ndarray:
    """(t_x, t_y, t_w, t_h) taking `proposal` onto `gt`."""
    px1, py1, px2, py2 = proposal
    gx1, gy1, gx2, gy2 = gt
    pw, ph = px2 - px1, py2 - py1
    if pw <= 0 or ph <= 0:
        raise ValueError(f"proposal {proposal} has non-positive size")
    gw, gh = gx2 - gx1, gy2 - gy1
    return np.array([
        ((gx1 + gx2) / 2 - (px1 + px2) / 2) / pw,
        ((gy1 + gy2) / 2 - (py1 + py2) / 2) / ph,
        np.log(gw / pw),
        np.log(gh / ph),
    ])


def box_deltas_apply(proposal, deltas) -> tuple[float, float, float, float]:
    """Exact inverse of box_deltas_encode."""
    px1, py1, px2, py2 = proposal
    pw, ph = px2 - px1, py2 - py1
    if pw <= 0 or ph <= 0:
        raise ValueError(f"proposal {proposal} has non-positive size")
    tx, ty, tw, th = deltas
    cx = (px1 + px2) / 2 + tx * pw
    cy = (py1 + py2) / 2 + ty * ph
    w = pw * np.exp(tw)
    h = ph * np.exp(th)
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def det_loss(det: DetOutput, det_classes, positive_mask,
             target_deltas) -> Tensor:
    """Classification cross-entropy plus smooth-L1 on positive proposals.

    ``target_deltas`` is [N, 4] with arbitrary rows where positive_mask is
    False; only positive rows enter the box term.
    """
    loss = cross_entropy(det.cls_logits, det_classes)
    positive_mask = np.asarray(positive_mask, dtype=bool)
    if positive_mask.any():
        idx = np.flatnonzero(positive_mask)
        rows = embedding(det.box_deltas, idx)  # differentiable row gather
        tgt = Tensor(np.asarray(target_deltas, dtype=det.box_deltas.dtype)[idx])
        loss = loss + smooth_l1(rows, tgt, SMOOTH_L1_BETA)
    return loss
