"""Evaluation: IoU matching, rank correlation, and saliency-map error.

The ranking score per image is the normalized Spearman correlation
between ground-truth and predicted ranks of matched instances; images
with fewer than two matches cannot define a correlation and are excluded
(their count is tracked via images_used). The map error compares graded
saliency maps painted from the ranked boxes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

MAX_RANK = 5


def iou(box_a, box_b) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    ix = max(0.0, min(box_a[2], box_b[2]) - max(box_a[0], box_b[0]))
    iy = max(0.0, min(box_a[3], box_b[3]) - max(box_a[1], box_b[1]))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    area_a = (box_a[2] - box_a[0]) * (box_a[3] - box_a[1])
    area_b = (box_b[2] - box_b[0]) * (box_b[3] - box_b[1])
    return inter / (area_a + area_b - inter)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]]       # (gt id, prediction id, IoU)
    unmatched_gt: list[int]
    unmatched_pred: list[int]


def match_instances(gt_boxes: dict[int, tuple], pred_boxes: dict[int, tuple],
                    threshold: float = 0.5) -> MatchResult:
    """Greedy one-to-one matching in descending IoU order.

    Candidate (gt, pred) pairs with IoU >= threshold are accepted best
    first, skipping ids already used. Ties in IoU break by (gt id,
    pred id) for determinism.
    """
    candidates = []
    for g_id, g_box in gt_boxes.items():
        for p_id, p_box in pred_boxes.items():
            v = iou(g_box, p_box)
            if v >= threshold:
                candidates.append((-v, g_id, p_id))
    candidates.sort()
    used_g, used_p = set(), set()
    pairs = []
    for neg_v, g_id, p_id in candidates:
        if g_id in used_g or p_id in used_p:
            continue
        used_g.add(g_id)
        used_p.add(p_id)
        pairs.append((g_id, p_id, -neg_v))
    return MatchResult(
        pairs=pairs,
        unmatched_gt=sorted(set(gt_boxes) - used_g),
        unmatched_pred=sorted(set(pred_boxes) - used_p),
    )


def _dense_ranks(values) -> np.ndarray:
    """Ranks 1..n with ties averaged."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(gt_ranks, pred_ranks) -> float:
    """rho = 1 - 6 sum(d^2) / (n (n^2 - 1)) on densified ranks."""
    gt_ranks = np.asarray(gt_ranks, dtype=np.float64)
    pred_ranks = np.asarray(pred_ranks, dtype=np.float64)
    n = len(gt_ranks)
    if len(pred_ranks) != n:
        raise ValueError("rank lists differ in length")
    if n < 2:
        raise ValueError("correlation undefined for fewer than two items")
    d = _dense_ranks(gt_ranks) - _dense_ranks(pred_ranks)
    return float(1.0 - 6.0 * np.sum(d * d) / (n * (n * n - 1)))


@dataclass
class MetricsReport:
    sor: float | None             # None when no image contributes
    mae: float
    images_used: int
    n_images: int
    per_image: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        doc = {"sor": self.sor, "mae": self.mae,
               "images_used": self.images_used, "n_images": self.n_images,
               "per_image": self.per_image}
        return json.dumps(doc, sort_keys=True, indent=1)

    def csv_row(self) -> str:
        sor = "" if self.sor is None else f"{self.sor:.6f}"
        return f"{sor},{self.mae:.6f},{self.images_used}"


def image_sor(gt_ranked: dict[int, tuple], gt_rank_of: dict[int, int],
              pred_entries: list[dict], threshold: float):
    """Normalized correlation for one image, or None if < 2 matches.

    ``pred_entries`` rows need bbox and rank keys. Correlation is computed
    on the matched subset with both sides densely re-ranked.
    """
    pred_boxes = {i: tuple(e["bbox"]) for i, e in enumerate(pred_entries)}
    match = match_instances(gt_ranked, pred_boxes, threshold)
    if len(match.pairs) < 2:
        return None, match
    gt_r = [gt_rank_of[g] for g, _, _ in match.pairs]
    pr_r = [pred_entries[p]["rank"] for _, p, _ in match.pairs]
    rho = spearman(gt_r, pr_r)
    return (rho + 1.0) / 2.0, match


def render_rank_map(entries, img_w: int, img_h: int) -> np.ndarray:
    """Graded [H, W] saliency map from ranked boxes.

    Rank r paints (6-r)/5 over the box; boxes are painted in ascending
    value order so more salient ranks overwrite less salient ones.
    Pixel membership uses pixel centers, matching the scene rasterizer.
    """
    out = np.zeros((img_h, img_w), dtype=np.float64)
    ys, xs = np.mgrid[0:img_h, 0:img_w]
    pcx, pcy = xs + 0.5, ys + 0.5
    for entry in sorted(entries, key=lambda e: -e["rank"]):
        r = entry["rank"]
        if not (1 <= r <= MAX_RANK):
            raise ValueError(f"rank {r} outside 1..{MAX_RANK}")
        x1, y1, x2, y2 = entry["bbox"]
        mask = (pcx >= x1) & (pcx < x2) & (pcy >= y1) & (pcy < y2)
        out[mask] = (6 - r) / 5.0
    return out


def _gt_entries(scene) -> list[dict]:
    by_id = {m.id: m for m in scene.instances}
    return [{"bbox": by_id[i].bbox, "rank": r}
            for i, r in scene.gt_rank.items()]


def evaluate(scenes, predictions: list[list[dict]],
             threshold: float = 0.5) -> MetricsReport:
    """Dataset-level report from per-image prediction entry lists."""
    if len(predictions) != len(scenes):
        raise ValueError("one prediction list per scene required")
    sors = []
    maes = []
    per_image = []
    for idx, (scene, entries) in enumerate(zip(scenes, predictions)):
        h, w = scene.image.shape[1:]
        by_id = {m.id: m for m in scene.instances}
        gt_ranked = {i: by_id[i].bbox for i in scene.gt_rank}
        s, match = image_sor(gt_ranked, scene.gt_rank, entries, threshold)
        gt_map = render_rank_map(_gt_entries(scene), w, h)
        pred_map = render_rank_map(entries, w, h)
        mae = float(np.abs(gt_map - pred_map).mean())
        maes.append(mae)
        if s is not None:
            sors.append(s)
        per_image.append({"image": idx, "sor": s, "mae": mae,
                          "matches": len(match.pairs)})
    return MetricsReport(
        sor=float(np.mean(sors)) if sors else None,
        mae=float(np.mean(maes)),
        images_used=len(sors),
        n_images=len(scenes),
        per_image=per_image,
    )
