"""Sequential rank assignment and per-image prediction assembly.

Rank classes are assigned greedily: the surviving proposal with the
highest rank-1 probability takes rank 1 and leaves the pool, then the
highest rank-2 probability among the rest takes rank 2, and so on up to
rank 5. The background column never assigns a rank. Ties break toward the
lowest proposal id.
"""

from __future__ import annotations

import json

import numpy as np

from . import rng as rng_mod
from .backbone import clip_box
from .det_branch import box_deltas_apply
from .model import SorModel
from .scenes import Scene
from .tensor import Tensor, no_grad, softmax
from .training import TrainConfig, sample_proposals

MAX_RANK = 5
DEFAULT_OBJECT_THRESHOLD = 0.5


def greedy_rank_assign(scores: np.ndarray) -> list[tuple[int, int, float]]:
    """[(proposal index, rank, probability)] from an [N, 6] score matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    remaining = list(range(scores.shape[0]))
    out = []
    for rank in range(1, MAX_RANK + 1):
        if not remaining:
            break
        col = scores[remaining, rank]
        best = int(np.argmax(col))  # argmax returns the first (lowest id) tie
        pid = remaining.pop(best)
        out.append((pid, rank, float(scores[pid, rank])))
    return out


def predict_image(model: SorModel, scene: Scene, proposals,
                  object_threshold: float = DEFAULT_OBJECT_THRESHOLD) -> list[dict]:
    """Run both branches and return ranked prediction entries.

    The detection head refines boxes and filters out proposals whose
    object probability is below the threshold; ranking runs on the
    survivors only. Entries: proposal_id, bbox (refined, clipped), rank,
    score.
    """
    h, w = scene.image.shape[1:]
    with no_grad():
        fmap = model.extract(Tensor(scene.image.astype(model.dtype)))
        roi = model.pool(fmap, proposals, w, h)
        det = model.detect(roi)
        obj_prob = softmax(det.cls_logits, axis=-1).data[:, 1]
        keep = np.flatnonzero(obj_prob >= object_threshold)
        if keep.size == 0:
            return []
        refined = []
        for i in keep:
            box = box_deltas_apply(proposals[i], det.box_deltas.data[i])
            refined.append(clip_box(box, w, h))
        surv_boxes = np.asarray(proposals)[keep]
        surv_roi = model.pool(fmap, surv_boxes, w, h)
        logits = model.rank_logits(surv_roi, surv_boxes, w, h)
        probs = softmax(logits, axis=-1).data
    entries = []
    for local_id, rank, score in greedy_rank_assign(probs):
        entries.append({
            "proposal_id": int(keep[local_id]),
            "bbox": [float(v) for v in refined[local_id]],
            "rank": rank,
            "score": score,
        })
    return entries


def eval_proposals(scene: Scene, cfg: TrainConfig, seed: int,
                   image_index: int, img_w: int, img_h: int) -> np.ndarray:
    """Deterministic evaluation-time proposals for one image."""
    gen = rng_mod.stream(seed, "eval_proposals", image_index)
    return sample_proposals(scene, cfg, gen, img_w, img_h)


def predict_dataset(model: SorModel, scenes: list[Scene], cfg: TrainConfig,
                    seed: int,
                    object_threshold: float = DEFAULT_OBJECT_THRESHOLD
                    ) -> list[list[dict]]:
    preds = []
    for idx, scene in enumerate(scenes):
        h, w = scene.image.shape[1:]
        props = eval_proposals(scene, cfg, seed, idx, w, h)
        preds.append(predict_image(model, scene, props, object_threshold))
    return preds


def write_predictions(predictions: list[list[dict]], path) -> None:
    """One JSON object per image: {"image": idx, "entries": [...]}."""
    with open(path, "w") as f:
        for idx, entries in enumerate(predictions):
            f.write(json.dumps({"image": idx, "entries": entries},
                               sort_keys=True) + "\n")


def read_predictions(path) -> list[list[dict]]:
    preds = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                preds.append(json.loads(line)["entries"])
    return preds
