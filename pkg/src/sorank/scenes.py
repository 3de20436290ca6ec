"""Procedural ranked-scene generator and dataset persistence.

Each scene is a light-gray canvas with colored rectangles and ellipses.
Ground-truth saliency ranks come from a score combining object scale,
closeness to the image center, and an intrinsic per-color salience, with
mutual suppression: a more salient nearby object pulls down the score of
its neighbors. The top five scores get ranks 1..5, everything else is
background.

Datasets are written to a binary "SORD" container: little-endian, magic,
u16 format version, u32 scene count, then per scene a u32-length-prefixed
JSON header followed by the raw float32 image (channel-major).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rng_mod

MAGIC = b"SORD"
FORMAT_VERSION = 1
MAX_RANKED = 5

# RGB palette indexed by color class; higher class = intrinsically more salient.
PALETTE = np.array([
    [0.35, 0.45, 0.55],
    [0.20, 0.60, 0.30],
    [0.85, 0.75, 0.20],
    [0.25, 0.35, 0.85],
    [0.90, 0.45, 0.10],
    [0.90, 0.10, 0.15],
], dtype=np.float32)

BACKGROUND = 0.8


class GenerationError(RuntimeError):
    """Rejection sampling could not place an instance."""


class DatasetError(RuntimeError):
    """Dataset file missing, truncated, or malformed."""


@dataclass(frozen=True)
class GenParams:
    width: int = 96
    height: int = 72
    min_instances: int = 3
    max_instances: int = 8
    w_area: float = 0.4
    w_pos: float = 0.4
    w_col: float = 0.2
    eta: float = 0.3          # suppression strength, in [0, 1)
    sigma: float = 0.25       # suppression radius as fraction of the diagonal
    k_col: int = 6
    iou_cap: float = 0.3
    max_attempts: int = 1000

    def __post_init__(self):
        if not (0.0 <= self.eta < 1.0):
            raise ValueError("eta must be in [0, 1)")
        if min(self.w_area, self.w_pos, self.w_col) < 0:
            raise ValueError("salience weights must be nonnegative")

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class Instance:
    id: int
    bbox: tuple[float, float, float, float]   # x1, y1, x2, y2 in pixels
    shape_kind: str                           # "rectangle" | "ellipse"
    color_class: int

    def intrinsic_salience(self, params: GenParams) -> float:
        return self.color_class / (params.k_col - 1)

    @property
    def center(self) -> tuple[float, float]:
        x1, y1, x2, y2 = self.bbox
        return (0.5 * (x1 + x2), 0.5 * (y1 + y2))

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.bbox
        return (x2 - x1) * (y2 - y1)


@dataclass
class Scene:
    image: np.ndarray                 # [3, H, W] float32 in [0, 1]
    instances: list[Instance]
    gt_rank: dict[int, int]           # instance id -> rank 1..5; absent = background
    seed: int

    def ranked_instances(self) -> list[Instance]:
        """Instances carrying a rank, ordered by ascending rank."""
        by_id = {inst.id: inst for inst in self.instances}
        return [by_id[i] for i, _ in sorted(self.gt_rank.items(),
                                            key=lambda kv: kv[1])]


# -- salience rule -----------------------------------------------------


def raw_salience(inst: Instance, params: GenParams) -> float:
    """Scale + centrality + intrinsic color salience, each in [0, weight]."""
    w, h = params.width, params.height
    cx, cy = inst.center
    dist = np.hypot(cx - w / 2.0, cy - h / 2.0)
    dist_max = np.hypot(w / 2.0, h / 2.0)
    return (params.w_area * np.sqrt(inst.area / (w * h))
            + params.w_pos * (1.0 - dist / dist_max)
            + params.w_col * inst.intrinsic_salience(params))


def suppressed_salience(instances: list[Instance], params: GenParams) -> list[float]:
    """Damp each score by every strictly-more-salient instance nearby.

    Dominance ties in the raw score break by ascending id so the product
    is well defined.
    """
    raw = [raw_salience(inst, params) for inst in instances]
    diag = np.hypot(params.width, params.height)
    denom = 2.0 * (params.sigma * diag) ** 2
    out = []
    for i, inst in enumerate(instances):
        s = raw[i]
        for j, other in enumerate(instances):
            if j == i:
                continue
            dominates = raw[j] > raw[i] or (raw[j] == raw[i]
                                            and other.id < inst.id)
            if not dominates:
                continue
            d = np.hypot(inst.center[0] - other.center[0],
                         inst.center[1] - other.center[1])
            s *= 1.0 - params.eta * np.exp(-d * d / denom)
        out.append(float(s))
    return out


def assign_gt_ranks(instances: list[Instance], params: GenParams) -> dict[int, int]:
    """Top min(5, N) suppressed scores get ranks 1..; ties break by id."""
    if not instances:
        raise ValueError("assign_gt_ranks needs at least one instance")
    scores = suppressed_salience(instances, params)
    order = sorted(range(len(instances)),
                   key=lambda i: (-scores[i], instances[i].id))
    return {instances[i].id: r + 1
            for r, i in enumerate(order[:MAX_RANKED])}


# -- rendering ---------------------------------------------------------


def render(instances: list[Instance], params: GenParams) -> np.ndarray:
    """Rasterize to [3, H, W]; later ids draw over earlier ids."""
    h, w = params.height, params.width
    img = np.full((3, h, w), BACKGROUND, dtype=np.float32)
    ys, xs = np.mgrid[0:h, 0:w]
    pcx = xs + 0.5
    pcy = ys + 0.5
    for inst in sorted(instances, key=lambda m: m.id):
        x1, y1, x2, y2 = inst.bbox
        if inst.shape_kind == "rectangle":
            mask = (pcx >= x1) & (pcx < x2) & (pcy >= y1) & (pcy < y2)
        else:
            cx, cy = inst.center
            rx, ry = (x2 - x1) / 2.0, (y2 - y1) / 2.0
            mask = ((pcx - cx) / rx) ** 2 + ((pcy - cy) / ry) ** 2 <= 1.0
        color = PALETTE[inst.color_class % len(PALETTE)]
        img[:, mask] = color[:, None]
    return img


# -- generation --------------------------------------------------------


def _box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def gen_scene(seed: int, params: GenParams) -> Scene:
    """Deterministic scene for (seed, params)."""
    gen = rng_mod.stream(seed, "scene")
    n = int(gen.integers(params.min_instances, params.max_instances + 1))
    w, h = params.width, params.height
    instances: list[Instance] = []
    for i in range(n):
        for attempt in range(params.max_attempts):
            bw = gen.uniform(0.12, 0.45) * w
            bh = gen.uniform(0.12, 0.45) * h
            x1 = gen.uniform(0.0, w - bw)
            y1 = gen.uniform(0.0, h - bh)
            bbox = (float(x1), float(y1), float(x1 + bw), float(y1 + bh))
            if all(_box_iou(bbox, o.bbox) <= params.iou_cap for o in instances):
                break
        else:
            raise GenerationError(
                f"could not place instance {i} within "
                f"{params.max_attempts} attempts (seed {seed})")
        instances.append(Instance(
            id=i,
            bbox=bbox,
            shape_kind="rectangle" if gen.integers(2) == 0 else "ellipse",
            color_class=int(gen.integers(params.k_col)),
        ))
    ranks = assign_gt_ranks(instances, params)
    return Scene(image=render(instances, params), instances=instances,
                 gt_rank=ranks, seed=seed)


def _scene_header(scene: Scene, params: GenParams) -> bytes:
    doc = {
        "seed": scene.seed,
        "params_hash": params.digest(),
        "width": params.width,
        "height": params.height,
        "instances": [
            {"id": m.id, "bbox": list(m.bbox), "shape_kind": m.shape_kind,
             "color_class": m.color_class}
            for m in scene.instances
        ],
        "gt_rank": {str(k): v for k, v in sorted(scene.gt_rank.items())},
    }
    return json.dumps(doc, sort_keys=True).encode()


def write_dataset(scenes: list[Scene], params: GenParams, path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", FORMAT_VERSION, len(scenes)))
        for scene in scenes:
            header = _scene_header(scene, params)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            f.write(scene.image.astype("<f4").tobytes())


def gen_dataset(seed: int, count: int, params: GenParams, path) -> None:
    """Write `count` scenes, each seeded from (seed, index)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    scenes = [gen_scene(rng_mod.derive_key(seed, "scene", i) % 2**63, params)
              for i in range(count)]
    write_dataset(scenes, params, path)


def read_dataset(path) -> list[Scene]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DatasetError(f"cannot read dataset {path}: {e}") from e
    if blob[:4] != MAGIC:
        raise DatasetError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != FORMAT_VERSION:
        raise DatasetError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}")
    off = 10
    scenes = []
    try:
        for _ in range(count):
            (hlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            doc = json.loads(blob[off:off + hlen])
            off += hlen
            insts = [Instance(id=d["id"], bbox=tuple(d["bbox"]),
                              shape_kind=d["shape_kind"],
                              color_class=d["color_class"])
                     for d in doc["instances"]]
            ranks = {int(k): v for k, v in doc["gt_rank"].items()}
            h, w = doc["height"], doc["width"]
            n_px = 3 * h * w
            img = np.frombuffer(blob, dtype="<f4", count=n_px,
                                offset=off).reshape(3, h, w).copy()
            off += 4 * n_px
            scenes.append(Scene(image=img, instances=insts, gt_rank=ranks,
                                seed=doc["seed"]))
    except (KeyError, struct.error, ValueError) as e:
        raise DatasetError(f"{path}: truncated or malformed scene: {e}") from e
    return scenes
