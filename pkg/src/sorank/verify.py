"""End-to-end gradient verification harness.

Re-runs every differentiable operation, ROI pooling, and a composed
image -> ranking-loss forward pass in float64 and compares analytic
gradients against central finite differences. Sampling avoids the
non-differentiable points of relu and smooth_l1 (values are kept away
from the kinks).
"""

from __future__ import annotations

import numpy as np

from . import rng as rng_mod
from . import tensor as T
from .backbone import FeatureMap, roi_pool_many
from .gradcheck import GradCheckReport, grad_check
from .model import ModelConfig, SorModel
from .scenes import GenParams, gen_scene
from .sor_branch import EncoderConfig, sor_loss
from .training import TrainConfig, assign_targets, sample_proposals

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4

TINY_MODEL = ModelConfig(
    pool_size=4,
    d_token=8,
    c_pos=2,
    backbone_channels=(3, 3, 4, 4),
    encoder=EncoderConfig(num_layers=1, num_heads=2, d_token=8, d_ffn=16),
)


def _away_from_zero(a, margin=0.1):
    return a + np.sign(a) * margin


def check_op_gradients(seed: int = 0, step: float = DEFAULT_STEP,
                       tol: float = DEFAULT_TOL) -> dict[str, float]:
    """Max relative error per operation at random smooth points."""
    gen = rng_mod.stream(seed, "gradcheck_ops")

    def rand(*shape):
        return T.Tensor(gen.normal(size=shape), requires_grad=True)

    results: dict[str, float] = {}

    def run(name, fn, params):
        rep = grad_check(fn, params, step=step, tol=tol)
        results[name] = rep.worst()

    a, b = rand(3, 4), rand(4, 2)
    probe = T.Tensor(gen.normal(size=(3, 2)))
    run("matmul", lambda: T.tsum(T.matmul(a, b) * probe), {"a": a, "b": b})

    x = rand(2, 5, 5)
    w = rand(3, 2, 3, 3)
    bias = rand(3)
    cp = T.Tensor(gen.normal(size=(3, 3, 3)))
    run("conv2d", lambda: T.tsum(T.conv2d(x, w, bias, 2, 1) * cp),
        {"x": x, "w": w, "bias": bias})

    xr = T.Tensor(_away_from_zero(gen.normal(size=(4, 6))),
                  requires_grad=True)
    pr = T.Tensor(gen.normal(size=(4, 6)))
    run("relu", lambda: T.tsum(T.relu(xr) * pr), {"x": xr})
    xg = rand(4, 6)
    run("gelu", lambda: T.tsum(T.gelu(xg) * pr), {"x": xg})
    xs = rand(4, 6)
    run("softmax", lambda: T.tsum(T.softmax(xs) * pr), {"x": xs})

    xl = rand(4, 6)
    gamma, beta = rand(6), rand(6)
    run("layer_norm",
        lambda: T.tsum(T.layer_norm(xl, gamma, beta, 1e-5) * pr),
        {"x": xl, "gamma": gamma, "beta": beta})

    logits = rand(5, 6)
    targets = gen.integers(6, size=5)
    run("cross_entropy", lambda: T.cross_entropy(logits, targets),
        {"logits": logits})

    pred = rand(3, 4)
    # keep |pred - target| away from the quadratic/linear switch at beta
    tgt = T.Tensor(pred.data + _away_from_zero(
        gen.uniform(-0.8, 0.8, size=(3, 4)), 0.05))
    run("smooth_l1", lambda: T.smooth_l1(pred, tgt, 1.0), {"pred": pred})

    table = rand(7, 5)
    idx = gen.integers(7, size=4)
    ep = T.Tensor(gen.normal(size=(4, 5)))
    run("embedding", lambda: T.tsum(T.embedding(table, idx) * ep),
        {"table": table})

    fm = rand(3, 6, 8)
    fmap = FeatureMap(tensor=fm, stride=4, n_semantic=1)
    boxes = np.array([[2.0, 3.0, 20.0, 17.0], [8.0, 1.0, 30.0, 22.0]])
    rp = T.Tensor(gen.normal(size=(2, 3, 4, 4)))
    run("roi_pool",
        lambda: T.tsum(roi_pool_many(fmap, boxes, 4, 32.0, 24.0) * rp),
        {"fmap": fm})
    return results


def check_composed(seed: int = 0, step: float = DEFAULT_STEP,
                   tol: float = DEFAULT_TOL) -> GradCheckReport:
    """Image -> pooling -> embedding -> encoder -> head -> ranking loss.

    Finite differences run on the raw image and one representative
    parameter tensor per component; the per-op checks cover the rest.
    """
    params_scene = GenParams(width=16, height=12, min_instances=3,
                             max_instances=3)
    scene = gen_scene(seed, params_scene)
    model = SorModel(TINY_MODEL, seed, dtype=np.float64)
    tcfg = TrainConfig(jitter=0.1, negative_count=1)
    gen = rng_mod.stream(seed, "gradcheck_props")
    props = sample_proposals(scene, tcfg, gen, 16, 12)[:3]
    targets = assign_targets(props, scene, 0.3)
    image = T.Tensor(scene.image.astype(np.float64), requires_grad=True)

    def fn():
        fmap = model.extract(image)
        roi = model.pool(fmap, props, 16, 12)
        logits = model.rank_logits(roi, props, 16, 12)
        return sor_loss(logits, targets.sor_class)

    checked = {
        "image": image,
        "backbone.conv1.weight": model.backbone.blocks[0].weight,
        "embedding.pos_conv.weight": model.embedding.pos_conv.weight,
        "encoder.attn.wq.weight": model.encoder.enc_layers[0].attn.wq.weight,
        "encoder.ffn1.bias": model.encoder.enc_layers[0].ffn1.bias,
        "rank_head.weight": model.rank_head.fc.weight,
    }
    return grad_check(fn, checked, step=step, tol=tol)


def run_all(seed: int = 0, tol: float = DEFAULT_TOL) -> tuple[dict[str, float], bool]:
    """(per-check max relative error, overall pass flag)."""
    errors = check_op_gradients(seed, tol=tol)
    composed = check_composed(seed, tol=tol)
    for name, err in composed.max_rel_err.items():
        errors[f"composed/{name}"] = err
    return errors, all(v <= tol for v in errors.values())
