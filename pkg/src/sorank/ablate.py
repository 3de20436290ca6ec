"""Ablation driver: component grid, embedding schemes, training regimes.

Each cell trains the model under one configuration variant over a few
seeds and reports the per-seed median of (SOR, MAE, images used). Cell
failures are recorded in the output table without stopping the sweep.
Worker-process count comes from the SORANK_WORKERS environment variable
(default 1).
"""

from __future__ import annotations

import dataclasses
import multiprocessing
import os
import traceback

import numpy as np

from .config import RunConfig
from .inference import predict_dataset
from .metrics import MetricsReport, evaluate
from .scenes import Scene
from .training import train

CSV_HEADER = "group,cell,seeds,sor,mae,images_used,status"


def run_once(cfg: RunConfig, train_scenes: list[Scene],
             test_scenes: list[Scene], seed: int):
    """Train one model and evaluate it; returns (model, state, log, report,
    predictions)."""
    model, state, log = train(train_scenes, cfg.model, cfg.train, seed)
    preds = predict_dataset(model, test_scenes, cfg.train, seed,
                            cfg.object_threshold)
    report = evaluate(test_scenes, preds, cfg.metric_iou_threshold)
    return model, state, log, report, preds


def median_metrics(cfg: RunConfig, train_scenes, test_scenes,
                   seeds: list[int]) -> dict:
    sors, maes, used = [], [], []
    for seed in seeds:
        _, _, _, report, _ = run_once(cfg, train_scenes, test_scenes, seed)
        sors.append(report.sor if report.sor is not None else float("nan"))
        maes.append(report.mae)
        used.append(report.images_used)
    return {
        "sor": float(np.median(sors)),
        "mae": float(np.median(maes)),
        "images_used": int(np.median(used)),
    }


def _variant(cfg: RunConfig, **model_fields) -> RunConfig:
    return dataclasses.replace(
        cfg, model=dataclasses.replace(cfg.model, **model_fields))


def component_cells(cfg: RunConfig) -> list[tuple[str, str, RunConfig]]:
    base = _variant(cfg, embedding_scheme="ppa")
    return [
        ("components", "baseline",
         _variant(base, use_position=False, use_attention=False)),
        ("components", "baseline+pos",
         _variant(base, use_position=True, use_attention=False)),
        ("components", "baseline+attention",
         _variant(base, use_position=False, use_attention=True)),
        ("components", "baseline+attention+pos",
         _variant(base, use_position=True, use_attention=True)),
    ]


def scheme_cells(cfg: RunConfig) -> list[tuple[str, str, RunConfig]]:
    full = _variant(cfg, use_position=True, use_attention=True)
    return [
        ("schemes", "cx_cy",
         _variant(full, embedding_scheme="bbox_concat_centers_only")),
        ("schemes", "cx_cy_w_h", _variant(full, embedding_scheme="bbox_concat")),
        ("schemes", "learnable_pos",
         _variant(full, embedding_scheme="learnable_pos", lookup_q=8)),
        ("schemes", "learnable_pos_scale",
         _variant(full, embedding_scheme="learnable_pos_scale", lookup_q=8,
                  lookup_q_scale=4)),
        ("schemes", "ppa", _variant(full, embedding_scheme="ppa")),
        ("q_sweep", "learnable_pos_q4",
         _variant(full, embedding_scheme="learnable_pos", lookup_q=4)),
        ("q_sweep", "learnable_pos_q8",
         _variant(full, embedding_scheme="learnable_pos", lookup_q=8)),
    ]


def regime_cells(cfg: RunConfig) -> list[tuple[str, str, RunConfig]]:
    def with_mode(mode):
        return dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, mode=mode))
    return [
        ("regimes", "end_to_end", with_mode("end_to_end")),
        ("regimes", "two_stage", with_mode("two_stage")),
    ]


def all_cells(cfg: RunConfig, groups=None) -> list[tuple[str, str, RunConfig]]:
    cells = component_cells(cfg) + scheme_cells(cfg) + regime_cells(cfg)
    if groups is not None:
        cells = [c for c in cells if c[0] in groups]
    return cells


def _run_cell(args):
    group, name, cfg, train_scenes, test_scenes, seeds = args
    try:
        m = median_metrics(cfg, train_scenes, test_scenes, seeds)
        return {"group": group, "cell": name, "seeds": len(seeds),
                "sor": m["sor"], "mae": m["mae"],
                "images_used": m["images_used"], "status": "ok"}
    except Exception as e:  # keep sweeping; record the failure
        traceback.print_exc()
        return {"group": group, "cell": name, "seeds": len(seeds),
                "sor": "", "mae": "", "images_used": "",
                "status": f"error: {e}"}


def run_ablation(cfg: RunConfig, train_scenes, test_scenes,
                 seeds: list[int] | None = None, groups=None) -> list[dict]:
    seeds = seeds if seeds is not None else [cfg.seed + i for i in range(3)]
    cells = all_cells(cfg, groups)
    jobs = [(g, n, c, train_scenes, test_scenes, seeds) for g, n, c in cells]
    workers = int(os.environ.get("SORANK_WORKERS", "1"))
    if workers > 1:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(workers) as pool:
            rows = pool.map(_run_cell, jobs)
    else:
        rows = [_run_cell(job) for job in jobs]
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    lines = [CSV_HEADER]
    for r in rows:
        sor = r["sor"] if r["sor"] == "" else f"{r['sor']:.6f}"
        mae = r["mae"] if r["mae"] == "" else f"{r['mae']:.6f}"
        lines.append(f"{r['group']},{r['cell']},{r['seeds']},{sor},{mae},"
                     f"{r['images_used']},{r['status']}")
    return "\n".join(lines) + "\n"
