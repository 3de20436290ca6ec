"""Ablation grid structure and the CSV table it produces."""

import dataclasses

import numpy as np
import pytest

from sorank.ablate import (CSV_HEADER, all_cells, component_cells,
                           regime_cells, rows_to_csv, run_ablation,
                           scheme_cells)
from sorank.config import RunConfig
from sorank.scenes import GenParams, gen_scene
from sorank.sor_branch import EncoderConfig


def tiny_cfg():
    cfg = RunConfig()
    return dataclasses.replace(
        cfg,
        scene=dataclasses.replace(cfg.scene, width=32, height=24),
        model=dataclasses.replace(
            cfg.model, pool_size=4, d_token=8, c_pos=2,
            backbone_channels=(3, 3, 4, 4),
            encoder=EncoderConfig(num_layers=1, num_heads=2, d_token=8,
                                  d_ffn=16)),
        train=dataclasses.replace(cfg.train, iterations=2, batch_size=2,
                                  warmup_iters=1, milestones=()))


class TestGridStructure:
    def test_component_grid_has_four_cells(self):
        cells = component_cells(tiny_cfg())
        assert [name for _, name, _ in cells] == [
            "baseline", "baseline+pos", "baseline+attention",
            "baseline+attention+pos"]
        flags = [(c.model.use_position, c.model.use_attention)
                 for _, _, c in cells]
        assert flags == [(False, False), (True, False), (False, True),
                         (True, True)]

    def test_scheme_table_has_five_rows_plus_q_sweep(self):
        cells = scheme_cells(tiny_cfg())
        schemes = [name for g, name, _ in cells if g == "schemes"]
        assert schemes == ["cx_cy", "cx_cy_w_h", "learnable_pos",
                           "learnable_pos_scale", "ppa"]
        sweep = [(name, c.model.lookup_q) for g, name, c in cells
                 if g == "q_sweep"]
        assert sweep == [("learnable_pos_q4", 4), ("learnable_pos_q8", 8)]

    def test_two_regimes(self):
        cells = regime_cells(tiny_cfg())
        assert [(name, c.train.mode) for _, name, c in cells] == [
            ("end_to_end", "end_to_end"), ("two_stage", "two_stage")]

    def test_group_filter(self):
        cells = all_cells(tiny_cfg(), groups={"regimes"})
        assert all(g == "regimes" for g, _, _ in cells)
        assert len(cells) == 2


class TestRun:
    def test_component_sweep_produces_table(self):
        cfg = tiny_cfg()
        train_scenes = [gen_scene(s, cfg.scene) for s in range(4)]
        test_scenes = [gen_scene(100 + s, cfg.scene) for s in range(2)]
        rows = run_ablation(cfg, train_scenes, test_scenes, seeds=[0],
                            groups={"components"})
        assert len(rows) == 4
        assert all(r["status"] == "ok" for r in rows)
        csv = rows_to_csv(rows)
        lines = csv.strip().split("\n")
        assert lines[0] == CSV_HEADER
        assert len(lines) == 5

    def test_cell_failure_recorded_not_raised(self):
        cfg = tiny_cfg()
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, batch_size=0))
        train_scenes = [gen_scene(s, cfg.scene) for s in range(2)]
        rows = run_ablation(cfg, train_scenes, train_scenes, seeds=[0],
                            groups={"regimes"})
        assert len(rows) == 2
        assert all(r["status"].startswith("error") for r in rows)
        csv = rows_to_csv(rows)
        assert "error" in csv
