"""Command-line interface: generate / train / eval / infer / ablate / gradcheck.

Configuration comes from a JSON file (see ``sorank config``-less default:
all fields have defaults); individual values can be overridden on the
command line with repeated ``--set section.key=value`` flags. Every
command echoes the effective config into its output directory and exits
nonzero on any error.
"""

from __future__ import annotations

import json
import pathlib
import sys

import click
import numpy as np

from . import ablate as ablate_mod
from . import config as config_mod
from . import report as report_mod
from . import verify
from .checkpoint import load_checkpoint, save_checkpoint
from .inference import predict_dataset, write_predictions
from .metrics import evaluate
from .model import SorModel
from .scenes import gen_dataset, read_dataset
from .training import train


def _load_config(path: str | None, overrides: tuple[str, ...]) -> config_mod.RunConfig:
    cfg = config_mod.load(path) if path else config_mod.RunConfig()
    if not overrides:
        return cfg
    doc = json.loads(config_mod.to_json(cfg))
    for item in overrides:
        if "=" not in item:
            raise click.UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node:
                raise click.UsageError(f"unknown config key {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise click.UsageError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return config_mod.from_json(json.dumps(doc))


def _echo_config(cfg, out_dir: pathlib.Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(config_mod.to_json(cfg) + "\n")


config_opt = click.option("--config", "-c", "config_path", type=click.Path(exists=True),
                          default=None, help="JSON run configuration.")
set_opt = click.option("--set", "-s", "overrides", multiple=True,
                       help="Override a config value: section.key=value.")


@click.group()
def main():
    """Salient-object-ranking toolkit on synthetic scenes."""


@main.command()
@config_opt
@set_opt
@click.option("--count", type=int, required=True, help="Number of scenes.")
@click.option("--out", "-o", "out_path", type=click.Path(), required=True)
@click.option("--force", is_flag=True, help="Overwrite an existing file.")
def generate(config_path, overrides, count, out_path, force):
    """Write a synthetic ranked-scene dataset."""
    if count < 1:
        raise click.UsageError("--count must be >= 1")
    cfg = _load_config(config_path, overrides)
    out = pathlib.Path(out_path)
    if out.exists() and not force:
        raise click.ClickException(
            f"{out} exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    gen_dataset(cfg.seed, count, cfg.scene, out)
    click.echo(f"wrote {count} scenes to {out}")


@main.command("train")
@config_opt
@set_opt
@click.option("--dataset", type=click.Path(exists=True), required=True)
@click.option("--out-dir", type=click.Path(), default=None)
def train_cmd(config_path, overrides, dataset, out_dir):
    """Train a model and save checkpoint, log, and loss figures."""
    cfg = _load_config(config_path, overrides)
    out = pathlib.Path(out_dir or cfg.out_dir)
    _echo_config(cfg, out)
    scenes = read_dataset(dataset)
    model, state, log = train(scenes, cfg.model, cfg.train, cfg.seed,
                              log_path=out / "train_log.jsonl")
    save_checkpoint(model, state, config_mod.config_hash(cfg),
                    out / "checkpoint.sorc")
    report_mod.loss_curves(log, out / "loss_curves.png")
    click.echo(f"final total loss {log[-1]['total_loss']:.4f}; "
               f"checkpoint at {out / 'checkpoint.sorc'}")


def _load_model(cfg, checkpoint_path):
    model = SorModel(cfg.model, cfg.seed)
    load_checkpoint(model, checkpoint_path,
                    expected_hash=config_mod.config_hash(cfg))
    return model


@main.command("eval")
@config_opt
@set_opt
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--dataset", type=click.Path(exists=True), required=True)
@click.option("--out-dir", type=click.Path(), default=None)
def eval_cmd(config_path, overrides, checkpoint, dataset, out_dir):
    """Evaluate a checkpoint: metrics JSON, CSV row, and figures."""
    cfg = _load_config(config_path, overrides)
    out = pathlib.Path(out_dir or cfg.out_dir)
    _echo_config(cfg, out)
    scenes = read_dataset(dataset)
    model = _load_model(cfg, checkpoint)
    preds = predict_dataset(model, scenes, cfg.train, cfg.seed,
                            cfg.object_threshold)
    rep = evaluate(scenes, preds, cfg.metric_iou_threshold)
    (out / "metrics.json").write_text(rep.to_json() + "\n")
    (out / "metrics.csv").write_text("sor,mae,images_used\n"
                                     + rep.csv_row() + "\n")
    report_mod.metrics_summary(rep, out / "metrics.png")
    report_mod.rank_map_gallery(scenes, preds, out / "rank_maps.png")
    sor = "n/a" if rep.sor is None else f"{rep.sor:.4f}"
    click.echo(f"sor={sor} mae={rep.mae:.4f} "
               f"images_used={rep.images_used}/{rep.n_images}")


@main.command("infer")
@config_opt
@set_opt
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--dataset", type=click.Path(exists=True), required=True)
@click.option("--out", "-o", "out_path", type=click.Path(), required=True)
def infer_cmd(config_path, overrides, checkpoint, dataset, out_path):
    """Write per-image ranked predictions as JSON lines."""
    cfg = _load_config(config_path, overrides)
    scenes = read_dataset(dataset)
    model = _load_model(cfg, checkpoint)
    preds = predict_dataset(model, scenes, cfg.train, cfg.seed,
                            cfg.object_threshold)
    pathlib.Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    write_predictions(preds, out_path)
    click.echo(f"wrote predictions for {len(preds)} images to {out_path}")


@main.command("ablate")
@config_opt
@set_opt
@click.option("--train-dataset", type=click.Path(exists=True), required=True)
@click.option("--test-dataset", type=click.Path(exists=True), required=True)
@click.option("--out-dir", type=click.Path(), default=None)
@click.option("--seeds", type=int, default=3, show_default=True,
              help="Seeds per cell (median reported).")
@click.option("--group", "groups", multiple=True,
              type=click.Choice(["components", "schemes", "q_sweep",
                                 "regimes"]),
              help="Restrict to these groups (default: all).")
def ablate_cmd(config_path, overrides, train_dataset, test_dataset, out_dir,
               seeds, groups):
    """Train and evaluate the ablation grid; write a CSV and a chart."""
    cfg = _load_config(config_path, overrides)
    out = pathlib.Path(out_dir or cfg.out_dir)
    _echo_config(cfg, out)
    train_scenes = read_dataset(train_dataset)
    test_scenes = read_dataset(test_dataset)
    rows = ablate_mod.run_ablation(
        cfg, train_scenes, test_scenes,
        seeds=[cfg.seed + i for i in range(seeds)],
        groups=set(groups) or None)
    csv_text = ablate_mod.rows_to_csv(rows)
    (out / "ablation.csv").write_text(csv_text)
    report_mod.ablation_chart(rows, out / "ablation.png")
    click.echo(csv_text, nl=False)
    if any(r["status"] != "ok" for r in rows):
        sys.exit(1)


@main.command("gradcheck")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--tol", type=float, default=1e-4, show_default=True)
def gradcheck_cmd(seed, tol):
    """Verify analytic gradients against finite differences."""
    errors, passed = verify.run_all(seed=seed, tol=tol)
    for name, err in sorted(errors.items()):
        status = "PASS" if err <= tol else "FAIL"
        click.echo(f"{status} {name}: max rel err {err:.3e}")
    click.echo("gradcheck " + ("PASSED" if passed else "FAILED"))
    if not passed:
        sys.exit(1)


if __name__ == "__main__":
    main()
