"""Command-line entry points.

Verbs mirror the two training stages plus analysis and generation:
pretrain-encoder, train-mapper, generate, evaluate, analyze-encoder,
upper-bound, run, and a synthetic-data helper. All flags override the
corresponding config-file values; FACEPERSONA_OUTPUT_DIR overrides the
output directory.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import click
import torch

from . import checkpoints
from .diffusion import TrainState, train_mapper
from .errors import FacePersonaError
from .evaluation import read_reports_csv, summarize_reports, upper_bound_curve, write_summary_json
from .experiment import (
    ExperimentConfig,
    analyze_encoder_run,
    build_mapper,
    build_stack,
    load_manifest,
    load_mapper_checkpoint,
    load_prompt_set,
    pretrain_encoder_run,
    run_experiment,
    save_mapper_checkpoint,
    substream_seed,
)
from .mapper import PromptTemplate
from .plots import emit_upper_bound_plot
from .sampler import dsc_generate, expression_conditional_generate, generate
from .synthetic import export_dataset, load_image_png, save_image_png

logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")


def _load_config(config_path: str, **overrides) -> ExperimentConfig:
    return ExperimentConfig.from_json(config_path, **overrides)


@click.group()
def main():
    """Face personalization toolkit: train, generate, evaluate."""


@main.command("make-synthetic-data")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--identities", default=4, show_default=True)
@click.option("--variations", default=4, show_default=True)
@click.option("--size", default=32, show_default=True)
@click.option("--seed", default=0, show_default=True)
def make_synthetic_data(out_dir, identities, variations, size, seed):
    """Write a procedural face dataset plus manifest for desk-scale runs."""
    manifest = export_dataset(out_dir, identities, variations, size=size, seed=seed)
    click.echo(f"manifest: {manifest}")


@main.command("pretrain-encoder")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "checkpoint_out", required=True, type=click.Path())
@click.option("--manifest", default=None, type=click.Path(exists=True))
@click.option("--seed", default=None, type=int)
def pretrain_encoder_cmd(config_path, checkpoint_out, manifest, seed):
    """Train the multi-scale identity encoder on a labeled manifest."""
    config = _load_config(config_path, manifest=manifest, seed=seed)
    pretrain_encoder_run(config, checkpoint_out)
    click.echo(f"encoder checkpoint: {checkpoint_out}")


@main.command("train-mapper")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "checkpoint_out", required=True, type=click.Path())
@click.option("--manifest", default=None, type=click.Path(exists=True))
@click.option("--steps", default=None, type=int)
@click.option("--seed", default=None, type=int)
def train_mapper_cmd(config_path, checkpoint_out, manifest, steps, seed):
    """Train the mapping networks against the frozen stack."""
    config = _load_config(config_path, manifest=manifest, train_steps=steps, seed=seed)
    samples = load_manifest(config.manifest)
    frozen = build_stack(config)
    mapper = build_mapper(config)
    state = TrainState.create(mapper, lr=config.train.lr)
    reports = train_mapper(
        [(s.image, s.mask) for s in samples], state, config.train, frozen,
        steps=config.train_steps, seed=substream_seed(config.seed, "train"),
        loss_csv=str(Path(checkpoint_out).with_suffix(".loss.csv")),
    )
    save_mapper_checkpoint(checkpoint_out, mapper, config.train_steps,
                           config.train_signature())
    click.echo(f"final loss: {reports[-1].loss:.6f}")
    click.echo(f"mapper checkpoint: {checkpoint_out}")


@main.command("generate")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--face", "face_path", required=True, type=click.Path(exists=True))
@click.option("--template", default="A photo of S*", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--dsc", is_flag=True, help="Delayed subject conditioning.")
@click.option("--expression-ref", default=None, type=click.Path(exists=True),
              help="Take the expression from this reference image.")
def generate_cmd(config_path, checkpoint, face_path, template, out_path, seed, dsc,
                 expression_ref):
    """Generate one identity-conditioned image with a provenance sidecar."""
    config = _load_config(config_path)
    frozen = build_stack(config)
    mapper = load_mapper_checkpoint(checkpoint)
    face = load_image_png(face_path)
    tmpl = PromptTemplate(template)
    icfg = config.inference_config(seed)
    if dsc and expression_ref:
        raise click.UsageError("--dsc and --expression-ref are mutually exclusive")
    if dsc:
        result = dsc_generate(face, tmpl, icfg, frozen, mapper)
        image = result.image
        extra = {"dsc_switch_step": result.switch_step, "dsc_alpha": icfg.dsc_alpha}
    elif expression_ref:
        image = expression_conditional_generate(
            face, load_image_png(expression_ref), tmpl, icfg, frozen, mapper
        )
        extra = {"expression_reference": str(expression_ref)}
    else:
        image = generate(face, tmpl, icfg, frozen, mapper)
        extra = {}
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_image_png(image, out_path)
    sidecar = {
        "template": template,
        "seed": seed,
        "num_steps": icfg.num_steps,
        "guidance_scale": icfg.guidance_scale,
        "scheduler_kind": icfg.scheduler_kind,
        "checkpoint_hash": checkpoints.file_digest(checkpoint),
        **extra,
    }
    out_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    click.echo(f"image: {out_path}")


@main.command("evaluate")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--run-dir", default=None, type=click.Path(exists=True),
              help="Score a run directory of generated PNGs (needs --config).")
@click.option("--reports", "reports_csv", default=None, type=click.Path(exists=True),
              help="Summarize an existing per-image report CSV instead.")
@click.option("--out", "summary_out", default=None, type=click.Path())
@click.option("--ns", default="1,2,4", show_default=True,
              help="Comma-separated best-of-N budgets (CSV mode).")
def evaluate_cmd(config_path, run_dir, reports_csv, summary_out, ns):
    """Score generated images, or summarize an existing report CSV."""
    if run_dir:
        if not config_path:
            raise click.UsageError("--run-dir requires --config")
        config = _load_config(config_path)
        csv_path = evaluate_run(config, run_dir)
        click.echo(f"reports: {csv_path}")
    elif reports_csv:
        if not summary_out:
            raise click.UsageError("--reports requires --out")
        reports = read_reports_csv(reports_csv)
        budgets = tuple(int(x) for x in ns.split(","))
        summary = summarize_reports(reports, Ns=budgets)
        write_summary_json(summary, summary_out)
        click.echo(f"summary: {summary_out}")
    else:
        raise click.UsageError("pass either --run-dir or --reports")


@main.command("analyze-encoder")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--checkpoint", default=None, type=click.Path(exists=True))
@click.option("--manifest", default=None, type=click.Path(exists=True))
def analyze_encoder_cmd(config_path, out_dir, checkpoint, manifest):
    """Per-depth similarity distributions, AUCs, and histogram plots."""
    config = _load_config(config_path, manifest=manifest, encoder_checkpoint=checkpoint)
    aucs = analyze_encoder_run(config, out_dir)
    for depth, auc in sorted(aucs.items()):
        click.echo(f"layer {depth}: AUC {auc:.4f}")


@main.command("upper-bound")
@click.option("--reports", "reports_csv", required=True, type=click.Path(exists=True))
@click.option("--ns", default="1,2,4", show_default=True)
@click.option("--out", "out_png", required=True, type=click.Path())
def upper_bound_cmd(reports_csv, ns, out_png):
    """Best-of-N curve from a report CSV, as PNG + JSON sidecar."""
    reports = read_reports_csv(reports_csv)
    grouped = {}
    for r in reports:
        grouped.setdefault((r.image_id, r.prompt_id), []).append(r)
    for seq in grouped.values():
        seq.sort(key=lambda r: r.sample_idx)
    curve = upper_bound_curve(grouped, tuple(int(x) for x in ns.split(",")))
    emit_upper_bound_plot(curve.points, out_png)
    for n, v in curve.points:
        click.echo(f"N={n}: {v:.6f}")


@main.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", default=None, type=click.Path(exists=True))
@click.option("--output-dir", default=None, type=click.Path())
@click.option("--seed", default=None, type=int)
def run_cmd(config_path, manifest, output_dir, seed):
    """Full pipeline: train, generate the grid, evaluate, plot."""
    config = _load_config(config_path, manifest=manifest, output_dir=output_dir, seed=seed)
    try:
        out = run_experiment(config)
    except FacePersonaError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"artifacts: {out}")


if __name__ == "__main__":
    main()
