"""Command-line entry points: learn-encoder, infer, train-merge, evaluate, synth, serve."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import flim, pipeline

EXIT_CONFIG = 2
EXIT_DATA = 3


def _run(fn):
    try:
        fn()
    except pipeline.ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except pipeline.DataError as e:
        click.echo(f"data error: {e}", err=True)
        sys.exit(EXIT_DATA)


@click.group()
def main():
    """Multi-level cellular automata saliency pipeline."""


@main.command("learn-encoder")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--markers", required=True, type=click.Path(exists=True))
@click.option("--config", "architecture", required=True, type=click.Path(exists=True),
              help="Encoder architecture JSON.")
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, type=int)
def learn_encoder(manifest, markers, architecture, out, seed):
    def go():
        man = pipeline.load_manifest(manifest)
        marks = flim.parse_markers(Path(markers).read_text())
        summary = pipeline.cmd_learn_encoder(man, marks, architecture, out, seed=seed)
        click.echo(f"filters per layer: {summary['filters_per_layer']}")
    _run(go)


@main.command("infer")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--config", required=True, type=click.Path(exists=True))
@click.option("--split", default="test")
@click.option("--merge-model", default=None, type=click.Path())
@click.option("--jobs", default=1, type=int)
@click.option("--out", required=True, type=click.Path())
def infer(manifest, model, config, split, merge_model, jobs, out):
    def go():
        man = pipeline.load_manifest(manifest)
        cfg = pipeline.load_config(config)
        if merge_model is None or not Path(merge_model).exists():
            click.echo("notice: no merge model; per-level outputs only")
        report = pipeline.cmd_infer(man, model, cfg, split, out,
                                    merge_model_path=merge_model, jobs=jobs)
        n = len(report["images"])
        click.echo(f"inferred {n} images; budget violations: {report['budget_violations']}")
    _run(go)


@main.command("train-merge")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--config", required=True, type=click.Path(exists=True))
@click.option("--jobs", default=1, type=int)
@click.option("--out", required=True, type=click.Path())
def train_merge(manifest, model, config, jobs, out):
    def go():
        man = pipeline.load_manifest(manifest)
        cfg = pipeline.load_config(config)
        losses = pipeline.cmd_train_merge(man, model, cfg, out, jobs=jobs)
        click.echo(f"final loss: {losses[-1]:.6f}")
    _run(go)


@main.command("evaluate")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--predictions", required=True, type=click.Path(exists=True))
@click.option("--config", default=None, type=click.Path())
@click.option("--split", default="test")
@click.option("--stage", default="merged", help="merged or levelN")
@click.option("--out", required=True, type=click.Path())
def evaluate(manifest, predictions, config, split, stage, out):
    def go():
        man = pipeline.load_manifest(manifest)
        params = pipeline.load_config(config).metric_params if config else \
            pipeline.metrics.MetricParams()
        report = pipeline.cmd_evaluate(man, predictions, split, params, out, stage=stage)
        for name, agg in report.aggregate.items():
            click.echo(f"{name}: {agg['mean']:.4f} +/- {agg['stdev']:.4f}")
    _run(go)


@main.command("synth")
@click.option("--count", default=10, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--kind", default="parasite", type=click.Choice(["parasite", "brain"]))
@click.option("--size", default=256, type=int)
@click.option("--out", required=True, type=click.Path())
def synth(count, seed, kind, size, out):
    def go():
        manifest = pipeline.cmd_synth(out, count, seed, kind=kind, size=size)
        click.echo(f"wrote {len(manifest['entries'])} images to {out}")
    _run(go)


@main.command("serve")
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000, type=int)
def serve(host, port):
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
