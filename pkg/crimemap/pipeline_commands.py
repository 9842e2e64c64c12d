"""
Pipeline commands for the crimemap CLI.

Every command reads and writes inside the configured output directory and
records its inputs and outputs in ``run_manifest.json``.
"""

from typing import Optional, Tuple

import click

from .command_utils import pipeline_command
from .pipeline import Pipeline

_file = click.Path(exists=True, dir_okay=False)
_dataset_option = click.option(
    "--dataset", type=click.Path(exists=True), help="Dataset directory or manifest"
)


@click.command(name="synth-city")
@click.option("--seed", type=int, help="Layout seed (default: synthetic.seed)")
@click.option(
    "--output",
    type=click.Path(dir_okay=False),
    help="Report file to write (default: synth_reports.csv in the output directory)",
)
@pipeline_command
def synth_city(seed: Optional[int], output: Optional[str], pipeline: Pipeline) -> None:
    """Generate a synthetic city's crime reports."""
    path = pipeline.synth_city(output, seed)
    click.echo(f"✓ Wrote synthetic reports to {path}")


@click.command()
@click.argument("source", type=_file)
@pipeline_command
def ingest(source: str, pipeline: Pipeline) -> None:
    """Parse, validate, and filter a crime report file."""
    stats = pipeline.ingest(source)
    click.echo(
        f"✓ Kept {stats.rows_after_filter} of {stats.rows_read} rows "
        f"({stats.rows_rejected} rejected)"
    )


@click.command()
@click.option(
    "--reports",
    type=_file,
    help="Reports to score (default: reports.jsonl in the output directory)",
)
@pipeline_command
def label(reports: Optional[str], pipeline: Pipeline) -> None:
    """Score grid cells, bin them into Low/Neutral/High, and balance."""
    counts = pipeline.label(reports)
    summary = ", ".join(f"{level.label} {n}" for level, n in counts.items())
    click.echo(f"✓ Labeled cells (balanced: {summary})")


@click.command()
@click.option(
    "--cells",
    type=_file,
    help="Labeled cells to fetch (default: balanced.jsonl in the output directory)",
)
@pipeline_command
def fetch(cells: Optional[str], pipeline: Pipeline) -> None:
    """Fetch one tile per labeled cell and write the dataset manifest."""
    manifest = pipeline.fetch(cells)
    click.echo(f"✓ Stored {len(manifest)} tiles in {manifest.root}")
    if manifest.failures:
        click.echo(f"✗ {len(manifest.failures)} tiles could not be fetched", err=True)


@click.command()
@_dataset_option
@pipeline_command
def train_command(dataset: Optional[str], pipeline: Pipeline) -> None:
    """Train a fresh classifier on the tile dataset."""
    params, log = pipeline.train(dataset)
    loss = f"; final loss {log.records[-1].loss:.4f}" if log.records else ""
    click.echo(f"✓ Trained {params.iterations} iterations{loss}")


@click.command()
@click.option(
    "--from",
    "source_model",
    type=_file,
    required=True,
    help="Trained model whose head is replaced",
)
@_dataset_option
@pipeline_command
def finetune(source_model: str, dataset: Optional[str], pipeline: Pipeline) -> None:
    """Replace a trained model's head and finetune it on this dataset."""
    params, log = pipeline.finetune(source_model, dataset)
    loss = f"; final loss {log.records[-1].loss:.4f}" if log.records else ""
    click.echo(f"✓ Finetuned to {params.iterations} total iterations{loss}")


@click.command()
@_dataset_option
@pipeline_command
def eval_command(dataset: Optional[str], pipeline: Pipeline) -> None:
    """Cross-validate on stratified held-out splits."""
    report = pipeline.evaluate(dataset)
    click.echo(report.to_text().rstrip())
    click.echo(f"✓ Mean held-out accuracy {report.mean_accuracy:.4f}")


@click.command()
@click.option(
    "--model",
    type=_file,
    help="Model file (default: model.cmap in the output directory)",
)
@click.option(
    "--labels",
    type=_file,
    help="Official labels to compare with (default: labels.jsonl when present)",
)
@pipeline_command
def predict_map_command(
    model: Optional[str], labels: Optional[str], pipeline: Pipeline
) -> None:
    """Predict a crime-rate label for every grid cell."""
    city_map, agreement = pipeline.predict(model, labels)
    click.echo(
        f"✓ Predicted {city_map.known_count()} of {city_map.grid.n_cells} cells "
        f"-> {pipeline.predicted_map_path()}"
    )
    if agreement is not None:
        click.echo(
            f"✓ Agreement with official map: {agreement.accuracy:.4f} "
            f"over {agreement.compared} cells"
        )


@click.command()
@click.option(
    "--map",
    "maps",
    type=_file,
    multiple=True,
    help="Map JSON to render (default: every map in the maps directory)",
)
@pipeline_command
def render(maps: Tuple[str, ...], pipeline: Pipeline) -> None:
    """Render maps as GeoJSON and PNG layers."""
    written = pipeline.render(maps)
    click.echo(f"✓ Wrote {len(written)} map files")


@click.command()
@click.option(
    "--reports",
    type=_file,
    help="Raw report file (default: generate a synthetic city)",
)
@pipeline_command
def full_run(reports: Optional[str], pipeline: Pipeline) -> None:
    """Run ingest, label, fetch, eval, train, predict-map, and render."""
    summary = pipeline.full_run(reports)
    click.echo(f"✓ Mean held-out accuracy {summary['mean_accuracy']:.4f}")
    if summary["map_accuracy"] is not None:
        click.echo(f"✓ Map agreement {summary['map_accuracy']:.4f}")
    click.echo(f"✓ Outputs in {pipeline.root}")
