"""
Main CLI entry point for crimemap.

Provides the multi-command CLI interface over the pipeline: ingest reports,
label grid cells, fetch tiles, train and evaluate the classifier, and render
crime-rate maps.
"""

import logging
import sys
from typing import Any, Optional, Tuple

import click

from . import __version__
from .command_utils import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION
from .errors import CrimeMapError, PipelineValidationError
from .pipeline_commands import (
    eval_command,
    fetch,
    finetune,
    full_run,
    ingest,
    label,
    predict_map_command,
    render,
    synth_city,
    train_command,
)

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


class ClickEchoHandler(logging.Handler):
    """Log handler writing through click so output follows the current stderr."""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            click.echo(self.format(record), err=True)
        except Exception:
            self.handleError(record)


def configure_logging(verbose: bool) -> None:
    package_logger = logging.getLogger("crimemap")
    if not any(isinstance(h, ClickEchoHandler) for h in package_logger.handlers):
        handler = ClickEchoHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        package_logger.addHandler(handler)
        package_logger.propagate = False
    package_logger.setLevel(logging.DEBUG if verbose else logging.INFO)


class PipelineGroup(click.Group):
    """
    Command group with the pipeline's exit codes: usage and validation
    errors exit with 1, runtime failures with 2.
    """

    def main(self, *args: Any, **kwargs: Any) -> Any:  # type: ignore[override]
        kwargs["standalone_mode"] = False
        try:
            rv = super().main(*args, **kwargs)
        except click.exceptions.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_VALIDATION)
        except click.ClickException as e:
            e.show()
            sys.exit(EXIT_VALIDATION)
        except PipelineValidationError as e:
            click.echo(f"✗ {e}", err=True)
            sys.exit(EXIT_VALIDATION)
        except (CrimeMapError, OSError) as e:
            click.echo(f"✗ {e}", err=True)
            sys.exit(EXIT_RUNTIME)
        sys.exit(rv if isinstance(rv, int) else EXIT_OK)


@click.group(
    cls=PipelineGroup,
    invoke_without_command=True,
    context_settings={"show_default": True},
)
@click.version_option(version=__version__, prog_name="crimemap")
@click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False),
    help="TOML configuration file",
)
@click.option(
    "--set",
    "overrides",
    multiple=True,
    metavar="KEY=VALUE",
    help="Override a configuration key, e.g. --set train.iterations=500",
)
@click.option("--output-dir", type=click.Path(file_okay=False), help="Output directory")
@click.option("--workers", type=click.IntRange(min=1), help="Cap on worker threads")
@click.option("-v", "--verbose", is_flag=True, help="Log debug output")
@click.pass_context
def cli(
    ctx: click.Context,
    config_path: Optional[str],
    overrides: Tuple[str, ...],
    output_dir: Optional[str],
    workers: Optional[int],
    verbose: bool,
) -> None:
    """crimemap - Map crime-rate levels from reports and overhead imagery."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["overrides"] = overrides
    ctx.obj["output_dir"] = output_dir
    ctx.obj["workers"] = workers
    configure_logging(verbose)

    if ctx.invoked_subcommand is None:
        click.echo(ctx.get_help())
        ctx.exit()


cli.add_command(synth_city)
cli.add_command(ingest)
cli.add_command(label)
cli.add_command(fetch)
cli.add_command(train_command, name="train")
cli.add_command(finetune)
cli.add_command(eval_command, name="eval")
cli.add_command(predict_map_command, name="predict-map")
cli.add_command(render)
cli.add_command(full_run, name="full-run")


def main() -> None:
    """Entry point for the crimemap CLI."""
    cli()


if __name__ == "__main__":
    main()
