"""
Shared utilities and decorators for crimemap CLI commands.

Commands get their resolved configuration from the group's options and leave
exception-to-exit-code translation to :func:`pipeline_command`.
"""

from functools import wraps
from typing import Any, Callable, TypeVar

import click

from .config import PipelineConfig, load_config
from .errors import CrimeMapError, PipelineValidationError
from .pipeline import Pipeline

F = TypeVar("F", bound=Callable[..., Any])

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def resolve_config(ctx: click.Context) -> PipelineConfig:
    """
    Load the configuration named by the group options, once per invocation.

    ``--output-dir`` and ``--workers`` are applied as the last overrides.
    """
    obj = ctx.ensure_object(dict)
    if "config" not in obj:
        overrides = list(obj.get("overrides", ()))
        if obj.get("output_dir") is not None:
            overrides.append(f"output_dir={_toml_string(obj['output_dir'])}")
        if obj.get("workers") is not None:
            overrides.append(f"workers={obj['workers']}")
        obj["config"] = load_config(obj.get("config_path"), overrides)
    config: PipelineConfig = obj["config"]
    return config


def _toml_string(value: str) -> str:
    return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'


def pipeline_command(func: F) -> F:
    """
    Decorator for commands that run pipeline steps.

    This decorator:
    1. Resolves the configuration from the group options
    2. Passes a :class:`Pipeline` to the decorated function as 'pipeline'
    3. Reports validation errors with exit code 1 and runtime failures
       with exit code 2
    """

    @wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        ctx = click.get_current_context()
        try:
            kwargs["pipeline"] = Pipeline(resolve_config(ctx))
            return func(*args, **kwargs)
        except PipelineValidationError as e:
            click.echo(f"✗ {e}", err=True)
            ctx.exit(EXIT_VALIDATION)
        except (CrimeMapError, OSError) as e:
            click.echo(f"✗ {e}", err=True)
            ctx.exit(EXIT_RUNTIME)

    return wrapper  # type: ignore[return-value]
