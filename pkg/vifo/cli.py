import click

from . import harness, verify
from .logging_setup import configure_logging


@click.group()
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    help="Defaults to $VIFO_LOG_LEVEL, else INFO.",
)
@click.version_option(package_name="vifo")
def main(log_level: str | None):
    """Train, evaluate and check output-space variational models."""
    try:
        configure_logging(log_level)
    except ValueError as e:
        raise click.ClickException(str(e)) from None


harness.register(main)
main.add_command(verify.verify_command)
