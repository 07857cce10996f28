import logging

import typer
from rich.console import Console
from rich.logging import RichHandler

from spikinghan.config import AppSettings, config_app
from spikinghan.experiments import eval_cmd, gen_synthetic_cmd, inspect_cmd, sweep_cmd, train_cmd

# Initialise the CLI app
app = typer.Typer(
    name="spikinghan",
    no_args_is_help=True,
)
app.add_typer(
    config_app,
    name="config",
    help="Show or write run configurations.",
    no_args_is_help=True,
)
app.command("train")(train_cmd)
app.command("eval")(eval_cmd)
app.command("inspect")(inspect_cmd)
app.command("gen-synthetic")(gen_synthetic_cmd)
app.command("sweep")(sweep_cmd)


@app.callback()
def main(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log progress at INFO level."),
):
    """
    Spiking heterogeneous graph attention networks for node classification.
    """
    settings = AppSettings()
    logging.basicConfig(
        level=logging.INFO if verbose else settings.log_level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


if __name__ == "__main__":
    app()
