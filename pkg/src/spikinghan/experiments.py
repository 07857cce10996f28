"""
Command bodies for train, eval, inspect, gen-synthetic and sweep.

Every command prints exactly one JSON document on stdout. Logs, spinners and
error messages go to stderr.
"""

import csv
import io
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import typer
from pydantic import ValidationError
from rich.console import Console

from spikinghan.checkpoint import check_compatible, load_checkpoint, save_checkpoint
from spikinghan.config import (
    NeuronConfig,
    NeuronKind,
    RunConfig,
    TrainConfig,
    load_run_config,
    read_config_document,
    resolve_split,
)
from spikinghan.data_io import (
    DatasetBundle,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    make_splits,
    same_class_neighbor_fraction,
    write_dataset,
)
from spikinghan.errors import ConfigError, SpikingHANError
from spikinghan.metrics import f1_scores, predict
from spikinghan.model import parameter_count, predict_eval
from spikinghan.training import HISTORY_COLUMNS, EpochRecord, train

logger = logging.getLogger(__name__)


# region Helpers
def _one_line(message: Any) -> str:
    return " ".join(str(message).split())


@contextmanager
def error_boundary() -> Iterator[None]:
    """Turn library errors into a one-line stderr message and the mapped exit code."""
    try:
        yield
    except SpikingHANError as e:
        logger.debug("Command failed", exc_info=True)
        typer.echo(f"error: {type(e).__name__}: {_one_line(e)}", err=True)
        raise typer.Exit(code=e.exit_code)
    except ValidationError as e:
        logger.debug("Command failed", exc_info=True)
        typer.echo(f"error: invalid configuration: {_one_line(e)}", err=True)
        raise typer.Exit(code=1)


def emit(document: Dict[str, Any]) -> None:
    typer.echo(json.dumps(document, indent=2))


def _stderr_console() -> Console:
    return Console(stderr=True)


def prepare_dataset(
    data: Path, run_config: RunConfig, split: Optional[str] = None
) -> Tuple[DatasetBundle, Optional[Tuple[float, float, float]]]:
    """
    Load a dataset and make sure it has splits.

    splits.json is used unless a split preset is given; otherwise splits are
    drawn from the configured ratios. Returns the ratios used to draw them,
    or None when they came from the dataset.
    """
    bundle = load_dataset(data, allow_toy=run_config.splits.allow_toy)
    if bundle.splits is not None and split is None:
        return bundle, None

    ratios = resolve_split(split, run_config.splits.ratios)
    splits = make_splits(bundle.labels, ratios, run_config.splits.seed, num_classes=bundle.num_classes)
    logger.info("Drew %s/%s/%s splits with seed %d", *splits.sizes(), run_config.splits.seed)
    return bundle.with_splits(splits), ratios


def write_history(history: Sequence[EpochRecord], path: Path) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for record in history:
        writer.writerow([record.epoch, repr(record.train_loss), repr(record.val_micro_f1), repr(record.val_macro_f1)])
    path.write_text(buffer.getvalue(), encoding="utf-8")


def _mean_std(values: Sequence[float]) -> Dict[str, float]:
    array = np.asarray(values, dtype=np.float64)
    return {"mean": float(array.mean()), "std": float(array.std())}


# endregion


# region Seed runs
@dataclass(frozen=True)
class SeedJob:
    bundle: DatasetBundle
    config: TrainConfig
    out: Path
    split_ratios: Optional[Tuple[float, float, float]]
    split_seed: int


def run_seed(job: SeedJob) -> Dict[str, Any]:
    """Train one seed and write its history, metrics and checkpoint into `job.out`."""
    job.out.mkdir(parents=True, exist_ok=True)
    result = train(job.bundle, job.config)

    write_history(result.history, job.out / "history.csv")
    (job.out / "metrics.json").write_text(json.dumps(result.metrics.to_dict(), indent=2) + "\n", encoding="utf-8")
    save_checkpoint(
        job.out / "checkpoint.bin",
        result.params,
        job.config.model_part(),
        num_classes=job.bundle.num_classes,
        target_type=job.bundle.target_type,
        metapaths=list(job.bundle.metapath_names),
        split_ratios=job.split_ratios,
        split_seed=job.split_seed if job.split_ratios is not None else None,
    )
    metrics = result.metrics
    return {
        "seed": job.config.seed,
        "test_micro_f1": metrics.test_micro_f1,
        "test_macro_f1": metrics.test_macro_f1,
        "best_epoch": metrics.best_epoch,
        "epochs_run": metrics.epochs_run,
        "spike_sparsity": metrics.spike_sparsity,
        "dir": str(job.out),
    }


def run_jobs(jobs: Sequence[SeedJob], workers: int) -> List[Dict[str, Any]]:
    """Run seed jobs in order, or in a process pool when workers > 1. Results keep job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [run_seed(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_seed, jobs))


# endregion


# region Train
def train_cmd(
    data: Path = typer.Option(..., "--data", "-d", help="Dataset directory."),
    out: Path = typer.Option(..., "--out", "-o", help="Output directory for per-seed results."),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Run configuration (.json or .toml)."),
    seed: Optional[List[int]] = typer.Option(None, "--seed", "-s", help="Training seed. Repeat for several runs."),
    split: Optional[str] = typer.Option(None, help="Split preset: 20-10-70, 40-10-50 or 60-10-30."),
    workers: Optional[int] = typer.Option(None, min=1, help="Parallel seed workers. Defaults to the config."),
):
    """
    Train SpikingHAN once per seed and summarise test F1 over seeds.
    """
    with error_boundary():
        run_config = load_run_config(config)
        bundle, ratios = prepare_dataset(data, run_config, split)
        seeds = list(seed) if seed else list(run_config.seeds)
        if not seeds:
            raise ConfigError("No seeds to run")

        jobs = [
            SeedJob(
                bundle=bundle,
                config=run_config.train.model_copy(update={"seed": s}),
                out=out / f"seed_{s}",
                split_ratios=ratios,
                split_seed=run_config.splits.seed,
            )
            for s in seeds
        ]
        out.mkdir(parents=True, exist_ok=True)
        with _stderr_console().status(f"[cyan]Training {len(jobs)} seed(s)..."):
            runs = run_jobs(jobs, workers or run_config.workers)

        summary = {
            "data": str(data),
            "seeds": runs,
            "test_micro_f1": _mean_std([r["test_micro_f1"] for r in runs]),
            "test_macro_f1": _mean_std([r["test_macro_f1"] for r in runs]),
            "config": run_config.model_dump(mode="json"),
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    emit(summary)


# endregion


# region Eval and inspect
def _load_for_checkpoint(data: Path, checkpoint: Path):
    ckpt = load_checkpoint(checkpoint)
    header = ckpt.header
    bundle = load_dataset(data, allow_toy=True)
    check_compatible(ckpt, bundle.d_in, bundle.num_classes)
    if header.metapaths and list(header.metapaths) != list(bundle.metapath_names):
        logger.warning(
            "Checkpoint was trained on meta-paths %s, dataset has %s", header.metapaths, list(bundle.metapath_names)
        )
    # Splits drawn at training time win over splits.json
    if header.split_ratios is not None:
        bundle = bundle.with_splits(
            make_splits(bundle.labels, header.split_ratios, header.split_seed or 0, num_classes=bundle.num_classes)
        )
    elif bundle.splits is None:
        raise ConfigError("Dataset has no splits.json and the checkpoint records no split ratios")
    return ckpt, bundle


def eval_cmd(
    data: Path = typer.Option(..., "--data", "-d", help="Dataset directory."),
    checkpoint: Path = typer.Option(..., "--checkpoint", "-k", help="Checkpoint written by train."),
    float32: bool = typer.Option(False, "--float32", help="Run the forward pass in single precision."),
):
    """
    Print test Micro/Macro-F1 of a checkpoint.
    """
    with error_boundary():
        ckpt, bundle = _load_for_checkpoint(data, checkpoint)
        dtype = np.float32 if float32 else np.float64
        result = predict_eval(bundle.model_inputs(dtype), ckpt.params, ckpt.header.model, dtype=dtype)
        test = bundle.require_splits().test
        micro, macro = f1_scores(predict(result.y_hat.value)[test], bundle.labels[test], bundle.num_classes)
        report = {
            "test_micro_f1": micro,
            "test_macro_f1": macro,
            "num_test": int(len(test)),
            "dtype": np.dtype(dtype).name,
        }
    emit(report)


def inspect_cmd(
    data: Path = typer.Option(..., "--data", "-d", help="Dataset directory."),
    checkpoint: Path = typer.Option(..., "--checkpoint", "-k", help="Checkpoint written by train."),
    float32: bool = typer.Option(False, "--float32", help="Run the forward pass in single precision."),
):
    """
    Report meta-path attention, firing rates, spike sparsity and model size.
    """
    with error_boundary():
        ckpt, bundle = _load_for_checkpoint(data, checkpoint)
        model_cfg = ckpt.header.model
        dtype = np.float32 if float32 else np.float64
        inputs = bundle.model_inputs(dtype)

        tick = time.perf_counter()
        result = predict_eval(inputs, ckpt.params, model_cfg, dtype=dtype)
        forward_ms = (time.perf_counter() - tick) * 1000.0

        d_in, d_hd, d_out = ckpt.params.dims
        rates = result.trace.firing_rate
        report = {
            "beta": dict(zip(bundle.metapath_names, result.beta_values.astype(float).tolist())),
            "param_count": parameter_count(d_in, d_hd, d_out, model_cfg.neuron.kind),
            "neuron_kind": model_cfg.neuron.kind.value,
            "time_steps": model_cfg.neuron.time_steps,
            "class_firing_rate": rates.mean(axis=0).astype(float).tolist(),
            "mean_firing_rate": float(rates.mean()),
            "spike_sparsity": result.trace.sparsity,
            "forward_ms": forward_ms,
            "dtype": np.dtype(dtype).name,
        }
        if ckpt.params.tau_param is not None:
            report["tau_m"] = 1.0 + float(np.logaddexp(0.0, ckpt.params.tau_param))
    emit(report)


# endregion


# region Synthetic data
def gen_synthetic_cmd(
    out: Path = typer.Option(..., "--out", "-o", help="Directory to write the dataset to."),
    spec: Optional[Path] = typer.Option(None, "--spec", help="Generator settings (.json or .toml)."),
    seed: Optional[int] = typer.Option(None, help="Override the generator seed."),
    binary: bool = typer.Option(False, help="Also write a binary feature sidecar."),
):
    """
    Write a class-assortative synthetic heterogeneous dataset.
    """
    with error_boundary():
        settings: Dict[str, Any] = read_config_document(spec) if spec is not None else {}
        if seed is not None:
            settings["seed"] = seed
        synthetic = SyntheticSpec(**settings)
        bundle = generate_synthetic(synthetic)
        write_dataset(bundle, out, binary_sidecar=binary)
        report = {
            "out": str(out),
            "num_target": bundle.n,
            "num_classes": bundle.num_classes,
            "metapaths": list(bundle.metapath_names),
            "split_sizes": list(bundle.require_splits().sizes()),
            "same_class_neighbor_fraction": same_class_neighbor_fraction(bundle.adjacencies, bundle.labels),
            "spec": synthetic.model_dump(mode="json"),
        }
    emit(report)


# endregion


# region Sweep
SWEEP_COLUMNS = ("kind", "time_steps", "seed", "test_micro_f1", "test_macro_f1", "best_epoch", "spike_sparsity")


def sweep_cmd(
    data: Path = typer.Option(..., "--data", "-d", help="Dataset directory."),
    out: Path = typer.Option(..., "--out", "-o", help="Output directory."),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Run configuration (.json or .toml)."),
    kind: Optional[List[NeuronKind]] = typer.Option(None, "--kind", help="Neuron kind. Repeatable; default all."),
    time_steps: Optional[List[int]] = typer.Option(None, "--time-steps", "-T", help="Time steps. Repeatable."),
    seed: Optional[List[int]] = typer.Option(None, "--seed", "-s", help="Training seed. Repeatable."),
    split: Optional[str] = typer.Option(None, help="Split preset: 20-10-70, 40-10-50 or 60-10-30."),
    workers: Optional[int] = typer.Option(None, min=1, help="Parallel workers. Defaults to the config."),
):
    """
    Train every (neuron kind, time steps, seed) combination and tabulate test F1.
    """
    with error_boundary():
        run_config = load_run_config(config)
        bundle, ratios = prepare_dataset(data, run_config, split)
        kinds = list(kind) if kind else list(NeuronKind)
        steps = list(time_steps) if time_steps else [run_config.train.neuron.time_steps]
        seeds = list(seed) if seed else list(run_config.seeds)

        jobs = []
        for k, t, s in itertools.product(kinds, steps, seeds):
            neuron = NeuronConfig(**{**run_config.train.neuron.model_dump(), "kind": k, "time_steps": t})
            jobs.append(
                SeedJob(
                    bundle=bundle,
                    config=run_config.train.model_copy(update={"neuron": neuron, "seed": s}),
                    out=out / f"{k.value}_T{t}" / f"seed_{s}",
                    split_ratios=ratios,
                    split_seed=run_config.splits.seed,
                )
            )

        out.mkdir(parents=True, exist_ok=True)
        with _stderr_console().status(f"[cyan]Sweeping {len(jobs)} run(s)..."):
            runs = run_jobs(jobs, workers or run_config.workers)

        rows = []
        for job, run in zip(jobs, runs):
            rows.append({"kind": job.config.neuron.kind.value, "time_steps": job.config.neuron.time_steps, **run})
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=SWEEP_COLUMNS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        (out / "sweep.csv").write_text(buffer.getvalue(), encoding="utf-8")

        combos = []
        for (k, t), group in itertools.groupby(rows, key=lambda r: (r["kind"], r["time_steps"])):
            group = list(group)
            combos.append(
                {
                    "kind": k,
                    "time_steps": t,
                    "seeds": [r["seed"] for r in group],
                    "test_micro_f1": _mean_std([r["test_micro_f1"] for r in group]),
                    "test_macro_f1": _mean_std([r["test_macro_f1"] for r in group]),
                }
            )
        summary = {"data": str(data), "combinations": combos}
        (out / "sweep.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    emit(summary)


# endregion
