"""Command-line entry point: benchmark runs, pool/KG tooling, transcript
replay, cache management.

Exit codes: 0 success, 1 run-level failure, 2 usage error. Logs go to
stderr; artifacts only ever land in the chosen output directory.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path
from typing import Optional

import click

from . import fewshot, harness, knowledge, orchestrator
from .agents import PromptError, PromptLibrary
from .core import ConfigError, QuestionKind, RunConfig, Sample, BackendSpec, CHAT_ROLES
from .gateway import BackendError, ResponseCache, build_backends
from .harness import DatasetError
from .knowledge import KgParseError

logger = logging.getLogger(__name__)

_RUN_FAILURE_ERRORS = (
    BackendError,
    ConfigError,
    DatasetError,
    KgParseError,
    PromptError,
    fewshot.PoolFormatError,
    orchestrator.HistoryOverflowError,
    OSError,
    ValueError,
)


def _load_config(config_path: Optional[str], **overrides) -> RunConfig:
    config = RunConfig.from_toml(config_path) if config_path else RunConfig()
    for key, value in overrides.items():
        if value is not None:
            setattr(config, key, value)
    config.validate()
    return config


def _load_graph(config: RunConfig):
    return knowledge.load_kg(config.kg_path) if config.kg_path else None


def _load_pool(config: RunConfig):
    if config.k_shot > 0:
        if not config.icl_pool_path:
            raise ConfigError("icl_pool_path: required when k_shot > 0")
        return fewshot.load_pool(config.icl_pool_path)
    return None


def load_sample_file(path: str | Path) -> Sample:
    """Single-sample JSON file with the same fields as a dataset record."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    kind = str(doc.get("kind", "")).lower()
    kinds = {k.value: k for k in QuestionKind}
    if kind not in kinds:
        raise DatasetError(f"{path}: unknown kind {doc.get('kind')!r}")
    try:
        return Sample(
            id=str(doc["id"]),
            image=str(doc["image"]),
            question=str(doc["question"]),
            kind=kinds[kind],
            ground_truth=doc.get("ground_truth"),
            options=tuple(doc.get("options", [])),
        )
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"{path}: {exc}") from exc


@click.group()
def cli() -> None:
    """Multi-agent medical VQA pipeline."""


@cli.command("run")
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--k-shot", type=int, default=None)
@click.option("--max-iterations", type=int, default=None)
@click.option("--confidence-threshold", type=int, default=None)
@click.option("--fixed-iterations", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--seed", "rng_seed", type=int, default=None)
@click.option("--cache-dir", type=click.Path(), default=None)
@click.option("--offline", is_flag=True, default=None,
              help="Fail any non-cached network call.")
def cmd_run(dataset_path, config_path, out_dir, k_shot, max_iterations,
            confidence_threshold, fixed_iterations, workers, rng_seed,
            cache_dir, offline) -> None:
    """Run a benchmark and write traces plus reports to OUT_DIR."""
    config = _load_config(
        config_path, k_shot=k_shot, max_iterations=max_iterations,
        confidence_threshold=confidence_threshold, fixed_iterations=fixed_iterations,
        workers=workers, rng_seed=rng_seed, cache_dir=cache_dir, offline=offline,
    )
    dataset = harness.load_dataset(dataset_path)
    backends = build_backends(config)
    report = harness.run_benchmark(
        dataset, config, backends,
        graph=_load_graph(config), pool=_load_pool(config), out_dir=out_dir,
    )
    click.echo(f"dataset={report.dataset} n={report.n_samples} failed={report.n_failed} "
               f"closed={_fmt(report.closed_accuracy)} open={_fmt(report.open_recall)} "
               f"mean_iterations={report.mean_iterations:.2f}")


def _fmt(value) -> str:
    return f"{value:.4f}" if value is not None else "-"


@cli.group("pool")
def cmd_pool() -> None:
    """In-context example pool tooling."""


@cmd_pool.command("build")
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--seed", "rng_seed", type=int, default=None)
def cmd_pool_build(dataset_path, config_path, out_path, rng_seed) -> None:
    """Caption and embed every dataset sample into a pool file."""
    config = _load_config(config_path, rng_seed=rng_seed)
    dataset = harness.load_dataset(dataset_path)
    backends = build_backends(config)
    if backends.text_embedder is None or backends.image_embedder is None:
        raise ConfigError("pool build requires text_embedder and image_embedder bindings")
    prompts = PromptLibrary.load(config.prompts_dir or None)
    examples, build_report = fewshot.build_pool(
        dataset.samples, backends.perceiver, backends.text_embedder,
        backends.image_embedder, config.rng_seed, prompts,
    )
    fewshot.save_pool(examples, out_path)
    click.echo(f"pool built: {build_report.built} examples, "
               f"{len(build_report.skipped)} skipped -> {out_path}")
    for sample_id, reason in build_report.skipped:
        click.echo(f"skipped {sample_id}: {reason}", err=True)


@cli.group("kg")
def cmd_kg() -> None:
    """Knowledge-graph tooling."""


@cmd_kg.command("validate")
@click.argument("path", type=click.Path(exists=True))
def cmd_kg_validate(path) -> None:
    """Parse a triple file and report its size."""
    graph = knowledge.load_kg(path)
    click.echo(f"ok: {len(graph)} triples")


@cli.command("replay")
@click.option("--transcript", required=True, type=click.Path(exists=True))
@click.option("--sample", "sample_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out-dir", type=click.Path(), default=None)
def cmd_replay(transcript, sample_path, config_path, out_dir) -> None:
    """Drive one sample through the pipeline from a transcript file."""
    config = _load_config(config_path)
    for role in CHAT_ROLES:
        config.backends[role] = BackendSpec(kind="scripted", script_path=str(transcript))
    config.validate()
    sample = load_sample_file(sample_path)
    backends = build_backends(config)
    trace = orchestrator.run_sample(
        sample, config, backends, graph=_load_graph(config), pool=_load_pool(config),
    )
    if out_dir:
        orchestrator.write_trace(trace, out_dir)
    if trace.failed:
        raise click.ClickException(f"replay failed: {trace.error}")
    leftover = sum(script.remaining() for script in backends.scripts.values())
    if leftover:
        raise click.ClickException(f"replay finished with {leftover} unused transcript records")
    for record in trace.iterations:
        click.echo(f"Iteration {record.iteration} Answer: {record.reasoned.answer}")
    click.echo(f"Final Answer: {trace.final_answer}")
    if trace.stop_reason is not None:
        click.echo(f"Stop reason: {trace.stop_reason.value}")
    if sample.ground_truth is not None:
        score = harness.score_trace(sample, trace)
        click.echo(f"Score: {score:g} (ground truth: {sample.ground_truth})")


@cli.group("cache")
def cmd_cache() -> None:
    """Response-cache management."""


@cmd_cache.command("stats")
@click.argument("path", type=click.Path())
def cmd_cache_stats(path) -> None:
    stats = ResponseCache(path).stats()
    click.echo(f"entries: {stats['entries']}")


@cmd_cache.command("clear")
@click.argument("path", type=click.Path())
def cmd_cache_clear(path) -> None:
    removed = ResponseCache(path).clear()
    click.echo(f"removed: {removed}")


def main(argv: Optional[list[str]] = None) -> int:
    """Parse and execute one subcommand; returns the process exit code."""
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.UsageError as exc:
        exc.show()
        return 2
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except _RUN_FAILURE_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
