"""Command-line entry point: ``graf-qa <command> [options]``."""

from __future__ import annotations

import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import click
from dotenv import load_dotenv

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .claim_extraction import ClientError, ClientExtractor, extract_corpus, make_client
from .dataset import load_mcqa
from .embedding import Encoder, HashEncoder, load_embedding_table
from .evaluation import (
    CATEGORY_SETS,
    accuracy_by,
    agreement_ratings,
    appa,
    difficulty_zscores,
    fleiss_kappa,
    results_from_runs,
    run_from_predictions,
    tfidf_scores,
)
from .kg_store import build_graph, load_graph, parse_triplet_blocks, persist_graph
from .reports import (
    load_predictions,
    render_summary,
    write_csv,
    write_metrics_xlsx,
    write_predictions,
    write_summary,
    write_training_log,
)
from .retrieval import (
    Bm25Index,
    LemmaTableError,
    Normalizer,
    build_entity_index,
    chunk_corpus,
    load_lemma_table,
    normalize,
    retrieve_chunks,
    sample_subgraph,
    subgraph_to_dict,
)
from .scorer import answer_items
from .settings import load_settings
from .synthetic import make_synthetic_fixture, save_fixture
from .training import LOSS_KINDS, TrainConfig, train
from .utils.files import atomic_write_text, read_documents

logger = logging.getLogger(__name__)

LOG_FORMAT = "[%(asctime)s] %(levelname)s:%(name)s:%(message)s"
LOG_DATEFMT = "%Y-%m-%dT%H:%M:%S"

PROG_NAME = "graf-qa"

existing_file = click.Path(exists=True, dir_okay=False, path_type=Path)
output_file = click.Path(dir_okay=False, path_type=Path)


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, datefmt=LOG_DATEFMT)
    logging.getLogger().setLevel(level)


# ---------------------------------------------------------------------------
# Shared option helpers
# ---------------------------------------------------------------------------


def _parse_cardinality(ctx: click.Context, param: click.Parameter, value: Optional[str]) -> Any:
    if value is None:
        return None
    lowered = value.strip().lower()
    if lowered in {"auto", "gold"}:
        return lowered
    try:
        count = int(lowered)
    except ValueError:
        raise click.BadParameter("expected auto, gold or a positive integer") from None
    if count < 1:
        raise click.BadParameter("a fixed cardinality must be at least 1")
    return count


def _normalizer(lemma_table: Optional[Path]) -> Optional[Normalizer]:
    if lemma_table is None:
        return None
    try:
        return Normalizer(load_lemma_table(lemma_table))
    except (LemmaTableError, OSError) as error:
        logger.warning("Ignoring lemma table %s: %s", lemma_table, error)
        return None


def _encoder(
    embedding_table: Optional[Path],
    dim: int,
    seed: int,
    normalizer: Optional[Normalizer],
    *,
    strict_dim: bool,
) -> Encoder:
    if embedding_table is None:
        return HashEncoder(dim, seed=seed, normalizer=normalizer)
    return load_embedding_table(
        embedding_table, seed=seed, normalizer=normalizer, dim=dim if strict_dim else None
    )


def _extractor(settings: Mapping[str, Any], client_spec: Optional[str], language: Optional[str]) -> ClientExtractor:
    client = make_client(
        client_spec or settings["client"],
        model=settings["clientModel"],
        timeout=settings["clientTimeout"],
    )
    return ClientExtractor(client, language=language or settings["promptLanguage"])


def _pick(value: Any, *fallbacks: Any) -> Any:
    for candidate in (value, *fallbacks):
        if candidate is not None:
            return candidate
    return None


def _write_or_echo(text: str, out: Optional[Path]) -> None:
    if out is None:
        click.echo(text, nl=not text.endswith("\n"))
    else:
        atomic_write_text(out, text)
        logger.info("Wrote %s", out)


# ---------------------------------------------------------------------------
# Command group
# ---------------------------------------------------------------------------


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name=PROG_NAME)
@click.option("--verbose", "-v", is_flag=True, help="Log at DEBUG level.")
@click.option("--quiet", "-q", is_flag=True, help="Only log warnings and errors.")
@click.option("--settings", "settings_path", type=existing_file, help="JSON settings file.")
@click.pass_context
def cli(ctx: click.Context, verbose: bool, quiet: bool, settings_path: Optional[Path]) -> None:
    """Knowledge-graph assisted multiple-choice question answering."""
    load_dotenv()
    configure_logging(verbose, quiet)
    ctx.obj = load_settings(settings_path)


@cli.command("build-kg")
@click.argument("files", nargs=-1, required=True, type=existing_file)
@click.option("--out", required=True, type=output_file, help="Graph file to write.")
def build_kg_command(files: Tuple[Path, ...], out: Path) -> None:
    """Build a graph file from STOP-separated triplet files."""
    triplets = []
    skipped = 0
    for path in files:
        parsed = parse_triplet_blocks(path.read_text(encoding="utf-8"))
        triplets.extend(parsed.triplets)
        skipped += parsed.skipped
        logger.info("Read %d triplets from %s", len(parsed.triplets), path)
    if skipped:
        logger.warning("Skipped %d unparseable line(s)", skipped)
    kg = build_graph(triplets)
    persist_graph(kg, out)
    click.echo(f"entities={kg.num_entities} edges={kg.num_edges}")


@cli.command("extract")
@click.option("--corpus", required=True, type=existing_file, help="One document per line.")
@click.option("--out", required=True, type=output_file, help="Triplet blocks file to write.")
@click.option("--client", "client_spec", help="stub, fixture:DIR or http:URL.")
@click.option("--language", type=click.Choice(["en", "ro"]), help="Prompt language.")
@click.pass_obj
def extract_command(settings: Dict[str, Any], corpus: Path, out: Path, client_spec: Optional[str],
                    language: Optional[str]) -> None:
    """Extract triplets from every corpus document with a completion client."""
    client = make_client(
        client_spec or settings["client"], model=settings["clientModel"], timeout=settings["clientTimeout"]
    )
    blocks = extract_corpus(read_documents(corpus), client, language=language or settings["promptLanguage"])
    atomic_write_text(out, "".join(block + "\n" for block in blocks))
    click.echo(f"documents={len(blocks)}")


@cli.command("sample")
@click.option("--kg", "kg_path", required=True, type=existing_file)
@click.option("--query", required=True)
@click.option("--top-k", type=int)
@click.option("--depth", type=int)
@click.option("--max-entities", type=int)
@click.option("--lemma-table", type=existing_file)
@click.option("--out", type=output_file, help="JSON dump (stdout when omitted).")
@click.pass_obj
def sample_command(settings: Dict[str, Any], kg_path: Path, query: str, top_k: Optional[int],
                   depth: Optional[int], max_entities: Optional[int], lemma_table: Optional[Path],
                   out: Optional[Path]) -> None:
    """Dump the subgraph sampled around a query."""
    kg = load_graph(kg_path)
    normalizer = _normalizer(lemma_table)
    index = None
    if not kg.is_empty():
        index = build_entity_index(kg, normalizer, k1=settings["bm25K1"], b=settings["bm25B"])
    subgraph = sample_subgraph(
        kg,
        query,
        top_k=_pick(top_k, settings["topK"]),
        depth=_pick(depth, settings["depth"]),
        max_entities=_pick(max_entities, settings["maxEntities"]),
        index=index,
    )
    _write_or_echo(json.dumps(subgraph_to_dict(subgraph), indent=2, ensure_ascii=False) + "\n", out)


@cli.command("train")
@click.option("--dataset", "dataset_path", required=True, type=existing_file)
@click.option("--kg", "kg_path", required=True, type=existing_file)
@click.option("--out", required=True, type=output_file, help="Best checkpoint (.npz).")
@click.option("--log", "log_path", type=output_file, help="Per-epoch CSV log.")
@click.option("--validation", "validation_path", type=existing_file, help="Validation dataset.")
@click.option("--epochs", type=int)
@click.option("--learning-rate", type=float)
@click.option("--loss", "loss_kind", type=click.Choice(LOSS_KINDS))
@click.option("--seed", type=int)
@click.option("--dim", type=int)
@click.option("--heads", type=int)
@click.option("--top-k", type=int)
@click.option("--depth", type=int)
@click.option("--max-entities", type=int)
@click.option("--stop-accuracy", type=float, help="Stop once accuracy reaches this value.")
@click.option("--checkpoint-every", type=int)
@click.option("--checkpoint-dir", type=click.Path(file_okay=False, path_type=Path))
@click.option("--client", "client_spec")
@click.option("--language", type=click.Choice(["en", "ro"]))
@click.option("--embedding-table", type=existing_file)
@click.option("--lemma-table", type=existing_file)
@click.option("--no-claims", is_flag=True, help="Replace every claim graph with an empty one.")
@click.option("--no-kg", is_flag=True, help="Replace every sampled subgraph with an empty one.")
@click.pass_obj
def train_command(settings: Dict[str, Any], dataset_path: Path, kg_path: Path, out: Path,
                  log_path: Optional[Path], validation_path: Optional[Path], epochs: Optional[int],
                  learning_rate: Optional[float], loss_kind: Optional[str], seed: Optional[int],
                  dim: Optional[int], heads: Optional[int], top_k: Optional[int], depth: Optional[int],
                  max_entities: Optional[int], stop_accuracy: Optional[float],
                  checkpoint_every: Optional[int], checkpoint_dir: Optional[Path],
                  client_spec: Optional[str], language: Optional[str], embedding_table: Optional[Path],
                  lemma_table: Optional[Path], no_claims: bool, no_kg: bool) -> None:
    """Train the scorer and save the best checkpoint."""
    dataset = load_mcqa(dataset_path)
    validation = load_mcqa(validation_path) if validation_path else []
    kg = load_graph(kg_path)
    normalizer = _normalizer(lemma_table)
    resolved_seed = _pick(seed, settings["seed"])
    encoder = _encoder(
        embedding_table, _pick(dim, settings["dim"]), resolved_seed, normalizer, strict_dim=dim is not None
    )
    config = TrainConfig.from_settings(
        settings,
        learning_rate=learning_rate,
        epochs=epochs,
        loss_kind=loss_kind,
        seed=resolved_seed,
        dim=encoder.dim,
        heads=heads,
        top_k=top_k,
        depth=depth,
        max_entities=max_entities,
        checkpoint_every=checkpoint_every,
        stop_accuracy=stop_accuracy,
        use_claims=not no_claims,
        use_kg=not no_kg,
    )
    index = None
    if not kg.is_empty():
        index = build_entity_index(kg, normalizer, k1=settings["bm25K1"], b=settings["bm25B"])

    result = train(
        dataset,
        kg,
        _extractor(settings, client_spec, language),
        encoder,
        config,
        validation=validation,
        checkpoint_dir=checkpoint_dir,
        index=index,
    )
    meta = {
        "best_epoch": result.best_epoch,
        "best_accuracy": result.best_accuracy,
        "seed": config.seed,
        "loss_kind": config.loss_kind,
        "top_k": config.top_k,
        "depth": config.depth,
        "max_entities": config.max_entities,
        "use_claims": config.use_claims,
        "use_kg": config.use_kg,
    }
    save_checkpoint(out, result.gat, result.scorer, meta)
    if log_path is not None:
        write_training_log(result.log, log_path)
    click.echo(f"best_epoch={result.best_epoch} accuracy={result.best_accuracy:.4f}")


@cli.command("answer")
@click.option("--dataset", "dataset_path", required=True, type=existing_file)
@click.option("--kg", "kg_path", required=True, type=existing_file)
@click.option("--checkpoint", "checkpoint_path", required=True, type=existing_file)
@click.option("--out", required=True, type=output_file, help="Predictions JSONL.")
@click.option("--cardinality", callback=_parse_cardinality, help="auto, gold or a fixed count.")
@click.option("--jobs", type=click.IntRange(min=1))
@click.option("--seed", type=int, help="Hash-encoder seed (defaults to the checkpoint's).")
@click.option("--top-k", type=int)
@click.option("--depth", type=int)
@click.option("--max-entities", type=int)
@click.option("--client", "client_spec")
@click.option("--language", type=click.Choice(["en", "ro"]))
@click.option("--embedding-table", type=existing_file)
@click.option("--lemma-table", type=existing_file)
@click.option("--no-claims", is_flag=True)
@click.option("--no-kg", is_flag=True)
@click.pass_obj
def answer_command(settings: Dict[str, Any], dataset_path: Path, kg_path: Path, checkpoint_path: Path,
                   out: Path, cardinality: Any, jobs: Optional[int], seed: Optional[int],
                   top_k: Optional[int], depth: Optional[int], max_entities: Optional[int],
                   client_spec: Optional[str], language: Optional[str], embedding_table: Optional[Path],
                   lemma_table: Optional[Path], no_claims: bool, no_kg: bool) -> None:
    """Score every choice and write predictions sorted by item id."""
    items = load_mcqa(dataset_path)
    kg = load_graph(kg_path)
    checkpoint = load_checkpoint(checkpoint_path)
    meta = checkpoint.meta
    normalizer = _normalizer(lemma_table)
    encoder = _encoder(
        embedding_table,
        checkpoint.gat.d_in,
        _pick(seed, meta.get("seed"), settings["seed"]),
        normalizer,
        strict_dim=True,
    )
    index = None
    if not kg.is_empty():
        index = build_entity_index(kg, normalizer, k1=settings["bm25K1"], b=settings["bm25B"])

    predictions = answer_items(
        items,
        kg,
        _extractor(settings, client_spec, language),
        encoder,
        checkpoint.gat,
        checkpoint.scorer,
        cardinality=_pick(cardinality, settings["cardinality"]),
        jobs=_pick(jobs, settings["jobs"]),
        index=index,
        top_k=_pick(top_k, meta.get("top_k"), settings["topK"]),
        depth=_pick(depth, meta.get("depth"), settings["depth"]),
        max_entities=_pick(max_entities, meta.get("max_entities"), settings["maxEntities"]),
        use_claims=not no_claims,
        use_kg=not no_kg,
    )
    write_predictions(predictions, out)
    click.echo(f"predictions={len(predictions)}")


@cli.command("eval")
@click.option("--predictions", "predictions_path", required=True, type=existing_file)
@click.option("--dataset", "dataset_path", required=True, type=existing_file)
@click.option("--csv", "csv_path", type=output_file, help="Per-item CSV report.")
@click.option("--summary", "summary_path", type=output_file, help="Plain-text summary.")
@click.option("--xlsx", "xlsx_path", type=output_file, help="Workbook with every report.")
def eval_command(predictions_path: Path, dataset_path: Path, csv_path: Optional[Path],
                 summary_path: Optional[Path], xlsx_path: Optional[Path]) -> None:
    """Exact-match accuracy, overall and per exam type and domain."""
    items = load_mcqa(dataset_path)
    run = run_from_predictions(predictions_path.stem, load_predictions(predictions_path), items)

    metrics: Dict[str, Any] = {"items": len(items), "accuracy": run.accuracy()}
    by_exam = accuracy_by(run, items, "exam_type")
    by_domain = accuracy_by(run, items, "domain_tag")
    metrics.update({f"accuracy[{group}]": value for group, value in by_exam.items()})
    metrics.update({f"accuracy[{group}]": value for group, value in by_domain.items()})

    summary = render_summary(f"Evaluation of {predictions_path.name}", metrics)
    click.echo(summary, nl=False)
    if summary_path is not None:
        write_summary(summary_path, f"Evaluation of {predictions_path.name}", metrics)

    correct = run.correct
    item_header = ("item_id", "selected", "targets", "correct")
    item_rows = [
        (item_id, "".join(sorted(run.selected[item_id])), "".join(sorted(run.targets[item_id])),
         int(correct[item_id]))
        for item_id in run.item_ids
    ]
    if csv_path is not None:
        write_csv(csv_path, item_header, item_rows)
    if xlsx_path is not None:
        write_metrics_xlsx(
            xlsx_path,
            {
                "Items": (item_header, item_rows),
                "By exam type": (("exam_type", "accuracy"), sorted(by_exam.items())),
                "By domain": (("domain_tag", "accuracy"), sorted(by_domain.items())),
            },
            item_count=len(items),
            sources=[str(predictions_path), str(dataset_path)],
        )


@cli.command("agreement")
@click.argument("files", nargs=-1, required=True, type=existing_file)
@click.option("--categories", type=click.Choice(sorted(CATEGORY_SETS)), default="combined", show_default=True)
def agreement_command(files: Tuple[Path, ...], categories: str) -> None:
    """APPA and Fleiss' kappa across two or more prediction files."""
    if len(files) < 2:
        raise click.UsageError("agreement needs at least two prediction files")
    runs = [run_from_predictions(path.stem, load_predictions(path)) for path in files]
    ratings, _ = agreement_ratings(runs, categories)
    click.echo(f"appa={appa(runs):.4f}")
    click.echo(f"fleiss_kappa={fleiss_kappa(ratings):.4f}")


def _read_topics(path: Path) -> Dict[str, str]:
    with path.open("r", encoding="utf-8", newline="") as handle:
        rows = [row for row in csv.reader(handle) if row]
    if rows and rows[0][:2] == ["item_id", "topic"]:
        rows = rows[1:]
    topics: Dict[str, str] = {}
    for number, row in enumerate(rows, start=1):
        if len(row) < 2:
            raise ValueError(f"{path}: row {number} needs item_id and topic columns")
        topics[row[0]] = row[1]
    return topics


@cli.command("difficulty")
@click.option("--predictions", "prediction_paths", required=True, multiple=True, type=existing_file)
@click.option("--dataset", "dataset_path", required=True, type=existing_file)
@click.option("--topics", "topics_path", type=existing_file, help="CSV of item_id,topic (defaults to domain tags).")
@click.option("--out", type=output_file, help="CSV of topic z-scores.")
def difficulty_command(prediction_paths: Tuple[Path, ...], dataset_path: Path, topics_path: Optional[Path],
                       out: Optional[Path]) -> None:
    """Per-topic difficulty as the mean standardized correctness across models."""
    items = load_mcqa(dataset_path)
    runs = [run_from_predictions(path.stem, load_predictions(path), items) for path in prediction_paths]
    topics = _read_topics(topics_path) if topics_path else {item.id: item.domain_tag for item in items}
    zscores = difficulty_zscores(results_from_runs(runs), topics)
    rows: List[Sequence[Any]] = [(topic, f"{value:.6f}") for topic, value in zscores.items()]
    for topic, value in rows:
        click.echo(f"{topic}\t{value}")
    if out is not None:
        write_csv(out, ("topic", "zscore"), rows)


@cli.command("tfidf")
@click.option("--corpus", required=True, type=existing_file, help="One document per line.")
@click.option("--top", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--lemma-table", type=existing_file)
@click.option("--out", type=output_file, help="CSV of every term score.")
def tfidf_command(corpus: Path, top: int, lemma_table: Optional[Path], out: Optional[Path]) -> None:
    """Corpus-level TF-IDF term ranking."""
    normalizer = _normalizer(lemma_table)
    scores = tfidf_scores([normalize(document, normalizer) for document in read_documents(corpus)])
    ranked = sorted(scores.items(), key=lambda pair: (-pair[1], pair[0]))
    for term, score in ranked[:top]:
        click.echo(f"{term}\t{score:.6f}")
    if out is not None:
        write_csv(out, ("term", "tfidf"), [(term, f"{score:.10g}") for term, score in ranked])


@cli.command("make-fixture")
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--questions", type=click.IntRange(min=1), default=30, show_default=True)
@click.option("--extra-triplets", type=click.IntRange(min=0), default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def make_fixture_command(out: Path, questions: int, extra_triplets: int, seed: int) -> None:
    """Write a synthetic dataset and graph whose correct choices quote graph triplets."""
    fixture = make_synthetic_fixture(questions, seed, extra_triplets=extra_triplets)
    dataset_path, kg_path = save_fixture(fixture, out)
    click.echo(f"dataset={dataset_path} kg={kg_path}")


@cli.command("chunk")
@click.option("--articles", required=True, type=existing_file, help="One article per line.")
@click.option("--size", type=click.IntRange(min=1))
@click.option("--overlap", type=click.IntRange(min=0))
@click.option("--out", required=True, type=output_file, help="One chunk per line.")
@click.option("--query", help="Also print the best chunks for this query.")
@click.option("--top-k", type=click.IntRange(min=1))
@click.option("--lemma-table", type=existing_file)
@click.pass_obj
def chunk_command(settings: Dict[str, Any], articles: Path, size: Optional[int], overlap: Optional[int],
                  out: Path, query: Optional[str], top_k: Optional[int], lemma_table: Optional[Path]) -> None:
    """Split articles into overlapping word windows for retrieval."""
    normalizer = _normalizer(lemma_table)
    documents = [document.split() for document in read_documents(articles)]
    chunks = chunk_corpus(
        documents, size=_pick(size, settings["chunkSize"]), overlap=_pick(overlap, settings["chunkOverlap"])
    )
    atomic_write_text(out, "".join(" ".join(chunk) + "\n" for chunk in chunks))
    click.echo(f"chunks={len(chunks)}")
    if query:
        index = Bm25Index(
            [normalize(" ".join(chunk), normalizer) for chunk in chunks], k1=settings["bm25K1"], b=settings["bm25B"]
        )
        for chunk_id, score, text in retrieve_chunks(
            index, chunks, query, k=_pick(top_k, settings["ragTopK"]), normalizer=normalizer
        ):
            click.echo(f"{chunk_id}\t{score:.4f}\t{text}")


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command and return its exit code instead of exiting."""
    args = list(sys.argv[1:] if argv is None else argv)
    if not args:
        click.echo(cli.get_help(click.Context(cli, info_name=PROG_NAME)), err=True)
        return 2
    try:
        result = cli.main(args=args, prog_name=PROG_NAME, standalone_mode=False)
    except click.exceptions.Exit as exit_request:
        return exit_request.exit_code
    except click.UsageError as error:
        error.show()
        return 2
    except click.ClickException as error:
        error.show()
        return error.exit_code
    except click.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except (ValueError, ClientError, OSError) as error:
        logger.debug("Command failed", exc_info=True)
        click.echo(f"error: {error}", err=True)
        return 1
    return result if isinstance(result, int) else 0


def main() -> int:
    return run_cli()


__all__ = ["cli", "configure_logging", "main", "run_cli"]
