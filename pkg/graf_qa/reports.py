"""Prediction files, metric reports (CSV, text, xlsx), and training logs."""

from __future__ import annotations

import csv
import io
import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from marshmallow import EXCLUDE, Schema, ValidationError, fields, post_load, validate

from .dataset import LABELS, DatasetFormatError
from .scorer import Prediction
from .training import EpochLog
from .utils.files import atomic_write_text, iter_numbered_lines

try:
    from openpyxl import Workbook
    from openpyxl.styles import Alignment, Font, PatternFill
    from openpyxl.utils import get_column_letter
except ImportError:  # pragma: no cover - optional dependency
    Workbook = None

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Row = Sequence[Any]


# ---------------------------------------------------------------------------
# Predictions
# ---------------------------------------------------------------------------


class PredictionSchema(Schema):
    class Meta:
        unknown = EXCLUDE

    item_id = fields.String(required=True, validate=validate.Length(min=1))
    probabilities = fields.Dict(
        keys=fields.String(validate=validate.OneOf(LABELS)),
        values=fields.Float(validate=validate.Range(min=0, max=1, min_inclusive=False, max_inclusive=False)),
        required=True,
    )
    selected = fields.List(fields.String(validate=validate.OneOf(LABELS)), required=True)
    warnings = fields.Dict(keys=fields.String(), values=fields.List(fields.String()), load_default=dict)

    @post_load
    def make_prediction(self, data: Dict[str, Any], **kwargs: Any) -> Prediction:
        unknown = sorted(set(data["selected"]) - set(data["probabilities"]))
        if unknown:
            raise ValidationError(f"selected labels {unknown} have no probability", "selected")
        return Prediction(
            item_id=data["item_id"],
            probabilities=dict(sorted(data["probabilities"].items())),
            selected=tuple(sorted(set(data["selected"]))),
            warnings={label: tuple(flags) for label, flags in sorted(data["warnings"].items())},
        )


_prediction_schema = PredictionSchema()


def prediction_record(prediction: Prediction) -> Dict[str, Any]:
    record: Dict[str, Any] = {
        "item_id": prediction.item_id,
        "probabilities": {label: prediction.probabilities[label] for label in sorted(prediction.probabilities)},
        "selected": sorted(prediction.selected),
    }
    if prediction.warnings:
        record["warnings"] = {label: list(flags) for label, flags in sorted(prediction.warnings.items())}
    return record


def write_predictions(predictions: Iterable[Prediction], path: PathLike) -> int:
    """Write one JSON record per prediction, sorted by item id."""
    ordered = sorted(predictions, key=lambda prediction: prediction.item_id)
    lines = [json.dumps(prediction_record(prediction), sort_keys=True, ensure_ascii=False) for prediction in ordered]
    atomic_write_text(path, "".join(line + "\n" for line in lines))
    logger.info("Wrote %d predictions to %s", len(ordered), path)
    return len(ordered)


def load_predictions(path: PathLike) -> List[Prediction]:
    predictions: List[Prediction] = []
    for number, line in iter_numbered_lines(path):
        if not line.strip():
            continue
        try:
            predictions.append(_prediction_schema.load(json.loads(line)))
        except json.JSONDecodeError as error:
            raise DatasetFormatError(f"{path}:{number}: malformed JSON: {error.msg}") from error
        except ValidationError as error:
            raise DatasetFormatError(f"{path}:{number}: invalid prediction: {error.messages}") from error
    logger.info("Loaded %d predictions from %s", len(predictions), path)
    return predictions


# ---------------------------------------------------------------------------
# Tabular reports
# ---------------------------------------------------------------------------


def render_csv(header: Row, rows: Iterable[Row]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def write_csv(path: PathLike, header: Row, rows: Iterable[Row]) -> None:
    atomic_write_text(path, render_csv(header, rows))
    logger.info("Wrote report %s", path)


def render_summary(title: str, metrics: Mapping[str, Any]) -> str:
    width = max((len(name) for name in metrics), default=0)
    lines = [title, "=" * len(title)]
    for name, value in metrics.items():
        shown = f"{value:.6f}" if isinstance(value, float) else str(value)
        lines.append(f"{name.ljust(width)}  {shown}")
    return "\n".join(lines) + "\n"


def write_summary(path: PathLike, title: str, metrics: Mapping[str, Any]) -> None:
    atomic_write_text(path, render_summary(title, metrics))
    logger.info("Wrote summary %s", path)


def write_training_log(log: Sequence[EpochLog], path: PathLike) -> None:
    rows = [
        (entry.epoch, f"{entry.mean_loss:.10g}", f"{entry.validation_accuracy:.6f}", f"{entry.train_accuracy:.6f}",
         entry.loss_evaluations)
        for entry in log
    ]
    write_csv(path, ("epoch", "mean_loss", "validation_accuracy", "train_accuracy", "loss_evaluations"), rows)


# ---------------------------------------------------------------------------
# Workbooks
# ---------------------------------------------------------------------------


def add_metadata_sheet(
    wb,
    *,
    filename: str,
    sheet_titles: Sequence[str],
    item_count: int = 0,
    sources: Sequence[str] = (),
) -> None:
    """Append a **Metadata** sheet describing where the report came from."""
    ws = wb.create_sheet(title="Metadata")
    label_font = Font(bold=True)
    value_alignment = Alignment(horizontal="left")

    title_cell = ws.cell(row=1, column=1, value="graf-qa")
    title_cell.font = Font(bold=True, size=14)
    ws.cell(row=2, column=1, value="Metrics Report").font = Font(bold=True, size=12)

    rows: List[Tuple[str, Any]] = [
        ("Generated on", datetime.now(timezone.utc).strftime("%Y-%m-%d %H:%M UTC")),
        ("Format", "XLSX"),
        ("File name", filename),
        ("Data sheets", ", ".join(sheet_titles)),
        ("Items", item_count),
    ]
    rows.extend(("Source", source) for source in sources)

    for index, (label, value) in enumerate(rows, start=4):
        ws.cell(row=index, column=1, value=label).font = label_font
        ws.cell(row=index, column=2, value=value).alignment = value_alignment

    ws.column_dimensions["A"].width = 22
    ws.column_dimensions["B"].width = 60


def write_metrics_xlsx(
    path: PathLike,
    sheets: Mapping[str, Tuple[Row, Sequence[Row]]],
    *,
    item_count: int = 0,
    sources: Sequence[str] = (),
) -> None:
    """One styled sheet per ``title -> (header, rows)`` plus a Metadata sheet."""
    if Workbook is None:
        raise RuntimeError("XLSX reports are not available - openpyxl is not installed")
    if not sheets:
        raise ValueError("no sheets to write")

    wb = Workbook()
    first = True
    for title, (header, rows) in sheets.items():
        ws = wb.active if first else wb.create_sheet()
        ws.title = title[:31]
        first = False
        for column, name in enumerate(header, start=1):
            cell = ws.cell(row=1, column=column, value=name)
            cell.font = Font(bold=True, color="FFFFFF")
            cell.fill = PatternFill(start_color="366092", end_color="366092", fill_type="solid")
            cell.alignment = Alignment(horizontal="center")
        for row_number, row in enumerate(rows, start=2):
            for column, value in enumerate(row, start=1):
                ws.cell(row=row_number, column=column, value=value)
        for column in range(1, len(header) + 1):
            ws.column_dimensions[get_column_letter(column)].width = 20

    target = Path(path)
    add_metadata_sheet(
        wb,
        filename=target.name,
        sheet_titles=[title[:31] for title in sheets],
        item_count=item_count,
        sources=sources,
    )
    target.parent.mkdir(parents=True, exist_ok=True)
    wb.save(target)
    logger.info("Wrote workbook %s", target)


__all__ = [
    "PredictionSchema",
    "add_metadata_sheet",
    "load_predictions",
    "prediction_record",
    "render_csv",
    "render_summary",
    "write_csv",
    "write_metrics_xlsx",
    "write_predictions",
    "write_summary",
    "write_training_log",
]
