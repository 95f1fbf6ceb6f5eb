"""
Validation of records read back from disk.
"""

import json
import logging
from pathlib import Path

from pydantic import BaseModel, ValidationError

from ..errors import ReportFileError

logger = logging.getLogger(__name__)


def validate_record[T: BaseModel](
    line: str,
    model_class: type[T],
    source: Path | str = "<memory>",
    line_no: int | None = None,
) -> T:
    """
    Parse one JSON line into a model.

    Raises:
        ReportFileError: the line is not valid JSON or does not match the model
            (names the file and line)
    """
    where = f"{source}:{line_no}" if line_no is not None else str(source)
    try:
        record = model_class.model_validate_json(line)
        logger.debug(f"Validated {model_class.__name__} record at {where}")
        return record
    except ValidationError as ve:
        logger.error(f"{model_class.__name__} validation failed at {where}: {ve}")
        raise ReportFileError(f"Invalid {model_class.__name__} record at {where}: {ve}") from ve


def read_jsonl[T: BaseModel](path: Path, model_class: type[T]) -> list[T]:
    """
    Validate every non-empty line of a JSON-lines file.

    Raises:
        ReportFileError: missing file or any invalid line
    """
    if not path.is_file():
        raise ReportFileError(f"Missing report file: {path}")
    records = []
    with path.open(encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if line.strip():
                records.append(validate_record(line, model_class, path, line_no))
    return records


def read_json[T: BaseModel](path: Path, model_class: type[T]) -> T:
    """Validate a single-document JSON file."""
    if not path.is_file():
        raise ReportFileError(f"Missing report file: {path}")
    try:
        text = path.read_text(encoding="utf-8")
        json.loads(text)
    except (OSError, json.JSONDecodeError) as e:
        raise ReportFileError(f"Corrupt report file {path}: {e}") from e
    return validate_record(text, model_class, path)
