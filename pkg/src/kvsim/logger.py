"""Logging for kvsim: plain or JSON-lines records on stderr, optional log file."""

import json
import logging
import sys
import time
import uuid
from contextlib import contextmanager
from contextvars import ContextVar
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, Optional

ROOT_LOGGER_NAME = "kvsim"

# Id of the operation (run, sweep, ...) the current code is executing under
_current_operation: ContextVar[Optional[str]] = ContextVar("kvsim_operation", default=None)


class StructuredFormatter(logging.Formatter):
    """One JSON object per record, with operation id and `extra_fields` merged in."""

    def format(self, record: logging.LogRecord) -> str:
        payload: Dict[str, Any] = {
            "timestamp": datetime.fromtimestamp(record.created, timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "source": f"{record.module}.{record.funcName}:{record.lineno}",
        }
        operation = getattr(record, "operation_id", None) or _current_operation.get()
        if operation:
            payload["operation_id"] = operation
        payload.update(getattr(record, "extra_fields", {}))
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str)


class _StderrHandler(logging.StreamHandler):
    """Stream handler bound to whatever sys.stderr is at emit time."""

    @property  # type: ignore[override]
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value) -> None:
        pass


def setup_logging(
    level: Optional[str] = None,
    log_file: Optional[Path] = None,
    structured: Optional[bool] = None,
) -> None:
    """
    Configure the kvsim logger tree.

    Records never reach stdout, which carries command output (schemas, tables).
    Calling this again replaces the previous handlers.

    Args:
        level: Level name; defaults to the settings (KVSIM_LOG / log_level)
        log_file: Also append records to this file
        structured: JSON lines instead of the plain format
    """
    from kvsim.config import get_settings

    settings = get_settings()
    level_name = (level or settings.effective_log_level).upper()
    as_json = settings.structured_logging if structured is None else structured
    formatter = StructuredFormatter() if as_json else logging.Formatter(settings.log_format)

    kvsim_logger = logging.getLogger(ROOT_LOGGER_NAME)
    kvsim_logger.setLevel(level_name)
    kvsim_logger.propagate = False
    for old in list(kvsim_logger.handlers):
        kvsim_logger.removeHandler(old)
        old.close()

    handlers: list[logging.Handler] = [_StderrHandler()]
    target = log_file or settings.log_file
    if target:
        Path(target).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(target, encoding="utf-8"))
    for handler in handlers:
        handler.setFormatter(formatter)
        kvsim_logger.addHandler(handler)

    kvsim_logger.debug(f"Logging at {level_name} ({'json' if as_json else 'plain'})")


def get_logger(name: str) -> logging.Logger:
    """Logger under the kvsim tree; module names already inside it are used as is."""
    if name == ROOT_LOGGER_NAME or name.startswith(f"{ROOT_LOGGER_NAME}."):
        return logging.getLogger(name)
    return logging.getLogger(f"{ROOT_LOGGER_NAME}.{name}")


@contextmanager
def log_operation(operation_name: str, **extra_fields: Any) -> Iterator[Dict[str, Any]]:
    """
    Log the start and end of a long operation under a fresh operation id.

    Every record emitted inside the block carries the id when logs are structured.

    Args:
        operation_name: Short name (run, sweep, resource_sweep)
        **extra_fields: Fields attached to the start and end records

    Yields:
        The operation context: operation_id, operation_name and the extra fields

    Example:
        >>> with log_operation("sweep", points=18):
        ...     sweep_points()
    """
    context: Dict[str, Any] = {
        "operation_id": uuid.uuid4().hex,
        "operation_name": operation_name,
        **extra_fields,
    }
    token = _current_operation.set(context["operation_id"])
    ops_logger = get_logger("operations")
    started = time.perf_counter()
    ops_logger.info(f"{operation_name} started", extra={"extra_fields": context})
    try:
        yield context
    except Exception as e:
        elapsed = time.perf_counter() - started
        ops_logger.error(
            f"{operation_name} failed after {elapsed:.2f}s",
            extra={
                "extra_fields": {
                    **context,
                    "duration_seconds": elapsed,
                    "status": "failed",
                    "error": str(e),
                }
            },
        )
        raise
    else:
        elapsed = time.perf_counter() - started
        ops_logger.info(
            f"{operation_name} finished in {elapsed:.2f}s",
            extra={"extra_fields": {**context, "duration_seconds": elapsed, "status": "success"}},
        )
    finally:
        _current_operation.reset(token)
