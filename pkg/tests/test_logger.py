"""Tests for logging module."""

import json
import logging

import pytest

from kvsim.logger import StructuredFormatter, get_logger, log_operation, setup_logging


class ListHandler(logging.Handler):
    def __init__(self):
        super().__init__()
        self.records = []

    def emit(self, record):
        self.records.append(record)


@pytest.fixture
def captured():
    handler = ListHandler()
    root = logging.getLogger("kvsim")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    yield handler
    root.removeHandler(handler)


def test_get_logger():
    """Test logger creation."""
    logger = get_logger("test_module")
    assert isinstance(logger, logging.Logger)
    assert logger.name == "kvsim.test_module"
    assert get_logger("kvsim.engine").name == "kvsim.engine"


def test_setup_logging():
    """Test logging setup."""
    setup_logging(level="DEBUG")
    logger = logging.getLogger("kvsim")
    assert logger.level == logging.DEBUG
    assert logger.propagate is False
    assert len(logger.handlers) == 1


def test_setup_logging_replaces_handlers():
    """Test that repeated setup does not stack handlers."""
    setup_logging(level="INFO")
    setup_logging(level="INFO")
    assert len(logging.getLogger("kvsim").handlers) == 1


def test_setup_logging_file(tmp_path):
    """Test that a log file is created and written."""
    log_file = tmp_path / "logs" / "kvsim.log"
    setup_logging(level="INFO", log_file=log_file, structured=True)
    get_logger("test").info("hello file")
    for handler in logging.getLogger("kvsim").handlers:
        handler.flush()

    line = log_file.read_text(encoding="utf-8").strip().splitlines()[-1]
    assert json.loads(line)["message"] == "hello file"


def test_structured_formatter():
    """Test that records are formatted as JSON with extra fields."""
    record = logging.LogRecord("kvsim.engine", logging.WARNING, __file__, 10, "x=%d", (3,), None)
    record.extra_fields = {"rate": 4.0}
    data = json.loads(StructuredFormatter().format(record))
    assert data["level"] == "WARNING"
    assert data["logger"] == "kvsim.engine"
    assert data["message"] == "x=3"
    assert data["rate"] == 4.0


def test_log_operation(captured):
    """Test start and completion records of a tracked operation."""
    with log_operation("sweep", points=3) as op:
        get_logger("test").info("inside")

    messages = [r.getMessage() for r in captured.records]
    assert messages[0] == "sweep started"
    assert messages[1] == "inside"
    assert messages[2].startswith("sweep finished in ")
    assert len(messages) == 3
    done = captured.records[-1].extra_fields
    assert done["operation_id"] == op["operation_id"]
    assert done["points"] == 3
    assert done["status"] == "success"


def test_log_operation_failure(captured):
    """Test that a failing operation is logged and the error propagates."""
    with pytest.raises(RuntimeError):
        with log_operation("run"):
            raise RuntimeError("boom")

    failed = captured.records[-1]
    assert failed.levelno == logging.ERROR
    assert failed.getMessage().startswith("run failed after ")
    assert failed.extra_fields["status"] == "failed"
    assert failed.extra_fields["error"] == "boom"
