"""Shared fixtures."""

import logging

import pytest

from kvsim.config import clear_settings_cache
from kvsim.logger import ROOT_LOGGER_NAME


@pytest.fixture(autouse=True)
def isolated_settings(monkeypatch):
    """Fresh settings and an unconfigured kvsim logger for every test."""
    for name in ("KVSIM_LOG", "KVSIM_LOG_LEVEL", "KVSIM_LOG_FILE", "KVSIM_MAX_WORKERS"):
        monkeypatch.delenv(name, raising=False)
    clear_settings_cache()
    yield
    clear_settings_cache()
    root = logging.getLogger(ROOT_LOGGER_NAME)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    root.setLevel(logging.NOTSET)
    root.propagate = True
