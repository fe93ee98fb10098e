import os

import pytest


@pytest.fixture(autouse=True)
def _single_thread(monkeypatch):
    """Default every test to sequential execution; tests opt in to threads."""
    monkeypatch.setenv("PNP_THREADS", "1")
