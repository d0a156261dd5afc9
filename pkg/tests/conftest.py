import json

import pytest


@pytest.fixture
def dataset(tmp_path):
    rows = [
        {"id": "r1", "text": "a very good movie with a funny story", "label": "positive"},
        {"id": "r2", "text": "a terrible and boring film", "label": "negative"},
        {"id": "r3", "text": "i love this great actor", "label": "positive"},
        {"id": "r4", "text": "the plot is slow and bad", "label": "negative"},
    ]
    path = tmp_path / "data.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


KEYWORD_STUB = "keyword:positive:negative:good,great,love,funny,fine,nice,excellent,wonderful"


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
