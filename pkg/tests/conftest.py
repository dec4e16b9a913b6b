import json

import pytest


@pytest.fixture
def write_jsonl(tmp_path):
    """Write a list of dicts to a JSONL file under tmp_path, return the path."""

    def _write(name, rows):
        path = tmp_path / name
        with open(path, "w", encoding="utf-8") as handle:
            for row in rows:
                handle.write(json.dumps(row) + "\n")
        return path

    return _write


@pytest.fixture
def small_corpus():
    return [
        ("a1", "France", "France is a country in western Europe. Its capital is Paris."),
        ("a2", "Paris", "Paris is the capital and largest city of France."),
        ("a3", "Berlin", "Berlin is the capital of Germany."),
        ("a4", "Europe", "Europe is a continent with many countries."),
        ("a5", "Rhine", "The Rhine is a river flowing through Germany and France."),
    ]
