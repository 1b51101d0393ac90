"""JSON-lines readers and writers for datasets, retrieval tasks and metrics."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator

from .contrastive import ContrastiveInstance
from .errors import InputError

TASK_FILES = {
    "text": "text_pairs.jsonl",
    "caption": "caption_pairs.jsonl",
    "longform": "longform_pairs.jsonl",
}
ANSWER_KEY = "answer_key.jsonl"


def dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps(rec) + "\n")


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    """(line number, record) pairs; blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def read_jsonl(path: str | Path) -> list[dict]:
    return [rec for _, rec in iter_jsonl(path)]


def read_instances(path: str | Path, d_patch: int, split: str | None = None) -> list[ContrastiveInstance]:
    out = []
    for lineno, rec in iter_jsonl(path):
        try:
            inst = ContrastiveInstance.from_json(rec, d_patch)
        except InputError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from None
        if split is None or inst.split == split:
            out.append(inst)
    return out


class JsonlWriter:
    """Append-style metrics writer."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8", newline="\n")

    def write(self, record: dict) -> None:
        self._fh.write(dumps(record) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "JsonlWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
