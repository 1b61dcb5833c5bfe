from __future__ import annotations

from contextlib import contextmanager
import json
import os
from pathlib import Path
import tempfile
from typing import Any, Iterator, TextIO

import numpy as np

from utils.errors import DataError


def encode_array(arr: np.ndarray) -> dict[str, Any]:
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": arr.ravel().tolist()}


def decode_array(payload: dict[str, Any], name: str = "array") -> np.ndarray:
    try:
        shape = tuple(int(n) for n in payload["shape"])
        data = np.asarray(payload["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed array entry {name!r}: {exc}") from exc
    if data.size != int(np.prod(shape)):
        raise DataError(f"array entry {name!r} has {data.size} values for shape {shape}")
    return data.reshape(shape)


@contextmanager
def atomic_open(path: str | Path) -> Iterator[TextIO]:
    """Write to a temporary sibling and rename it over ``path`` on success."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            yield handle
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, target)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise


def read_json(path: str | Path) -> dict[str, Any] | None:
    source = Path(path)
    if not source.exists():
        return None
    try:
        return json.loads(source.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{source}: invalid JSON ({exc})") from exc


def write_json(path: str | Path, payload: dict[str, Any]) -> None:
    content = json.dumps(payload, ensure_ascii=False, indent=2)
    with atomic_open(path) as handle:
        handle.write(content)
