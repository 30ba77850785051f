"""Shared fixtures: acceptance reporting and a cache for long training runs."""

import hashlib
import json
import os
import pickle
from pathlib import Path

import pytest

import b3c

_REPORT: dict[int, tuple[bool, str]] = {}

# Training results depend only on the library, not on the CLI/harness layer.
_LIB_ROOT = Path(b3c.__file__).parent
_CACHE_DIR = Path(os.environ.get("B3C_ACCEPT_CACHE", Path(__file__).resolve().parent.parent / ".acceptance-cache"))


def _library_digest() -> str:
    h = hashlib.sha256()
    for f in sorted(_LIB_ROOT.rglob("*.py")):
        if "harness" in f.relative_to(_LIB_ROOT).parts:
            continue
        h.update(str(f.relative_to(_LIB_ROOT)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


class RunCache:
    """Pickle results of expensive runs, keyed by library source and parameters."""

    def __init__(self, root: Path):
        self.root = root
        self.digest = _library_digest()

    def get(self, name: str, params: dict, compute):
        key = hashlib.sha256(json.dumps(params, sort_keys=True, default=repr).encode()).hexdigest()[:16]
        path = self.root / self.digest / f"{name}-{key}.pkl"
        if path.exists():
            with path.open("rb") as fh:
                return pickle.load(fh)
        value = compute()
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        with tmp.open("wb") as fh:
            pickle.dump(value, fh)
        tmp.replace(path)
        return value


@pytest.fixture(scope="session")
def run_cache():
    if os.environ.get("B3C_NO_CACHE"):
        import tempfile

        return RunCache(Path(tempfile.mkdtemp(prefix="b3c-cache-")))
    return RunCache(_CACHE_DIR)


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records and prints one PASS/FAIL line."""

    def record(n: int, ok: bool, detail: str) -> bool:
        _REPORT[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_REPORT):
        ok, detail = _REPORT[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
