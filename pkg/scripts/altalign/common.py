"""
Common utilities for altalign commands.

Includes the error hierarchy, logging setup, hashing, deterministic JSON
output, corpus path resolution and the run manifest.
"""

import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

PathLike = Union[str, Path]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

THREADS_ENV = 'ALT_ALIGN_THREADS'
MANIFEST_NAME = 'manifest.json'
RUN_MANIFEST_NAME = 'run_manifest.jsonl'


class AltAlignError(Exception):
    """Base class for failures reported to the user with an exit code."""

    exit_code = EXIT_USAGE


class UsageError(AltAlignError):
    """Bad flags or flag combinations."""

    exit_code = EXIT_USAGE


class DataFormatError(AltAlignError):
    """A dataset, config or checkpoint file is malformed."""

    exit_code = EXIT_DATA

    def __init__(self, message: str, path: Optional[PathLike] = None, line: Optional[int] = None):
        location = ''
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


class ConfigError(DataFormatError):
    """A stage config file has unknown keys or out-of-range values."""


class NumericalError(AltAlignError):
    """A loss, gradient or update became non-finite."""

    exit_code = EXIT_NUMERICAL

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(f"step {step}: {message}" if step is not None else message)
        self.step = step


class FrozenParameterError(AltAlignError):
    """A frozen component changed during training."""

    exit_code = EXIT_NUMERICAL


def setup_logging(verbosity: int = 0):
    """
    Configure root logging for one CLI invocation.

    Args:
        verbosity: 0 for warnings, 1 for info, 2 or more for debug
    """
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(
        level=level,
        stream=sys.stderr,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
        force=True,
    )


def eval_threads() -> int:
    """
    Get the evaluation thread cap from ALT_ALIGN_THREADS.

    Returns:
        Positive thread count (default min(4, cpu count))
    """
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == '':
        return min(4, os.cpu_count() or 1)
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


def sha256_file(path: PathLike) -> str:
    """
    Hash a file's bytes.

    Args:
        path: File to hash

    Returns:
        Hex SHA-256 digest
    """
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def dump_json(obj, path: PathLike):
    """
    Write JSON with sorted keys and a trailing newline, so reruns are byte-identical.

    Args:
        obj: JSON-serializable object
        path: Output file
    """
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(obj, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write('\n')


def json_line(obj) -> str:
    """Serialize one JSONL record deterministically."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(',', ':'))


def resolve_corpus_file(data_paths: Iterable[PathLike], role: str) -> Path:
    """
    Find the file playing `role` among the --data arguments.

    A --data argument is either a corpus directory written by gen-synth, whose
    manifest.json maps roles to file names, or a file path given directly. A
    direct file matches a role when its name equals the manifest default for
    that role.

    Args:
        data_paths: Values of the --data flag
        role: One of 'parallel', 'text_image', 'retrieval', 'classification', 'vocab', 'lexicon'

    Returns:
        Path to the file

    Raises:
        UsageError: no argument supplies the role
    """
    from .data import DEFAULT_FILE_NAMES

    default_name = DEFAULT_FILE_NAMES[role]
    for entry in data_paths:
        entry = Path(entry)
        if entry.is_dir():
            manifest_path = entry / MANIFEST_NAME
            if manifest_path.exists():
                with open(manifest_path, encoding='utf-8') as f:
                    files = json.load(f).get('files', {})
                if role in files:
                    return entry / files[role]
            if (entry / default_name).exists():
                return entry / default_name
        elif entry.name == default_name or entry.stem == role:
            if not entry.exists():
                raise UsageError(f"--data file does not exist: {entry}")
            return entry
    raise UsageError(f"no --data argument provides the {role} file ({default_name})")


def append_run_manifest(out_dir: PathLike, command: str, flags: Dict, seed: Optional[int],
                        inputs: List[PathLike], outputs: List[PathLike]):
    """
    Append one audit record to <out_dir>/run_manifest.jsonl.

    Args:
        out_dir: Directory the command wrote into
        command: Command name
        flags: Parsed flags (JSON-serializable values only)
        seed: Seed used, if any
        inputs: Files read
        outputs: Files written
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        'command': command,
        'flags': flags,
        'seed': seed,
        'inputs': {str(p): sha256_file(p) for p in inputs if Path(p).is_file()},
        'outputs': {os.path.relpath(p, out_dir): sha256_file(p) for p in outputs if Path(p).is_file()},
    }
    with open(out_dir / RUN_MANIFEST_NAME, 'a', encoding='utf-8') as f:
        f.write(json_line(record) + '\n')


def flags_dict(args) -> Dict:
    """Keep the JSON-friendly parsed flags, dropping the bound handler."""
    result = {}
    for key, value in sorted(vars(args).items()):
        if key in ('func',) or callable(value):
            continue
        if isinstance(value, Path):
            value = str(value)
        elif isinstance(value, (list, tuple)):
            value = [str(v) if isinstance(v, Path) else v for v in value]
        result[key] = value
    return result


def print_banner(title: str):
    print(f"\n{'='*60}\n{title}\n{'='*60}")
