"""
Run bookkeeping for training stages.

The loss log is written by a background thread that consumes completed step
records in order; the training thread only enqueues. RunSummary collects the
headline metrics of a run for the console and for JSON export.
"""

import json
import logging
import queue
import threading
import time
from pathlib import Path
from typing import Dict, Optional

from .common import PathLike, dump_json, json_line

logger = logging.getLogger(__name__)

_STOP = object()


class LossLogWriter:
    """Append JSONL step records to a file from a background thread."""

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self._queue: 'queue.Queue' = queue.Queue()
        self._error: Optional[BaseException] = None
        self.records_written = 0
        self._file = open(self.path, 'w', encoding='utf-8')
        self._thread = threading.Thread(target=self._drain, name='loss-log-writer', daemon=True)
        self._thread.start()

    @property
    def error(self) -> Optional[BaseException]:
        """The first failure of the writer thread, if any."""
        return self._error

    def _drain(self):
        while True:
            record = self._queue.get()
            if record is _STOP:
                break
            if self._error is not None:
                continue
            try:
                self._file.write(json_line(record) + '\n')
                self.records_written += 1
            except Exception as e:
                logger.error("Loss log %s: write failed: %s", self.path, e)
                self._error = e

    def write(self, record: Dict):
        """
        Queue one step record.

        Raises:
            Exception: the writer thread already failed on an earlier record
        """
        if self._error is not None:
            raise self._error
        self._queue.put(record)

    def close(self, raise_error: bool = True):
        """Flush every queued record and stop the writer thread."""
        self._queue.put(_STOP)
        self._thread.join()
        self._file.close()
        if raise_error and self._error is not None:
            raise self._error

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        # an exception already leaving the block takes precedence
        self.close(raise_error=exc_type is None)
        return False


def read_loss_log(path: PathLike):
    """Read every record of a loss log, in step order."""
    with open(path, encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]


class RunSummary:
    """Track headline metrics of one command run."""

    def __init__(self, title: str):
        """
        Initialize summary tracker.

        Args:
            title: Heading printed above the summary block
        """
        self.title = title
        self.metrics: Dict[str, object] = {}
        self.start_time = time.time()

    def record(self, key: str, value):
        self.metrics[key] = value

    def print_summary(self):
        """Print run results summary."""
        print("\n" + "="*50)
        print(f"{self.title.upper()} SUMMARY")
        print("="*50)
        width = max((len(k) for k in self.metrics), default=0) + 1
        for key, value in self.metrics.items():
            if isinstance(value, float):
                value = f"{value:.6g}"
            print(f"{key + ':':<{width}} {value}")
        print(f"{'elapsed:':<{width}} {time.time() - self.start_time:.3f}s")
        print("="*50 + "\n")

    def export_json(self, filepath: PathLike):
        """
        Export metrics to a JSON file.

        Wall-clock values are left out so reruns produce identical files.

        Args:
            filepath: Path to output JSON file
        """
        dump_json({'title': self.title, 'metrics': self.metrics}, filepath)
        logger.info("Summary exported to %s", filepath)
