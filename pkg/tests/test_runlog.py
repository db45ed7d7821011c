'''
Unit tests for the background loss-log writer and run summaries.
'''

import json
import time

import pytest

from scripts.altalign.common import NumericalError
from scripts.altalign.runlog import LossLogWriter, RunSummary, read_loss_log


def _wait_for_error(writer, timeout=5.0):
    '''Poll until the writer thread has recorded a failure.'''
    deadline = time.monotonic() + timeout
    while writer.error is None and time.monotonic() < deadline:
        time.sleep(0.01)
    return writer.error


# -------------------------------------------------------------------------------------------------
# LossLogWriter
# -------------------------------------------------------------------------------------------------


@pytest.mark.unit
class TestLossLogWriter:
    '''Test suite for LossLogWriter.'''

    def test_records_written_in_order(self, tmp_path):
        path = tmp_path / 'loss.jsonl'
        with LossLogWriter(path) as writer:
            for step in range(1, 101):
                writer.write({'step': step, 'loss': 1.0 / step})
        assert writer.records_written == 100
        assert [r['step'] for r in read_loss_log(path)] == list(range(1, 101))

    def test_write_failure_surfaces_on_next_write(self, tmp_path):
        writer = LossLogWriter(tmp_path / 'loss.jsonl')
        writer.write({'step': 1, 'loss': object()})
        assert isinstance(_wait_for_error(writer), TypeError)
        with pytest.raises(TypeError):
            writer.write({'step': 2, 'loss': 0.5})
        writer.close(raise_error=False)

    def test_write_failure_raised_on_clean_exit(self, tmp_path):
        with pytest.raises(TypeError):
            with LossLogWriter(tmp_path / 'loss.jsonl') as writer:
                writer.write({'step': 1, 'loss': object()})

    def test_block_exception_is_not_replaced(self, tmp_path):
        with pytest.raises(NumericalError, match='step 3'):
            with LossLogWriter(tmp_path / 'loss.jsonl') as writer:
                writer.write({'step': 1, 'loss': object()})
                _wait_for_error(writer)
                raise NumericalError('non-finite loss', 3)

    def test_records_after_failure_are_dropped(self, tmp_path):
        path = tmp_path / 'loss.jsonl'
        writer = LossLogWriter(path)
        writer.write({'step': 1, 'loss': 0.5})
        writer.write({'step': 2, 'loss': object()})
        _wait_for_error(writer)
        writer.close(raise_error=False)
        assert writer.records_written == 1
        assert read_loss_log(path) == [{'loss': 0.5, 'step': 1}]


# -------------------------------------------------------------------------------------------------
# RunSummary
# -------------------------------------------------------------------------------------------------


@pytest.mark.unit
class TestRunSummary:
    '''Test suite for RunSummary.'''

    def test_export_leaves_out_wall_clock(self, tmp_path):
        summary = RunSummary('distill')
        summary.record('steps', 5)
        summary.record('final_loss', 0.25)
        summary.export_json(tmp_path / 'summary.json')
        document = json.loads((tmp_path / 'summary.json').read_text())
        assert document == {'title': 'distill', 'metrics': {'steps': 5, 'final_loss': 0.25}}

    def test_print_summary_block(self, capsys):
        summary = RunSummary('contrast')
        summary.record('temperature', 0.0123456789)
        summary.print_summary()
        out = capsys.readouterr().out
        assert 'CONTRAST SUMMARY' in out
        assert 'temperature: 0.0123457' in out
        assert 'elapsed:' in out
