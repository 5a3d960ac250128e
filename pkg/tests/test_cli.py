import json
import os

import pytest

from vvstream.cli import cli
from vvstream.pipeline import open_input
from vvstream.sessionlog import SessionLog, read_session_log

from test_report import session_records


def invoke(runner, app, *args):
    return runner.invoke(cli, list(map(str, args)), obj=app)


class TestGenerate:
    def test_writes_sequences_and_manifest(self, runner, app, scene_script, tmp_path):
        out = tmp_path / 'capture'
        result = invoke(runner, app, 'generate', scene_script, '--out', out)
        assert result.exit_code == 0, result.output
        assert f'24 frames written to {out}' in result.output
        for cid in range(3):
            assert len(os.listdir(out / f'camera_{cid}')) == 8
        truth = json.loads((out / 'ground_truth.json').read_text())
        assert truth['frames'] == 8 and truth['fps'] == 8
        assert set(truth['master_from_sub']) == {'0', '1', '2'}
        run = json.loads((out / 'run_config.json').read_text())
        assert run['command'] == 'generate' and run['arguments']['seed'] == 3

    def test_manifest_reads_back(self, runner, app, scene_script, tmp_path):
        out = tmp_path / 'capture'
        invoke(runner, app, 'generate', scene_script, '--out', out, '--frames', 2)
        source = open_input(out / 'manifest.json')
        assert source.kind == 'manifest'
        assert sorted(source.sources) == [0, 1, 2]
        assert len(list(source.sources[0])) == 2

    def test_seed_override(self, runner, app, scene_script, tmp_path):
        out = tmp_path / 'capture'
        invoke(runner, app, 'generate', scene_script, '--out', out, '--frames', 1, '--seed', 11)
        assert json.loads((out / 'run_config.json').read_text())['arguments']['seed'] == 11

    def test_bad_script_is_a_data_error(self, runner, app, tmp_path):
        script = tmp_path / 'bad.json'
        script.write_text('{"cameras": []}')
        result = invoke(runner, app, 'generate', script, '--out', tmp_path / 'out')
        assert result.exit_code == 2
        assert 'cameras' in result.output

    def test_missing_option_is_a_usage_error(self, runner, app, scene_script):
        assert invoke(runner, app, 'generate', scene_script).exit_code == 1

    def test_missing_file_is_a_usage_error(self, runner, app, tmp_path):
        assert invoke(runner, app, 'generate', tmp_path / 'absent.json', '--out', tmp_path).exit_code == 1


class TestTraceCheck:
    def test_bandwidth(self, runner, app, tmp_path):
        path = tmp_path / 'bw.csv'
        path.write_text('time_s,mbps\n0,5\n1,10\n')
        result = invoke(runner, app, 'trace-check', path)
        assert result.exit_code == 0
        assert '2 points over 1 s, mean 7.500 Mbps' in result.output

    def test_viewport(self, runner, app, tmp_path):
        path = tmp_path / 'head.txt'
        path.write_text('0 0 0 1.6 0 0 0\n500000 0.1 0 1.6 0.2 0 0\n')
        result = invoke(runner, app, 'trace-check', path, '--kind', 'viewport')
        assert '2 viewport samples over 0.5 s' in result.output

    def test_bad_trace(self, runner, app, tmp_path):
        path = tmp_path / 'bw.csv'
        path.write_text('0,5\n2,5\n1,5\n')
        result = invoke(runner, app, 'trace-check', path)
        assert result.exit_code == 2
        assert 'increasing' in result.output


class TestReport:
    def test_tables(self, runner, app, tmp_path):
        log_path = tmp_path / 'session.jsonl'
        with SessionLog(log_path) as out:
            for record in session_records().records:
                out.log_event(**record)
        result = invoke(runner, app, 'report', log_path, '--out', tmp_path / 'tables')
        assert result.exit_code == 0, result.output
        assert sum(line.endswith('.csv') for line in result.output.splitlines()) == 4
        assert (tmp_path / 'tables' / 'latency.csv').exists()


@pytest.mark.slow
class TestStream:
    def test_session_outputs(self, runner, app, scene_script, tmp_path):
        out = tmp_path / 'run'
        result = invoke(runner, app, 'stream', scene_script, '--out', out)
        assert result.exit_code == 0, result.output
        assert '2 chunks streamed' in result.output
        lines = (out / 'decisions.tsv').read_text().splitlines()
        assert len(lines) == 3
        assert len(read_session_log(out / 'session.jsonl'))
        assert json.loads((out / 'run_config.json').read_text())['config']['frames_per_chunk'] == 4


class TestConfigOverlay:
    def test_bad_config_file(self, runner, app, scene_script, tmp_path):
        config = tmp_path / 'cfg.json'
        config.write_text('{"fps": ')
        result = invoke(runner, app, 'stream', scene_script, '--out', tmp_path / 'run', '--config', config)
        assert result.exit_code == 2
        assert 'cfg.json:1' in result.output

    def test_invalid_setting(self, runner, app, scene_script, tmp_path):
        config = tmp_path / 'cfg.json'
        config.write_text('{"frames_per_chunk": 0}')
        result = invoke(runner, app, 'stream', scene_script, '--out', tmp_path / 'run', '--config', config)
        assert result.exit_code == 2
