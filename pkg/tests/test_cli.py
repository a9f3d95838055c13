"""
Command-line surface: synth, train, eval, export-csv, calibrate, cooc, report and sweep
"""

import hashlib
import json

import pytest
from click.testing import CliRunner

from app import cli
from data import defaults
from services.artifacts import read_echl, read_logits_csv

TRAIN_FLAGS = ['--hid', '8', '--layers', '2', '--epochs', '3', '--dropout', '0', '--lr', '0.01']


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def invoke(*args):
    return CliRunner().invoke(cli, [str(a) for a in args])


@pytest.fixture(autouse=True)
def serial(monkeypatch):
    monkeypatch.delenv(defaults.NUM_THREADS_ENV, raising=False)


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / 'data'
    result = invoke('synth', '--preset', 'tiny', '--seed', 3, '--out', out)
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture
def run_dir(tmp_path, dataset):
    out = tmp_path / 'run'
    result = invoke('train', '--data', dataset, *TRAIN_FLAGS, '--out', out)
    assert result.exit_code == 0, result.output
    return out


class TestSynth:

    def test_deterministic_files(self, tmp_path, dataset):
        again = tmp_path / 'again'
        assert invoke('synth', '--preset', 'tiny', '--seed', 3, '--out', again).exit_code == 0
        for name in (defaults.NODES_FILE, defaults.EDGES_FILE):
            assert digest(dataset / name) == digest(again / name)
        doc = json.loads((dataset / defaults.SYNTH_FILE).read_text())
        assert doc['seed'] == 3 and doc['preset'] == 'tiny'

    def test_flags_override_preset(self, tmp_path):
        out = tmp_path / 'data'
        assert invoke('synth', '--preset', 'tiny', '--labels', 3, '--out', out).exit_code == 0
        header = (out / defaults.NODES_FILE).read_text().splitlines()[1].split('\t')
        assert len(header[-1]) == 3

    def test_out_of_range_signal(self, tmp_path):
        assert invoke('synth', '--signal', 2, '--out', tmp_path / 'data').exit_code == 2

    def test_refuses_non_empty(self, dataset):
        assert invoke('synth', '--preset', 'tiny', '--out', dataset).exit_code == 2
        assert invoke('synth', '--preset', 'tiny', '--out', dataset, '--force').exit_code == 0


class TestTrainAndEval:

    def test_run_files(self, run_dir):
        for name in (defaults.ARGS_FILE, defaults.METRICS_FILE, defaults.HISTORY_FILE, defaults.PER_SPECIES_FILE):
            assert (run_dir / name).is_file()
        for split in defaults.SPLITS:
            assert read_echl(run_dir / defaults.logits_file(split)).num_labels == 6
        args = json.loads((run_dir / defaults.ARGS_FILE).read_text())
        assert args['hid'] == 8 and args['layers'] == 2 and args['model'] == 'sage'

    def test_eval_check(self, run_dir):
        result = invoke('eval', '--run', run_dir, '--split', 'test', '--check')
        assert result.exit_code == 0, result.output
        doc = json.loads(result.stdout)
        metrics = json.loads((run_dir / defaults.METRICS_FILE).read_text())
        assert doc['mean_auc'] == metrics['test_auc']

    def test_eval_check_detects_edit(self, run_dir):
        path = run_dir / defaults.METRICS_FILE
        metrics = json.loads(path.read_text())
        metrics['val_auc'] = -1.0
        path.write_text(json.dumps(metrics))
        assert invoke('eval', '--run', run_dir, '--split', 'valid', '--check').exit_code == 1

    def test_bad_layers(self, tmp_path, dataset):
        assert invoke('train', '--data', dataset, '--layers', 0, '--out', tmp_path / 'run').exit_code == 2

    def test_refuses_non_empty(self, dataset, run_dir):
        assert invoke('train', '--data', dataset, *TRAIN_FLAGS, '--out', run_dir).exit_code == 2
        assert invoke('train', '--data', dataset, *TRAIN_FLAGS, '--out', run_dir, '--force').exit_code == 0

    def test_missing_logits(self, run_dir):
        (run_dir / defaults.logits_file('valid')).unlink()
        assert invoke('eval', '--run', run_dir, '--split', 'valid').exit_code == 1

    def test_export_csv(self, run_dir, tmp_path):
        out = tmp_path / 'csv'
        assert invoke('export-csv', '--run', run_dir, '--split', 'test', '--out', out).exit_code == 0
        table = read_logits_csv(out / 'logits_test.csv')
        assert table.equals(read_echl(run_dir / defaults.logits_file('test')))
        assert not (out / 'logits_valid.csv').exists()


class TestPosthocCommands:

    def test_calibrate(self, run_dir):
        result = invoke('calibrate', '--run', run_dir, '--mode', 'global', '--smooth-lambda', '0.1')
        assert result.exit_code == 0, result.output
        report = json.loads(result.stdout)
        assert report['mode'] == 'global' and report['smooth_lambda'] == 0.1
        for name in (defaults.CALIBRATION_FILE, defaults.POSTHOC_FILE, defaults.RELIABILITY_FILE, defaults.COOC_FILE):
            assert (run_dir / name).is_file()

    def test_calibrate_bad_lambda(self, run_dir):
        assert invoke('calibrate', '--run', run_dir, '--smooth-lambda', 'lots').exit_code == 2

    def test_cooc(self, dataset, tmp_path):
        result = invoke('cooc', '--data', dataset, '--out', tmp_path / 'cooc')
        assert result.exit_code == 0, result.output
        stats = json.loads(result.stdout)
        assert stats['num_labels'] == 6 and stats['variant'] == 'conditional'
        assert (tmp_path / 'cooc' / defaults.COOC_FILE).is_file()

    def test_report(self, run_dir, tmp_path):
        out = tmp_path / 'report'
        result = invoke('report', run_dir, '--out', out)
        assert result.exit_code == 0, result.output
        assert (out / defaults.REPORT_FILE).is_file()
        assert (out / defaults.REPORT_PLOT).is_file()

    def test_report_without_runs(self, tmp_path):
        assert invoke('report', '--out', tmp_path / 'report').exit_code == 2
        assert invoke('report', tmp_path, '--out', tmp_path / 'report').exit_code == 2

    def test_unexpected_failure_is_logged(self, run_dir, tmp_path, monkeypatch, caplog):
        def broken(runs, out_dir):
            raise RuntimeError('disk on fire')

        monkeypatch.setattr('app.write_report', broken)
        result = invoke('report', run_dir, '--out', tmp_path / 'report')
        assert result.exit_code == 1
        assert 'Unexpected failure in report_command' in caplog.text
        assert 'disk on fire' in caplog.text


class TestSweep:

    def test_seeds(self, dataset, tmp_path):
        out = tmp_path / 'sweep'
        result = invoke('sweep', '--data', dataset, *TRAIN_FLAGS, '--seeds', '1,2', '--out', out)
        assert result.exit_code == 0, result.output
        assert (out / 'sage_sum' / 'seed1' / defaults.ARGS_FILE).is_file()
        assert (out / 'sage_sum' / 'seed2' / defaults.ARGS_FILE).is_file()
        assert (out / 'report' / defaults.REPORT_FILE).is_file()

    def test_bad_seeds(self, dataset, tmp_path):
        assert invoke('sweep', '--data', dataset, '--seeds', 'a,b', '--out', tmp_path / 'sweep').exit_code == 2

    @pytest.mark.slow
    def test_ablation_grid(self, tmp_path):
        data = tmp_path / 'data'
        assert invoke('synth', '--preset', 'desk', '--seed', 1, '--out', data).exit_code == 0
        out = tmp_path / 'ablation'
        result = invoke('sweep', '--data', data, '--ablation', '--epochs', 60, '--lr', '0.005', '--out', out)
        assert result.exit_code == 0, result.output
        doc = json.loads(result.stdout)
        assert len(doc['runs']) == len(defaults.ABLATION_GRID) * len(defaults.ABLATION_SEEDS)
        assert doc['ablation']['ordering_holds'] is not None
