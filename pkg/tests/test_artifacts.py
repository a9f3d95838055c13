"""
ECHL logits tables, the CSV mirror, JSON documents and run directories
"""

import json

import numpy as np
import pytest

from services.artifacts import (ECHL_VERSION, LogitsTable, RunDirectory, clean_json, echl_row_dtype,
                                read_echl, read_logits_csv, read_rows_csv, write_echl, write_json,
                                write_logits_csv, write_rows_csv)
from services.errors import ArtifactFormatError, ConfigError, ShapeError, SplitMissingError


def make_table(rows=5, labels=3, seed=42):
    rng = np.random.default_rng(seed)
    return LogitsTable(
        node_id=np.arange(rows, dtype=np.uint64) * 7 + 2 ** 40,
        species_id=rng.integers(0, 3, size=rows),
        logits=rng.normal(scale=10.0, size=(rows, labels)).astype(np.float32),
        labels=rng.integers(0, 2, size=(rows, labels)),
    )


class TestEchl:

    def test_round_trip_is_bit_exact(self, tmp_path):
        table = make_table()
        write_echl(table, tmp_path / 'logits_test.echl')
        assert read_echl(tmp_path / 'logits_test.echl').equals(table)

    def test_file_layout(self, tmp_path):
        table = make_table(rows=4, labels=2)
        path = tmp_path / 'logits_test.echl'
        write_echl(table, path)
        raw = path.read_bytes()
        assert raw[:4] == b'ECHL'
        assert int.from_bytes(raw[4:8], 'little') == ECHL_VERSION
        assert int.from_bytes(raw[8:12], 'little') == 4
        assert int.from_bytes(raw[12:16], 'little') == 2
        assert len(raw) == 16 + 4 * (8 + 8 + 4 * 2 + 2)
        assert echl_row_dtype(2).itemsize == 26

    def test_empty_table(self, tmp_path):
        table = LogitsTable(np.zeros(0), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)))
        write_echl(table, tmp_path / 'empty.echl')
        loaded = read_echl(tmp_path / 'empty.echl')
        assert loaded.num_rows == 0 and loaded.num_labels == 3

    def test_bad_magic(self, tmp_path):
        path = tmp_path / 'logits_test.echl'
        write_echl(make_table(), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b'ECHX'
        path.write_bytes(bytes(raw))
        with pytest.raises(ArtifactFormatError):
            read_echl(path)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / 'logits_test.echl'
        write_echl(make_table(), path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (2).to_bytes(4, 'little')
        path.write_bytes(bytes(raw))
        with pytest.raises(ArtifactFormatError):
            read_echl(path)

    @pytest.mark.parametrize('cut', [3, 20, 1])
    def test_truncated(self, tmp_path, cut):
        path = tmp_path / 'logits_test.echl'
        write_echl(make_table(), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:cut] if cut < 16 else raw[:-cut])
        with pytest.raises(ArtifactFormatError):
            read_echl(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / 'logits_test.echl'
        write_echl(make_table(), path)
        path.write_bytes(path.read_bytes() + b'\0')
        with pytest.raises(ArtifactFormatError):
            read_echl(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ArtifactFormatError):
            read_echl(tmp_path / 'absent.echl')

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            LogitsTable(np.arange(2), np.arange(2), np.zeros((2, 3)), np.zeros((2, 2)))
        with pytest.raises(ShapeError):
            LogitsTable(np.arange(3), np.arange(2), np.zeros((2, 3)), np.zeros((2, 3)))


class TestLogitsCsv:

    def test_mirror_reproduces_f32(self, tmp_path):
        table = make_table(rows=20, labels=4)
        write_logits_csv(table, tmp_path / 'logits_test.csv')
        assert read_logits_csv(tmp_path / 'logits_test.csv').equals(table)

    def test_header(self, tmp_path):
        write_logits_csv(make_table(rows=1, labels=2), tmp_path / 'logits.csv')
        header = (tmp_path / 'logits.csv').read_text().splitlines()[0]
        assert header == 'node_id,species_id,logit_0,logit_1,label_0,label_1'

    def test_malformed(self, tmp_path):
        (tmp_path / 'logits.csv').write_text('node_id,species_id,logit_0,label_0\n1,0,abc,1\n')
        with pytest.raises(ArtifactFormatError):
            read_logits_csv(tmp_path / 'logits.csv')


class TestDocuments:

    def test_clean_json(self):
        doc = clean_json({'a': np.float32(0.5), 'b': np.array([1, 2]), 'c': float('nan'), 3: (np.inf, 1)})
        assert doc == {'a': 0.5, 'b': [1, 2], 'c': None, '3': [None, 1]}
        json.dumps(doc, allow_nan=False)

    def test_json_round_trip(self, tmp_path):
        write_json({'auc': np.float64(0.75), 'ece': float('nan')}, tmp_path / 'metrics.json')
        assert json.loads((tmp_path / 'metrics.json').read_text()) == {'auc': 0.75, 'ece': None}

    def test_rows_csv(self, tmp_path):
        write_rows_csv([{'species': 1, 'auc': 0.5}, {'species': 2, 'auc': float('nan')}], tmp_path / 'rows.csv')
        rows = read_rows_csv(tmp_path / 'rows.csv')
        assert rows == [{'species': '1', 'auc': '0.5'}, {'species': '2', 'auc': ''}]


class TestRunDirectory:

    def test_prepare_creates(self, tmp_path):
        run = RunDirectory(tmp_path / 'runs' / 'a').prepare()
        assert run.path.is_dir()
        assert not run.exists()

    def test_non_empty_needs_force(self, tmp_path):
        run = RunDirectory(tmp_path / 'run').prepare()
        (run / 'args.json').write_text('{}')
        (run / 'notes.txt').write_text('keep')
        with pytest.raises(ConfigError):
            run.prepare()
        run.prepare(force=True)
        assert not (run / 'args.json').exists()
        assert (run / 'notes.txt').exists()

    def test_file_in_the_way(self, tmp_path):
        (tmp_path / 'run').write_text('')
        with pytest.raises(ConfigError):
            RunDirectory(tmp_path / 'run').prepare()

    def test_tables(self, tmp_path):
        run = RunDirectory(tmp_path / 'run').prepare()
        table = make_table()
        run.write_table('valid', table)
        assert run.read_table('valid').equals(table)
        with pytest.raises(SplitMissingError):
            run.read_table('test')
        with pytest.raises(SplitMissingError):
            run.logits_path('holdout')
