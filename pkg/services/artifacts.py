"""
Run Artifacts
ECHL v1 logits tables, their CSV mirror, JSON run documents and the
per-run directory layout
"""

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np

from data import defaults
from services.errors import ArtifactFormatError, ConfigError, ShapeError, SplitMissingError

logger = logging.getLogger(__name__)

ECHL_MAGIC = b'ECHL'
ECHL_VERSION = 1
_HEADER = np.dtype([('magic', 'S4'), ('version', '<u4'), ('n_rows', '<u4'), ('num_labels', '<u4')])


def echl_row_dtype(num_labels: int) -> np.dtype:
    """Packed little-endian row layout of an ECHL v1 table"""
    return np.dtype([
        ('node_id', '<u8'),
        ('species_id', '<u8'),
        ('logits', '<f4', (num_labels,)),
        ('labels', 'u1', (num_labels,)),
    ])


@dataclass(frozen=True, eq=False)
class LogitsTable:
    """One split's exported rows: node id, species id, f32 logits, u8 labels"""

    node_id: np.ndarray
    species_id: np.ndarray
    logits: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        node_id = np.asarray(self.node_id, dtype=np.uint64).reshape(-1)
        species_id = np.asarray(self.species_id, dtype=np.uint64).reshape(-1)
        logits = np.asarray(self.logits, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.uint8)
        if logits.ndim != 2 or labels.shape != logits.shape:
            raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
        if not node_id.size == species_id.size == logits.shape[0]:
            raise ShapeError("node_id, species_id and logits disagree on the row count")
        for name, value in (('node_id', node_id), ('species_id', species_id),
                            ('logits', logits), ('labels', labels)):
            object.__setattr__(self, name, value)

    @property
    def num_rows(self) -> int:
        return int(self.logits.shape[0])

    @property
    def num_labels(self) -> int:
        return int(self.logits.shape[1])

    def equals(self, other: 'LogitsTable') -> bool:
        """Bit-exact equality of every column"""
        return (self.logits.shape == other.logits.shape
                and np.array_equal(self.node_id, other.node_id)
                and np.array_equal(self.species_id, other.species_id)
                and self.logits.tobytes() == other.logits.tobytes()
                and np.array_equal(self.labels, other.labels))

    def __repr__(self):
        return f'<LogitsTable rows={self.num_rows} K={self.num_labels}>'


# ================================================
# ECHL v1
# ================================================

def write_echl(table: LogitsTable, path) -> None:
    header = np.zeros(1, dtype=_HEADER)
    header[0] = (ECHL_MAGIC, ECHL_VERSION, table.num_rows, table.num_labels)
    rows = np.zeros(table.num_rows, dtype=echl_row_dtype(table.num_labels))
    rows['node_id'] = table.node_id
    rows['species_id'] = table.species_id
    rows['logits'] = table.logits
    rows['labels'] = table.labels
    with open(path, 'wb') as handle:
        handle.write(header.tobytes())
        handle.write(rows.tobytes())


def read_echl(path) -> LogitsTable:
    """
    Read an ECHL v1 file

    Raises:
        ArtifactFormatError: bad magic, unsupported version, wrong length
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise ArtifactFormatError(f"cannot read {path}: {e}")
    if len(raw) < _HEADER.itemsize:
        raise ArtifactFormatError(f"{path}: file shorter than the ECHL header")
    header = np.frombuffer(raw, dtype=_HEADER, count=1)[0]
    if bytes(header['magic']) != ECHL_MAGIC:
        raise ArtifactFormatError(f"{path}: not an ECHL file")
    if int(header['version']) != ECHL_VERSION:
        raise ArtifactFormatError(f"{path}: unsupported ECHL version {int(header['version'])}")
    n_rows, num_labels = int(header['n_rows']), int(header['num_labels'])
    row_dtype = echl_row_dtype(num_labels)
    expected = _HEADER.itemsize + n_rows * row_dtype.itemsize
    if len(raw) != expected:
        raise ArtifactFormatError(f"{path}: expected {expected} bytes for {n_rows} rows, found {len(raw)}")
    if n_rows == 0:
        rows = np.zeros(0, dtype=row_dtype)
    else:
        rows = np.frombuffer(raw, dtype=row_dtype, count=n_rows, offset=_HEADER.itemsize)
    return LogitsTable(rows['node_id'].copy(), rows['species_id'].copy(),
                       rows['logits'].reshape(n_rows, num_labels).copy(),
                       rows['labels'].reshape(n_rows, num_labels).copy())


def write_logits_csv(table: LogitsTable, path) -> None:
    """CSV mirror of an ECHL table; 9 significant digits reproduce every f32 logit"""
    k = table.num_labels
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(['node_id', 'species_id'] + [f'logit_{i}' for i in range(k)] + [f'label_{i}' for i in range(k)])
        for n in range(table.num_rows):
            writer.writerow([int(table.node_id[n]), int(table.species_id[n])]
                            + [f'{float(v):.9g}' for v in table.logits[n]]
                            + [int(v) for v in table.labels[n]])


def read_logits_csv(path) -> LogitsTable:
    try:
        with open(path, newline='') as handle:
            reader = csv.reader(handle)
            header = next(reader)
            rows = list(reader)
    except (OSError, StopIteration) as e:
        raise ArtifactFormatError(f"cannot read logits CSV {path}: {e}")
    k = (len(header) - 2) // 2
    if len(header) != 2 + 2 * k or header[:2] != ['node_id', 'species_id']:
        raise ArtifactFormatError(f"{path}: unexpected header")
    try:
        node_id = np.array([int(r[0]) for r in rows], dtype=np.uint64)
        species_id = np.array([int(r[1]) for r in rows], dtype=np.uint64)
        logits = np.array([[float(v) for v in r[2:2 + k]] for r in rows], dtype=np.float32).reshape(-1, k)
        labels = np.array([[int(v) for v in r[2 + k:]] for r in rows], dtype=np.uint8).reshape(-1, k)
    except (ValueError, IndexError) as e:
        raise ArtifactFormatError(f"{path}: malformed row: {e}")
    return LogitsTable(node_id, species_id, logits, labels)


# ================================================
# JSON & CSV DOCUMENTS
# ================================================

def clean_json(value: Any) -> Any:
    """Recursively convert numpy scalars/arrays and map NaN/inf to None"""
    if isinstance(value, dict):
        return {str(k): clean_json(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [clean_json(v) for v in value]
    if isinstance(value, np.ndarray):
        return clean_json(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_json(doc: Dict[str, Any], path) -> None:
    Path(path).write_text(json.dumps(clean_json(doc), indent=2, sort_keys=True) + '\n')


def read_json(path) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ArtifactFormatError(f"cannot read {path}: {e}")


def write_rows_csv(rows: Iterable[Dict[str, Any]], path, columns: Optional[List[str]] = None) -> None:
    """Dict rows as CSV; None/NaN become empty cells"""
    rows = [clean_json(r) for r in rows]
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, 'w', newline='') as handle:
        writer = csv.DictWriter(handle, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: '' if row.get(c) is None else row.get(c) for c in columns})


def read_rows_csv(path) -> List[Dict[str, str]]:
    try:
        with open(path, newline='') as handle:
            return list(csv.DictReader(handle))
    except OSError as e:
        raise ArtifactFormatError(f"cannot read {path}: {e}")


# ================================================
# RUN DIRECTORY
# ================================================

class RunDirectory:
    """One run per directory: args.json, metrics.json, logits_<split>.echl and optional post-hoc files"""

    RUN_FILES = (
        defaults.ARGS_FILE, defaults.METRICS_FILE, defaults.PER_SPECIES_FILE, defaults.HISTORY_FILE,
        defaults.CALIBRATION_FILE, defaults.POSTHOC_FILE, defaults.RELIABILITY_FILE,
        defaults.COOC_FILE, defaults.COOC_SIDECAR,
    ) + tuple(defaults.logits_file(s) for s in defaults.SPLITS)

    def __init__(self, path):
        self.path = Path(path)

    def __truediv__(self, name: str) -> Path:
        return self.path / name

    def prepare(self, force: bool = False) -> 'RunDirectory':
        """Create the directory; a non-empty one needs force (known run files are then removed)"""
        if self.path.exists() and not self.path.is_dir():
            raise ConfigError(f"{self.path} exists and is not a directory")
        if self.path.exists() and any(self.path.iterdir()):
            if not force:
                raise ConfigError(f"{self.path} is not empty; pass --force to overwrite")
            logger.warning(f"Overwriting run directory {self.path}")
            for name in self.RUN_FILES:
                (self.path / name).unlink(missing_ok=True)
        self.path.mkdir(parents=True, exist_ok=True)
        return self

    def exists(self) -> bool:
        return (self.path / defaults.ARGS_FILE).is_file()

    def logits_path(self, split: str) -> Path:
        if split not in defaults.SPLITS:
            raise SplitMissingError(f"Unknown split {split!r}")
        return self.path / defaults.logits_file(split)

    def write_table(self, split: str, table: LogitsTable) -> None:
        write_echl(table, self.logits_path(split))

    def read_table(self, split: str) -> LogitsTable:
        path = self.logits_path(split)
        if not path.is_file():
            raise SplitMissingError(f"{self.path} has no logits for split {split!r}")
        return read_echl(path)

    def args(self) -> Dict[str, Any]:
        return read_json(self.path / defaults.ARGS_FILE)

    def metrics(self) -> Dict[str, Any]:
        return read_json(self.path / defaults.METRICS_FILE)

    def __repr__(self):
        return f'<RunDirectory {self.path}>'
