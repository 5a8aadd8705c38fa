"""Sequence datasets with missing values, their file formats, and conversion
to circuit evidence.

JSONL: one ``{"id": ..., "slices": [{"u": 0, "x": 2}, ...]}`` object per line,
``null`` for missing cells. An optional first line ``{"schema": [{"name",
"cardinality"}, ...]}`` fixes cardinalities. Lines of the form
``{"inputs": [...], "observations": [...]}`` (sampler output) are also read.

CSV: long format with columns ``sequence_id, t, var, value`` (t is 1-based,
an empty value is missing).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import IndexOutOfRange, ParseError, SchemaViolation
from .rspn import slice_name

Slice = Mapping[str, Optional[int]]


@dataclass(frozen=True, eq=False)
class SequenceDataset:
    schema: Mapping[str, int]
    sequences: Sequence[Sequence[Slice]]
    ids: Sequence = field(default=())

    def __post_init__(self):
        if not self.ids:
            object.__setattr__(self, "ids", [str(i) for i in range(len(self.sequences))])
        if len(self.ids) != len(self.sequences):
            raise SchemaViolation("one id per sequence is required")
        for sid, seq in zip(self.ids, self.sequences):
            if len(seq) < 2:
                raise SchemaViolation(f"sequence {sid!r} has length {len(seq)}; at least 2 slices are required")
            for t, cells in enumerate(seq, start=1):
                for var, value in cells.items():
                    card = self.schema.get(var)
                    if card is None:
                        raise SchemaViolation(f"sequence {sid!r}, t={t}: unknown variable {var!r}")
                    if value is None:
                        continue
                    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or not 0 <= value < card:
                        raise SchemaViolation(
                            f"sequence {sid!r}, t={t}, {var}={value!r}: outside domain of size {card}")

    def __len__(self):
        return len(self.sequences)

    @property
    def lengths(self) -> List[int]:
        return [len(s) for s in self.sequences]

    def subset(self, indices) -> "SequenceDataset":
        return SequenceDataset(self.schema, [self.sequences[i] for i in indices], [self.ids[i] for i in indices])

    def by_length(self) -> Dict[int, List[int]]:
        groups: Dict[int, List[int]] = {}
        for i, seq in enumerate(self.sequences):
            groups.setdefault(len(seq), []).append(i)
        return dict(sorted(groups.items()))

    def columns(self, indices: Sequence[int], length: int) -> Dict[str, np.ndarray]:
        """Slice-tagged index columns for equal-length rows; -1 marks missing."""
        cols = {slice_name(v, t): np.full(len(indices), -1, dtype=np.intp)
                for t in range(1, length + 1) for v in self.schema}
        for r, i in enumerate(indices):
            for t, cells in enumerate(self.sequences[i], start=1):
                for var, value in cells.items():
                    if value is not None:
                        cols[slice_name(var, t)][r] = value
        return cols

    def with_missing(self, variables: Sequence[str], fraction: float, seed: int) -> "SequenceDataset":
        """Copy with a random ``fraction`` of the named variables' cells set missing."""
        rng = np.random.default_rng(seed)
        seqs = []
        for seq in self.sequences:
            new = []
            for cells in seq:
                cells = dict(cells)
                for v in variables:
                    if rng.random() < fraction:
                        cells[v] = None
                new.append(cells)
            seqs.append(new)
        return SequenceDataset(self.schema, seqs, list(self.ids))

    @classmethod
    def from_samples(cls, samples, n_inputs: int, n_obs: int, input_name="u", obs_name="x") -> "SequenceDataset":
        seqs = [[{input_name: u, obs_name: x} for u, x in zip(s.inputs, s.observations)] for s in samples]
        return cls({input_name: n_inputs, obs_name: n_obs}, seqs)


def to_evidence(dataset: SequenceDataset, row: int) -> Dict[str, Optional[int]]:
    """Evidence for one sequence; missing cells are explicitly marginalized.

    Latent variables never appear in a dataset and so stay marginalized.
    """
    if not 0 <= row < len(dataset):
        raise IndexOutOfRange(f"row {row} outside dataset of size {len(dataset)}")
    ev = {}
    for t, cells in enumerate(dataset.sequences[row], start=1):
        for var in dataset.schema:
            ev[slice_name(var, t)] = cells.get(var)
    return ev


def split(dataset: SequenceDataset, train_frac: float, seed: int) -> Tuple[SequenceDataset, SequenceDataset]:
    """Seeded shuffle, then split by sequence."""
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must lie strictly between 0 and 1")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(train_frac * n + 1e-9))
    if n >= 2:
        n_train = min(max(n_train, 1), n - 1)
    return dataset.subset(perm[:n_train].tolist()), dataset.subset(perm[n_train:].tolist())


# ---------------------------------------------------------------------------
# File formats


def _format(path, fmt):
    if fmt:
        return fmt
    suffix = Path(path).suffix.lower()
    if suffix == ".csv":
        return "csv"
    if suffix in (".jsonl", ".json", ".ndjson"):
        return "jsonl"
    raise ValueError(f"cannot infer dataset format from {path!r}")


def _infer_schema(sequences) -> Dict[str, int]:
    schema: Dict[str, int] = {}
    for seq in sequences:
        for cells in seq:
            for var, value in cells.items():
                schema.setdefault(var, 1)
                if isinstance(value, int) and value >= schema[var]:
                    schema[var] = value + 1
    return schema


def _cell(value, where):
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaViolation(f"{where}: value {value!r} is not an integer index")
    if value < 0:
        raise SchemaViolation(f"{where}: negative value {value}")
    return value


def _load_jsonl(path, schema):
    sequences, ids = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg}, column {exc.colno})", lineno) from None
            if not isinstance(rec, dict):
                raise ParseError("expected a JSON object", lineno)
            if "schema" in rec:
                if schema is None:
                    schema = {v["name"]: int(v["cardinality"]) for v in rec["schema"]}
                continue
            if "slices" in rec:
                slices = rec["slices"]
                if not isinstance(slices, list) or not all(isinstance(s, dict) for s in slices):
                    raise ParseError("'slices' must be a list of objects", lineno)
                sid = rec.get("id", str(len(sequences)))
            elif "inputs" in rec and "observations" in rec:
                if len(rec["inputs"]) != len(rec["observations"]):
                    raise ParseError("inputs and observations differ in length", lineno)
                slices = [{"u": u, "x": x} for u, x in zip(rec["inputs"], rec["observations"])]
                sid = rec.get("id", str(len(sequences)))
            else:
                raise ParseError("expected 'slices' or 'inputs'/'observations'", lineno)
            seq = [{k: _cell(v, f"line {lineno}, t={t}, {k}") for k, v in s.items()}
                   for t, s in enumerate(slices, start=1)]
            sequences.append(seq)
            ids.append(sid)
    return schema, sequences, ids


def _load_csv(path, schema):
    order: List[str] = []
    cells: Dict[str, Dict[int, Dict[str, Optional[int]]]] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            return schema, [], []
        if [h.strip() for h in header] != ["sequence_id", "t", "var", "value"]:
            raise ParseError("header must be sequence_id,t,var,value", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", lineno)
            sid, t, var, value = (x.strip() for x in row)
            try:
                t = int(t)
                value = int(value) if value != "" else None
            except ValueError:
                raise ParseError("t and value must be integers", lineno) from None
            if t < 1:
                raise ParseError(f"t must be 1-based, got {t}", lineno)
            value = _cell(value, f"line {lineno}, sequence {sid!r}, t={t}, {var}")
            if sid not in cells:
                order.append(sid)
                cells[sid] = {}
            cells[sid].setdefault(t, {})[var] = value
    sequences = []
    for sid in order:
        ts = sorted(cells[sid])
        if ts != list(range(1, len(ts) + 1)):
            raise ParseError(f"sequence {sid!r} has non-contiguous time steps {ts}")
        sequences.append([cells[sid][t] for t in ts])
    return schema, sequences, order


def load(path, format: Optional[str] = None, schema: Optional[Mapping[str, int]] = None) -> SequenceDataset:
    """Read and validate a dataset; without a schema, cardinalities are inferred."""
    fmt = _format(path, format)
    loader = _load_csv if fmt == "csv" else _load_jsonl
    schema, sequences, ids = loader(path, dict(schema) if schema else None)
    if schema is None:
        schema = _infer_schema(sequences)
    for seq in sequences:
        for cells in seq:
            for var in schema:
                cells.setdefault(var, None)
    return SequenceDataset(schema, sequences, ids)


def save(dataset: SequenceDataset, path, format: Optional[str] = None):
    fmt = _format(path, format)
    if fmt == "csv":
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sequence_id", "t", "var", "value"])
            for sid, seq in zip(dataset.ids, dataset.sequences):
                for t, cells in enumerate(seq, start=1):
                    for var in dataset.schema:
                        value = cells.get(var)
                        w.writerow([sid, t, var, "" if value is None else value])
    else:
        with open(path, "w") as f:
            f.write(json.dumps({"schema": [{"name": k, "cardinality": v} for k, v in dataset.schema.items()]}) + "\n")
            for sid, seq in zip(dataset.ids, dataset.sequences):
                slices = [{var: cells.get(var) for var in dataset.schema} for cells in seq]
                f.write(json.dumps({"id": sid, "slices": slices}) + "\n")
