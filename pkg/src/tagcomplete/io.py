"""File formats: sparse/dense matrices, models, splits, manifests.

All writers are atomic (temp file + rename) and produce deterministic bytes
for identical inputs; floats are serialized with repr, so every write→read
round-trip is exact.  All readers reject non-finite values and report the
offending line.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, fields

import numpy as np
import scipy.sparse as sp

from .core import (
    FactorModel,
    Hyperparams,
    TagCompleteError,
    TaggingMatrix,
    ValidationError,
)
from .metrics import EvalSplit

MATRIX_HEADER = "%%MatrixMarket matrix coordinate real general"
MODEL_FORMAT = "tagcomplete-model"
SPLIT_FORMAT = "tagcomplete-split"
MANIFEST_FORMAT = "tagcomplete-manifest"
SUPPORTED_VERSIONS = (1,)


class ParseError(TagCompleteError, ValueError):
    """A file failed to parse; the message carries path and line number."""


def _fail(path, line_no, message):
    raise ParseError(f"{path}:{line_no}: {message}")


def atomic_write_text(path, text: str) -> None:
    """Write text to path via a sibling temp file and an atomic rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_sparse_matrix(path) -> sp.csr_matrix:
    """Parse a MatrixMarket coordinate file (1-based indices).

    Duplicate entries are summed.  Malformed headers, short/long entry lists,
    out-of-range indices, non-numeric or non-finite values all raise
    ParseError naming the line.
    """
    with open(path) as handle:
        lines = handle.read().splitlines()
    if not lines:
        _fail(path, 1, "empty file, expected MatrixMarket header")
    header = lines[0].strip().lower().split()
    want = MATRIX_HEADER.lower().split()
    if header != want:
        _fail(path, 1, f"bad header {lines[0].strip()!r}, expected {MATRIX_HEADER!r}")

    size_line = None
    body_start = None
    for idx in range(1, len(lines)):
        stripped = lines[idx].strip()
        if not stripped or stripped.startswith("%"):
            continue
        size_line = (idx + 1, stripped)
        body_start = idx + 1
        break
    if size_line is None:
        _fail(path, len(lines), "missing size line")
    line_no, text = size_line
    parts = text.split()
    if len(parts) != 3:
        _fail(path, line_no, f"size line needs 3 fields, got {len(parts)}")
    try:
        n, m, nnz = (int(p) for p in parts)
    except ValueError:
        _fail(path, line_no, f"non-integer size line {text!r}")
    if n < 0 or m < 0 or nnz < 0:
        _fail(path, line_no, "matrix dimensions must be non-negative")

    rows = np.empty(nnz, dtype=np.int64)
    cols = np.empty(nnz, dtype=np.int64)
    vals = np.empty(nnz, dtype=float)
    seen = 0
    for idx in range(body_start, len(lines)):
        stripped = lines[idx].strip()
        if not stripped or stripped.startswith("%"):
            continue
        line_no = idx + 1
        if seen >= nnz:
            _fail(path, line_no, f"more than the declared {nnz} entries")
        parts = stripped.split()
        if len(parts) != 3:
            _fail(path, line_no, f"entry needs 3 fields, got {len(parts)}")
        try:
            i, j = int(parts[0]), int(parts[1])
            v = float(parts[2])
        except ValueError:
            _fail(path, line_no, f"non-numeric entry {stripped!r}")
        if not (1 <= i <= n and 1 <= j <= m):
            _fail(path, line_no, f"index ({i}, {j}) outside {n}x{m} matrix")
        if not np.isfinite(v):
            _fail(path, line_no, f"non-finite value {parts[2]!r}")
        rows[seen], cols[seen], vals[seen] = i - 1, j - 1, v
        seen += 1
    if seen != nnz:
        _fail(path, len(lines), f"declared {nnz} entries but found {seen}")
    matrix = sp.coo_matrix((vals, (rows, cols)), shape=(n, m)).tocsr()
    matrix.sum_duplicates()
    matrix.sort_indices()
    return matrix


def write_sparse_matrix(path, matrix) -> None:
    """Write in MatrixMarket coordinate format, entries in row-major order."""
    csr = sp.csr_matrix(matrix)
    csr.sum_duplicates()
    csr.sort_indices()
    coo = csr.tocoo()
    out = [MATRIX_HEADER, f"{csr.shape[0]} {csr.shape[1]} {coo.nnz}"]
    for i, j, v in zip(coo.row, coo.col, coo.data):
        out.append(f"{i + 1} {j + 1} {float(v)!r}")
    atomic_write_text(path, "\n".join(out) + "\n")


def read_dense_matrix(path) -> np.ndarray:
    """Parse a CSV matrix, one row per line; a non-numeric first line is
    treated as a header and skipped.  Ragged rows and non-finite values raise
    ParseError naming the line."""
    with open(path) as handle:
        lines = handle.read().splitlines()
    content = [
        (idx + 1, line.strip()) for idx, line in enumerate(lines) if line.strip()
    ]
    if not content:
        _fail(path, 1, "empty file")

    def parse_row(line_no, text):
        cells = [c.strip() for c in text.split(",")]
        try:
            row = [float(c) for c in cells]
        except ValueError:
            return None
        for c, v in zip(cells, row):
            if not np.isfinite(v):
                _fail(path, line_no, f"non-finite value {c!r}")
        return row

    first = parse_row(*content[0])
    start = 0 if first is not None else 1
    if first is None and len(content) == 1:
        _fail(path, content[0][0], "no numeric rows after header")
    rows = []
    width = None
    for line_no, text in content[start:]:
        row = parse_row(line_no, text)
        if row is None:
            _fail(path, line_no, f"non-numeric cell in {text!r}")
        if width is None:
            width = len(row)
        elif len(row) != width:
            _fail(
                path, line_no,
                f"ragged row: {len(row)} cells, expected {width}",
            )
        rows.append(row)
    return np.asarray(rows, dtype=float)


def write_dense_matrix(path, array) -> None:
    arr = np.asarray(array, dtype=float)
    if arr.ndim != 2:
        raise ValidationError(f"dense matrix must be 2-D, got ndim={arr.ndim}")
    lines = [",".join(repr(float(v)) for v in row) for row in arr]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_matrix_auto(path) -> np.ndarray:
    """Dense array from either format: MatrixMarket if the file starts with
    '%%', CSV otherwise."""
    with open(path) as handle:
        head = handle.read(2)
    if head == "%%":
        return read_sparse_matrix(path).toarray()
    return read_dense_matrix(path)


def _sparse_to_lists(matrix) -> dict:
    coo = sp.csr_matrix(matrix).tocoo()
    return {
        "rows": [int(i) for i in coo.row],
        "cols": [int(j) for j in coo.col],
        "values": [float(v) for v in coo.data],
    }


def _sparse_from_lists(payload, shape, path) -> sp.csr_matrix:
    try:
        rows, cols, vals = payload["rows"], payload["cols"], payload["values"]
    except (TypeError, KeyError):
        raise ParseError(f"{path}: sparse block missing rows/cols/values") from None
    if not (len(rows) == len(cols) == len(vals)):
        raise ParseError(f"{path}: sparse block lists have unequal lengths")
    return sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()


def _load_json(path, expected_format) -> dict:
    try:
        with open(path) as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(payload, dict):
        raise ParseError(f"{path}: expected a JSON object")
    if payload.get("format") != expected_format:
        raise ParseError(
            f"{path}: format is {payload.get('format')!r}, "
            f"expected {expected_format!r}"
        )
    if payload.get("version") not in SUPPORTED_VERSIONS:
        raise ParseError(
            f"{path}: unsupported version {payload.get('version')!r}, "
            f"supported: {list(SUPPORTED_VERSIONS)}"
        )
    return payload


@dataclass(frozen=True)
class ModelRecord:
    """A persisted model plus the settings and trace that produced it."""

    model: FactorModel
    hyperparams: Hyperparams
    objective_trace: np.ndarray


def write_model(path, model: FactorModel, hp: Hyperparams, trace=None) -> None:
    payload = {
        "format": MODEL_FORMAT,
        "version": 1,
        "n_images": model.n_images,
        "n_tags": model.n_tags,
        "n_factors": model.n_factors,
        "hyperparams": {f.name: getattr(hp, f.name) for f in fields(hp)},
        "objective_trace": [float(v) for v in (trace if trace is not None else [])],
        "basis": [[float(v) for v in row] for row in model.U],
        "coeffs": _sparse_to_lists(model.V),
        "error": _sparse_to_lists(model.E),
    }
    atomic_write_text(path, json.dumps(payload, indent=1) + "\n")


def read_model(path) -> ModelRecord:
    payload = _load_json(path, MODEL_FORMAT)
    try:
        n, m, k = payload["n_images"], payload["n_tags"], payload["n_factors"]
        basis = np.asarray(payload["basis"], dtype=float)
        hp_dict = payload["hyperparams"]
        trace = np.asarray(payload["objective_trace"], dtype=float)
    except KeyError as exc:
        raise ParseError(f"{path}: missing field {exc}") from None
    if basis.shape != (n, k):
        raise ParseError(
            f"{path}: basis block is {basis.shape}, header says {(n, k)}"
        )
    try:
        hp = Hyperparams(**hp_dict)
    except (TypeError, ValidationError) as exc:
        raise ParseError(f"{path}: bad hyperparams ({exc})") from None
    model = FactorModel(
        U=basis,
        V=_sparse_from_lists(payload.get("coeffs"), (k, m), path),
        E=_sparse_from_lists(payload.get("error"), (n, m), path),
    )
    return ModelRecord(model=model, hyperparams=hp, objective_trace=trace)


def write_split(path, split: EvalSplit) -> None:
    payload = {
        "format": SPLIT_FORMAT,
        "version": 1,
        "n_images": split.observed.n_images,
        "n_tags": split.observed.n_tags,
        "observed": _sparse_to_lists(split.observed.matrix),
        "test_image_ids": list(split.test_image_ids),
        "deleted": [sorted(d) for d in split.deleted],
    }
    atomic_write_text(path, json.dumps(payload, indent=1) + "\n")


def read_split(path) -> EvalSplit:
    payload = _load_json(path, SPLIT_FORMAT)
    try:
        shape = (payload["n_images"], payload["n_tags"])
        observed = TaggingMatrix(
            _sparse_from_lists(payload["observed"], shape, path)
        )
        return EvalSplit(
            observed=observed,
            deleted=tuple(frozenset(d) for d in payload["deleted"]),
            test_image_ids=tuple(payload["test_image_ids"]),
        )
    except KeyError as exc:
        raise ParseError(f"{path}: missing field {exc}") from None
    except ValidationError as exc:
        raise ParseError(f"{path}: invalid split ({exc})") from None


_INT_FIELDS = {
    name
    for name in Hyperparams.field_names()
    if isinstance(getattr(Hyperparams(), name), int)
}


def parse_overrides(path) -> dict:
    """Flat key=value file -> dict of typed hyperparameter overrides.

    Blank lines and lines starting with # are skipped.  Values are coerced to
    the declared type of the named hyperparameter; unknown keys fail.
    """
    overrides = {}
    with open(path) as handle:
        for idx, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                _fail(path, idx, f"expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in Hyperparams.field_names():
                _fail(path, idx, f"unknown hyperparameter {key!r}")
            try:
                overrides[key] = int(value) if key in _INT_FIELDS else float(value)
            except ValueError:
                _fail(path, idx, f"bad value {value!r} for {key}")
    return overrides


@dataclass(frozen=True)
class Manifest:
    """Paths naming a completion run's inputs, plus hyperparameter overrides.

    Relative paths are resolved against the manifest file's directory at read
    time; every referenced file must exist.
    """

    tags_path: str
    features_path: str | None = None
    image_structure_path: str | None = None
    tag_structure_path: str | None = None
    overrides: dict | None = None


def write_manifest(path, manifest: Manifest, overrides_path=None) -> None:
    payload = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "tags": manifest.tags_path,
        "features": manifest.features_path,
        "image_structure": manifest.image_structure_path,
        "tag_structure": manifest.tag_structure_path,
        "overrides": overrides_path,
    }
    atomic_write_text(path, json.dumps(payload, indent=1) + "\n")


def read_manifest(path) -> Manifest:
    payload = _load_json(path, MANIFEST_FORMAT)
    base = os.path.dirname(os.path.abspath(path))

    def resolve(key, required=False):
        value = payload.get(key)
        if value is None:
            if required:
                raise ParseError(f"{path}: missing required path {key!r}")
            return None
        resolved = value if os.path.isabs(value) else os.path.join(base, value)
        if not os.path.exists(resolved):
            raise ParseError(f"{path}: {key} file not found: {resolved}")
        return resolved

    overrides_file = resolve("overrides")
    return Manifest(
        tags_path=resolve("tags", required=True),
        features_path=resolve("features"),
        image_structure_path=resolve("image_structure"),
        tag_structure_path=resolve("tag_structure"),
        overrides=parse_overrides(overrides_file) if overrides_file else None,
    )
