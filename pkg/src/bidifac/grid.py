"""Bidimensionally linked data: the block grid, its file format and preprocessing.

Indices in the Python API are zero-based. The manifest format and error
messages use one-based row-set / column-set numbers, which is what a person
editing a manifest sees.

Manifest format (``key = value`` per line, ``#`` starts a comment)::

    I = 2
    J = 2
    blocks = x11.csv, x12.csv, x21.csv, x22.csv     # row-major
    row_labels.1 = genes.txt                         # optional, one label per line
    col_labels.2 = cohort2.txt                       # optional

``block.i.j = path`` lines may be used instead of ``blocks``. Block files
are comma- or tab-delimited text (autodetected from the first line), with an
optional header row; ``NA``, ``NaN`` or an empty field marks a missing cell.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .linalg import sigma_mad

MISSING_TOKENS = {"", "NA", "NaN", "nan", "N/A"}


class GridFormatError(ValueError):
    """Raised for malformed manifests, block files or inconsistent block dimensions."""


def _offsets(sizes):
    return np.concatenate([[0], np.cumsum(sizes)]).astype(int)


@dataclass(frozen=True, eq=False)
class MissingMask:
    """Unobserved cells of an ``M x N`` grid, held as a boolean array."""

    missing: np.ndarray
    M: tuple
    N: tuple

    def __post_init__(self):
        arr = np.asarray(self.missing, dtype=bool)
        if arr.shape != (sum(self.M), sum(self.N)):
            raise ValueError(f"mask shape {arr.shape} does not match grid {(sum(self.M), sum(self.N))}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "missing", arr)
        object.__setattr__(self, "M", tuple(int(m) for m in self.M))
        object.__setattr__(self, "N", tuple(int(n) for n in self.N))

    @classmethod
    def empty(cls, M, N):
        return cls(np.zeros((sum(M), sum(N)), dtype=bool), M, N)

    @classmethod
    def from_entries(cls, entries, M, N):
        arr = np.zeros((sum(M), sum(N)), dtype=bool)
        for r, c in entries:
            if not (0 <= r < arr.shape[0] and 0 <= c < arr.shape[1]):
                raise IndexError(f"entry ({r}, {c}) outside grid of shape {arr.shape}")
            arr[r, c] = True
        return cls(arr, M, N)

    @property
    def entries(self) -> set:
        return {(int(r), int(c)) for r, c in zip(*np.nonzero(self.missing))}

    @property
    def count(self) -> int:
        return int(self.missing.sum())

    def __or__(self, other: "MissingMask") -> "MissingMask":
        return MissingMask(self.missing | other.missing, self.M, self.N)

    def full_rows(self) -> np.ndarray:
        """``(M_total, J)`` flags: row ``m`` is missing throughout column-set ``j``."""
        co = _offsets(self.N)
        return np.stack([self.missing[:, co[j]:co[j + 1]].all(axis=1) for j in range(len(self.N))], axis=1)

    def full_cols(self) -> np.ndarray:
        """``(I, N_total)`` flags: column ``n`` is missing throughout row-set ``i``."""
        ro = _offsets(self.M)
        return np.stack([self.missing[ro[i]:ro[i + 1], :].all(axis=0) for i in range(len(self.M))], axis=0)

    def classify(self) -> dict:
        """Split missing cells into ``entry``, ``row``, ``col`` and ``both`` classes.

        A cell is in the ``row`` class when its whole row within its block is
        missing, ``col`` likewise for the column, ``both`` when both hold.
        """
        ro, co = _offsets(self.M), _offsets(self.N)
        row_full = np.zeros_like(self.missing)
        col_full = np.zeros_like(self.missing)
        fr, fc = self.full_rows(), self.full_cols()
        for i in range(len(self.M)):
            for j in range(len(self.N)):
                rs, cs = slice(ro[i], ro[i + 1]), slice(co[j], co[j + 1])
                row_full[rs, cs] = fr[rs, j][:, None]
                col_full[rs, cs] = fc[i, cs][None, :]
        miss = self.missing
        return {
            "entry": miss & ~row_full & ~col_full,
            "row": miss & row_full & ~col_full,
            "col": miss & col_full & ~row_full,
            "both": miss & row_full & col_full,
        }


@dataclass(frozen=True, eq=False)
class LinkedMatrixGrid:
    """An ``I x J`` grid of blocks ``X_ij`` of shape ``M[i] x N[j]``.

    The blocks are stored concatenated in ``data`` (``NaN`` marks missing
    cells). Instances are immutable; transformations return new grids.
    """

    data: np.ndarray
    M: tuple
    N: tuple
    row_labels: tuple | None = None
    col_labels: tuple | None = None

    def __post_init__(self):
        M = tuple(int(m) for m in self.M)
        N = tuple(int(n) for n in self.N)
        if not M or not N or min(M) < 1 or min(N) < 1:
            raise GridFormatError(f"row/column set sizes must be positive, got M={M}, N={N}")
        data = np.array(self.data, dtype=float)
        if data.shape != (sum(M), sum(N)):
            raise GridFormatError(f"data shape {data.shape} does not match M={M}, N={N}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "N", N)
        for name, sizes in (("row_labels", M), ("col_labels", N)):
            labels = getattr(self, name)
            if labels is None:
                continue
            labels = tuple(None if lab is None else tuple(str(x) for x in lab) for lab in labels)
            if len(labels) != len(sizes):
                raise GridFormatError(f"{name} has {len(labels)} sets, expected {len(sizes)}")
            for k, (lab, size) in enumerate(zip(labels, sizes)):
                if lab is not None and len(lab) != size:
                    raise GridFormatError(f"{name} for set {k + 1} has {len(lab)} entries, expected {size}")
            object.__setattr__(self, name, labels)

    @classmethod
    def from_blocks(cls, blocks, row_labels=None, col_labels=None):
        """Build a grid from a nested list ``blocks[i][j]`` of 2-d arrays."""
        I = len(blocks)
        J = len(blocks[0]) if I else 0
        if I == 0 or J == 0 or any(len(row) != J for row in blocks):
            raise GridFormatError("blocks must form a non-empty rectangular I x J nesting")
        arrs = [[np.atleast_2d(np.asarray(b, dtype=float)) for b in row] for row in blocks]
        M = [arrs[i][0].shape[0] for i in range(I)]
        N = [arrs[0][j].shape[1] for j in range(J)]
        for i in range(I):
            for j in range(J):
                r, c = arrs[i][j].shape
                if r != M[i]:
                    raise GridFormatError(
                        f"block ({i + 1},{j + 1}) has {r} rows but row-set {i + 1} has {M[i]} rows"
                    )
                if c != N[j]:
                    raise GridFormatError(
                        f"block ({i + 1},{j + 1}) has {c} columns but column-set {j + 1} has {N[j]} columns"
                    )
        return cls(np.block(arrs), M, N, row_labels, col_labels)

    @property
    def I(self) -> int:
        return len(self.M)

    @property
    def J(self) -> int:
        return len(self.N)

    @property
    def shape(self):
        return self.data.shape

    @property
    def row_offsets(self) -> np.ndarray:
        return _offsets(self.M)

    @property
    def col_offsets(self) -> np.ndarray:
        return _offsets(self.N)

    def row_slice(self, i) -> slice:
        ro = self.row_offsets
        return slice(ro[i], ro[i + 1])

    def col_slice(self, j) -> slice:
        co = self.col_offsets
        return slice(co[j], co[j + 1])

    def block(self, i, j) -> np.ndarray:
        return self.data[self.row_slice(i), self.col_slice(j)]

    @property
    def blocks(self):
        return [[self.block(i, j) for j in range(self.J)] for i in range(self.I)]

    @property
    def mask(self) -> MissingMask:
        return MissingMask(np.isnan(self.data), self.M, self.N)

    @property
    def is_complete(self) -> bool:
        return not np.isnan(self.data).any()

    def with_data(self, data) -> "LinkedMatrixGrid":
        return LinkedMatrixGrid(data, self.M, self.N, self.row_labels, self.col_labels)

    def with_missing(self, mask: MissingMask) -> "LinkedMatrixGrid":
        """Copy of the grid with the cells in ``mask`` set to missing."""
        data = self.data.copy()
        data[mask.missing] = np.nan
        return self.with_data(data)

    def filled(self, value=0.0) -> np.ndarray:
        """Concatenated matrix with missing cells replaced by ``value``."""
        return np.where(np.isnan(self.data), value, self.data)


# ---------------------------------------------------------------------------
# file IO


def _parse_manifest(path):
    entries = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise GridFormatError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            entries[key] = value
    return entries


def _is_number(tok):
    try:
        float(tok)
        return True
    except ValueError:
        return False


def read_block_file(path) -> np.ndarray:
    """Read one delimited block file; missing tokens become ``NaN``."""
    try:
        with open(path, newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise GridFormatError(f"cannot read block file {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise GridFormatError(f"block file {path} is empty")
    delim = "\t" if "\t" in lines[0] else ","
    rows = [[tok.strip() for tok in row] for row in csv.reader(lines, delimiter=delim)]
    if any(tok not in MISSING_TOKENS and not _is_number(tok) for tok in rows[0]):
        rows = rows[1:]
    if not rows:
        raise GridFormatError(f"block file {path} has a header but no data")
    width = len(rows[0])
    out = np.empty((len(rows), width))
    for r, row in enumerate(rows):
        if len(row) != width:
            raise GridFormatError(f"{path}: row {r + 1} has {len(row)} fields, expected {width}")
        for c, tok in enumerate(row):
            if tok in MISSING_TOKENS:
                out[r, c] = np.nan
            else:
                try:
                    out[r, c] = float(tok)
                except ValueError:
                    raise GridFormatError(f"{path}: cannot parse {tok!r} at row {r + 1}, column {c + 1}") from None
    return out


def _read_labels(path):
    with open(path) as fh:
        return [ln.strip() for ln in fh if ln.strip()]


def load_grid(manifest_path) -> LinkedMatrixGrid:
    """Load a grid from a manifest file (see module docstring for the format)."""
    entries = _parse_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    try:
        I, J = int(entries["I"]), int(entries["J"])
    except (KeyError, ValueError) as exc:
        raise GridFormatError(f"{manifest_path}: manifest must define integer I and J") from exc
    if "blocks" in entries:
        paths = [p.strip() for p in entries["blocks"].split(",") if p.strip()]
        if len(paths) != I * J:
            raise GridFormatError(f"{manifest_path}: expected {I * J} block paths, found {len(paths)}")
    else:
        try:
            paths = [entries[f"block.{i + 1}.{j + 1}"] for i in range(I) for j in range(J)]
        except KeyError as exc:
            raise GridFormatError(f"{manifest_path}: missing entry {exc.args[0]}") from exc
    paths = [p if os.path.isabs(p) else os.path.join(base, p) for p in paths]
    blocks = [[read_block_file(paths[i * J + j]) for j in range(J)] for i in range(I)]

    def labels(prefix, count):
        found = [entries.get(f"{prefix}.{k + 1}") for k in range(count)]
        if all(f is None for f in found):
            return None
        return [None if f is None else _read_labels(f if os.path.isabs(f) else os.path.join(base, f)) for f in found]

    return LinkedMatrixGrid.from_blocks(blocks, labels("row_labels", I), labels("col_labels", J))


def format_value(x) -> str:
    return "NA" if np.isnan(x) else format(float(x), ".17g")


def write_matrix(path, X, delimiter=","):
    with open(path, "w") as fh:
        for row in np.atleast_2d(X):
            fh.write(delimiter.join(format_value(v) for v in row))
            fh.write("\n")


def save_grid(grid: LinkedMatrixGrid, directory, prefix="block") -> str:
    """Write ``grid`` as a manifest plus one CSV per block; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    lines = [f"I = {grid.I}", f"J = {grid.J}"]
    for i in range(grid.I):
        for j in range(grid.J):
            name = f"{prefix}_{i + 1}_{j + 1}.csv"
            write_matrix(os.path.join(directory, name), grid.block(i, j))
            lines.append(f"block.{i + 1}.{j + 1} = {name}")
    for attr, key in (("row_labels", "row_labels"), ("col_labels", "col_labels")):
        labels = getattr(grid, attr)
        if labels is None:
            continue
        for k, lab in enumerate(labels):
            if lab is None:
                continue
            name = f"{key}_{k + 1}.txt"
            with open(os.path.join(directory, name), "w") as fh:
                fh.write("".join(f"{x}\n" for x in lab))
            lines.append(f"{key}.{k + 1} = {name}")
    manifest = os.path.join(directory, "manifest.txt")
    with open(manifest, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class PreprocessReport:
    """Centers and scale factors applied to each block.

    ``centers[i][j]`` is a scalar (block mode) or a per-row vector (row
    mode). ``scales[i][j]`` is a scalar for ``mad``/``var`` and a per-row
    vector shared across the row-set for ``rowsd``.
    """

    method: str
    centers: list = field(default_factory=list)
    scales: list = field(default_factory=list)


def center_blocks(grid: LinkedMatrixGrid, mode="block", empty_rows="error"):
    """Subtract block means (``mode='block'``) or per-row means within each block (``'row'``).

    Means use observed entries only. In row mode a row with no observed
    entries raises unless ``empty_rows='block-mean'``, in which case the
    mean of the block's observed entries is used for it.
    """
    if mode not in ("block", "row"):
        raise ValueError(f"unknown centering mode {mode!r}")
    data = grid.data.copy()
    centers = []
    for i in range(grid.I):
        row_c = []
        for j in range(grid.J):
            rs, cs = grid.row_slice(i), grid.col_slice(j)
            blk = data[rs, cs]
            obs = ~np.isnan(blk)
            if not obs.any():
                raise ValueError(f"block ({i + 1},{j + 1}) has no observed entries")
            if mode == "block":
                c = float(np.nanmean(blk))
                data[rs, cs] = blk - c
            else:
                counts = obs.sum(axis=1)
                empty = np.nonzero(counts == 0)[0]
                if empty.size and empty_rows != "block-mean":
                    raise ValueError(
                        f"block ({i + 1},{j + 1}) rows {(empty + 1).tolist()} have no observed entries"
                    )
                sums = np.where(obs, blk, 0.0).sum(axis=1)
                c = np.where(counts > 0, sums / np.maximum(counts, 1), np.nanmean(blk))
                data[rs, cs] = blk - c[:, None]
            row_c.append(c)
        centers.append(row_c)
    return grid.with_data(data), PreprocessReport(f"center:{mode}", centers=centers)


def scale_blocks(grid: LinkedMatrixGrid, mode="mad"):
    """Rescale blocks so residual noise is on a unit scale.

    ``mad``: divide each block by :func:`~bidifac.linalg.sigma_mad` (missing
    cells count as zero for the estimate). ``var``: divide by the standard
    deviation of the block's observed entries. ``rowsd``: divide each row of
    a row-set, concatenated across column-sets, by its standard deviation.
    Standard deviations use ``ddof=1``.
    """
    if mode not in ("mad", "var", "rowsd"):
        raise ValueError(f"unknown scaling mode {mode!r}")
    data = grid.data.copy()
    scales = []
    if mode == "rowsd":
        bad = []
        for i in range(grid.I):
            rs = grid.row_slice(i)
            sd = np.nanstd(data[rs, :], axis=1, ddof=1)
            zero = np.nonzero(~(sd > 0))[0]
            bad.extend((i + 1, int(r) + 1) for r in zero)
            if not zero.size:
                data[rs, :] /= sd[:, None]
            scales.append([sd] * grid.J)
        if bad:
            raise ValueError(f"zero standard deviation in (row-set, row) {bad}")
        return grid.with_data(data), PreprocessReport("scale:rowsd", scales=scales)

    bad = []
    for i in range(grid.I):
        row_s = []
        for j in range(grid.J):
            rs, cs = grid.row_slice(i), grid.col_slice(j)
            blk = data[rs, cs]
            if mode == "mad":
                try:
                    s = sigma_mad(np.where(np.isnan(blk), 0.0, blk))
                except ValueError:
                    s = 0.0
            else:
                s = float(np.nanstd(blk, ddof=1))
            if not s > 0:
                bad.append((i + 1, j + 1))
            else:
                data[rs, cs] = blk / s
            row_s.append(s)
        scales.append(row_s)
    if bad:
        raise ValueError(f"zero spread in blocks {bad}")
    return grid.with_data(data), PreprocessReport(f"scale:{mode}", scales=scales)


def apply_preprocess(grid: LinkedMatrixGrid, report: PreprocessReport) -> LinkedMatrixGrid:
    """Apply the centers or scales recorded in ``report`` to another grid of the same shape."""
    data = grid.data.copy()
    centering = report.method.startswith("center")
    values = report.centers if centering else report.scales
    for i in range(grid.I):
        for j in range(grid.J):
            rs, cs = grid.row_slice(i), grid.col_slice(j)
            v = np.asarray(values[i][j], dtype=float)
            v = v[:, None] if v.ndim == 1 else v
            data[rs, cs] = data[rs, cs] - v if centering else data[rs, cs] / v
    return grid.with_data(data)


def toy_manifest(name="toy2x2") -> str:
    """Path of a bundled example manifest (``toy2x2`` or ``toy1x1``)."""
    path = os.path.join(os.path.dirname(__file__), "data", name, "manifest.txt")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no bundled dataset named {name!r}")
    return path
