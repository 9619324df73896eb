"""Death-certificate data model, grid and demographic encodings, dataset files.

A certificate holds a 6-line causal chain (Part I on lines 1-4, ordered
immediate to underlying; Part II on lines 5-6 for contributing conditions),
demographics, and optionally the coded underlying cause.

The grid encoding places line r's codes left to right into row r of a 6 x W
integer matrix of vocabulary indices, right-padded with PAD (0).

Age is categorized into 25 classes: class 0 covers the first 27 days of
life, class 1 the rest of the first year, then 5-year bands (1-4, 5-9, ...)
up to 110+. The band boundaries are a generator convention; only the class
count is architecture-visible.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .icd10 import Code, CodeError, Vocabulary, VocabularyError, parse_code

NUM_LINES = 6
PART_ONE_LINES = 4
GENDER_STATES = 2
AGE_CLASSES = 25
DEFAULT_YEAR_BASE = 2000
DEFAULT_YEAR_STATES = 16
DEFAULT_GRID_WIDTH = 20

REJECT_MARKER = "REJECT"


class CertificateError(ValueError):
    """Raised for structurally invalid certificates or encodings."""


class DatasetFormatError(ValueError):
    """Raised for malformed dataset files; carries line number and field name."""

    def __init__(self, line_number: int, field: str, message: str):
        super().__init__(f"line {line_number}, field {field!r}: {message}")
        self.line_number = line_number
        self.field = field


@dataclass(frozen=True)
class Demographics:
    gender: int  # 1 or 2
    age_class: int  # 0..24
    year: int  # calendar year

    def __post_init__(self) -> None:
        if self.gender not in (1, 2):
            raise CertificateError(f"gender must be 1 or 2, got {self.gender}")
        if not 0 <= self.age_class < AGE_CLASSES:
            raise CertificateError(
                f"age_class must lie in [0, {AGE_CLASSES - 1}], got {self.age_class}"
            )
        if self.year < 0:
            raise CertificateError(f"year must be nonnegative, got {self.year}")


@dataclass(frozen=True)
class CausalChain:
    """Exactly 6 ordered code lines; at least one Part I code present."""

    lines: tuple[tuple[Code, ...], ...]

    def __post_init__(self) -> None:
        if len(self.lines) != NUM_LINES:
            raise CertificateError(f"chain must have {NUM_LINES} lines, got {len(self.lines)}")
        if not any(self.lines[:PART_ONE_LINES]):
            raise CertificateError("chain has no Part I code")

    @property
    def part_one(self) -> tuple[tuple[Code, ...], ...]:
        return self.lines[:PART_ONE_LINES]

    @property
    def part_two(self) -> tuple[tuple[Code, ...], ...]:
        return self.lines[PART_ONE_LINES:]

    def all_codes(self) -> tuple[Code, ...]:
        return tuple(code for line in self.lines for code in line)


def chain_from_lists(lines: Sequence[Sequence[Code | str]]) -> CausalChain:
    """Build a chain from up to 6 lists of codes or code strings."""
    if len(lines) > NUM_LINES:
        raise CertificateError(f"chain may have at most {NUM_LINES} lines, got {len(lines)}")
    padded = list(lines) + [()] * (NUM_LINES - len(lines))
    return CausalChain(tuple(tuple(parse_code(c) for c in line) for line in padded))


@dataclass(frozen=True)
class Certificate:
    id: str
    chain: CausalChain
    demo: Demographics
    label: Code | None = None
    rule_output: str | None = None  # canonical code text or REJECT_MARKER

    def __post_init__(self) -> None:
        if self.rule_output is not None and self.rule_output != REJECT_MARKER:
            parse_code(self.rule_output)

    def with_label(self, label: Code | None) -> "Certificate":
        return replace(self, label=label)


class CodeGrid:
    """A 6 x W matrix of vocabulary indices; PAD (0) fills unused cells."""

    def __init__(self, cells: np.ndarray):
        cells = np.asarray(cells, dtype=np.int64)
        if cells.ndim != 2 or cells.shape[0] != NUM_LINES:
            raise CertificateError(f"grid must be {NUM_LINES} x W, got shape {cells.shape}")
        for r in range(NUM_LINES):
            nz = np.flatnonzero(cells[r])
            if nz.size and (nz[-1] + 1 != nz.size):
                raise CertificateError(f"grid row {r} is not right-padded")
        cells.flags.writeable = False
        self.cells = cells

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, CodeGrid) and np.array_equal(self.cells, other.cells)


def encode_grid(chain: CausalChain, vocab: Vocabulary, width: int = DEFAULT_GRID_WIDTH) -> CodeGrid:
    """Place each line's codes left to right into a 6 x width index grid."""
    if width < 1:
        raise CertificateError(f"grid width must be positive, got {width}")
    cells = np.zeros((NUM_LINES, width), dtype=np.int64)
    for r, line in enumerate(chain.lines):
        if len(line) > width:
            raise CertificateError(
                f"line {r + 1} has {len(line)} codes but the grid width is {width}; "
                f"use a grid width of at least {len(line)}"
            )
        for c, code in enumerate(line):
            try:
                cells[r, c] = vocab.index_of(code)
            except VocabularyError:
                raise VocabularyError(
                    f"out-of-vocabulary code {code.text} on line {r + 1}"
                ) from None
    return CodeGrid(cells)


def decode_grid(grid: CodeGrid, vocab: Vocabulary) -> tuple[tuple[Code, ...], ...]:
    lines = []
    for r in range(NUM_LINES):
        row = grid.cells[r]
        lines.append(tuple(vocab.code_at(int(i)) for i in row[row != 0]))
    return tuple(lines)


def encode_demographics(
    demo: Demographics,
    year_base: int = DEFAULT_YEAR_BASE,
    year_states: int = DEFAULT_YEAR_STATES,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-hot encode (gender, age class, year); each vector has a single 1."""
    offset = demo.year - year_base
    if not 0 <= offset < year_states:
        raise CertificateError(
            f"year {demo.year} outside [{year_base}, {year_base + year_states - 1}]"
        )
    gender = np.zeros(GENDER_STATES)
    gender[demo.gender - 1] = 1.0
    age = np.zeros(AGE_CLASSES)
    age[demo.age_class] = 1.0
    year = np.zeros(year_states)
    year[offset] = 1.0
    return gender, age, year


def demographic_indices(
    demo: Demographics,
    year_base: int = DEFAULT_YEAR_BASE,
    year_states: int = DEFAULT_YEAR_STATES,
) -> tuple[int, int, int]:
    """Category indices (gender-1, age_class, year-year_base) with range checks."""
    gender, age, year = encode_demographics(demo, year_base, year_states)
    return int(np.argmax(gender)), int(np.argmax(age)), int(np.argmax(year))


def encode_dataset(
    certificates: Sequence[Certificate],
    vocab: Vocabulary,
    width: int,
    year_base: int = DEFAULT_YEAR_BASE,
    year_states: int = DEFAULT_YEAR_STATES,
    require_labels: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorize certificates into (grids, demo indices, label indices) arrays.

    Label indices are vocabulary indices (1..V); 0 marks a missing label and
    is only permitted when ``require_labels`` is false.
    """
    n = len(certificates)
    grids = np.zeros((n, NUM_LINES, width), dtype=np.int64)
    demos = np.zeros((n, 3), dtype=np.int64)
    labels = np.zeros(n, dtype=np.int64)
    for i, cert in enumerate(certificates):
        grids[i] = encode_grid(cert.chain, vocab, width).cells
        demos[i] = demographic_indices(cert.demo, year_base, year_states)
        if cert.label is not None:
            labels[i] = vocab.index_of(cert.label)
        elif require_labels:
            raise CertificateError(f"certificate {cert.id} has no label")
    return grids, demos, labels


# Dataset file format: UTF-8, one record per line, tab-separated, header
# required. Field order is normative.
_FIELDS = (
    "id",
    "gender",
    "age_class",
    "year",
    "line_1",
    "line_2",
    "line_3",
    "line_4",
    "line_5",
    "line_6",
    "label",
    "rule_output",
)
_HEADER = "\t".join(_FIELDS)


def write_dataset(certificates: Iterable[Certificate], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_HEADER + "\n")
        for cert in certificates:
            fields = [
                cert.id,
                str(cert.demo.gender),
                str(cert.demo.age_class),
                str(cert.demo.year),
            ]
            fields.extend(" ".join(code.text for code in line) for line in cert.chain.lines)
            fields.append(cert.label.text if cert.label is not None else "")
            fields.append(cert.rule_output if cert.rule_output is not None else "")
            fh.write("\t".join(fields) + "\n")


def read_dataset(path, vocab: Vocabulary | None = None) -> list[Certificate]:
    """Read a dataset file; optionally flag codes absent from ``vocab``.

    Records with out-of-vocabulary codes are retained; one warning names the
    offending codes. Structural problems raise DatasetFormatError with the
    line number and field.
    """
    certificates: list[Certificate] = []
    unknown: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != _HEADER:
            raise DatasetFormatError(1, "header", f"expected {_HEADER!r}")
        for lineno, raw in enumerate(fh, start=2):
            raw = raw.rstrip("\n")
            if not raw:
                continue
            parts = raw.split("\t")
            if len(parts) != len(_FIELDS):
                raise DatasetFormatError(
                    lineno, "record", f"expected {len(_FIELDS)} fields, got {len(parts)}"
                )
            rec = dict(zip(_FIELDS, parts))
            try:
                demo = Demographics(
                    gender=_parse_int(rec, "gender", lineno),
                    age_class=_parse_int(rec, "age_class", lineno),
                    year=_parse_int(rec, "year", lineno),
                )
            except CertificateError as exc:
                raise DatasetFormatError(lineno, "demographics", str(exc)) from None
            lines = []
            for f in _FIELDS[4:10]:
                try:
                    lines.append(tuple(parse_code(tok) for tok in rec[f].split()))
                except CodeError as exc:
                    raise DatasetFormatError(lineno, f, str(exc)) from None
            try:
                chain = CausalChain(tuple(lines))
            except CertificateError as exc:
                raise DatasetFormatError(lineno, "line_1..line_6", str(exc)) from None
            label = None
            if rec["label"]:
                try:
                    label = parse_code(rec["label"])
                except CodeError as exc:
                    raise DatasetFormatError(lineno, "label", str(exc)) from None
            rule_output = None
            if rec["rule_output"]:
                if rec["rule_output"] == REJECT_MARKER:
                    rule_output = REJECT_MARKER
                else:
                    try:
                        rule_output = parse_code(rec["rule_output"]).text
                    except CodeError as exc:
                        raise DatasetFormatError(lineno, "rule_output", str(exc)) from None
            cert = Certificate(rec["id"], chain, demo, label, rule_output)
            if vocab is not None:
                for code in chain.all_codes():
                    if code not in vocab:
                        unknown.add(code.text)
                if label is not None and label not in vocab:
                    unknown.add(label.text)
            certificates.append(cert)
    if unknown:
        warnings.warn(
            f"dataset contains {len(unknown)} code(s) outside the vocabulary: "
            + " ".join(sorted(unknown)),
            stacklevel=2,
        )
    return certificates


def _parse_int(rec: dict, field: str, lineno: int) -> int:
    try:
        return int(rec[field])
    except ValueError:
        raise DatasetFormatError(lineno, field, f"not an integer: {rec[field]!r}") from None
