"""ICD-10 code handling: syntactic validation, chapter lookup, vocabulary indexing.

Codes are one uppercase letter followed by 2 or 3 digits ("I21", "F110").
Chapter membership is decided by the 3-character prefix against the 22
bundled chapter ranges. A :class:`Vocabulary` assigns dense indices 1..V to a
fixed code set; index 0 is the PAD sentinel and never maps to a code.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Sequence


class CodeError(ValueError):
    """Raised for strings that are not syntactically valid ICD-10 codes."""


class ChapterError(LookupError):
    """Raised when a code falls outside every chapter range."""


class VocabularyError(KeyError):
    """Raised for out-of-vocabulary codes or invalid vocabulary indices."""


@dataclass(frozen=True, order=True)
class Code:
    """A validated ICD-10 code in canonical uppercase form."""

    text: str

    def __post_init__(self) -> None:
        _validate_code_text(self.text)

    def __str__(self) -> str:
        return self.text


def _validate_code_text(text: str) -> None:
    if not isinstance(text, str):
        raise CodeError(f"code must be a string, got {type(text).__name__}")
    if len(text) not in (3, 4):
        raise CodeError(f"code {text!r} must have 3 or 4 characters, has {len(text)}")
    head = text[0]
    if not ("A" <= head <= "Z"):
        raise CodeError(f"code {text!r} must start with an uppercase letter, found {head!r}")
    for ch in text[1:]:
        if not ch.isdigit():
            raise CodeError(f"code {text!r} must end in digits, found {ch!r}")


def parse_code(text: str) -> Code:
    """Parse and canonicalize a code string (lowercase letters are folded up)."""
    if isinstance(text, Code):
        return text
    if not isinstance(text, str):
        raise CodeError(f"code must be a string, got {type(text).__name__}")
    return Code(text.strip().upper())


@dataclass(frozen=True)
class Chapter:
    """One of the 22 chapters, defined by inclusive 3-character code ranges."""

    index: int
    name: str
    ranges: tuple[tuple[str, str], ...]

    def contains(self, code: Code) -> bool:
        prefix = code.text[:3]
        return any(start <= prefix <= end for start, end in self.ranges)


NUM_CHAPTERS = 22


def load_chapter_table(path=None) -> tuple[Chapter, ...]:
    """Load the chapter table from a CSV file (bundled table by default).

    The CSV must have a header row with columns chapter_index, name,
    range_start, range_end. Multiple rows with the same chapter_index merge
    into one chapter with several ranges.
    """
    if path is None:
        source = resources.files("ucdcoder.data").joinpath("icd10_chapters.csv")
        text = source.read_text(encoding="utf-8")
        rows = list(csv.DictReader(text.splitlines()))
    else:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError("chapter table is empty")
    required = {"chapter_index", "name", "range_start", "range_end"}
    missing = required - set(rows[0])
    if missing:
        raise ValueError(f"chapter table missing columns: {sorted(missing)}")

    merged: dict[int, tuple[str, list[tuple[str, str]]]] = {}
    for row in rows:
        idx = int(row["chapter_index"])
        start, end = row["range_start"].strip().upper(), row["range_end"].strip().upper()
        if start > end:
            raise ValueError(f"chapter {idx}: range start {start} exceeds end {end}")
        name, ranges = merged.setdefault(idx, (row["name"].strip(), []))
        ranges.append((start, end))
    chapters = tuple(
        Chapter(index=idx, name=name, ranges=tuple(sorted(ranges)))
        for idx, (name, ranges) in sorted(merged.items())
    )
    _check_disjoint(chapters)
    return chapters


def _check_disjoint(chapters: Sequence[Chapter]) -> None:
    spans = sorted(
        (start, end, ch.index) for ch in chapters for start, end in ch.ranges
    )
    for (s1, e1, i1), (s2, e2, i2) in zip(spans, spans[1:]):
        if s2 <= e1:
            raise ValueError(
                f"chapter ranges overlap: chapter {i1} [{s1},{e1}] and chapter {i2} [{s2},{e2}]"
            )


_BUNDLED_CHAPTERS: tuple[Chapter, ...] | None = None


def default_chapters() -> tuple[Chapter, ...]:
    global _BUNDLED_CHAPTERS
    if _BUNDLED_CHAPTERS is None:
        _BUNDLED_CHAPTERS = load_chapter_table()
    return _BUNDLED_CHAPTERS


def chapter_of(code: Code, chapters: Sequence[Chapter] | None = None) -> Chapter:
    """Return the unique chapter whose range contains ``code``."""
    code = parse_code(code) if isinstance(code, str) else code
    for chapter in chapters if chapters is not None else default_chapters():
        if chapter.contains(code):
            return chapter
    raise ChapterError(f"code {code.text} is not assigned to any chapter")


class Vocabulary:
    """Immutable code<->index mapping; indices run 1..V, 0 is the PAD sentinel."""

    PAD = 0

    def __init__(self, codes: Iterable[Code | str]):
        parsed = sorted({parse_code(c) for c in codes})
        if not parsed:
            raise VocabularyError("cannot build a vocabulary from an empty collection")
        self._codes: tuple[Code, ...] = tuple(parsed)
        self._index = {code: i + 1 for i, code in enumerate(self._codes)}

    @property
    def size(self) -> int:
        return len(self._codes)

    def __len__(self) -> int:
        return len(self._codes)

    def __contains__(self, code: Code | str) -> bool:
        try:
            return parse_code(code) in self._index
        except CodeError:
            return False

    def __iter__(self):
        return iter(self._codes)

    def index_of(self, code: Code | str) -> int:
        code = parse_code(code)
        try:
            return self._index[code]
        except KeyError:
            raise VocabularyError(f"out-of-vocabulary code {code.text}") from None

    def code_at(self, index: int) -> Code:
        if index == self.PAD:
            raise VocabularyError("index 0 is the PAD sentinel, not a code")
        if not 1 <= index <= self.size:
            raise VocabularyError(f"index {index} outside [1, {self.size}]")
        return self._codes[index - 1]

    @property
    def codes(self) -> tuple[Code, ...]:
        return self._codes

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._codes == other._codes

    def __hash__(self) -> int:
        return hash(self._codes)

    def __repr__(self) -> str:
        return f"Vocabulary(V={self.size})"


def build_vocabulary(codes: Iterable[Code | str]) -> Vocabulary:
    """Deduplicate, sort lexicographically, and index a code collection from 1."""
    return Vocabulary(codes)
