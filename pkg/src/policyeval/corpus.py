"""Lexicon tagging of policy-condition text.

A condition is flagged as an education policy when its cleaned text
contains a substring matching any lexicon term. Terms are regular-expression
stems, so ``[Ee]duca`` matches "education" and "educational" alike.
"""

from __future__ import annotations

import csv
import re
from collections import Counter
from dataclasses import dataclass
from importlib import resources

VERBATIM_PATTERNS = (
    "[Ee]duca",
    "[Uu]niversit[y]ies",
    "[Ss]chool",
    "[Pp]edagog",
    "[Tt]eacher",
    "[Pp]roffesor",
    "[Ll]ectur",
    "[Ss]tudent",
    "[Pp]upil",
    "[Cc]lassroom",
    "[Cc]urricul",
    "[Ll]earn",
    "[Ac]adem",
)
# Terms replaced in corrected mode. "[Uu]niversit[y]ies" only matches the
# literal tail "niversityies"; "[Ac]adem" reaches "academic" only through its
# "cadem" substring.
CORRECTIONS = {"[Uu]niversit[y]ies": "[Uu]niversit", "[Ac]adem": "[Aa]cadem"}
MODES = ("verbatim", "corrected")
YEAR_BOUNDS = (1985, 2014)
CSV_FIELDS = ("id", "country", "year", "program_id", "text")

_APOSTROPHES = "'’"


@dataclass(frozen=True)
class PolicyCondition:
    id: str
    country: str
    year: int
    program_id: str
    text: str

    def validate(self, year_bounds=YEAR_BOUNDS) -> None:
        if not self.text.strip():
            raise ValueError(f"condition {self.id}: empty text")
        lo, hi = year_bounds
        if not lo <= self.year <= hi:
            raise ValueError(f"condition {self.id}: year {self.year} outside {lo}-{hi}")


@dataclass(frozen=True)
class EducationLexicon:
    patterns: tuple
    mode: str = "custom"

    def __post_init__(self):
        if not self.patterns:
            raise ValueError("lexicon has no patterns")
        if self.mode == "verbatim" and tuple(self.patterns) != VERBATIM_PATTERNS:
            raise ValueError("verbatim lexicon must hold the published term list exactly")
        object.__setattr__(self, "_compiled", tuple(re.compile(p) for p in self.patterns))

    @classmethod
    def default(cls, mode: str = "corrected") -> "EducationLexicon":
        if mode == "verbatim":
            return cls(VERBATIM_PATTERNS, "verbatim")
        if mode == "corrected":
            return cls(tuple(CORRECTIONS.get(p, p) for p in VERBATIM_PATTERNS), "corrected")
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")

    @classmethod
    def from_file(cls, path) -> "EducationLexicon":
        """One pattern per line; blank lines and ``#`` comments skipped."""
        with open(path, encoding="utf-8") as fh:
            pats = tuple(line.strip() for line in fh
                         if line.strip() and not line.lstrip().startswith("#"))
        mode = "verbatim" if pats == VERBATIM_PATTERNS else "custom"
        return cls(pats, mode)

    def serialize(self) -> str:
        return "|".join(self.patterns)

    def first_match(self, text: str):
        for pat, rx in zip(self.patterns, self._compiled):
            if rx.search(text):
                return pat
        return None


def clean_text(raw: str) -> str:
    """Drop digits and every character other than letters, whitespace,
    apostrophes and hyphens; collapse whitespace runs; trim."""
    kept = []
    for ch in raw:
        if ch.isalpha() or ch in _APOSTROPHES or ch == "-":
            kept.append(ch)
        elif ch.isspace():
            kept.append(" ")
    return " ".join("".join(kept).split())


@dataclass(frozen=True)
class TagResult:
    id: str
    flag: int
    term: str | None


def tag_condition(cond: PolicyCondition, lex: EducationLexicon) -> TagResult:
    term = lex.first_match(clean_text(cond.text))
    return TagResult(cond.id, int(term is not None), term)


def tag_corpus(corpus, lex: EducationLexicon) -> list:
    """Tag every condition, preserving input order."""
    counts = Counter(c.id for c in corpus)
    dupes = sorted(k for k, v in counts.items() if v > 1)
    if dupes:
        raise ValueError(f"duplicate condition ids: {dupes}")
    return [tag_condition(c, lex) for c in corpus]


@dataclass(frozen=True)
class CountRow:
    country: str
    year: int | None  # None on the grand-total row
    n_conditions: int
    n_education: int


def country_year_counts(tagged, corpus) -> list:
    """Per (country, year) condition and education counts, sorted, with a
    final grand-total row whose country is ``ALL``."""
    if len(tagged) != len(corpus) or any(t.id != c.id for t, c in zip(tagged, corpus)):
        raise ValueError("tagged results do not correspond to the corpus")
    n_all: Counter = Counter()
    n_edu: Counter = Counter()
    for t, c in zip(tagged, corpus):
        key = (c.country, c.year)
        n_all[key] += 1
        n_edu[key] += t.flag
    rows = [CountRow(k[0], k[1], n_all[k], n_edu[k]) for k in sorted(n_all)]
    rows.append(CountRow("ALL", None, sum(r.n_conditions for r in rows),
                         sum(r.n_education for r in rows)))
    return rows


def country_totals(rows) -> dict:
    """Education-policy totals per country from country-year rows."""
    out: Counter = Counter()
    for r in rows:
        if r.year is not None:
            out[r.country] += r.n_education
    return dict(out)


def read_corpus(path, year_bounds=YEAR_BOUNDS) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        return _read(fh, year_bounds)


def _read(fh, year_bounds):
    reader = csv.DictReader(fh)
    if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_FIELDS:
        raise ValueError(f"corpus header must be {','.join(CSV_FIELDS)}, got {reader.fieldnames}")
    out = []
    for rec in reader:
        try:
            year = int(rec["year"])
        except ValueError as exc:
            raise ValueError(f"condition {rec['id']}: bad year {rec['year']!r}") from exc
        cond = PolicyCondition(rec["id"], rec["country"], year, rec["program_id"], rec["text"])
        cond.validate(year_bounds)
        out.append(cond)
    return out


def fixture_corpus() -> list:
    """The bundled 40-condition corpus with 9 education conditions."""
    with resources.files("policyeval.data").joinpath("fixture_corpus.csv").open(
            "r", encoding="utf-8", newline="") as fh:
        return _read(fh, YEAR_BOUNDS)


def write_tagged(path, corpus, tagged, header_lines=()) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_FIELDS + ("edu_flag", "matched_term"))
        for c, t in zip(corpus, tagged):
            writer.writerow([c.id, c.country, c.year, c.program_id, c.text, t.flag, t.term or ""])
