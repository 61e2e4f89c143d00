import re

import pytest
from hypothesis import given, strategies as st

from policyeval import corpus as cp
from policyeval.corpus import EducationLexicon, PolicyCondition, clean_text

PUBLISHED = ("[Ee]duca|[Uu]niversit[y]ies|[Ss]chool|[Pp]edagog|[Tt]eacher|[Pp]roffesor|"
             "[Ll]ectur|[Ss]tudent|[Pp]upil|[Cc]lassroom|[Cc]urricul|[Ll]earn|[Ac]adem")


def cond(text, id="c1", country="KEN", year=2001):
    return PolicyCondition(id, country, year, "P1", text)


# --- clean_text ------------------------------------------------------------

@pytest.mark.parametrize("raw, expected", [
    ("Reduce employees by 5 percent.", "Reduce employees by percent"),
    ("", ""),
    ("teacher's census (1997)", "teacher's census"),
    ("  state-owned\t\ttelecom\n", "state-owned telecom"),
    ("Ministry’s plan; 1989/90", "Ministry’s plan"),
])
def test_clean_text_examples(raw, expected):
    assert clean_text(raw) == expected


@given(st.text())
def test_clean_text_idempotent(s):
    once = clean_text(s)
    assert clean_text(once) == once


@given(st.text())
def test_clean_text_output_alphabet(s):
    out = clean_text(s)
    assert all(ch.isalpha() or ch in " '’-" for ch in out)
    assert out == out.strip() and "  " not in out


# --- lexicon ---------------------------------------------------------------

def test_verbatim_serialization_is_byte_identical():
    lex = EducationLexicon.default("verbatim")
    assert lex.serialize().encode("utf-8") == PUBLISHED.encode("utf-8")
    assert len(lex.patterns) == 13


def test_corrected_mode_changes_only_two_terms():
    v = EducationLexicon.default("verbatim").patterns
    c = EducationLexicon.default("corrected").patterns
    changed = [(a, b) for a, b in zip(v, c) if a != b]
    assert changed == [("[Uu]niversit[y]ies", "[Uu]niversit"), ("[Ac]adem", "[Aa]cadem")]


def test_verbatim_mode_rejects_altered_list():
    with pytest.raises(ValueError):
        EducationLexicon(("[Ee]duca",), "verbatim")


def test_unknown_mode_raises():
    with pytest.raises(ValueError):
        EducationLexicon.default("fuzzy")


def test_every_corrected_pattern_matches_a_word():
    words = ["education", "University", "school", "pedagogy", "teacher", "proffesor",
             "lecturer", "students", "pupils", "classroom", "curriculum", "learning", "academic"]
    lex = EducationLexicon.default("corrected")
    for pat, word in zip(lex.patterns, words):
        assert re.search(pat, word), (pat, word)


def test_verbatim_quirks():
    lex = EducationLexicon.default("verbatim")
    assert lex.first_match("university students") == "[Ss]tudent"
    assert lex.first_match("university fees") is None
    assert lex.first_match("universityies") == "[Uu]niversit[y]ies"
    # "[Ac]adem" still hits "Academic" through its "cadem" substring
    assert lex.first_match("Academic year") == "[Ac]adem"
    assert lex.first_match("Adem") is None


def test_lexicon_from_file(tmp_path):
    path = tmp_path / "lex.txt"
    path.write_text("# stems\n" + "\n".join(cp.VERBATIM_PATTERNS) + "\n\n")
    lex = EducationLexicon.from_file(path)
    assert lex.mode == "verbatim"
    assert lex.serialize() == PUBLISHED


# --- tagging ---------------------------------------------------------------

@pytest.mark.parametrize("mode", cp.MODES)
def test_published_examples_tag_positive(mode):
    lex = EducationLexicon.default(mode)
    r = cp.tag_condition(cond("complete and verify nationwide teacher's census"), lex)
    assert (r.flag, r.term) == (1, "[Tt]eacher")
    text = ("fiscal measures in the context of the 1989/90 budget, including user charges "
            "in the health, education, and other sectors")
    r = cp.tag_condition(cond(text), lex)
    assert (r.flag, r.term) == (1, "[Ee]duca")


def test_no_stem_tags_negative():
    r = cp.tag_condition(cond("privatize the state-owned telecom operator"),
                         EducationLexicon.default())
    assert (r.flag, r.term) == (0, None)


def test_first_matching_term_in_lexicon_order():
    r = cp.tag_condition(cond("school teacher education"), EducationLexicon.default())
    assert r.term == "[Ee]duca"


def test_tag_corpus_order_and_flags():
    corpus = [cond("raise fuel prices", "a"), cond("build a school", "b"), cond("cut tariffs", "c")]
    tags = cp.tag_corpus(corpus, EducationLexicon.default())
    assert [t.id for t in tags] == ["a", "b", "c"]
    assert [t.flag for t in tags] == [0, 1, 0]


def test_tag_corpus_empty():
    assert cp.tag_corpus([], EducationLexicon.default()) == []


def test_duplicate_ids_listed():
    corpus = [cond("x", "a"), cond("y", "b"), cond("z", "a")]
    with pytest.raises(ValueError, match=r"\['a'\]"):
        cp.tag_corpus(corpus, EducationLexicon.default())


words = st.sampled_from(["school", "teacher", "budget", "fees", "Academic", "university",
                         "tariff", "pupil", "wages", "curriculum", "learning", "privatize"])


@given(st.lists(words, min_size=1, max_size=6).map(" ".join),
       st.sampled_from(["[Ww]age", "[Ff]ee", "[Bb]udget", "[Tt]ariff"]))
def test_adding_a_term_never_unflags(text, extra):
    base = EducationLexicon.default("corrected")
    bigger = EducationLexicon(base.patterns + (extra,), "custom")
    before = cp.tag_condition(cond(text), base).flag
    after = cp.tag_condition(cond(text), bigger).flag
    assert after >= before


@given(st.lists(words, min_size=1, max_size=6).map(" ".join))
def test_flag_iff_term(text):
    r = cp.tag_condition(cond(text), EducationLexicon.default())
    assert (r.flag == 1) == (r.term is not None)


# --- validation and IO -----------------------------------------------------

def test_condition_validation():
    with pytest.raises(ValueError, match="empty text"):
        cond("   ").validate()
    with pytest.raises(ValueError, match="outside"):
        cond("school", year=1984).validate()
    cond("school", year=2014).validate()


def test_fixture_has_nine_planted_positives():
    corpus = cp.fixture_corpus()
    assert len(corpus) == 40
    tags = cp.tag_corpus(corpus, EducationLexicon.default("corrected"))
    flagged = [t.id for t in tags if t.flag]
    assert flagged == ["F001", "F004", "F007", "F010", "F013", "F016", "F019", "F022", "F025"]


def test_fixture_verbatim_misses_university_condition():
    tags = cp.tag_corpus(cp.fixture_corpus(), EducationLexicon.default("verbatim"))
    assert sum(t.flag for t in tags) == 8
    assert {t.id: t.flag for t in tags}["F013"] == 0


def test_fixture_counts_sierra_leone():
    corpus = cp.fixture_corpus()
    rows = cp.country_year_counts(cp.tag_corpus(corpus, EducationLexicon.default()), corpus)
    sle = {(r.year, r.n_education) for r in rows if r.country == "SLE"}
    assert sle == {(1997, 1), (2002, 1)}
    assert cp.country_totals(rows)["SLE"] == 2


def test_counts_grand_total_equals_row_sums():
    corpus = cp.fixture_corpus()
    rows = cp.country_year_counts(cp.tag_corpus(corpus, EducationLexicon.default()), corpus)
    total = rows[-1]
    assert (total.country, total.year) == ("ALL", None)
    assert total.n_conditions == sum(r.n_conditions for r in rows[:-1]) == 40
    assert total.n_education == sum(r.n_education for r in rows[:-1]) == 9


def test_counts_single_condition_and_zero_flags():
    one = [cond("build a school")]
    rows = cp.country_year_counts(cp.tag_corpus(one, EducationLexicon.default()), one)
    assert (rows[-1].n_conditions, rows[-1].n_education) == (1, 1)
    none = [cond("cut tariffs", "a"), cond("raise taxes", "b", year=2002)]
    rows = cp.country_year_counts(cp.tag_corpus(none, EducationLexicon.default()), none)
    assert all(r.n_education == 0 for r in rows)


def test_counts_reject_mismatched_inputs():
    corpus = cp.fixture_corpus()
    tags = cp.tag_corpus(corpus, EducationLexicon.default())
    with pytest.raises(ValueError):
        cp.country_year_counts(tags[:-1], corpus)


def test_read_write_round_trip(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text('id,country,year,program_id,text\n'
                    'a,KEN,2001,P1,"fees for university students, 2001"\n', encoding="utf-8")
    corpus = cp.read_corpus(path)
    assert corpus[0].text == "fees for university students, 2001"
    tags = cp.tag_corpus(corpus, EducationLexicon.default())
    out = tmp_path / "t.csv"
    cp.write_tagged(out, corpus, tags, ["hdr"])
    lines = out.read_text().splitlines()
    assert lines[0] == "# hdr"
    assert lines[1] == "id,country,year,program_id,text,edu_flag,matched_term"
    assert lines[2].endswith(",1,[Uu]niversit")


def test_read_rejects_bad_header(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("id,text\na,school\n")
    with pytest.raises(ValueError, match="header"):
        cp.read_corpus(path)
