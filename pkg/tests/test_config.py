import pytest
from hypothesis import given, strategies as st

from policyeval.config import ConfigError, config_hash, dump_kv, parse_kv


def test_parse_skips_comments_and_blanks():
    text = "# header\n\nseed = 7\ntrim=0.05,0.95\n  # indented comment\n"
    assert parse_kv(text) == {"seed": "7", "trim": "0.05,0.95"}


def test_later_duplicate_overrides():
    assert parse_kv("a = 1\na = 2\n") == {"a": "2"}


def test_value_may_contain_equals():
    assert parse_kv("tau = constant:0.06=x") == {"tau": "constant:0.06=x"}


@pytest.mark.parametrize("line", ["no equals sign", "bad key = 1", "1abc = 2"])
def test_malformed_lines_raise_with_line_number(line):
    with pytest.raises(ConfigError, match=":2:"):
        parse_kv("ok = 1\n" + line)


keys = st.from_regex(r"[a-z][a-z0-9_.]{0,8}", fullmatch=True)
values = st.from_regex(r"[A-Za-z0-9_.,:]{0,10}", fullmatch=True)


@given(st.dictionaries(keys, values, max_size=8))
def test_dump_parse_round_trip(items):
    assert parse_kv(dump_kv(items)) == items


@given(st.dictionaries(keys, values, min_size=1, max_size=8), st.randoms())
def test_hash_independent_of_key_order(items, rnd):
    shuffled = list(items.items())
    rnd.shuffle(shuffled)
    assert config_hash(dict(shuffled)) == config_hash(items)


def test_hash_changes_with_value():
    assert config_hash({"seed": "1"}) != config_hash({"seed": "2"})
