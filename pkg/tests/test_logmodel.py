import dataclasses

import pytest
from hypothesis import given
from hypothesis import strategies as st

from celest.errors import ConfigError, IngestionError
from celest.logmodel import (
    IndicatorSet,
    Label,
    LogRecord,
    apply_indicators,
    filter_popular,
    load_domain_list,
    load_indicators,
    parse_log_file,
    write_log_file,
)

from conftest import log_records

LINE13 = "1600000000.5\t10.0.0.1\t80\tGET\tc2.evil.net\t/gate.php?id=1\thttp://a.com/\t1.1\tWget(linux)\t0\t512\t200\t1\ttext/html"


def _rec(host="a.com", **kw):
    return LogRecord(timestamp=1.0, external_ip="1.2.3.4", external_port=80, host=host, **kw)


def test_full_line_parses_unlabeled(tmp_path):
    p = tmp_path / "x.log"
    p.write_text(LINE13 + "\n")
    parsed = parse_log_file(p)
    assert parsed.malformed == 0
    (r,) = parsed.records
    assert r.label is Label.UNLABELED
    assert (r.host, r.uri, r.external_port, r.response_len, r.content_type) == (
        "c2.evil.net",
        "/gate.php?id=1",
        80,
        512,
        "text/html",
    )


def test_dash_referer_is_absent(tmp_path):
    p = tmp_path / "x.log"
    parts = LINE13.split("\t")
    parts[6] = "-"
    p.write_text("\t".join(parts) + "\n")
    assert parse_log_file(p).records[0].referer is None


def test_non_numeric_port_is_tallied(tmp_path):
    p = tmp_path / "x.log"
    parts = LINE13.split("\t")
    parts[2] = "http"
    p.write_text(LINE13 + "\n" + "\t".join(parts) + "\n")
    parsed = parse_log_file(p)
    assert len(parsed) == 1 and parsed.malformed == 1 and parsed.malformed_lines == [2]


def test_unknown_format_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_log_file(tmp_path / "x.log", format="csv")
    with pytest.raises(IngestionError):
        parse_log_file(tmp_path / "missing.log")


def test_record_invariants():
    with pytest.raises(ValueError):
        LogRecord(1.0, "1.2.3.4", 70000)
    with pytest.raises(ValueError):
        _rec(label=Label.BENIGN, family="mirai")
    with pytest.raises(ValueError):
        LogRecord(1.0, "not-an-ip", 80)


def test_marker_spelled_values_survive_tsv(tmp_path):
    rec = LogRecord(1.0, "1.2.3.4", 80, user_agent="-", referer="(empty)", uri="")
    write_log_file([rec], tmp_path / "m.log")
    assert parse_log_file(tmp_path / "m.log").records == [rec]


@given(st.lists(log_records(), max_size=15), st.sampled_from(["tsv", "jsonl"]))
def test_write_parse_round_trip(tmp_path_factory, records, fmt):
    path = tmp_path_factory.mktemp("rt") / f"log.{fmt}"
    write_log_file(records, path, fmt)
    parsed = parse_log_file(path, fmt)
    assert parsed.malformed == 0
    assert parsed.records == records


def test_filter_popular_examples():
    pop = [_rec("google.com") for _ in range(5)]
    eleven = [_rec("x.net") for _ in range(11)]
    ten = [_rec("y.net") for _ in range(10)]
    out = filter_popular(pop + eleven + ten, {"google.com"}, 10)
    assert out == ten
    with pytest.raises(ConfigError):
        filter_popular([], set(), 0)


@given(
    st.lists(st.sampled_from(["a.com", "b.com", "c.com", "d.com", None]), max_size=40),
    st.sets(st.sampled_from(["a.com", "b.com"])),
    st.integers(1, 6),
)
def test_filter_popular_idempotent_and_order_preserving(hosts, popular, threshold):
    recs = [_rec(h, uid=str(i)) for i, h in enumerate(hosts)]
    once = filter_popular(recs, popular, threshold)
    assert filter_popular(once, popular, threshold) == once
    ids = [int(r.uid) for r in once]
    assert ids == sorted(ids)


def test_apply_indicators_examples():
    ind = IndicatorSet(domains={"c2.evil.net"}, url_substrings={"/gate.php"})
    a, b, c = apply_indicators(
        [_rec("c2.evil.net"), _rec("ok.com", uri="/index.html"), _rec("ok.com", uri="/x/GATE.php?id=3")], ind
    )
    assert a.label is Label.MALICIOUS
    assert b.label is Label.UNLABELED
    assert c.label is Label.MALICIOUS


@given(st.lists(log_records(), max_size=20), st.sets(st.sampled_from(["a", "/", "x.com", "1.2.3.4"]), min_size=1))
def test_apply_indicators_never_unflags(records, entries):
    ind = IndicatorSet(domains=entries, ips=entries, url_substrings=entries)
    out = apply_indicators(records, ind)
    for before, after in zip(records, out):
        if before.label is Label.MALICIOUS:
            assert after.label is Label.MALICIOUS
        if after.label is not before.label:
            assert after.label is Label.MALICIOUS and ind.matches(before)


def test_indicator_and_domain_files(tmp_path):
    p = tmp_path / "ioc.txt"
    p.write_text("# comment\ndomain:Evil.NET\nip:1.2.3.4\nurl:/gate.php\n")
    ind = load_indicators(p)
    assert ind.domains == {"evil.net"} and ind.ips == {"1.2.3.4"} and ind.url_substrings == {"/gate.php"}
    p.write_text("host:evil.net\n")
    with pytest.raises(ConfigError):
        load_indicators(p)
    d = tmp_path / "top.csv"
    d.write_text("1,google.com\n2,Example.org\n")
    assert load_domain_list(d) == {"google.com", "example.org"}


def test_indicator_entries_lowercase_non_empty():
    with pytest.raises(ValueError):
        IndicatorSet(domains={""})
    assert IndicatorSet(domains={"A.Com"}).domains == {"a.com"}
    assert dataclasses.is_dataclass(IndicatorSet)
