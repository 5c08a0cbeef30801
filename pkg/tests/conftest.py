"""Shared fixtures and hypothesis strategies."""

from __future__ import annotations

import string

import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

from celest.logmodel import Label, LogRecord

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

_text = st.text(alphabet=string.ascii_letters + string.digits + "/?=&.-_%\t\\ ", min_size=1, max_size=30)
_host = st.from_regex(r"[a-z]{1,8}(\.[a-z]{1,6}){0,3}", fullmatch=True)
_ip = st.tuples(*[st.integers(0, 255)] * 4).map(lambda t: ".".join(map(str, t)))


@st.composite
def log_records(draw) -> LogRecord:
    label = draw(st.sampled_from(list(Label)))
    return LogRecord(
        timestamp=draw(st.floats(0, 2e9, allow_nan=False)),
        external_ip=draw(_ip),
        external_port=draw(st.integers(0, 65535)),
        method=draw(st.none() | st.sampled_from(["GET", "POST", "HEAD"])),
        host=draw(st.none() | _host),
        uri=draw(st.none() | _text),
        referer=draw(st.none() | _text),
        user_agent=draw(st.none() | _text),
        status_code=draw(st.integers(0, 999)),
        content_type=draw(st.none() | st.sampled_from(["text/html", "application/json", "image/gif"])),
        request_len=draw(st.integers(0, 10**7)),
        response_len=draw(st.integers(0, 10**7)),
        trans_depth=draw(st.integers(0, 20)),
        version=draw(st.sampled_from([1.0, 1.1, 2.0])),
        label=label,
        family=draw(st.sampled_from([None, "mirai"])) if label is Label.MALICIOUS else None,
        uid=draw(st.none() | st.from_regex(r"C[a-zA-Z0-9]{6}", fullmatch=True)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
