import numpy as np
import pytest
from hypothesis import given

from celest.embed import EmbeddingModel, build_vocab_federated, token_frequencies
from celest.errors import ConfigError
from celest.featurize import (
    EMBED_SLOTS,
    GROUPS,
    IP_BLOCK,
    NUMERIC_FEATURES,
    FeatureLayout,
    Featurizer,
    featurize,
    fit_layout,
    group_mask,
    lexical_features,
    parse_user_agent,
    select_feature_group,
)
from celest.logmodel import LogRecord
from celest.tokenizer import corpus_from_records

from conftest import log_records

CHROME = "Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/118.0.5993.88 Safari/537.36"

TRAIN = [
    LogRecord(1.0, "10.0.0.5", 80, "GET", "www.shop.com", "/a/b.php?id=1", "http://ref.org/x.html", CHROME, 200, "text/html", 0, 100),
    LogRecord(2.0, "45.1.2.3", 8080, "POST", "c2.evil.net", "/bins/mirai.arm", None, "Wget(linux)", 404, "application/octet-stream", 10, 5),
    LogRecord(3.0, "45.1.2.3", 80, "GET", "www.shop.com", "/", None, None, 200, "text/html"),
]


@pytest.fixture(scope="module")
def model():
    vocab = build_vocab_federated([token_frequencies(corpus_from_records(TRAIN))], 1)
    return EmbeddingModel.create(vocab, d=4, seed=0)


@pytest.fixture(scope="module")
def layout(model):
    return fit_layout(TRAIN, model, port_slots=100)


def test_layout_widths(layout, model):
    assert layout.block("port").stop - layout.block("port").start == 100
    assert layout.block("method").stop - layout.block("method").start == 3
    assert layout.block("embedded").stop == 13 * 4 == len(EMBED_SLOTS) * model.d
    widths = {
        "ua": sum(len(v) + 1 for v in (layout.ua_device_vocab, layout.ua_browser_vocab, layout.ua_os_vocab)),
        "rest": sum(len(v) + 1 for v in (layout.method_vocab, layout.status_vocab, layout.ctype_vocab)),
    }
    assert layout.total_dim == 13 * 4 + len(NUMERIC_FEATURES) + IP_BLOCK + 100 + widths["ua"] + widths["rest"]
    d32 = FeatureLayout(32, 100, [], [], [], [], [], [], [])
    assert d32.block("embedded").stop == 416


def test_fit_layout_errors(model):
    with pytest.raises(ConfigError):
        fit_layout([], model)
    with pytest.raises(ConfigError):
        fit_layout(TRAIN, model, port_slots=1)


def test_ip_octets_and_absent_fields(layout, model):
    x = featurize(TRAIN[0], layout, model).values
    ip = x[layout.block("ip")]
    assert np.flatnonzero(ip).tolist() == [10, 256 + 0, 512 + 0]
    r = LogRecord(1.0, "10.0.0.5", 80, "GET", "www.shop.com", "/", None, None, 200)
    v = featurize(r, layout, model).values
    assert v[layout.numeric_index("log_request_len")] == 0.0
    assert v[layout.numeric_index("has_referer")] == 0.0
    for f, c in EMBED_SLOTS:
        if f == "referer":
            assert not np.any(v[layout.slot(f, c)])


def test_unseen_value_goes_to_other(layout, model):
    r = LogRecord(1.0, "1.1.1.1", 12345, "PATCH", None, None, None, None, 418, "x/y")
    v = featurize(r, layout, model).values
    for block in ("port", "method", "status", "ctype"):
        assert v[layout.block(block)][-1] == 1.0


def test_user_agent_parser():
    ua = parse_user_agent(CHROME)
    assert (ua.browser, ua.os, ua.major, ua.minor) == ("Chrome", "Windows", 118, 0)
    assert parse_user_agent(None) is None


@given(log_records())
def test_featurize_total_and_one_hot_shape(layout, model, record):
    fx = Featurizer(layout, model)
    a = fx.vector(record)
    assert a.shape == (layout.total_dim,) and np.all(np.isfinite(a))
    assert np.array_equal(a, fx.vector(record))
    ip = a[layout.block("ip")].reshape(3, 256)
    assert np.all(ip.sum(axis=1) == 1)
    for block in ("port", "ua_device", "ua_browser", "ua_os", "method", "status", "ctype"):
        assert a[layout.block(block)].sum() <= 1


def test_feature_groups(layout, model):
    fv = featurize(TRAIN[0], layout, model)
    assert select_feature_group(fv, "All", layout) is fv
    ext = select_feature_group(fv, "External_Host", layout).values
    keep = np.zeros(layout.total_dim, bool)
    keep[layout.block("ip")] = keep[layout.block("port")] = True
    assert not np.any(ext[~keep]) and np.any(ext[keep])
    meta = group_mask(layout, "HTTP_Metadata")
    for name in ("trans_depth", "log_request_len", "log_response_len"):
        assert meta[layout.numeric_index(name)]
    for block in ("method", "status", "ctype"):
        assert meta[layout.block(block)].all()
    assert not meta[layout.block("ip")].any()
    with pytest.raises(ConfigError):
        group_mask(layout, "Bogus")
    for g in GROUPS:
        assert group_mask(layout, g).shape == (layout.total_dim,)


def test_layout_json_round_trip(tmp_path, layout, model):
    layout.save(tmp_path / "layout.json")
    back = FeatureLayout.load(tmp_path / "layout.json")
    assert back.total_dim == layout.total_dim
    assert np.array_equal(Featurizer(back, model).transform(TRAIN), Featurizer(layout, model).transform(TRAIN))


def test_lexical_features():
    f = lexical_features(TRAIN[0])
    assert f.shape == (12,)
    assert f[0] == len("www.shop.com")
    assert f[8] == len("id=1")
