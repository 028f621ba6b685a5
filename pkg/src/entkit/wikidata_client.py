"""Resolve surface forms to Wikidata IDs and Wikipedia URLs over SPARQL.

The transport is injectable: tests and offline runs use a fixture transport
built from canned JSON, live runs use an HTTP transport with a request-rate
limiter and retry with backoff. Resolution itself never raises on endpoint
trouble; it reports an ``endpoint_error`` status instead.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence
from urllib.parse import quote, unquote, urlparse

import requests

from .embeddings import ENTITY_PREFIX
from .errors import DataError

logger = logging.getLogger(__name__)

DEFAULT_ENDPOINT = "https://query.wikidata.org/sparql"
QID_PATTERN = re.compile(r"Q\d+")

SURFACE_QUERY = """SELECT ?id ?str WHERE {{
  ?id rdfs:label ?str .
  VALUES ?str {{ '{surface}'@en }} .
  FILTER((LANG(?str)) = 'en') .
}}"""

SITELINK_QUERY = """SELECT ?id ?wikiurl WHERE {{
  VALUES ?id {{ wd:{qid} }} .
  ?wikiurl schema:about ?id .
  ?wikiurl schema:inLanguage 'en' .
  FILTER REGEX(str(?wikiurl), '.*en.wikipedia.org.*') .
}}"""


class TransportError(Exception):
    """The SPARQL endpoint could not be reached or answered garbage."""


class ResolutionStatus(Enum):
    RESOLVED = "resolved"
    AMBIGUOUS_RESOLVED_LOWEST = "ambiguous_resolved_lowest"
    NOT_FOUND = "not_found"
    ENDPOINT_ERROR = "endpoint_error"


@dataclass(frozen=True)
class ResolutionResult:
    surface: str
    qid: str | None
    wikipedia_url: str | None
    status: ResolutionStatus


def _escape_literal(text: str) -> str:
    return text.replace("\\", "\\\\").replace("'", "\\'")


def surface_query(surface: str) -> str:
    return SURFACE_QUERY.format(surface=_escape_literal(surface))


def sitelink_query(qid: str) -> str:
    if not QID_PATTERN.fullmatch(qid):
        raise ValueError(f"malformed Wikidata id {qid!r}")
    return SITELINK_QUERY.format(qid=qid)


class HttpTransport:
    """requests-backed transport with rate limiting and retry.

    At most ``rate_per_sec`` requests per second are issued (a shared lock
    makes this safe across threads). Failed requests retry up to ``retries``
    times with exponential backoff before raising TransportError.
    """

    def __init__(
        self,
        endpoint: str = DEFAULT_ENDPOINT,
        rate_per_sec: float = 5.0,
        retries: int = 3,
        backoff: float = 1.0,
        timeout: float = 30.0,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint
        self.min_interval = 1.0 / rate_per_sec if rate_per_sec > 0 else 0.0
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.session = session or requests.Session()
        self._lock = threading.Lock()
        self._last_request = 0.0

    def _throttle(self):
        with self._lock:
            now = time.monotonic()
            wait = self._last_request + self.min_interval - now
            if wait > 0:
                time.sleep(wait)
            self._last_request = time.monotonic()

    def query(self, sparql: str) -> dict:
        last_error: Exception | None = None
        for attempt in range(self.retries):
            self._throttle()
            try:
                resp = self.session.get(
                    self.endpoint,
                    params={"query": sparql, "format": "json"},
                    headers={"Accept": "application/sparql-results+json"},
                    timeout=self.timeout,
                )
                resp.raise_for_status()
                return resp.json()
            except (requests.RequestException, ValueError) as exc:
                last_error = exc
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff * (2**attempt))
        raise TransportError(f"endpoint {self.endpoint} failed: {last_error}")


class FixtureTransport:
    """Canned transport answering the two query shapes from a fixture dict.

    The fixture maps surfaces to Q-id lists and Q-ids to Wikipedia URLs:
    ``{"labels": {"Jean Marais": ["Q168359"]}, "sitelinks": {...},
    "fail": false}``. With ``fail`` set, every query raises TransportError,
    which is how endpoint outages are simulated.
    """

    _SURFACE_RE = re.compile(r"VALUES \?str \{ '(.*)'@en \}")
    _QID_RE = re.compile(r"VALUES \?id \{ wd:(Q\d+) \}")

    def __init__(
        self,
        labels: Mapping[str, Sequence[str]] | None = None,
        sitelinks: Mapping[str, str] | None = None,
        fail: bool = False,
    ):
        self.labels = dict(labels or {})
        self.sitelinks = dict(sitelinks or {})
        self.fail = fail

    @classmethod
    def from_json(cls, path) -> "FixtureTransport":
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError:
                raise DataError(f"{path}: invalid JSON fixture") from None
        return cls(raw.get("labels"), raw.get("sitelinks"), bool(raw.get("fail")))

    def query(self, sparql: str) -> dict:
        if self.fail:
            raise TransportError("fixture endpoint is configured to fail")
        m = self._SURFACE_RE.search(sparql)
        if m:
            surface = m.group(1).replace("\\'", "'").replace("\\\\", "\\")
            bindings = [
                {"id": {"value": f"http://www.wikidata.org/entity/{qid}"}}
                for qid in self.labels.get(surface, [])
            ]
            return {"results": {"bindings": bindings}}
        m = self._QID_RE.search(sparql)
        if m:
            url = self.sitelinks.get(m.group(1))
            bindings = [{"wikiurl": {"value": url}}] if url else []
            return {"results": {"bindings": bindings}}
        return {"results": {"bindings": []}}


def _bindings(data: dict) -> list[dict]:
    try:
        return data["results"]["bindings"]
    except (KeyError, TypeError):
        raise TransportError("malformed SPARQL response") from None


def qid_to_wikipedia_url(qid: str, transport) -> str | None:
    """English Wikipedia URL for a Wikidata id, or None when it has none.

    Raises ValueError on a malformed id and TransportError when the endpoint
    is unreachable.
    """
    data = transport.query(sitelink_query(qid))
    urls = sorted(
        b["wikiurl"]["value"]
        for b in _bindings(data)
        if "wikiurl" in b and "en.wikipedia.org" in b["wikiurl"]["value"]
    )
    return urls[0] if urls else None


def resolve_surface(surface: str, transport) -> ResolutionResult:
    """Resolve one surface form; never raises on endpoint failure.

    Multiple matching ids resolve to the numerically lowest one with status
    ``ambiguous_resolved_lowest``.
    """
    if not surface:
        raise ValueError("cannot resolve an empty surface form")
    try:
        data = transport.query(surface_query(surface))
    except TransportError:
        return ResolutionResult(surface, None, None, ResolutionStatus.ENDPOINT_ERROR)

    qids = set()
    for b in _bindings(data):
        value = b.get("id", {}).get("value", "")
        m = QID_PATTERN.search(value)
        if m:
            qids.add(m.group(0))
    if not qids:
        return ResolutionResult(surface, None, None, ResolutionStatus.NOT_FOUND)
    qid = min(qids, key=lambda q: int(q[1:]))
    status = (
        ResolutionStatus.RESOLVED
        if len(qids) == 1
        else ResolutionStatus.AMBIGUOUS_RESOLVED_LOWEST
    )
    try:
        url = qid_to_wikipedia_url(qid, transport)
    except TransportError:
        return ResolutionResult(surface, qid, None, ResolutionStatus.ENDPOINT_ERROR)
    return ResolutionResult(surface, qid, url, status)


def url_to_entity_symbol(url: str) -> str:
    """Turn an en.wikipedia.org article URL into an ENTITY/ symbol.

    The final path segment is percent-decoded and prefixed, so
    ``.../wiki/Battleground_%28film%29`` becomes
    ``ENTITY/Battleground_(film)``.
    """
    parsed = urlparse(url)
    if parsed.netloc != "en.wikipedia.org" or not parsed.path.startswith("/wiki/"):
        raise DataError(f"not an en.wikipedia.org article URL: {url!r}")
    title = unquote(parsed.path[len("/wiki/") :])
    if not title:
        raise DataError(f"URL has no article title: {url!r}")
    return ENTITY_PREFIX + title


def entity_symbol_to_url(symbol: str) -> str:
    """Inverse of ``url_to_entity_symbol`` up to percent-encoding."""
    if not symbol.startswith(ENTITY_PREFIX):
        raise ValueError(f"not an ENTITY/ symbol: {symbol!r}")
    title = symbol[len(ENTITY_PREFIX) :]
    return "https://en.wikipedia.org/wiki/" + quote(title, safe="()_',.-")


def load_cache(path) -> dict[str, ResolutionResult]:
    """Load a resolution cache TSV: ``surface<TAB>qid<TAB>url`` per line.

    Empty qid and url fields mark a cached not-found. Endpoint errors are
    never cached, so everything read back has a definite status.
    """
    cache: dict[str, ResolutionResult] = {}
    file = Path(path)
    if not file.exists():
        return cache
    with open(file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DataError(f"{path}: line {lineno}: expected 3 tab-separated fields")
            surface, qid, url = fields
            if qid:
                cache[surface] = ResolutionResult(
                    surface, qid, url or None, ResolutionStatus.RESOLVED
                )
            else:
                cache[surface] = ResolutionResult(
                    surface, None, None, ResolutionStatus.NOT_FOUND
                )
    return cache


def append_cache_line(path, result: ResolutionResult) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(
            f"{result.surface}\t{result.qid or ''}\t{result.wikipedia_url or ''}\n"
        )


def resolve_batch(
    surfaces: Sequence[str], transport, cache_path=None
) -> list[ResolutionResult]:
    """Resolve many surfaces, resuming from and extending an on-disk cache.

    Cached surfaces are not re-queried. New definite results (resolved or
    not-found) are appended to the cache immediately, so an interrupted run
    resumes where it stopped. Endpoint errors are returned but not cached.
    """
    cache = load_cache(cache_path) if cache_path else {}
    results: list[ResolutionResult] = []
    for surface in surfaces:
        hit = cache.get(surface)
        if hit is not None:
            results.append(hit)
            continue
        result = resolve_surface(surface, transport)
        results.append(result)
        if result.status is not ResolutionStatus.ENDPOINT_ERROR:
            cache[surface] = result
            if cache_path:
                append_cache_line(cache_path, result)
    return results


def load_resolution_map(path) -> dict[str, str]:
    """Surface-to-ENTITY/ symbol map from a resolution cache TSV."""
    mapping: dict[str, str] = {}
    for surface, result in load_cache(path).items():
        if result.wikipedia_url:
            mapping[surface] = url_to_entity_symbol(result.wikipedia_url)
    return mapping
