"""Daily document indexes with field search and derived views.

Each daily index ``<doc_type>-YYYY.MM.DD`` is a directory holding
``docs.log`` (one canonical JSON document per line, append order) and a
sidecar ``index.json`` (content hashes plus the field-value postings).
Opening an index adopts the sidecar when it covers the whole log and
rebuilds it by re-scanning the log otherwise.
Derived indexes live in ``_derived/<name>.json``.
"""
import datetime
import enum
import json
import logging
import os
import shutil
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Tuple

from minimon.core import (
    MAX_TS, Document, canonical_json, day_start, now_ms, utc_day)
from minimon.exceptions import ConfigError, MalformedDocument

logger = logging.getLogger(__name__)

DEFAULT_RETENTION_DAYS = 30
MIN_RETENTION_DAYS = 30
MAX_RETENTION_DAYS = 40
MAX_LIMIT = 10000

_MISSING = object()


def index_name(doc_type, day):
    return '{}-{:%Y.%m.%d}'.format(doc_type, day)


def parse_index_name(name):
    doc_type, sep, day = name.rpartition('-')
    if not sep:
        return None
    try:
        return doc_type, datetime.datetime.strptime(day, '%Y.%m.%d').date()
    except ValueError:
        return None


def value_key(value):
    # Numbers compare by value across int/float; bools and strings stay apart
    if isinstance(value, bool):
        return 'bool:{}'.format(value).lower()
    if isinstance(value, (int, float)):
        return 'num:{!r}'.format(float(value))
    return 'str:{}'.format(value)


class Op(enum.Enum):
    EQ = 'EQ'
    NEQ = 'NEQ'
    GT = 'GT'
    LT = 'LT'
    EXISTS = 'EXISTS'


def _ordered(a, b):
    numeric = (int, float)
    if isinstance(a, bool) or isinstance(b, bool):
        return False
    if isinstance(a, numeric) and isinstance(b, numeric):
        return True
    return isinstance(a, str) and isinstance(b, str)


@dataclass(frozen=True)
class Matcher:
    field: str
    op: Op
    value: Any = None

    def matches(self, doc):
        actual = doc.get(self.field, _MISSING)
        if self.op is Op.EXISTS:
            return actual is not _MISSING
        if self.op is Op.EQ:
            return (actual is not _MISSING
                    and value_key(actual) == value_key(self.value))
        if self.op is Op.NEQ:
            return (actual is _MISSING
                    or value_key(actual) != value_key(self.value))
        if actual is _MISSING or not _ordered(actual, self.value):
            return False
        if self.op is Op.GT:
            return actual > self.value
        return actual < self.value

    @classmethod
    def from_dict(cls, data):
        return cls(data['field'], Op(data['op'].upper()), data.get('value'))

    def to_dict(self):
        return {'field': self.field, 'op': self.op.value, 'value': self.value}


@dataclass(frozen=True)
class DocQuery:
    doc_type: str
    matchers: Tuple[Matcher, ...] = ()
    time_range: Tuple[int, int] = (0, MAX_TS)
    limit: int = 100

    def __post_init__(self):
        start, end = self.time_range
        if start > end:
            raise ValueError('time_range start must not be after its end')
        if not 1 <= self.limit <= MAX_LIMIT:
            raise ValueError('limit must be within [1, {}]'.format(MAX_LIMIT))

    @classmethod
    def from_dict(cls, data):
        try:
            time_range = data.get('time_range') or (0, MAX_TS)
            return cls(
                data['doc_type'],
                tuple(Matcher.from_dict(m) for m in data.get('matchers', ())),
                (int(time_range[0]), int(time_range[1])),
                int(data.get('limit', 100)))
        except (KeyError, TypeError, IndexError) as e:
            raise ValueError('Malformed query: {}'.format(e))


class Mode(enum.Enum):
    LATEST_BY_TIMESTAMP = 'latest_by_timestamp'
    NUMERIC_SUM = 'numeric_sum'


@dataclass(frozen=True)
class DerivedIndexSpec:
    name: str
    source_doc_type: str
    key_field: str
    mode: Mode
    value_fields: Tuple[str, ...] = ()

    @classmethod
    def from_line(cls, line):
        """Parse ``<name> <doc_type> <key_field> <mode> [value_field ...]``."""
        parts = line.split()
        try:
            return cls(parts[0], parts[1], parts[2], Mode(parts[3].lower()),
                       tuple(parts[4:]))
        except (IndexError, ValueError):
            raise ConfigError('Invalid derived index {!r}'.format(line))


def _numeric(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


class DerivedIndex(object):

    def __init__(self, spec):
        self.spec = spec
        self.entries = {}
        self.skipped = 0

    def reset(self):
        self.entries = {}
        self.skipped = 0

    def update(self, doc, order):
        key = doc.get(self.spec.key_field, _MISSING)
        if key is _MISSING or isinstance(key, dict):
            self.skipped += 1
            return
        key = str(key)
        if self.spec.mode is Mode.LATEST_BY_TIMESTAMP:
            rank = (doc.timestamp,) + tuple(order)
            current = self.entries.get(key)
            if current is None or rank >= tuple(current['rank']):
                self.entries[key] = {
                    'rank': list(rank), 'document': doc.to_dict()}
        else:
            entry = self.entries.setdefault(
                key, dict({f: 0.0 for f in self.spec.value_fields}, count=0))
            for name in self.spec.value_fields:
                value = doc.get(name)
                if _numeric(value):
                    entry[name] += value
            entry['count'] += 1

    def get(self, key):
        entry = self.entries.get(str(key))
        if entry is None:
            return None
        if self.spec.mode is Mode.LATEST_BY_TIMESTAMP:
            return Document.from_dict(entry['document'])
        return {k: v for k, v in entry.items()}

    def to_dict(self):
        return {'skipped': self.skipped, 'entries': self.entries}

    def load(self, data):
        self.skipped = data.get('skipped', 0)
        self.entries = data.get('entries', {})


class DailyIndex(object):

    def __init__(self, directory, doc_type, day):
        self.directory = Path(directory)
        self.doc_type = doc_type
        self.day = day
        self.name = index_name(doc_type, day)
        self.documents = []
        self.hashes = {}
        self.postings = {}
        self.size = 0
        self._fh = None

    @property
    def log_path(self):
        return self.directory / 'docs.log'

    @property
    def sidecar_path(self):
        return self.directory / 'index.json'

    def load(self):
        self.directory.mkdir(parents=True, exist_ok=True)
        docs, good = [], 0
        if self.log_path.exists():
            with open(self.log_path, 'rb') as fh:
                for line in fh:
                    if not line.endswith(b'\n'):
                        break
                    try:
                        doc = Document.decode(line)
                    except MalformedDocument:
                        break
                    docs.append(doc)
                    good += len(line)
            if good != self.log_path.stat().st_size:
                logger.warning('Truncating torn tail of {}'.format(
                    self.log_path))
                with open(self.log_path, 'r+b') as fh:
                    fh.truncate(good)
        if not self._restore(docs):
            for doc in docs:
                self._add(doc)
        self.size = good
        self._fh = open(self.log_path, 'ab')
        return self

    def _restore(self, docs):
        try:
            data = json.loads(self.sidecar_path.read_bytes())
        except (OSError, ValueError):
            return False
        if data.get('count') != len(docs):
            logger.info('Rebuilding stale field index of {}'.format(self.name))
            return False
        self.documents = docs
        self.hashes = data['hashes']
        self.postings = data['postings']
        return True

    def _add(self, doc):
        position = len(self.documents)
        self.documents.append(doc)
        self.hashes[doc.content_hash()] = position
        for name, value in doc.payload.items():
            if isinstance(value, dict):
                continue
            self.postings.setdefault(name, {}).setdefault(
                value_key(value), []).append(position)
        return position

    def contains(self, doc):
        return doc.content_hash() in self.hashes

    def append(self, doc):
        line = doc.encode() + b'\n'
        self._fh.write(line)
        self.size += len(line)
        return self._add(doc)

    def sync(self):
        self._fh.flush()
        os.fsync(self._fh.fileno())
        tmp = self.sidecar_path.with_suffix('.tmp')
        with open(tmp, 'wb') as fh:
            fh.write(canonical_json({
                'count': len(self.documents),
                'hashes': self.hashes,
                'postings': self.postings,
            }))
        os.replace(tmp, self.sidecar_path)

    def candidates(self, matchers):
        # Narrow by the first EQ matcher on a top-level field
        for m in matchers:
            if m.op is Op.EQ and '.' not in m.field:
                return list(self.postings.get(m.field, {}).get(
                    value_key(m.value), []))
        return range(len(self.documents))

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def drop(self):
        self.close()
        shutil.rmtree(self.directory, ignore_errors=True)


class DocStore(object):

    def __init__(self, root, retention_days=DEFAULT_RETENTION_DAYS,
                 retention_overrides=None, derived=()):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.retention_days = retention_days
        self.retention_overrides = dict(retention_overrides or {})
        for days in [retention_days] + list(self.retention_overrides.values()):
            if not MIN_RETENTION_DAYS <= days <= MAX_RETENTION_DAYS:
                raise ConfigError(
                    'Document retention must be {}-{} days, got {}'.format(
                        MIN_RETENTION_DAYS, MAX_RETENTION_DAYS, days))
        self._lock = threading.RLock()
        self.indexes = {}
        self.derived = {}
        self._derived_dir = self.root / '_derived'
        self._derived_dir.mkdir(exist_ok=True)

        for path in sorted(self.root.iterdir()):
            parsed = parse_index_name(path.name)
            if path.is_dir() and parsed:
                index = DailyIndex(path, *parsed).load()
                self.indexes[index.name] = index
        for spec in derived:
            self.add_derived(spec)

    def add_derived(self, spec):
        derived = DerivedIndex(spec)
        path = self._derived_dir / '{}.json'.format(spec.name)
        with self._lock:
            if path.exists():
                derived.load(json.loads(path.read_text()))
            self.derived[spec.name] = derived
        return derived

    def _save_derived(self, names):
        for name in names:
            derived = self.derived[name]
            path = self._derived_dir / '{}.json'.format(name)
            tmp = path.with_suffix('.tmp')
            tmp.write_bytes(canonical_json(derived.to_dict()))
            os.replace(tmp, path)

    def _index_for(self, doc):
        day = utc_day(doc.timestamp)
        name = index_name(doc.doc_type, day)
        index = self.indexes.get(name)
        if index is None:
            index = DailyIndex(self.root / name, doc.doc_type, day).load()
            self.indexes[name] = index
            logger.info('Created daily index {}'.format(name))
        return index

    def index_document(self, doc):
        return self.index_batch([doc])

    def index_batch(self, docs):
        """Store docs, skipping ones already stored; returns count stored."""
        stored = 0
        with self._lock:
            touched_indexes = set()
            touched_derived = set()
            for doc in docs:
                index = self._index_for(doc)
                if index.contains(doc):
                    logger.debug('Skipping duplicate document in {}'.format(
                        index.name))
                    continue
                position = index.append(doc)
                touched_indexes.add(index.name)
                stored += 1
                for derived in self.derived.values():
                    if derived.spec.source_doc_type == doc.doc_type:
                        derived.update(doc, (day_start(index.day), position))
                        touched_derived.add(derived.spec.name)
            for name in touched_indexes:
                self.indexes[name].sync()
            self._save_derived(touched_derived)
        return stored

    def _indexes_in_range(self, doc_type, start, end):
        first, last = utc_day(start), utc_day(min(end, MAX_TS))
        with self._lock:
            return sorted(
                (i for i in self.indexes.values()
                 if i.doc_type == doc_type and first <= i.day <= last),
                key=lambda i: i.day)

    def search(self, query):
        start, end = query.time_range
        hits = []
        for index in self._indexes_in_range(query.doc_type, start, end):
            with self._lock:
                documents = index.documents[:]
                positions = list(index.candidates(query.matchers))
            for position in positions:
                doc = documents[position]
                if not start <= doc.timestamp <= end:
                    continue
                if all(m.matches(doc) for m in query.matchers):
                    hits.append(((doc.timestamp, index.day, position), doc))
        hits.sort(key=lambda hit: hit[0], reverse=True)
        return [doc for _, doc in hits[:query.limit]]

    def retention_for(self, doc_type):
        return self.retention_overrides.get(doc_type, self.retention_days)

    def apply_retention(self, now=None):
        """Drop daily indexes older than their doc_type's retention."""
        today = utc_day(now_ms() if now is None else now)
        dropped = []
        with self._lock:
            for name in sorted(self.indexes):
                index = self.indexes[name]
                if (today - index.day).days > self.retention_for(
                        index.doc_type):
                    index.drop()
                    del self.indexes[name]
                    dropped.append(name)
        for name in dropped:
            logger.info('Dropped daily index {}'.format(name))
        return dropped

    def rebuild_derived(self, name, time_range=None):
        """Recompute a derived index from stored documents; returns entries."""
        with self._lock:
            derived = self.derived[name]
            start, end = time_range or (0, MAX_TS)
            derived.reset()
            spec = derived.spec
            for index in self._indexes_in_range(
                    spec.source_doc_type, start, end):
                for position, doc in enumerate(index.documents):
                    if start <= doc.timestamp <= end:
                        derived.update(doc, (day_start(index.day), position))
            self._save_derived([name])
            logger.info(
                'Rebuilt derived index {}: {} entries, {} skipped'.format(
                    name, len(derived.entries), derived.skipped))
            return len(derived.entries)

    def list_indexes(self):
        with self._lock:
            return [
                {'name': i.name, 'documents': len(i.documents),
                 'bytes': i.size}
                for i in sorted(self.indexes.values(), key=lambda i: i.name)]

    def close(self):
        with self._lock:
            for index in self.indexes.values():
                index.close()
