"""Shared domain types, series keying and time arithmetic.

All timestamps are integer milliseconds since the Unix epoch, UTC.
"""
import datetime
import enum
import hashlib
import json
import math
import re
import time
from collections.abc import Mapping
from dataclasses import dataclass, field

from minimon.exceptions import InvalidNameError, MalformedDocument


SECOND = 1000
MINUTE = 60 * SECOND
HOUR = 60 * MINUTE
DAY = 24 * HOUR
WEEK = 7 * DAY

MAX_NAME_LENGTH = 256
# Last millisecond representable as a datetime (9999-12-31)
MAX_TS = 253402300799999
RESERVED_FIELDS = frozenset(['version', 'timestamp', 'uuid'])

_NAME_RE = re.compile(r'[A-Za-z_][A-Za-z0-9_]*\Z')
_DURATION_RE = re.compile(r'\s*(\d+)\s*(ms|s|m|h|d|w)\s*\Z')
_DURATION_UNITS = {
    'ms': 1, 's': SECOND, 'm': MINUTE, 'h': HOUR, 'd': DAY, 'w': WEEK,
}
_EPOCH = datetime.datetime(1970, 1, 1, tzinfo=datetime.timezone.utc)

Timestamp = int


def validate_name(s):
    return (
        isinstance(s, str)
        and len(s) <= MAX_NAME_LENGTH
        and _NAME_RE.match(s) is not None
    )


def require_name(s, what='name'):
    if not validate_name(s):
        raise InvalidNameError(s, what)
    return s


def validate_dotted_name(s):
    # Identifiers joined by dots, used for bus topics
    return (
        isinstance(s, str)
        and len(s) <= MAX_NAME_LENGTH
        and all(validate_name(part) for part in s.split('.'))
    )


class Resolution(enum.Enum):
    RAW = 0
    M12 = 12 * MINUTE
    H1 = HOUR
    D1 = DAY
    D7 = 7 * DAY
    D30 = 30 * DAY

    @property
    def duration(self):
        return self.value

    @property
    def label(self):
        return self.name.lower()

    @classmethod
    def from_label(cls, label):
        return cls[label.upper()]


AGGREGATED = (
    Resolution.M12, Resolution.H1, Resolution.D1, Resolution.D7,
    Resolution.D30,
)

# Parent resolution -> the child tier it is merged from
CASCADE_SOURCE = {
    Resolution.H1: Resolution.M12,
    Resolution.D1: Resolution.H1,
    Resolution.D7: Resolution.D1,
    Resolution.D30: Resolution.D1,
}


def bin_start(ts, res):
    if res is Resolution.RAW:
        raise ValueError('RAW resolution has no bins')
    return ts - ts % res.duration


def escape_value(value):
    return (
        value.replace('\\', '\\\\').replace('"', '\\"').replace('\n', '\\n')
    )


class TagSet(Mapping):
    """Immutable tag-name -> tag-value map, canonically ordered by name."""

    __slots__ = ('_items', '_map')

    def __init__(self, pairs=None, **kwargs):
        data = dict(pairs or {})
        data.update(kwargs)
        for name, value in data.items():
            require_name(name, 'tag name')
            if not isinstance(value, str):
                raise TypeError(
                    'Tag {} must have a string value, got {!r}'.format(
                        name, value))
        self._items = tuple(sorted(data.items()))
        self._map = data

    def __getitem__(self, name):
        return self._map[name]

    def __iter__(self):
        return (name for name, _ in self._items)

    def __len__(self):
        return len(self._items)

    def __hash__(self):
        return hash(self._items)

    def __repr__(self):
        return 'TagSet({!r})'.format(dict(self._items))

    def merge(self, other):
        # Tags from other win on collision
        data = dict(self._items)
        data.update(other)
        return TagSet(data)

    def select(self, names):
        return TagSet({k: v for k, v in self._items if k in names})

    def render(self):
        return ','.join(
            '{}="{}"'.format(k, escape_value(v)) for k, v in self._items)


EMPTY_TAGS = TagSet()


def render_series(name, tags):
    if not tags:
        return name or '{}'
    return '{}{{{}}}'.format(name, tags.render())


def canonical_series_key(name, tags):
    require_name(name, 'metric name')
    if not isinstance(tags, TagSet):
        tags = TagSet(tags)
    return render_series(name, tags)


@dataclass(frozen=True)
class SeriesKey:
    name: str
    tags: TagSet = EMPTY_TAGS

    def __post_init__(self):
        if not isinstance(self.tags, TagSet):
            object.__setattr__(self, 'tags', TagSet(self.tags))

    @classmethod
    def of(cls, name, tags=None, **kwargs):
        require_name(name, 'metric name')
        return cls(name, TagSet(tags, **kwargs))

    @property
    def canonical(self):
        return render_series(self.name, self.tags)

    def __str__(self):
        return self.canonical


def canonical_json(obj):
    return json.dumps(
        obj, sort_keys=True, separators=(',', ':'), ensure_ascii=False,
        allow_nan=False).encode('utf-8')


def _is_scalar(value):
    if isinstance(value, float):
        return math.isfinite(value)
    return isinstance(value, (bool, int, str))


@dataclass(frozen=True)
class Document:
    producer: str
    doc_type: str
    timestamp: Timestamp
    payload: Mapping = field(default_factory=dict)

    def to_dict(self):
        return {
            'producer': self.producer,
            'type': self.doc_type,
            'timestamp': self.timestamp,
            'payload': dict(self.payload),
        }

    def encode(self):
        return canonical_json(self.to_dict())

    @property
    def size(self):
        return len(self.encode())

    def content_hash(self):
        head = '{}|{}|{}|'.format(self.producer, self.doc_type, self.timestamp)
        digest = hashlib.sha256(head.encode('utf-8'))
        digest.update(canonical_json(dict(self.payload)))
        return digest.hexdigest()

    def get(self, path, default=None):
        """Look up a payload field; ``a.b`` reaches one nesting level."""
        head, _, tail = path.partition('.')
        value = self.payload.get(head, default)
        if tail:
            if not isinstance(value, Mapping):
                return default
            return value.get(tail, default)
        return value

    @classmethod
    def decode(cls, data):
        try:
            obj = json.loads(data)
        except ValueError as e:
            raise MalformedDocument('Undecodable document: {}'.format(e))
        return cls.from_dict(obj)

    @classmethod
    def from_dict(cls, obj, producer=None, doc_type=None):
        if not isinstance(obj, Mapping):
            raise MalformedDocument('Document must be a JSON object')
        producer = obj.get('producer', producer)
        doc_type = obj.get('type', doc_type)
        if producer is None or not validate_name(producer):
            raise MalformedDocument('Invalid producer {!r}'.format(producer))
        if doc_type is None or not validate_name(doc_type):
            raise MalformedDocument('Invalid type {!r}'.format(doc_type))

        timestamp = obj.get('timestamp')
        if (isinstance(timestamp, bool) or not isinstance(timestamp, int)
                or timestamp < 0):
            raise MalformedDocument(
                'Invalid timestamp {!r}'.format(timestamp))

        payload = obj.get('payload')
        if not isinstance(payload, Mapping):
            raise MalformedDocument('Payload must be a JSON object')
        for key, value in payload.items():
            if not isinstance(key, str) or not key:
                raise MalformedDocument('Invalid field name {!r}'.format(key))
            if isinstance(value, Mapping):
                for inner_key, inner in value.items():
                    if not isinstance(inner_key, str) or not _is_scalar(inner):
                        raise MalformedDocument(
                            'Field {}.{} is not a scalar'.format(
                                key, inner_key))
            elif not _is_scalar(value):
                raise MalformedDocument('Field {} is not a scalar'.format(key))

        return cls(producer, doc_type, timestamp, dict(payload))


def now_ms():
    return int(time.time() * 1000)


def to_datetime(ts):
    return _EPOCH + datetime.timedelta(milliseconds=ts)


def utc_day(ts):
    return to_datetime(ts).date()


def day_start(day):
    return (day - _EPOCH.date()).days * DAY


def format_ts(ts):
    dt = to_datetime(ts)
    return '{}.{:03d}Z'.format(
        dt.strftime('%Y-%m-%dT%H:%M:%S'), dt.microsecond // 1000)


def parse_ts(value):
    """Accept epoch milliseconds (int or digits) or an ISO-8601 UTC string."""
    if isinstance(value, int) and not isinstance(value, bool):
        return value
    text = str(value).strip()
    if text.isdigit():
        return int(text)
    if text.endswith('Z'):
        text = text[:-1] + '+00:00'
    dt = datetime.datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=datetime.timezone.utc)
    delta = dt - _EPOCH
    return (delta.days * DAY + delta.seconds * SECOND
            + delta.microseconds // 1000)


def parse_duration(text):
    if isinstance(text, int) and not isinstance(text, bool):
        return text
    match = _DURATION_RE.match(str(text))
    if not match:
        raise ValueError('Invalid duration {!r}'.format(text))
    return int(match.group(1)) * _DURATION_UNITS[match.group(2)]


def format_duration(ms):
    for unit in ('w', 'd', 'h', 'm', 's'):
        size = _DURATION_UNITS[unit]
        if ms and ms % size == 0:
            return '{}{}'.format(ms // size, unit)
    return '{}ms'.format(ms)


@dataclass(frozen=True)
class MetricPoint:
    key: SeriesKey
    value: float
    ts: Timestamp

    @classmethod
    def of(cls, name, value, ts, tags=None):
        return cls(SeriesKey.of(name, tags), float(value), ts)
