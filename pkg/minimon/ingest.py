"""Producer registry, document validation, quota accounting and injection."""
import enum
import json
import logging
import os
import threading
from collections import Counter
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from minimon.core import (
    DAY, RESERVED_FIELDS, Document, now_ms, utc_day, validate_name)
from minimon.exceptions import MalformedDocument, RegistrationError

logger = logging.getLogger(__name__)

DEFAULT_SKEW = 7 * DAY


class Reason(enum.Enum):
    RESERVED_FIELD = 'RESERVED_FIELD'
    TYPE_MISMATCH = 'TYPE_MISMATCH'
    MISSING_REQUIRED = 'MISSING_REQUIRED'
    UNKNOWN_PRODUCER = 'UNKNOWN_PRODUCER'
    TIMESTAMP_SKEW = 'TIMESTAMP_SKEW'
    QUOTA_EXCEEDED = 'QUOTA_EXCEEDED'
    MALFORMED = 'MALFORMED'
    DUPLICATE = 'DUPLICATE'
    INVALID_SCHEMA = 'INVALID_SCHEMA'


class FieldType(enum.Enum):
    INT = 'int'
    FLOAT = 'float'
    STRING = 'string'
    BOOL = 'bool'

    def accepts(self, value):
        if isinstance(value, bool):
            return self is FieldType.BOOL
        if isinstance(value, int):
            return self in (FieldType.INT, FieldType.FLOAT)
        if isinstance(value, float):
            return self is FieldType.FLOAT
        if isinstance(value, str):
            return self is FieldType.STRING
        return False

    @property
    def numeric(self):
        return self in (FieldType.INT, FieldType.FLOAT)


@dataclass(frozen=True)
class FieldDef:
    name: str
    type: FieldType
    required: bool = True

    def to_dict(self):
        return {
            'name': self.name, 'type': self.type.value,
            'required': self.required,
        }


@dataclass(frozen=True)
class SchemaDef:
    producer: str
    doc_type: str
    fields: Tuple[FieldDef, ...]

    def field(self, name):
        for f in self.fields:
            if f.name == name:
                return f
        return None

    def validate(self):
        if not self.fields:
            raise RegistrationError(
                'Schema needs at least one field', Reason.INVALID_SCHEMA)
        seen = set()
        for f in self.fields:
            if f.name in RESERVED_FIELDS:
                raise RegistrationError(
                    'Field {!r} is reserved'.format(f.name),
                    Reason.RESERVED_FIELD)
            if not validate_name(f.name):
                raise RegistrationError(
                    'Invalid field name {!r}'.format(f.name),
                    Reason.INVALID_SCHEMA)
            if f.name in seen:
                raise RegistrationError(
                    'Field {!r} declared twice'.format(f.name),
                    Reason.INVALID_SCHEMA)
            seen.add(f.name)


@dataclass(frozen=True)
class TsdbMapping:
    tags: Tuple[str, ...] = ()
    values: Tuple[str, ...] = ()


@dataclass(frozen=True)
class Route:
    to_docstore: bool = True
    to_tsdb: bool = False
    to_archive: bool = True
    tsdb: TsdbMapping = field(default_factory=TsdbMapping)


@dataclass(frozen=True)
class ProducerRegistration:
    producer: str
    doc_type: str
    schema: SchemaDef
    daily_quota_bytes: int
    route: Route = field(default_factory=Route)

    @property
    def key(self):
        return (self.producer, self.doc_type)

    def validate(self):
        for token, what in ((self.producer, 'producer'),
                            (self.doc_type, 'doc_type')):
            if not validate_name(token):
                raise RegistrationError(
                    'Invalid {}: {!r}'.format(what, token),
                    Reason.INVALID_SCHEMA)
        if (self.schema.producer, self.schema.doc_type) != self.key:
            raise RegistrationError(
                'Schema key does not match registration',
                Reason.INVALID_SCHEMA)
        self.schema.validate()
        if (isinstance(self.daily_quota_bytes, bool)
                or not isinstance(self.daily_quota_bytes, int)
                or self.daily_quota_bytes <= 0):
            raise RegistrationError(
                'daily_quota_bytes must be a positive integer',
                Reason.INVALID_SCHEMA)

        mapping = self.route.tsdb
        for name in mapping.tags:
            f = self.schema.field(name)
            if f is None or f.type is not FieldType.STRING:
                raise RegistrationError(
                    'Tag field {!r} must be a string schema field'.format(
                        name), Reason.INVALID_SCHEMA)
        for name in mapping.values:
            f = self.schema.field(name)
            if f is None or not f.type.numeric:
                raise RegistrationError(
                    'Value field {!r} must be a numeric schema field'.format(
                        name), Reason.INVALID_SCHEMA)

    def to_dict(self):
        return {
            'producer': self.producer,
            'doc_type': self.doc_type,
            'daily_quota_bytes': self.daily_quota_bytes,
            'fields': [f.to_dict() for f in self.schema.fields],
            'route': {
                'to_docstore': self.route.to_docstore,
                'to_tsdb': self.route.to_tsdb,
                'to_archive': self.route.to_archive,
                'tags': list(self.route.tsdb.tags),
                'values': list(self.route.tsdb.values),
            },
        }

    @classmethod
    def from_dict(cls, data):
        """Build a registration from its JSON form.

        Raises RegistrationError for structurally broken input; semantic
        checks are left to validate().
        """
        if not isinstance(data, Mapping):
            raise RegistrationError(
                'Registration must be a JSON object', Reason.MALFORMED)
        try:
            producer = data['producer']
            doc_type = data['doc_type']
            fields = tuple(
                FieldDef(f['name'], FieldType(f['type']),
                         bool(f.get('required', True)))
                for f in data['fields'])
            route_data = data.get('route') or {}
            route = Route(
                to_docstore=bool(route_data.get('to_docstore', True)),
                to_tsdb=bool(route_data.get('to_tsdb', False)),
                to_archive=bool(route_data.get('to_archive', True)),
                tsdb=TsdbMapping(
                    tuple(route_data.get('tags', ())),
                    tuple(route_data.get('values', ()))))
            return cls(
                producer, doc_type, SchemaDef(producer, doc_type, fields),
                data['daily_quota_bytes'], route)
        except (KeyError, TypeError, ValueError) as e:
            raise RegistrationError(
                'Malformed registration: {}'.format(e), Reason.MALFORMED)


class Registry(object):
    """Registered producers, optionally persisted to a JSON file."""

    def __init__(self, path=None):
        self.path = path
        self._lock = threading.Lock()
        self._registrations = {}
        if path and os.path.exists(path):
            self._load()

    def _load(self):
        with open(self.path) as fh:
            for data in json.load(fh):
                reg = ProducerRegistration.from_dict(data)
                self._registrations[reg.key] = reg
        logger.info('Loaded {} producer registrations from {}'.format(
            len(self._registrations), self.path))

    def _save(self):
        if not self.path:
            return
        tmp = self.path + '.tmp'
        with open(tmp, 'w') as fh:
            json.dump(
                [r.to_dict() for r in self._sorted()], fh, indent=2,
                sort_keys=True)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.path)

    def _sorted(self):
        return [self._registrations[k] for k in sorted(self._registrations)]

    def register(self, reg, replace=False):
        reg.validate()
        with self._lock:
            if reg.key in self._registrations and not replace:
                raise RegistrationError(
                    'Producer {}/{} already registered'.format(*reg.key),
                    Reason.DUPLICATE)
            self._registrations[reg.key] = reg
            self._save()
        logger.info('Registered producer {}/{}'.format(*reg.key))
        return reg

    def get(self, producer, doc_type):
        return self._registrations.get((producer, doc_type))

    def by_doc_type(self, doc_type):
        # Sinks only see the doc_type on the bus topic
        return [r for r in self._sorted() if r.doc_type == doc_type]

    def list(self):
        return self._sorted()


@dataclass(frozen=True)
class ValidationError:
    doc_index: int
    reason: Reason
    detail: str = ''

    ok = False

    def to_dict(self):
        return {
            'index': self.doc_index, 'status': 'rejected',
            'reason': self.reason.value, 'detail': self.detail,
        }


@dataclass(frozen=True)
class Accepted:
    doc_index: int
    offset: int

    ok = True

    def to_dict(self):
        return {'index': self.doc_index, 'status': 'ok', 'offset': self.offset}


def validate_document(doc, schema, now, skew=DEFAULT_SKEW, doc_index=0):
    """Return None when doc satisfies schema, else the first ValidationError.

    Checks run in the order reserved names, required fields, types,
    timestamp skew. Fields the schema does not declare are accepted.
    """
    for name in doc.payload:
        if name in RESERVED_FIELDS:
            return ValidationError(
                doc_index, Reason.RESERVED_FIELD,
                'field {!r} is reserved'.format(name))

    for f in schema.fields:
        if f.required and f.name not in doc.payload:
            return ValidationError(
                doc_index, Reason.MISSING_REQUIRED,
                'field {!r} is required'.format(f.name))

    for f in schema.fields:
        if f.name in doc.payload and not f.type.accepts(doc.payload[f.name]):
            return ValidationError(
                doc_index, Reason.TYPE_MISMATCH,
                'field {!r} must be {}, got {!r}'.format(
                    f.name, f.type.value, doc.payload[f.name]))

    if abs(doc.timestamp - now) > skew:
        return ValidationError(
            doc_index, Reason.TIMESTAMP_SKEW,
            'timestamp {} is more than {} ms from now'.format(
                doc.timestamp, skew))

    return None


class QuotaLedger(object):
    # Bytes charged per (producer, doc_type) and UTC day

    def __init__(self):
        self._lock = threading.Lock()
        self._charged = {}

    def charge(self, key, day, size, limit):
        with self._lock:
            used = self._charged.get((key, day), 0)
            if used + size > limit:
                return False
            self._charged[(key, day)] = used + size
            for stale in [k for k in self._charged if k[1] < day]:
                del self._charged[stale]
            return True

    def refund(self, key, day, size):
        with self._lock:
            self._charged[(key, day)] = self._charged.get((key, day), 0) - size

    def used(self, key, day):
        return self._charged.get((key, day), 0)


def doc_topic(doc_type):
    return 'docs.{}'.format(doc_type)


class Ingestor(object):

    def __init__(self, registry, bus, skew=DEFAULT_SKEW):
        self.registry = registry
        self.bus = bus
        self.skew = skew
        self.quota = QuotaLedger()
        self.stats = Counter()

    def _coerce(self, item, producer, doc_type):
        if isinstance(item, Document):
            doc = item
        else:
            doc = Document.from_dict(item, producer, doc_type)
        if (doc.producer, doc.doc_type) != (producer, doc_type):
            raise MalformedDocument(
                'Document is for {}/{}, not {}/{}'.format(
                    doc.producer, doc.doc_type, producer, doc_type))
        return doc

    def inject(self, producer, doc_type, batch, now=None) -> List[object]:
        """Validate, charge and publish a batch; one result per document."""
        now = now_ms() if now is None else now
        reg: Optional[ProducerRegistration] = self.registry.get(
            producer, doc_type)
        day = utc_day(now)
        topic = doc_topic(doc_type)
        results = []
        over_quota = False

        for index, item in enumerate(batch):
            if reg is None:
                results.append(ValidationError(
                    index, Reason.UNKNOWN_PRODUCER,
                    '{}/{} is not registered'.format(producer, doc_type)))
                continue
            if over_quota:
                results.append(ValidationError(
                    index, Reason.QUOTA_EXCEEDED,
                    'daily quota of {} bytes exhausted'.format(
                        reg.daily_quota_bytes)))
                continue

            try:
                doc = self._coerce(item, producer, doc_type)
            except MalformedDocument as e:
                results.append(
                    ValidationError(index, Reason.MALFORMED, str(e)))
                continue

            error = validate_document(
                doc, reg.schema, now, self.skew, doc_index=index)
            if error is not None:
                results.append(error)
                continue

            data = doc.encode()
            if not self.quota.charge(
                    reg.key, day, len(data), reg.daily_quota_bytes):
                over_quota = True
                results.append(ValidationError(
                    index, Reason.QUOTA_EXCEEDED,
                    'daily quota of {} bytes exhausted'.format(
                        reg.daily_quota_bytes)))
                continue

            try:
                offset = self.bus.publish(topic, data)
            except Exception:
                self.quota.refund(reg.key, day, len(data))
                raise
            results.append(Accepted(index, offset))

        for result in results:
            if result.ok:
                self.stats['accepted'] += 1
            else:
                self.stats[result.reason.value] += 1
        rejected = sum(1 for r in results if not r.ok)
        if rejected:
            logger.warning('Rejected {} of {} documents from {}/{}'.format(
                rejected, len(results), producer, doc_type))
        else:
            logger.debug('Accepted {} documents from {}/{}'.format(
                len(results), producer, doc_type))
        return results
