import json

import pytest

from minimon.bus import Bus
from minimon.core import DAY, Document, utc_day
from minimon.exceptions import RegistrationError
from minimon.ingest import (
    Ingestor, ProducerRegistration, QuotaLedger, Reason, Registry,
    doc_topic, validate_document)

from tests.conftest import T0, load_data


@pytest.fixture
def bus(tmp_path):
    bus = Bus(tmp_path / 'bus', fsync_interval=0)
    yield bus
    bus.close()


@pytest.fixture
def registry(registration):
    registry = Registry()
    registry.register(registration)
    return registry


@pytest.fixture
def ingestor(registry, bus):
    return Ingestor(registry, bus)


@pytest.fixture
def batch():
    return load_data('wma_batch.json')


def _reasons(results):
    return [None if r.ok else r.reason for r in results]


def test_registration_round_trip(registration):
    again = ProducerRegistration.from_dict(registration.to_dict())

    assert again == registration
    assert registration.route.tsdb.tags == ('site',)
    assert registration.schema.field('comment').required is False


def test_register_duplicate(registry, registration):
    with pytest.raises(RegistrationError) as excinfo:
        registry.register(registration)

    assert excinfo.value.reason is Reason.DUPLICATE


def test_register_replace(registry, registration_data):
    registration_data['daily_quota_bytes'] = 1
    updated = ProducerRegistration.from_dict(registration_data)

    registry.register(updated, replace=True)

    assert registry.get('wmarchive', 'wma_job').daily_quota_bytes == 1


@pytest.mark.parametrize('change,reason', [
    (lambda d: d['fields'].append({'name': 'timestamp', 'type': 'int'}),
     Reason.RESERVED_FIELD),
    (lambda d: d['fields'].append({'name': 'site', 'type': 'int'}),
     Reason.INVALID_SCHEMA),
    (lambda d: d.update(fields=[]), Reason.INVALID_SCHEMA),
    (lambda d: d.update(daily_quota_bytes=0), Reason.INVALID_SCHEMA),
    (lambda d: d['route'].update(tags=['exit_code']), Reason.INVALID_SCHEMA),
    (lambda d: d['route'].update(values=['site']), Reason.INVALID_SCHEMA),
    (lambda d: d.update(producer='bad name'), Reason.INVALID_SCHEMA),
])
def test_register_invalid(registration_data, change, reason):
    change(registration_data)

    with pytest.raises(RegistrationError) as excinfo:
        Registry().register(ProducerRegistration.from_dict(registration_data))

    assert excinfo.value.reason is reason


@pytest.mark.parametrize('data', [
    [],
    {'producer': 'p'},
    {'producer': 'p', 'doc_type': 't', 'daily_quota_bytes': 1,
     'fields': [{'name': 'x', 'type': 'decimal'}]},
])
def test_registration_from_dict_malformed(data):
    with pytest.raises(RegistrationError) as excinfo:
        ProducerRegistration.from_dict(data)

    assert excinfo.value.reason is Reason.MALFORMED


def test_registry_persists(tmp_path, registration):
    path = str(tmp_path / 'producers.json')
    Registry(path).register(registration)

    reloaded = Registry(path)

    assert reloaded.list() == [registration]
    assert json.loads(open(path).read())[0]['producer'] == 'wmarchive'


def _doc(payload, ts=T0):
    return Document('wmarchive', 'wma_job', ts, payload)


GOOD = {'job_id': 'j', 'site': 'T2', 'exit_code': 0, 'cpu_hours': 1.0}


@pytest.mark.parametrize('payload,ts,reason', [
    (GOOD, T0, None),
    (dict(GOOD, cpu_hours=2), T0, None),
    (dict(GOOD, extra_field='kept'), T0, None),
    (dict(GOOD, version=2), T0, Reason.RESERVED_FIELD),
    (dict(GOOD, uuid='u'), T0, Reason.RESERVED_FIELD),
    ({'site': 'T2', 'exit_code': 0, 'cpu_hours': 1.0}, T0,
     Reason.MISSING_REQUIRED),
    (dict(GOOD, exit_code=1.5), T0, Reason.TYPE_MISMATCH),
    (dict(GOOD, exit_code=True), T0, Reason.TYPE_MISMATCH),
    (dict(GOOD, site=3), T0, Reason.TYPE_MISMATCH),
    (GOOD, T0 - 8 * DAY, Reason.TIMESTAMP_SKEW),
    (GOOD, T0 + 7 * DAY, None),
])
def test_validate_document(registration, payload, ts, reason):
    error = validate_document(_doc(payload, ts), registration.schema, T0)

    assert (error.reason if error else None) is reason


def test_validate_document_reserved_checked_first(registration):
    error = validate_document(
        _doc({'timestamp': 1}), registration.schema, T0)

    assert error.reason is Reason.RESERVED_FIELD


def test_quota_ledger():
    ledger = QuotaLedger()

    assert ledger.charge('k', 1, 60, 100)
    assert not ledger.charge('k', 1, 60, 100)
    assert ledger.charge('k', 2, 60, 100)
    assert ledger.used('k', 1) == 0
    ledger.refund('k', 2, 60)
    assert ledger.used('k', 2) == 0


def test_inject_accepts_batch(ingestor, bus, batch):
    results = ingestor.inject('wmarchive', 'wma_job', batch, now=T0)

    assert all(r.ok for r in results)
    assert [r.offset for r in results] == [0, 1, 2, 3, 4]
    assert bus.next_offset(doc_topic('wma_job')) == 5
    stored = Document.decode(bus.poll('g', 'docs.wma_job', 1)[0].payload)
    assert stored.payload['job_id'] == 'j1'
    assert ingestor.stats['accepted'] == 5


def test_inject_partial_acceptance(ingestor, bus, batch):
    batch[2]['payload']['version'] = 1

    results = ingestor.inject('wmarchive', 'wma_job', batch, now=T0)

    assert _reasons(results) == [None, None, Reason.RESERVED_FIELD, None, None]
    assert results[2].to_dict()['reason'] == 'RESERVED_FIELD'
    assert bus.next_offset('docs.wma_job') == 4


def test_inject_unknown_producer(ingestor, bus, batch):
    results = ingestor.inject('nobody', 'wma_job', batch, now=T0)

    assert set(_reasons(results)) == {Reason.UNKNOWN_PRODUCER}
    assert bus.next_offset('docs.wma_job') == 0


def test_inject_malformed_item(ingestor, batch):
    batch[0] = 'not a document'
    batch[1]['producer'] = 'someone_else'

    results = ingestor.inject('wmarchive', 'wma_job', batch, now=T0)

    assert _reasons(results)[:3] == [Reason.MALFORMED, Reason.MALFORMED, None]


def test_inject_quota_is_all_or_nothing_per_document(ingestor, bus, batch):
    sizes = [
        len(Document.from_dict(item, 'wmarchive', 'wma_job').encode())
        for item in batch]
    reg = ingestor.registry.get('wmarchive', 'wma_job')
    ingestor.registry.register(
        ProducerRegistration(
            reg.producer, reg.doc_type, reg.schema, sum(sizes[:2]),
            reg.route),
        replace=True)

    results = ingestor.inject('wmarchive', 'wma_job', batch, now=T0)

    assert _reasons(results) == [None, None] + [Reason.QUOTA_EXCEEDED] * 3
    assert bus.next_offset('docs.wma_job') == 2

    # The quota resets on the next UTC day
    later = ingestor.inject('wmarchive', 'wma_job', batch[:1], now=T0 + DAY)
    assert later[0].ok


def test_inject_refunds_quota_on_publish_failure(ingestor, bus, batch, mocker):
    mocker.patch.object(bus, 'publish', side_effect=OSError('disk full'))

    with pytest.raises(OSError):
        ingestor.inject('wmarchive', 'wma_job', batch[:1], now=T0)

    assert ingestor.quota.used(('wmarchive', 'wma_job'), utc_day(T0)) == 0
