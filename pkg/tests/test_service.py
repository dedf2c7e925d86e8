import datetime

import pytest

from minimon.core import DAY, SECOND, Document, SeriesKey
from minimon.docstore import DocQuery
from minimon.exceptions import ConfigError
from minimon.ingest import ProducerRegistration
from minimon.service import SINKS, Pipeline, metric_points

from tests.conftest import T0, load_data


NOW = T0 + 5 * SECOND


@pytest.fixture
def pipeline(config, clock, http_mock):
    clock.now = NOW
    pipeline = Pipeline(config, http=http_mock, clock=clock)
    yield pipeline
    pipeline.close()


def inject(pipeline, registration_data, batch=None):
    reg = ProducerRegistration.from_dict(registration_data)
    pipeline.registry.register(reg, replace=True)
    return pipeline.ingestor.inject(
        reg.producer, reg.doc_type, batch or load_data('wma_batch.json'),
        NOW)


def test_drain_routes_to_every_sink(pipeline, registration_data):
    assert all(r.ok for r in inject(pipeline, registration_data))

    for group in SINKS:
        assert pipeline.drain_all(group) == 5

    assert len(pipeline.docstore.search(DocQuery('wma_job'))) == 5
    assert len(pipeline.tsdb.series_keys()) == 6
    assert SeriesKey.of('wma_job_exit_code', site='T2_DE_DESY') in (
        pipeline.tsdb.series_keys())
    [partition] = pipeline.archive.list_partitions()
    assert partition['record_count'] == 5
    for group in SINKS:
        assert pipeline.bus.lag(group, 'docs.wma_job') == 0


def test_route_skips_disabled_sinks(pipeline, registration_data):
    registration_data['route']['to_docstore'] = False
    inject(pipeline, registration_data)

    assert pipeline.drain_all('docstore') == 5

    assert pipeline.docstore.search(DocQuery('wma_job')) == []


def test_failed_sink_is_redelivered(pipeline, registration_data, mocker):
    inject(pipeline, registration_data)
    index_batch = mocker.patch.object(
        pipeline.docstore, 'index_batch', side_effect=OSError('disk full'))

    assert pipeline.drain('docstore', 'docs.wma_job') == 0
    assert pipeline.stats['docstore_failures'] == 1
    assert pipeline.bus.lag('docstore', 'docs.wma_job') == 5

    index_batch.side_effect = None
    index_batch.return_value = 5
    assert pipeline.drain('docstore', 'docs.wma_job') == 5
    assert len(index_batch.call_args[0][0]) == 5
    assert pipeline.bus.lag('docstore', 'docs.wma_job') == 0


def test_lost_commit_redelivers_without_duplicates(
        pipeline, registration_data, mocker):
    inject(pipeline, registration_data)
    mocker.patch.object(pipeline.bus, 'commit')
    for group in ('docstore', 'tsdb'):
        assert pipeline.drain(group, 'docs.wma_job') == 5
    mocker.stopall()
    assert pipeline.bus.lag('tsdb', 'docs.wma_job') == 5

    for group in ('docstore', 'tsdb'):
        assert pipeline.drain_all(group) == 5

    assert pipeline.tsdb.cardinality().total_points == 10
    assert len(pipeline.docstore.search(DocQuery('wma_job'))) == 5
    assert pipeline.bus.lag('tsdb', 'docs.wma_job') == 0


def test_undecodable_records_are_skipped(pipeline, registration_data):
    inject(pipeline, registration_data)
    pipeline.bus.publish('docs.wma_job', b'garbage')

    assert pipeline.drain_all('archive') == 6

    assert pipeline.stats['undecodable'] == 1
    assert pipeline.archive.list_partitions()[0]['record_count'] == 5


def test_metric_points(registration):
    doc = Document('wmarchive', 'wma_job', T0, {
        'site': 'T2', 'cpu_hours': 1.5, 'exit_code': True})

    points = metric_points(doc, registration.route)

    assert [(str(p.key), p.value, p.ts) for p in points] == [
        ('wma_job_cpu_hours{site="T2"}', 1.5, T0)]


def test_metric_points_skip_non_string_tags(registration):
    doc = Document('wmarchive', 'wma_job', T0, {'site': 5, 'exit_code': 1})

    [point] = metric_points(doc, registration.route)

    assert str(point.key) == 'wma_job_exit_code'


def test_maintenance(pipeline, registration_data):
    inject(pipeline, registration_data)
    for group in SINKS:
        pipeline.drain_all(group)

    report = pipeline.maintenance(T0 + 2 * DAY)

    assert report['bins_finalized'] > 0
    assert report['indexes_dropped'] == []
    [compaction] = report['compactions']
    assert compaction['day'] == '2024-01-10'
    assert compaction['duplicates_removed'] == 0
    assert pipeline.archive.eligible(T0 + 2 * DAY) == []
    key = ('wma_job', datetime.date(2024, 1, 10), False)
    assert pipeline.archive.partitions[key].state.value == 'COMPACTED'


def test_status(pipeline, registration_data):
    inject(pipeline, registration_data)
    pipeline.drain_all('docstore')

    status = pipeline.status()

    assert status['producers'][0]['producer'] == 'wmarchive'
    assert status['bus']['topics'] == {'docs.wma_job': 5}
    assert status['bus']['lag']['docstore'] == {'docs.wma_job': 0}
    assert status['bus']['lag']['tsdb'] == {'docs.wma_job': 5}
    assert status['ingest'] == {'accepted': 5}
    assert status['alerts'] == 0


def test_render_metrics(pipeline, registration_data):
    batch = load_data('wma_batch.json')
    batch[0]['payload']['exit_code'] = 'zero'
    inject(pipeline, registration_data, batch)

    lines = pipeline.render_metrics().splitlines()

    assert 'minimon_docs_accepted_total 4.0' in lines
    assert 'minimon_docs_rejected_total{reason="TYPE_MISMATCH"} 1.0' in lines
    assert 'minimon_bus_lag{group="tsdb",topic="docs.wma_job"} 4.0' in lines
    assert 'minimon_alerts_active 0.0' in lines


def test_alerting_can_be_disabled(config, clock):
    config['alerting']['enabled'] = False

    pipeline = Pipeline(config, clock=clock)

    assert pipeline.alerts is None
    assert 'minimon_alerts_active' not in pipeline.render_metrics()
    pipeline.close()


@pytest.mark.parametrize('overrides', [['wma_job'], ['wma_job:many']])
def test_invalid_retention_overrides(config, clock, overrides):
    config['docstore']['retention_overrides'] = overrides

    with pytest.raises(ConfigError):
        Pipeline(config, clock=clock)
