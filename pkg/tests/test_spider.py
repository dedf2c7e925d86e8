import collections
import json

import mock

import pytest

from minimon import spider
from minimon.bridge import decode_metric
from minimon.core import MINUTE, SECOND
from minimon.exceptions import ConfigError
from minimon.ingest import validate_document

from tests.conftest import T0


def simulate(ticks, **kwargs):
    return spider.JobSimulator(spider.JobSimSpec(**kwargs), T0).run(ticks)


def documents(ticks):
    return [d for t in ticks for d in t.documents]


def test_same_seed_same_sequence():
    first, second = simulate(6), simulate(6)

    assert documents(first) == documents(second)
    assert [t.messages for t in first] == [t.messages for t in second]


def test_seed_changes_sequence():
    assert documents(simulate(3, seed=1)) != documents(simulate(3, seed=2))


def test_two_ticks_emit_twenty_documents():
    ticks = simulate(2, seed=42)

    assert len(documents(ticks)) == 20
    assert [d.timestamp for d in ticks[1].documents][:2] == [
        T0 + 12 * MINUTE, T0 + 12 * MINUTE + 1]


def test_documents_follow_registration():
    reg = spider.registration()
    reg.validate()

    for doc in documents(simulate(10, failure_rate=0.5)):
        assert validate_document(
            doc, reg.schema, doc.timestamp) is None


def test_no_failures_without_failure_rate():
    docs = documents(simulate(20, failure_rate=0.0))

    assert 'failed' not in {d.payload['status'] for d in docs}
    assert {d.payload['retry_index'] for d in docs} == {0}


def test_lifecycle_order():
    history = collections.defaultdict(list)
    for doc in documents(simulate(20, failure_rate=0.0)):
        history[doc.payload['job_id']].append(doc.payload['status'])

    for statuses in history.values():
        assert statuses == ['pending', 'running', 'completed'][
            :len(statuses)]


def test_every_failure_is_retried_up_to_retry_max():
    history = collections.defaultdict(list)
    for doc in documents(simulate(9, failure_rate=1.0, retry_max=2)):
        history[doc.payload['job_id']].append(
            (doc.payload['status'], doc.payload['retry_index']))

    assert len(history) == 10
    for attempts in history.values():
        assert attempts == [
            ('pending', 0), ('running', 0), ('failed', 0),
            ('pending', 1), ('running', 1), ('failed', 1),
            ('pending', 2), ('running', 2), ('failed', 2),
        ]


def test_finished_jobs_leave_room_for_new_ones():
    ticks = simulate(4, failure_rate=0.0)

    # Tick 3 completes the first ten jobs, tick 4 starts ten new ones
    assert {d.payload['status'] for d in ticks[2].documents} == {'completed'}
    assert {d.payload['status'] for d in ticks[3].documents} == {'pending'}


def test_exit_messages():
    ticks = simulate(3, failure_rate=0.0)

    assert ticks[0].messages == []
    assert len(ticks[2].messages) == 10
    subject, payload = ticks[2].messages[0]
    point = decode_metric(payload, T0)
    assert subject == 'cms.jobs.{}'.format(point.key.tags['site'])
    assert point.key.name == 'exitCode'
    assert point.value == 0
    assert point.ts == ticks[2].documents[0].timestamp


def test_failed_exit_codes():
    ticks = simulate(3, failure_rate=1.0)

    codes = {json.loads(p)['value'] for _, p in ticks[2].messages}
    assert codes <= set(spider.EXIT_CODES)


def test_time_scale_compresses_ticks():
    spec = spider.JobSimSpec(time_scale=60.0)

    assert spec.wall_tick == 12 * SECOND


@pytest.mark.parametrize('kwargs', [
    {'sites': ()},
    {'job_count_per_tick': 0},
    {'tick_interval': 0},
    {'time_scale': 0},
    {'failure_rate': 1.5},
    {'retry_max': -1},
])
def test_invalid_spec(kwargs):
    with pytest.raises(ConfigError):
        spider.JobSimSpec(**kwargs)


def test_spider_run():
    simulator = spider.JobSimulator(
        spider.JobSimSpec(time_scale=60.0, failure_rate=0.0), T0)
    inject = mock.Mock(side_effect=lambda docs: [
        {'index': i, 'status': 'ok' if i else 'rejected',
         'reason': 'TYPE_MISMATCH'} for i in range(len(docs))])
    publish = mock.Mock()
    sleep = mock.Mock()
    runner = spider.Spider(simulator, inject, publish, sleep=sleep)

    assert runner.run(3) == 3

    assert inject.call_count == 3
    assert sleep.call_args_list == [mock.call(12.0), mock.call(12.0)]
    assert runner.injected == 27
    assert runner.rejected == 3
    assert runner.published == publish.call_count == 10


def test_spider_without_publisher():
    simulator = spider.JobSimulator(spider.JobSimSpec(), T0)
    runner = spider.Spider(
        simulator, lambda docs: [{'status': 'ok'}] * len(docs),
        sleep=mock.Mock())

    runner.run(3)

    assert runner.published == 0
    assert runner.injected == 30
