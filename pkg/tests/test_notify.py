import io
import json

import pytest

from minimon.core import MINUTE, SECOND, TagSet
from minimon.exceptions import ConfigError, ServiceError
from minimon.notify import (
    Dispatcher, Notification, Receiver, ReceiverKind, backoff)

from tests.conftest import T0


def notification(receiver='hook'):
    return Notification(
        receiver, TagSet(site='T2'), 'firing',
        ({'labels': {'site': 'T2'}, 'value': 1.0},), T0)


@pytest.mark.parametrize('attempt,expected', [
    (0, 10 * SECOND),
    (1, 20 * SECOND),
    (3, 80 * SECOND),
    (5, 320 * SECOND),
    (6, 10 * MINUTE),
    (20, 10 * MINUTE),
])
def test_backoff(attempt, expected):
    assert backoff(attempt) == expected


@pytest.mark.parametrize('data', [
    {'name': 'x', 'kind': 'pager'},
    {'kind': 'stdout'},
    {'name': 'x', 'kind': 'file'},
    {'name': 'x', 'kind': 'webhook'},
])
def test_invalid_receivers(data):
    with pytest.raises(ConfigError):
        Receiver.from_dict(data)


def test_receiver_kind_is_case_insensitive():
    receiver = Receiver.from_dict({'name': 'out', 'kind': 'Stdout'})

    assert receiver.kind is ReceiverKind.STDOUT


def test_encode_is_canonical():
    assert json.loads(notification().encode()) == {
        'receiver': 'hook', 'ts': T0, 'status': 'firing',
        'group_labels': {'site': 'T2'},
        'alerts': [{'labels': {'site': 'T2'}, 'value': 1.0}],
    }
    assert notification().encode() == notification().encode()


def test_file_receiver(tmp_path):
    path = tmp_path / 'log' / 'notifications.log'
    dispatcher = Dispatcher([Receiver('log', ReceiverKind.FILE, str(path))])

    assert dispatcher.dispatch(notification('log'), T0)
    assert dispatcher.dispatch(notification('log'), T0)

    assert path.read_bytes() == (notification('log').encode() + b'\n') * 2


def test_stdout_receiver():
    stream = io.StringIO()
    dispatcher = Dispatcher(
        [Receiver('out', ReceiverKind.STDOUT)], stream=stream)

    dispatcher.dispatch(notification('out'), T0)

    assert json.loads(stream.getvalue())['receiver'] == 'out'


def test_webhook_receiver(http_mock):
    dispatcher = Dispatcher(
        [Receiver('hook', ReceiverKind.WEBHOOK, 'http://hook/alerts')],
        http=http_mock)

    assert dispatcher.dispatch(notification(), T0)

    http_mock.post_json.assert_called_once_with(
        'http://hook/alerts', notification().payload())
    assert dispatcher.stats['delivered'] == 1


def test_failed_webhook_is_retried_with_backoff(http_mock):
    http_mock.post_json.side_effect = [
        ServiceError('POST failed with status 503', status=503),
        ServiceError('POST failed with status 503', status=503),
        {},
    ]
    dispatcher = Dispatcher(
        [Receiver('hook', ReceiverKind.WEBHOOK, 'http://hook/alerts')],
        http=http_mock)

    assert not dispatcher.dispatch(notification(), T0)
    assert dispatcher.retry_due(T0 + 9 * SECOND) == 0
    assert dispatcher.retry_due(T0 + 10 * SECOND) == 1
    assert [r.due for r in dispatcher.retries] == [T0 + 30 * SECOND]
    assert dispatcher.retry_due(T0 + 30 * SECOND) == 1

    assert dispatcher.retries == []
    assert dispatcher.stats == {'failed': 2, 'retried': 2, 'delivered': 1}
    assert http_mock.post_json.call_count == 3


def test_unknown_receiver_is_a_failure():
    dispatcher = Dispatcher([])

    assert not dispatcher.dispatch(notification('nowhere'), T0)
    assert len(dispatcher.retries) == 1
