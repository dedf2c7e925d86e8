import json

import pytest

from minimon.alerting import (
    AlertingConfig, AlertInstance, AlertManager, AlertRule, InhibitRule,
    OutageWindow, RouteConfig, Silence, State, SuppressionKind,
    apply_inhibition, fingerprint, parse_matchers, render_template)
from minimon.core import HOUR, MINUTE, MetricPoint, TagSet
from minimon.exceptions import ConfigError
from minimon.tsdb import Tsdb

from tests.conftest import T0


FAILURE_RULE = {
    'name': 'HighFailureRate',
    'query': 'max by (site) failure_rate',
    'comparator': '>',
    'threshold': 0.5,
    'for': '2m',
    'labels': {'severity': 'page'},
    'annotations': {'summary': '$labels.site failing at $value'},
}

SITE_DOWN_RULE = {
    'name': 'SiteDown',
    'query': 'min by (site) site_up',
    'comparator': '<',
    'threshold': 1,
    'labels': {'severity': 'critical'},
}


def alerting_config(tmp_path, **overrides):
    data = {
        'rules': [FAILURE_RULE],
        'route': {
            'receiver': 'log', 'group_by': ['site'], 'group_wait': '30s',
            'group_interval': '5m', 'repeat_interval': '4h',
        },
        'receivers': [{
            'name': 'log', 'kind': 'file',
            'destination': str(tmp_path / 'notifications.log'),
        }],
    }
    data.update(overrides)
    return data


def make_manager(clock, data, **kwargs):
    return AlertManager(
        Tsdb(clock=clock), AlertingConfig.from_dict(data),
        evaluation_interval=MINUTE, clock=clock, **kwargs)


def breaching(minute):
    return [('failure_rate', 0.9, {'site': 'T2', 'host': 'a'})]


def run(manager, clock, minutes, samples=breaching):
    sent = []
    for minute in minutes:
        clock.now = T0 + minute * MINUTE
        for name, value, tags in samples(minute):
            manager.tsdb.write(MetricPoint.of(name, value, clock.now, tags))
        sent.extend(manager.tick())
    return sent


def test_sustained_breach_notifies_once(tmp_path, clock):
    manager = make_manager(clock, alerting_config(tmp_path))

    sent = run(manager, clock, range(5))

    assert len(sent) == 1
    assert sent[0].ts == T0 + 3 * MINUTE
    assert sent[0].status == 'firing'
    assert sent[0].group_labels == TagSet(site='T2')
    [alert] = manager.alerts()
    assert alert['state'] == 'FIRING'
    assert alert['labels'] == {'site': 'T2', 'severity': 'page'}
    assert alert['started_at'] == T0
    assert alert['fired_at'] == T0 + 2 * MINUTE
    assert alert['annotations'] == {'summary': 'T2 failing at 0.9'}


def test_pending_until_for_duration(tmp_path, clock):
    manager = make_manager(clock, alerting_config(tmp_path))

    run(manager, clock, range(2))

    assert [a['state'] for a in manager.alerts()] == ['PENDING']


def test_resolution_is_notified(tmp_path, clock):
    manager = make_manager(clock, alerting_config(tmp_path))
    run(manager, clock, range(5))

    sent = run(manager, clock, range(5, 11), samples=lambda minute: [])

    assert [(n.status, n.ts) for n in sent] == [('resolved', T0 + 9 * MINUTE)]
    assert sent[0].alerts[0]['state'] == 'RESOLVED'
    assert manager.alerts() == []
    lines = (tmp_path / 'notifications.log').read_bytes().splitlines()
    assert [json.loads(line)['status'] for line in lines] == [
        'firing', 'resolved']


def test_notification_log_is_reproducible(tmp_path, clock):
    logs = []
    for run_dir in ('first', 'second'):
        clock.now = T0
        data = alerting_config(tmp_path / run_dir)
        manager = make_manager(clock, data)
        run(manager, clock, range(12), samples=lambda minute: (
            breaching(minute) if minute < 5 else []))
        logs.append((tmp_path / run_dir / 'notifications.log').read_bytes())

    assert logs[0] == logs[1]
    assert logs[0].count(b'\n') == 2


def test_silence_suppresses(tmp_path, clock):
    manager = make_manager(clock, alerting_config(tmp_path))
    manager.silences.add(Silence.from_dict({
        'id': 'maint', 'matchers': [['site', '=', 'T2']],
        'starts_at': T0, 'ends_at': T0 + HOUR, 'creator': 'ops',
    }))

    sent = run(manager, clock, range(5))

    assert sent == []
    assert manager.alerts()[0]['suppressed_by'] == {
        'kind': 'SILENCE', 'ref': 'maint'}
    assert not (tmp_path / 'notifications.log').exists()


def test_expired_silence_lets_alert_through(tmp_path, clock):
    manager = make_manager(clock, alerting_config(tmp_path))
    manager.silences.add(Silence.from_dict({
        'id': 'maint', 'matchers': [['site', '=~', 'T.*']],
        'starts_at': T0, 'ends_at': T0 + 4 * MINUTE,
    }))

    sent = run(manager, clock, range(6))

    assert [n.ts for n in sent] == [T0 + 5 * MINUTE]


OUTAGE = {
    'source': 'ggus', 'matchers': [['site', '=', 'T2']],
    'starts_at': T0, 'ends_at': T0 + HOUR, 'ticket_id': 'GGUS-12345',
}


def test_outage_suppresses_and_annotates(tmp_path, clock):
    manager = make_manager(
        clock, alerting_config(tmp_path, outages=[OUTAGE]))

    sent = run(manager, clock, range(5))

    assert sent == []
    [alert] = manager.alerts()
    assert alert['annotations']['known_outage'] == 'GGUS-12345'
    assert alert['suppressed_by'] == {'kind': 'OUTAGE', 'ref': 'GGUS-12345'}


def test_outage_annotate_only(tmp_path, clock):
    data = alerting_config(tmp_path, outages=[OUTAGE])
    data['route']['annotate_only'] = True
    manager = make_manager(clock, data)

    sent = run(manager, clock, range(5))

    assert len(sent) == 1
    assert sent[0].alerts[0]['annotations']['known_outage'] == 'GGUS-12345'


def test_inhibition(tmp_path, clock):
    data = alerting_config(
        tmp_path,
        rules=[dict(FAILURE_RULE, **{'for': 0}), SITE_DOWN_RULE],
        inhibit_rules=[{
            'source_matchers': [['severity', '=', 'critical']],
            'target_matchers': [['severity', '=', 'page']],
            'equal_labels': ['site'],
        }])
    manager = make_manager(clock, data)

    def samples(minute):
        return [
            ('failure_rate', 0.9, {'site': 'T1', 'host': 'a'}),
            ('failure_rate', 0.9, {'site': 'T2', 'host': 'b'}),
            ('site_up', 0, {'site': 'T2'}),
        ]

    sent = run(manager, clock, range(3), samples)

    assert [(dict(n.group_labels), [a['labels']['severity']
                                    for a in n.alerts]) for n in sent] == [
        ({'site': 'T1'}, ['page']),
        ({'site': 'T2'}, ['critical']),
    ]
    inhibited = [a for a in manager.alerts() if a['suppressed_by']]
    source = fingerprint('SiteDown', TagSet(site='T2', severity='critical'))
    assert [a['suppressed_by'] for a in inhibited] == [
        {'kind': 'INHIBITION', 'ref': source}]


def test_silenced_alert_does_not_inhibit(tmp_path, clock):
    data = alerting_config(
        tmp_path,
        rules=[dict(FAILURE_RULE, **{'for': 0}), SITE_DOWN_RULE],
        inhibit_rules=[{
            'source_matchers': [['severity', '=', 'critical']],
            'target_matchers': [['severity', '=', 'page']],
            'equal_labels': ['site'],
        }])
    manager = make_manager(clock, data)
    manager.silences.add(Silence.from_dict({
        'matchers': [['severity', '=', 'critical']],
        'starts_at': T0, 'ends_at': T0 + HOUR,
    }))

    sent = run(manager, clock, range(2), lambda minute: [
        ('failure_rate', 0.9, {'site': 'T2', 'host': 'b'}),
        ('site_up', 0, {'site': 'T2'}),
    ])

    assert [[a['labels']['severity'] for a in n.alerts] for n in sent] == [
        ['page']]


def firing(rule, **labels):
    return AlertInstance(rule, TagSet(labels), State.FIRING, T0, 1.0)


def inhibit(source, target):
    return InhibitRule.from_dict({
        'source_matchers': [['severity', '=', source]],
        'target_matchers': [['severity', '=', target]],
        'equal_labels': ['site'],
    })


@pytest.mark.parametrize('order', [(0, 1, 2), (2, 1, 0), (1, 2, 0)])
def test_inhibition_does_not_chain(order):
    down = firing('SiteDown', site='T2', severity='critical')
    failing = firing('JobsFailing', site='T2', severity='warning')
    slow = firing('SlowTransfers', site='T2', severity='info')
    alerts = [down, failing, slow]
    rules = [inhibit('critical', 'warning'), inhibit('warning', 'info')]

    apply_inhibition([alerts[i] for i in order], rules)

    assert not down.suppressed
    assert failing.suppressed_by == (
        SuppressionKind.INHIBITION, down.fingerprint)
    assert not slow.suppressed


def test_inhibition_live_source_still_reaches_chain_end():
    down = firing('SiteDown', site='T2', severity='critical')
    failing = firing('JobsFailing', site='T2', severity='warning')
    slow = firing('SlowTransfers', site='T2', severity='info')
    rules = [
        inhibit('critical', 'warning'), inhibit('warning', 'info'),
        inhibit('critical', 'info')]

    apply_inhibition([slow, failing, down], rules)

    assert failing.suppressed_by[1] == down.fingerprint
    assert slow.suppressed_by[1] == down.fingerprint


def test_inhibition_cycle_keeps_both():
    failing = firing('JobsFailing', site='T2', severity='warning')
    slow = firing('SlowTransfers', site='T2', severity='info')

    apply_inhibition(
        [failing, slow],
        [inhibit('warning', 'info'), inhibit('info', 'warning')])

    assert not failing.suppressed
    assert not slow.suppressed


def test_pending_alert_does_not_inhibit():
    down = firing('SiteDown', site='T2', severity='critical')
    down.state = State.PENDING
    failing = firing('JobsFailing', site='T2', severity='warning')

    apply_inhibition([down, failing], [inhibit('critical', 'warning')])

    assert not failing.suppressed


def test_repeat_interval(tmp_path, clock):
    data = alerting_config(tmp_path)
    data['route'].update(group_interval='1m', repeat_interval='3m')
    manager = make_manager(clock, data)

    sent = run(manager, clock, range(10))

    assert [n.ts for n in sent] == [
        T0 + 3 * MINUTE, T0 + 6 * MINUTE, T0 + 9 * MINUTE]


def test_rule_errors_are_counted(tmp_path, clock, mocker):
    manager = make_manager(clock, alerting_config(tmp_path))
    mocker.patch('minimon.query.instant', side_effect=RuntimeError('boom'))

    run(manager, clock, range(1))

    assert manager.engine.stats['rule_errors'] == 1
    assert manager.alerts() == []


def test_reload(tmp_path, clock):
    path = tmp_path / 'alerting.json'
    path.write_text(json.dumps(alerting_config(tmp_path)))
    manager = AlertManager(
        Tsdb(clock=clock), AlertingConfig.load(str(path)),
        config_file=str(path), clock=clock)
    run(manager, clock, range(1))
    assert len(manager.alerts()) == 1

    path.write_text(json.dumps(alerting_config(tmp_path, rules=[])))
    config = manager.reload()

    assert config.rules == ()
    assert manager.alerts() == []


def test_reload_without_file(tmp_path, clock):
    manager = make_manager(clock, alerting_config(tmp_path))

    with pytest.raises(ConfigError):
        manager.reload()


def test_outage_feed_from_file(tmp_path, clock):
    feed = tmp_path / 'ggus.json'
    feed.write_text(json.dumps([
        {k: v for k, v in OUTAGE.items() if k != 'source'},
        {'matchers': []},
    ]))
    data = alerting_config(tmp_path, outage_feeds=[
        {'source': 'ggus', 'location': str(feed), 'interval': '5m'}])
    manager = make_manager(clock, data)

    manager.pull_feeds(T0)

    [window] = manager.outages()
    assert window.source == 'ggus'
    assert window.ticket_id == 'GGUS-12345'
    assert manager.stats['malformed_outages'] == 1


def test_outage_feed_over_http(tmp_path, clock, http_mock):
    http_mock.get_json.return_value = [OUTAGE]
    data = alerting_config(tmp_path, outage_feeds=[
        {'source': 'ggus', 'location': 'https://ggus.example/outages'}])
    manager = make_manager(clock, data, http=http_mock)

    manager.pull_feeds(T0)
    manager.pull_feeds(T0 + MINUTE)

    http_mock.get_json.assert_called_once_with(
        'https://ggus.example/outages')
    assert len(manager.outages()) == 1


def test_unreadable_feed_is_counted(tmp_path, clock):
    data = alerting_config(tmp_path, outage_feeds=[
        {'source': 'ggus', 'location': str(tmp_path / 'missing.json')}])
    manager = make_manager(clock, data)

    manager.pull_feeds(T0)

    assert manager.stats['feed_errors'] == 1
    assert manager.outages() == []


def test_render_template():
    labels = TagSet(site='T2')

    assert render_template('$labels.site at $value', labels, 0.25) == (
        'T2 at 0.25')
    assert render_template('$labels.host $value', labels, 3.0) == ' 3'


@pytest.mark.parametrize('data', [
    dict(FAILURE_RULE, comparator='=='),
    dict(FAILURE_RULE, query='rate(x)'),
    dict(FAILURE_RULE, threshold='high'),
    dict(FAILURE_RULE, **{'for': 'soon'}),
    {'name': 'x'},
])
def test_invalid_rules(data):
    with pytest.raises(ConfigError):
        AlertRule.from_dict(data)


def test_rule_breaches():
    rule = AlertRule.from_dict(SITE_DOWN_RULE)

    assert rule.breaches(0)
    assert not rule.breaches(1)
    assert rule.for_duration == 0
    assert rule.ast.agg == 'min'


def test_route_timings_validated():
    with pytest.raises(ConfigError):
        RouteConfig('log', group_wait=10 * MINUTE, group_interval=MINUTE)


@pytest.mark.parametrize('data', [
    {'matchers': [['a', '=', 'b']], 'starts_at': T0, 'ends_at': T0},
    {'matchers': [], 'starts_at': T0, 'ends_at': T0 + 1},
    {'matchers': [['a', '!=', 'b']], 'starts_at': T0, 'ends_at': T0 + 1},
    {'matchers': [['a', '=', 'b']], 'starts_at': T0},
])
def test_invalid_silences(data):
    with pytest.raises(ConfigError):
        Silence.from_dict(data)


def test_silence_window():
    silence = Silence.from_dict({
        'matchers': [{'tag': 'site', 'value': 'T2'}],
        'starts_at': '2024-01-10T00:00:00Z', 'ends_at': T0 + HOUR})

    assert silence.starts_at == T0
    assert silence.active(T0)
    assert not silence.active(T0 + HOUR)
    assert len(silence.id) == 32


def test_outage_window_needs_order():
    with pytest.raises(ConfigError):
        OutageWindow.from_dict(dict(OUTAGE, ends_at=T0))


@pytest.mark.parametrize('data', [
    {'rules': [FAILURE_RULE, FAILURE_RULE]},
    {'receivers': [{'name': 'a', 'kind': 'stdout'},
                   {'name': 'a', 'kind': 'stdout'}]},
    {'route': {'receiver': 'nowhere'}},
    {'receivers': [{'name': 'a', 'kind': 'pager'}]},
])
def test_invalid_alerting_config(data):
    with pytest.raises(ConfigError):
        AlertingConfig.from_dict(data)


def test_parse_matchers_forms():
    assert parse_matchers([['a', '=', 'b'], {'tag': 'c', 'value': 'd'}]) == (
        parse_matchers([('a', '=', 'b'), ('c', '=', 'd')]))


def test_load_missing_config(tmp_path):
    with pytest.raises(ConfigError):
        AlertingConfig.load(str(tmp_path / 'nope.json'))


def test_states_in_order():
    assert [s.value for s in State] == ['PENDING', 'FIRING', 'RESOLVED']
