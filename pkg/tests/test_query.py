import math
import random

import pytest

from minimon import query
from minimon.core import (
    HOUR, MINUTE, SECOND, MetricPoint, SeriesKey, TagSet)
from minimon.exceptions import QueryError
from minimon.tsdb import RetentionPolicy, Tsdb
from minimon.utils import label_matches

from tests.conftest import T0


def _selector(name, *matchers):
    return {'name': name, 'matchers': [list(m) for m in matchers]}


def _ast(name, *matchers, func=None, window=None, agg=None, by=()):
    return {
        'selector': _selector(name, *matchers), 'func': func,
        'window': window, 'agg': agg, 'by': list(by),
    }


@pytest.mark.parametrize('text,expected', [
    ('cpu', _ast('cpu')),
    ('cpu{host="a"}', _ast('cpu', ('host', '=', 'a'))),
    ('cpu{}', _ast('cpu')),
    ('cpu{host!="a",site=~"T2_.*"}',
     _ast('cpu', ('host', '!=', 'a'), ('site', '=~', 'T2_.*'))),
    ('sum by (site) rate(jobs_completed[1h])',
     _ast('jobs_completed', func='rate', window=HOUR, agg='sum',
          by=['site'])),
    ('avg_over_time(cpu[5m])',
     _ast('cpu', func='avg_over_time', window=5 * MINUTE)),
    ('max_over_time(cpu{site="T1"}[12m])',
     _ast('cpu', ('site', '=', 'T1'), func='max_over_time',
          window=12 * MINUTE)),
    ('min_over_time(x[1d])', _ast('x', func='min_over_time', window=86400000)),
    ('sum_over_time(x[30s])',
     _ast('x', func='sum_over_time', window=30 * SECOND)),
    ('count_over_time(x[1w])',
     _ast('x', func='count_over_time', window=7 * 86400000)),
    ('rate(x[500ms])', _ast('x', func='rate', window=500)),
    ('avg by (site, host) cpu', _ast('cpu', agg='avg', by=['site', 'host'])),
    ('min by (a) max_over_time(m[1h])',
     _ast('m', func='max_over_time', window=HOUR, agg='min', by=['a'])),
    ('  cpu  {  host = "a" }  ', _ast('cpu', ('host', '=', 'a'))),
    ('cpu{path="a\\"b\\\\c"}', _ast('cpu', ('path', '=', 'a"b\\c'))),
    ('sum', _ast('sum')),
    ('rate', _ast('rate')),
])
def test_parse_valid(text, expected):
    assert query.parse_query(text).to_dict() == expected


@pytest.mark.parametrize('text,position', [
    ('cpu{host=}', 9),
    ('', 0),
    ('cpu{host="a"', 12),
    ('cpu{host="a}', 9),
    ('cpu[5m]', 3),
    ('cpu[5m', 6),
    ('rate(cpu)', 8),
    ('rate(cpu[5m]', 12),
    ('rate(cpu[0m])', 9),
    ('rate(cpu[5])', 9),
    ('rate(cpu[5x])', 9),
    ('rate(cpu[1h]))', 13),
    ('cpu{host~"a"}', 8),
    ('cpu{host=~"("}', 10),
    ('cpu{host="a",}', 13),
    ('cpu{"a"="b"}', 4),
    ('cpu{host="a\\tb"}', 11),
    ('sum by site cpu', 7),
    ('sum by () cpu', 8),
    ('cpu extra', 4),
    ('5m', 0),
])
def test_parse_errors(text, position):
    with pytest.raises(QueryError) as excinfo:
        query.parse_query(text)

    assert excinfo.value.position == position
    assert 'at position {}'.format(position) in str(excinfo.value)


# Evaluation

@pytest.fixture
def tsdb():
    return Tsdb(clock=lambda: T0 + 6 * HOUR)


def write(tsdb, name, samples, **tags):
    for ts, value in samples:
        tsdb.write(MetricPoint.of(name, value, ts, tags))


def at(tsdb, text, t):
    return {
        key.canonical: value
        for key, value in query.instant(tsdb, query.parse_query(text), t)}


def test_avg_over_time_raw(tsdb):
    write(tsdb, 'm', [(T0 + i * SECOND, v) for i, v in enumerate([1, 2, 3])])

    assert at(tsdb, 'avg_over_time(m[1m])', T0 + 2 * SECOND) == {'{}': 2.0}


def test_rate_of_counter(tsdb):
    write(tsdb, 'c', [(T0, 0), (T0 + 60 * SECOND, 60)])

    assert at(tsdb, 'rate(c[2m])', T0 + 60 * SECOND) == {'{}': 1.0}
    # The window is open on the left
    assert at(tsdb, 'rate(c[1m])', T0 + 60 * SECOND) == {}


def test_rate_clamps_counter_resets(tsdb):
    write(tsdb, 'c', [(T0, 10), (T0 + 10 * SECOND, 20),
                      (T0 + 20 * SECOND, 5), (T0 + 30 * SECOND, 15)])

    # 10 + 0 + 10 over 30 seconds
    assert at(tsdb, 'rate(c[1m])', T0 + 30 * SECOND)['{}'] == pytest.approx(
        20 / 30.0)


def test_sum_by_site(tsdb):
    write(tsdb, 'up', [(T0, 1)], site='T1', host='a')
    write(tsdb, 'up', [(T0, 2)], site='T1', host='b')
    write(tsdb, 'up', [(T0, 5)], site='T2', host='c')

    assert at(tsdb, 'sum by (site) up', T0) == {
        '{site="T1"}': 3.0, '{site="T2"}': 5.0}


def test_instant_lookback(tsdb):
    write(tsdb, 'm', [(T0, 1)])

    assert at(tsdb, 'm', T0 + 5 * MINUTE) == {'m': 1.0}
    assert at(tsdb, 'm', T0 + 5 * MINUTE + 1) == {}


def test_no_matching_series(tsdb):
    ast = query.parse_query('missing{a="b"}')

    assert query.evaluate(tsdb, ast, T0, T0 + HOUR, MINUTE) == []


@pytest.mark.parametrize('start,end,step', [
    (T0 + 1, T0, MINUTE),
    (T0, T0 + HOUR, 0),
    (T0, T0 + query.MAX_STEPS * MINUTE, MINUTE),
])
def test_evaluate_rejects_bad_ranges(tsdb, start, end, step):
    with pytest.raises(QueryError):
        query.evaluate(tsdb, query.parse_query('m'), start, end, step)


def test_falls_back_to_bins(clock):
    tsdb = Tsdb(retention=RetentionPolicy(raw_days=1), clock=clock)
    clock.now = T0 + 13 * MINUTE
    write(tsdb, 'm', [(T0, 1), (T0 + MINUTE, 2), (T0 + 2 * MINUTE, 3),
                      (T0 + 12 * MINUTE, 10)])
    clock.now = T0 + 25 * MINUTE
    tsdb.downsample_tick()
    clock.now = T0 + 2 * 86400000
    tsdb.apply_retention()
    t = T0 + 24 * MINUTE

    assert at(tsdb, 'm', T0 + 12 * MINUTE) == {'m': 10.0}
    assert at(tsdb, 'avg_over_time(m[1h])', t) == {'{}': 6.0}
    assert at(tsdb, 'sum_over_time(m[1h])', t) == {'{}': 16.0}
    assert at(tsdb, 'count_over_time(m[1h])', t) == {'{}': 4.0}
    assert at(tsdb, 'min_over_time(m[1h])', t) == {'{}': 1.0}
    assert at(tsdb, 'max_over_time(m[1h])', t) == {'{}': 10.0}
    # Bin averages 2 and 10, 12 minutes apart
    assert at(tsdb, 'rate(m[1h])', t) == {'{}': pytest.approx(8 / 720.0)}


def test_run_and_json(tsdb):
    write(tsdb, 'up', [(T0, 1)], job='a')

    matrix = query.run(tsdb, 'up', T0, T0 + MINUTE, MINUTE)

    assert query.matrix_to_json(matrix) == [{
        'series': 'up{job="a"}', 'name': 'up', 'tags': {'job': 'a'},
        'points': [[T0, 1.0], [T0 + MINUTE, 1.0]],
    }]


# Brute-force evaluator over raw samples

def _brute_value(func, samples):
    values = [v for _, v in samples]
    if func == 'avg_over_time':
        return math.fsum(values) / len(values)
    if func == 'sum_over_time':
        return math.fsum(values)
    if func == 'min_over_time':
        return min(values)
    if func == 'max_over_time':
        return max(values)
    if func == 'count_over_time':
        return float(len(values))
    if len(samples) < 2 or samples[-1][0] == samples[0][0]:
        return None
    increase = math.fsum(
        max(0.0, b[1] - a[1]) for a, b in zip(samples, samples[1:]))
    return increase / ((samples[-1][0] - samples[0][0]) / 1000.0)


def _brute_force(data, ast, start, end, step):
    matrix = {}
    t = start
    while t <= end:
        vector = {}
        for key, samples in data.items():
            if key.name != ast.selector.name:
                continue
            if not all(label_matches(key.tags, tag, op, value)
                       for tag, op, value in ast.selector.matchers):
                continue
            if ast.func is None:
                inside = [s for s in samples if t - query.LOOKBACK < s[0] <= t]
                if not inside:
                    continue
                vector[key] = inside[-1][1]
            else:
                inside = [s for s in samples if t - ast.window < s[0] <= t]
                if not inside:
                    continue
                value = _brute_value(ast.func, inside)
                if value is None:
                    continue
                vector[SeriesKey('', key.tags)] = value
        if ast.agg is not None:
            groups = {}
            for key, value in vector.items():
                group = SeriesKey('', TagSet({
                    k: v for k, v in key.tags.items() if k in ast.by}))
                groups.setdefault(group, []).append(value)
            vector = {
                group: {'sum': math.fsum, 'max': max, 'min': min,
                        'avg': lambda vs: math.fsum(vs) / len(vs)}[
                            ast.agg](values)
                for group, values in groups.items()}
        for key, value in vector.items():
            matrix.setdefault(key, []).append((t, value))
        t += step
    return sorted(matrix.items(), key=lambda item: item[0].canonical)


@pytest.fixture(scope='module')
def random_store():
    rng = random.Random(2024)
    store = Tsdb(clock=lambda: T0 + 6 * HOUR)
    data = {}
    for i in range(20):
        key = SeriesKey.of(
            'm', site='T{}'.format(i % 3 + 1), host='h{}'.format(i))
        offsets = sorted(rng.sample(range(0, 6 * HOUR, SECOND), 200))
        data[key] = [(T0 + o, rng.uniform(0, 100)) for o in offsets]
    other = SeriesKey.of('other', site='T1', host='h0')
    data[other] = [(T0 + i * MINUTE, float(i)) for i in range(360)]
    for key, samples in data.items():
        for ts, value in samples:
            store.write(MetricPoint(key, value, ts))
    assert sum(len(s) for s in data.values()) <= 5000
    return store, data


QUERIES = (
    ['m', 'm{site="T2"}', 'avg by (site) m', 'min by (site) m{site!="T1"}',
     'max by (host) other']
    + ['{}(m[10m])'.format(f) for f in query.FUNCTIONS]
    + ['sum by (site) {}(m{{site!="T3"}}[30m])'.format(f)
       for f in query.FUNCTIONS]
    + ['max by (site, host) {}(m{{host=~"h1.*"}}[1h])'.format(f)
       for f in query.FUNCTIONS]
    + ['avg by (site) {}(m[3m])'.format(f) for f in query.FUNCTIONS]
)


@pytest.mark.parametrize('text', QUERIES)
def test_evaluate_matches_brute_force(random_store, text):
    store, data = random_store
    ast = query.parse_query(text)
    start, end, step = T0, T0 + 6 * HOUR, 7 * MINUTE

    actual = query.evaluate(store, ast, start, end, step)
    expected = _brute_force(data, ast, start, end, step)

    assert [k for k, _ in actual] == [k for k, _ in expected]
    for (_, got), (_, want) in zip(actual, expected):
        assert [t for t, _ in got] == [t for t, _ in want]
        assert [v for _, v in got] == pytest.approx(
            [v for _, v in want], rel=1e-9, abs=1e-9)
