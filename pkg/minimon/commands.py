"""The ``minimon`` command line.

One binary with subcommands: ``serve`` and ``proxy`` run the services,
``query``, ``inject``, ``pub``, ``sub`` and ``status`` talk to them, and
``spider-sim`` and ``bench`` produce load.
"""
import argparse
import json
import logging
import os
import signal
import sys
import tempfile
import time

from mopidy import config as config_lib

import minimon
from minimon import frontend, spider, web
from minimon.core import (
    HOUR, MetricPoint, TagSet, format_ts, now_ms, parse_duration, parse_ts)
from minimon.exceptions import (
    ConfigError, MinimonError, PermissionDenied, ServiceError,
    ServiceUnreachable, SubjectError)
from minimon.http import MinimonHttpClient
from minimon.ps_client import PubSubClient
from minimon.pubsub import AuthToken, Broker, PubSubServer
from minimon.service import SINKS, Pipeline

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_REJECTED = 1
EXIT_USAGE = 2
EXIT_UNREACHABLE = 3
EXIT_AUTH = 4

SPARK_BLOCKS = '▁▂▃▄▅▆▇█'
MAX_REASONS = 10

ENVIRONMENT = (
    ('MINIMON_URL', 'url'),
    ('MINIMON_PUBSUB', 'pubsub'),
    ('MINIMON_TOKEN', 'token'),
)


class CommandFailed(Exception):

    def __init__(self, message, code):
        super(CommandFailed, self).__init__(message)
        self.code = code


# Configuration

def config_override(value):
    """Parse ``section/key=value`` the way ``mopidy -o`` does."""
    try:
        section, remainder = value.split('/', 1)
        key, value = remainder.split('=', 1)
    except ValueError:
        raise argparse.ArgumentTypeError(
            '{} must have the format section/key=value'.format(value))
    return (section.strip(), key.strip(), value.strip())


def load_config(files, overrides):
    ext = minimon.Extension()
    config, errors = config_lib.load(
        files, ext.get_config_schemas(), [ext.get_default_config()],
        overrides)
    problems = [
        '{}/{}: {}'.format(section, key, message)
        for section, section_errors in sorted(errors.items())
        for key, message in sorted((section_errors or {}).items())]
    if problems:
        raise ConfigError('Invalid configuration: {}'.format(
            '; '.join(problems)))
    return config


def cli_settings(config, environ=None):
    """The [cli] section with environment variables layered on top."""
    environ = os.environ if environ is None else environ
    settings = dict(config['cli'])
    for variable, key in ENVIRONMENT:
        if environ.get(variable):
            settings[key] = environ[variable]
    if not settings['url'].startswith(('http://', 'https://')):
        raise ConfigError('Invalid service URL {!r}'.format(settings['url']))
    settings['url'] = settings['url'].rstrip('/')
    return settings


def setup_logging(config, verbosity):
    level = {
        -1: logging.WARNING, 0: logging.INFO, 1: logging.DEBUG,
    }[max(-1, min(1, config['logging']['verbosity'] + verbosity))]
    logging.basicConfig(format=config['logging']['format'], level=level)


# Rendering

def render_table(headers, rows):
    rows = [[str(cell) for cell in row] for row in rows]
    widths = [
        max([len(h)] + [len(row[i]) for row in rows])
        for i, h in enumerate(headers)]
    lines = ['  '.join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
    for row in rows:
        lines.append('  '.join(
            c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return '\n'.join(lines)


def sparkline(values):
    """One block character per value, scaled between the series' extremes."""
    if not values:
        return ''
    lo, hi = min(values), max(values)
    if hi == lo:
        return SPARK_BLOCKS[0] * len(values)
    top = len(SPARK_BLOCKS) - 1
    return ''.join(
        SPARK_BLOCKS[int(round((v - lo) / (hi - lo) * top))] for v in values)


def render_matrix(result, fmt):
    if fmt == 'json':
        return json.dumps(result, sort_keys=True)
    if fmt == 'sparkline':
        width = max([len(s['series']) for s in result] + [0])
        return '\n'.join(
            '{}  {}  {}'.format(
                s['series'].ljust(width),
                sparkline([v for _, v in s['points']]),
                _format_value(s['points'][-1][1]) if s['points'] else '')
            for s in result)
    rows = [
        (s['series'], format_ts(ts), _format_value(v))
        for s in result for ts, v in s['points']]
    return render_table(('SERIES', 'TIME', 'VALUE'), rows)


def render_documents(docs, fmt):
    if fmt == 'json':
        return json.dumps(docs, sort_keys=True)
    rows = [
        (format_ts(d['timestamp']), d['producer'],
         json.dumps(d['payload'], sort_keys=True))
        for d in docs]
    return render_table(('TIME', 'PRODUCER', 'PAYLOAD'), rows)


def _format_value(value):
    return '{:g}'.format(value)


def summarize_inject(results):
    """Return (exit code, summary text) for per-document ingest results."""
    rejected = [r for r in results if r.get('status') != 'ok']
    accepted = len(results) - len(rejected)
    if not rejected:
        return EXIT_OK, '{} accepted'.format(accepted)
    reasons = sorted({r['reason'] for r in rejected})
    lines = ['{} accepted, {} rejected ({})'.format(
        accepted, len(rejected), ', '.join(reasons))]
    for r in rejected[:MAX_REASONS]:
        lines.append('  document {}: {} {}'.format(
            r['index'], r['reason'], r.get('detail', '')).rstrip())
    return EXIT_REJECTED, '\n'.join(lines)


def _time_range(args, now):
    end = parse_ts(args.to) if args.to else now
    if args.from_:
        start = parse_ts(args.from_)
    else:
        start = end - parse_duration(args.last)
    return start, end


# Subcommands

def cmd_serve(args, config, settings, out):
    from tornado.ioloop import IOLoop

    pipeline = Pipeline(config)
    refs = frontend.start(pipeline)
    app = web.make_app(pipeline)
    conf = config['minimon']
    app.listen(conf['port'], address=conf['hostname'])
    logger.info('Serving minimon on http://{}:{}'.format(
        conf['hostname'], conf['port']))
    _run_loop(IOLoop.current())
    frontend.stop(refs)
    pipeline.close()
    return EXIT_OK


def cmd_proxy(args, config, settings, out):
    from tornado.ioloop import IOLoop

    conf = config['pubsub']
    broker = Broker(
        [AuthToken.from_line(line) for line in conf.get('tokens') or ()],
        max_pending=conf['max_pending'])
    server = PubSubServer(broker)
    server.listen(conf['port'], address=conf['hostname'])
    logger.info('Pub/sub proxy listening on {}:{}'.format(
        conf['hostname'], conf['port']))
    _run_loop(IOLoop.current())
    server.stop()
    return EXIT_OK


def _run_loop(loop):
    def shutdown(signum, frame):
        logger.info('Got signal {}, stopping'.format(signum))
        loop.add_callback_from_signal(loop.stop)

    signal.signal(signal.SIGINT, shutdown)
    signal.signal(signal.SIGTERM, shutdown)
    loop.start()


def cmd_query(args, config, settings, out, http=None):
    http = http or MinimonHttpClient(retries=0)
    fmt = args.format or settings['format']
    start, end = _time_range(args, now_ms())
    try:
        if args.target == 'ts':
            response = http.get_json(
                settings['url'] + '/api/v1/ts/query', q=args.query,
                **{'from': start, 'to': end,
                   'step': parse_duration(args.step)})
            out.write(render_matrix(response['result'], fmt) + '\n')
        else:
            query = json.loads(args.query)
            query.setdefault('time_range', [start, end])
            docs = http.get_json(
                settings['url'] + '/api/v1/docs/search',
                q=json.dumps(query))
            out.write(render_documents(docs, fmt) + '\n')
    except ServiceError as e:
        raise CommandFailed(_service_message(e), _usage_code(e))
    except ValueError as e:
        raise CommandFailed('Invalid query: {}'.format(e), EXIT_USAGE)
    return EXIT_OK


def cmd_inject(args, config, settings, out, http=None):
    http = http or MinimonHttpClient(retries=0)
    try:
        with open(args.file, encoding='utf-8') as fh:
            batch = json.load(fh)
    except FileNotFoundError:
        raise CommandFailed(
            'No such file: {}'.format(args.file), EXIT_UNREACHABLE)
    except ValueError as e:
        raise CommandFailed(
            '{} is not JSON: {}'.format(args.file, e), EXIT_REJECTED)
    try:
        results = http.post_json(
            settings['url'] + '/api/v1/inject', batch,
            producer=args.producer, type=args.type)
    except ServiceError as e:
        raise CommandFailed(_service_message(e), _rejected_code(e))
    code, summary = summarize_inject(results)
    if (args.format or settings['format']) == 'json':
        summary = json.dumps(results, sort_keys=True)
    out.write(summary + '\n')
    return code


def cmd_pub(args, config, settings, out):
    with PubSubClient(settings['pubsub'], settings['token']) as client:
        client.publish(args.subject, args.payload)
    return EXIT_OK


def cmd_sub(args, config, settings, out):
    received = 0
    with PubSubClient(settings['pubsub'], settings['token']) as client:
        client.subscribe(args.pattern, '1')
        for subject, sid, payload in client.messages():
            if (args.format or settings['format']) == 'json':
                line = json.dumps({
                    'subject': subject,
                    'payload': payload.decode('utf-8', 'replace')})
            else:
                line = payload.decode('utf-8', 'replace')
            out.write(line + '\n')
            out.flush()
            received += 1
            if args.count and received >= args.count:
                break
    return EXIT_OK


def cmd_spider_sim(args, config, settings, out, http=None):
    http = http or MinimonHttpClient(retries=1)
    sites = spider.DEFAULT_SITES
    if args.sites:
        sites = tuple(args.sites.split(','))
    spec = spider.JobSimSpec(
        sites=sites, job_count_per_tick=args.jobs,
        tick_interval=parse_duration(args.tick_interval),
        time_scale=args.time_scale, failure_rate=args.failure_rate,
        retry_max=args.retry_max, seed=args.seed)
    start = parse_ts(args.start) if args.start else now_ms()
    base = settings['url']

    if not args.no_register:
        http.put_json(
            base + '/api/v1/producers?replace=true',
            spider.registration().to_dict())
        logger.info('Registered {}/{}'.format(
            spider.PRODUCER, spider.DOC_TYPE))

    def inject(documents):
        return http.post_json(
            base + '/api/v1/inject',
            [d.to_dict() for d in documents],
            producer=spider.PRODUCER, type=spider.DOC_TYPE)

    client = None
    if not args.no_publish:
        client = PubSubClient(settings['pubsub'], settings['token'])
        try:
            client.connect()
        except ServiceUnreachable as e:
            logger.warning('Publishing disabled: {}'.format(e))
            client = None

    runner = spider.Spider(
        spider.JobSimulator(spec, start), inject,
        publish=client.publish if client else None)
    try:
        runner.run(args.ticks)
    finally:
        if client is not None:
            client.close()
    out.write('{} injected, {} rejected, {} published\n'.format(
        runner.injected, runner.rejected, runner.published))
    return EXIT_OK


def cmd_status(args, config, settings, out, http=None):
    http = http or MinimonHttpClient(retries=0)
    status = http.get_json(settings['url'] + '/api/v1/status')
    if (args.format or settings['format']) == 'json':
        out.write(json.dumps(status, sort_keys=True) + '\n')
        return EXIT_OK
    out.write('minimon {}\n'.format(status['version']))
    out.write(render_table(
        ('PRODUCER', 'TYPE', 'QUOTA'),
        [(p['producer'], p['doc_type'], p['daily_quota_bytes'])
         for p in status['producers']]) + '\n')
    lag_rows = [
        (group, topic, status['bus']['topics'][topic], lag)
        for group, topics in sorted(status['bus']['lag'].items())
        for topic, lag in sorted(topics.items())]
    out.write(render_table(('GROUP', 'TOPIC', 'NEXT', 'LAG'), lag_rows) + '\n')
    tsdb = status['tsdb']
    out.write('series {} points {} churn {} alerts {}\n'.format(
        tsdb['active_series'], tsdb['total_points'], tsdb['daily_churn'],
        status['alerts']))
    return EXIT_OK


def cmd_bench(args, config, settings, out):
    """Measure tsdb write rate and document injection rate in-process."""
    with tempfile.TemporaryDirectory(prefix='minimon-bench-') as root:
        pipeline = Pipeline(config, root=root)
        try:
            points, elapsed = _bench_points(
                pipeline.tsdb, args.duration, args.series)
            rate = points / elapsed
            out.write('tsdb: {} points in {:.1f}s, {:.0f} points/s\n'.format(
                points, elapsed, rate))

            pipeline.registry.register(spider.registration(), replace=True)
            docs, elapsed = _bench_documents(pipeline, args.documents)
            out.write(
                'ingest: {} documents in {:.1f}s, {:.0f} messages/hour\n'
                .format(docs, elapsed, docs / elapsed * 3600))
        finally:
            pipeline.close()
    return EXIT_OK if rate >= args.target_rate else EXIT_REJECTED


def _bench_points(tsdb, duration, series):
    tags = [TagSet({'series': str(i)}) for i in range(series)]
    written = 0
    started = time.monotonic()
    deadline = started + duration
    while time.monotonic() < deadline:
        now = now_ms()
        for tagset in tags:
            tsdb.write(
                MetricPoint.of('bench_value', written, now, tagset), now)
            written += 1
    return written, time.monotonic() - started


def _bench_documents(pipeline, count):
    sim = spider.JobSimulator(
        spider.JobSimSpec(job_count_per_tick=100, time_scale=HOUR),
        now_ms())
    started = time.monotonic()
    injected = 0
    while injected < count:
        tick = sim.tick()
        results = pipeline.ingestor.inject(
            spider.PRODUCER, spider.DOC_TYPE, tick.documents)
        injected += sum(1 for r in results if r.ok)
        for group in SINKS:
            pipeline.drain_all(group)
    return injected, time.monotonic() - started


# Error mapping

def _service_message(e):
    message = e.payload.get('error') or e.payload.get('message') or str(e)
    if e.payload.get('position') is not None:
        message = '{} at position {}'.format(message, e.payload['position'])
    return message


def _usage_code(e):
    if e.status in (401, 403):
        return EXIT_AUTH
    return EXIT_USAGE


def _rejected_code(e):
    if e.status in (401, 403):
        return EXIT_AUTH
    return EXIT_REJECTED


# Entry point

def build_parser():
    parser = argparse.ArgumentParser(
        prog='minimon', description='Desk-scale monitoring pipeline')
    parser.add_argument(
        '--version', action='version',
        version='minimon {}'.format(minimon.__version__))
    parser.add_argument(
        '--config', action='append', dest='config_files', default=[],
        metavar='FILE', help='configuration file; may be repeated')
    parser.add_argument(
        '-o', '--option', action='append', dest='overrides', default=[],
        type=config_override, metavar='SECTION/KEY=VALUE',
        help='override a configuration value')
    parser.add_argument(
        '-v', '--verbose', action='count', default=0, help='more output')
    parser.add_argument(
        '-q', '--quiet', action='count', default=0, help='less output')
    parser.add_argument(
        '--format', choices=('json', 'table', 'sparkline'),
        help='output format (default from [cli] format)')
    commands = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands.required = True

    serve = commands.add_parser('serve', help='run the pipeline service')
    serve.set_defaults(func=cmd_serve)

    proxy = commands.add_parser('proxy', help='run the pub/sub proxy')
    proxy.set_defaults(func=cmd_proxy)

    query = commands.add_parser('query', help='query documents or series')
    query.add_argument('target', choices=('docs', 'ts'))
    query.add_argument(
        'query', help='series expression, or a JSON document query')
    query.add_argument('--last', default='1h', help='range ending at --to')
    query.add_argument('--from', dest='from_', help='range start')
    query.add_argument('--to', help='range end (default now)')
    query.add_argument('--step', default='1m', help='evaluation step')
    query.set_defaults(func=cmd_query)

    inject = commands.add_parser('inject', help='inject a JSON array file')
    inject.add_argument('--producer', required=True)
    inject.add_argument('--type', required=True)
    inject.add_argument('file')
    inject.set_defaults(func=cmd_inject)

    pub = commands.add_parser('pub', help='publish one message')
    pub.add_argument('subject')
    pub.add_argument('payload')
    pub.set_defaults(func=cmd_pub)

    sub = commands.add_parser('sub', help='print messages for a pattern')
    sub.add_argument('pattern')
    sub.add_argument(
        '--count', type=int, default=0, help='exit after this many messages')
    sub.set_defaults(func=cmd_sub)

    sim = commands.add_parser(
        'spider-sim', help='emit synthetic batch-job documents')
    sim.add_argument('--seed', type=int, default=42)
    sim.add_argument('--jobs', type=int, default=10, help='documents per tick')
    sim.add_argument('--ticks', type=int, help='stop after this many ticks')
    sim.add_argument('--tick-interval', default='12m')
    sim.add_argument(
        '--time-scale', type=float, default=1.0,
        help='simulated time per wall time')
    sim.add_argument('--failure-rate', type=float, default=0.1)
    sim.add_argument('--retry-max', type=int, default=3)
    sim.add_argument('--sites', help='comma-separated site names')
    sim.add_argument('--start', help='timestamp of the first tick')
    sim.add_argument('--no-register', action='store_true')
    sim.add_argument('--no-publish', action='store_true')
    sim.set_defaults(func=cmd_spider_sim)

    status = commands.add_parser('status', help='show pipeline status')
    status.set_defaults(func=cmd_status)

    bench = commands.add_parser('bench', help='measure ingestion throughput')
    bench.add_argument('--duration', type=float, default=60.0)
    bench.add_argument('--series', type=int, default=100)
    bench.add_argument('--documents', type=int, default=10000)
    bench.add_argument('--target-rate', type=float, default=4200.0)
    bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None, out=None):
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config_files, args.overrides)
        setup_logging(config, args.verbose - args.quiet)
        settings = cli_settings(config)
        return args.func(args, config, settings, out)
    except CommandFailed as e:
        sys.stderr.write('minimon: {}\n'.format(e))
        return e.code
    except (PermissionDenied, SubjectError) as e:
        sys.stderr.write('minimon: {}\n'.format(e))
        return EXIT_AUTH if isinstance(e, PermissionDenied) else EXIT_USAGE
    except ServiceUnreachable as e:
        sys.stderr.write('minimon: {}\n'.format(e))
        return EXIT_UNREACHABLE
    except ServiceError as e:
        sys.stderr.write('minimon: {}\n'.format(_service_message(e)))
        return _rejected_code(e)
    except (ConfigError, MinimonError, ValueError) as e:
        sys.stderr.write('minimon: {}\n'.format(e))
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
