import logging
from collections import Counter
from pathlib import Path

from prometheus_client import CollectorRegistry, generate_latest
from prometheus_client.core import CounterMetricFamily, GaugeMetricFamily

import minimon
from minimon.alerting import AlertingConfig, AlertManager
from minimon.archive import Archive
from minimon.bridge import Bridge
from minimon.bus import Bus
from minimon.core import Document, MetricPoint, TagSet, now_ms
from minimon.docstore import DerivedIndexSpec, DocStore
from minimon.exceptions import ConfigError, MalformedDocument, MinimonError
from minimon.http import MinimonHttpClient
from minimon.ingest import Ingestor, Registry, Route
from minimon.scrape import PushGateway, ScrapeTarget, Scraper
from minimon.tsdb import RetentionPolicy, Tsdb

logger = logging.getLogger(__name__)

SINKS = ('docstore', 'tsdb', 'archive')
TOPIC_PREFIX = 'docs.'


def data_dir(config):
    configured = config['minimon'].get('data_dir')
    if configured:
        path = Path(str(configured))
        path.mkdir(parents=True, exist_ok=True)
        return path
    return Path(minimon.Extension.get_data_dir(config))


def _overrides(lines):
    overrides = {}
    for line in lines or ():
        doc_type, sep, days = line.strip().partition(':')
        if not sep:
            raise ConfigError('Invalid retention override {!r}'.format(line))
        try:
            overrides[doc_type] = int(days)
        except ValueError:
            raise ConfigError('Invalid retention override {!r}'.format(line))
    return overrides


def metric_points(doc, route):
    """Turn a document into points via its registration's tsdb mapping.

    Every mapped value field becomes ``<doc_type>_<field>`` tagged with the
    mapped tag fields present in the document.
    """
    tags = TagSet({
        name: doc.payload[name] for name in route.tsdb.tags
        if isinstance(doc.payload.get(name), str)})
    points = []
    for name in route.tsdb.values:
        value = doc.payload.get(name)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            continue
        points.append(MetricPoint.of(
            '{}_{}'.format(doc.doc_type, name), value, doc.timestamp, tags))
    return points


class PipelineCollector(object):
    """Exposes the pipeline's own counters to a prometheus_client
    registry."""

    def __init__(self, pipeline):
        self.pipeline = pipeline

    def collect(self):
        p = self.pipeline
        accepted = CounterMetricFamily(
            'minimon_docs_accepted_total', 'Documents accepted by ingest',
            value=p.ingestor.stats.get('accepted', 0))
        rejected = CounterMetricFamily(
            'minimon_docs_rejected_total', 'Documents rejected by ingest',
            labels=['reason'])
        for reason, count in sorted(p.ingestor.stats.items()):
            if reason != 'accepted':
                rejected.add_metric([reason], count)
        lag = GaugeMetricFamily(
            'minimon_bus_lag', 'Records not yet committed by a sink',
            labels=['group', 'topic'])
        for group in SINKS:
            for topic in p.bus.topics(TOPIC_PREFIX):
                lag.add_metric([group, topic], p.bus.lag(group, topic))
        sink_events = CounterMetricFamily(
            'minimon_sink_events_total', 'Sink failures and skips',
            labels=['event'])
        for key, count in sorted(p.stats.items()):
            sink_events.add_metric([key], count)
        yield from (accepted, rejected, lag, sink_events)

        cardinality = p.tsdb.cardinality(p.clock())
        yield GaugeMetricFamily(
            'minimon_tsdb_active_series', 'Series held by the tsdb',
            value=cardinality.active_series)
        yield GaugeMetricFamily(
            'minimon_tsdb_points', 'Raw samples held by the tsdb',
            value=cardinality.total_points)
        yield GaugeMetricFamily(
            'minimon_tsdb_daily_churn', 'Series first seen in the last day',
            value=cardinality.daily_churn)
        bridge = CounterMetricFamily(
            'minimon_bridge_messages_total', 'Pub/sub metric messages',
            labels=['outcome'])
        for outcome in ('written', 'dropped', 'failed'):
            bridge.add_metric([outcome], p.bridge.stats.get(outcome, 0))
        yield bridge

        if p.alerts is None:
            return
        yield CounterMetricFamily(
            'minimon_alert_rule_errors_total', 'Failed rule evaluations',
            value=p.alerts.engine.stats.get('rule_errors', 0))
        yield CounterMetricFamily(
            'minimon_notifications_failed_total', 'Undelivered notifications',
            value=p.alerts.dispatcher.stats.get('failed', 0))
        yield GaugeMetricFamily(
            'minimon_alerts_active', 'Alerts pending or firing',
            value=len(p.alerts.alerts()))


class Pipeline(object):
    """Every pipeline component built from one loaded configuration."""

    def __init__(self, config, root=None, http=None, clock=now_ms,
                 alert_stream=None):
        self.config = config
        self.clock = clock
        self.root = Path(root) if root else data_dir(config)
        self.stats = Counter()

        bus_conf = config['bus']
        self.bus = Bus(
            self.root / 'bus',
            fsync_interval=bus_conf['fsync_interval'],
            segment_bytes=bus_conf['segment_bytes'],
            retention=bus_conf['retention'])
        for group in SINKS:
            self.bus.register_group(group)

        ingest_conf = config['ingest']
        self.registry = Registry(
            ingest_conf.get('registry_file')
            or str(self.root / 'producers.json'))
        self.ingestor = Ingestor(
            self.registry, self.bus, ingest_conf['timestamp_skew'])

        doc_conf = config['docstore']
        self.docstore = DocStore(
            self.root / 'docstore',
            retention_days=doc_conf['retention_days'],
            retention_overrides=_overrides(
                doc_conf.get('retention_overrides')),
            derived=[
                DerivedIndexSpec.from_line(line)
                for line in doc_conf.get('derived') or ()])

        ts_conf = config['tsdb']
        self.tsdb = Tsdb(
            self.root / 'tsdb',
            RetentionPolicy(
                ts_conf['raw_days'], ts_conf['m12_days'],
                ts_conf['coarse_days']),
            clock=clock)
        self.checkpoint_interval = ts_conf['checkpoint_interval']
        self._last_checkpoint = clock()

        archive_conf = config['archive']
        self.archive = Archive(
            self.root / 'archive',
            block_size=archive_conf['block_size'],
            compaction_delay=archive_conf['compaction_delay'])

        self.http = http or MinimonHttpClient(
            proxy=config.get('proxy'), retries=1,
            timeout=ingest_conf['scrape_timeout'] / 1000.0)
        self.scraper = Scraper(self.tsdb, self.http, [
            ScrapeTarget.from_line(line)
            for line in ingest_conf.get('scrape_targets') or ()])
        self.push_gateway = PushGateway(self.tsdb)
        self.bridge = Bridge(self.tsdb, clock)

        self.alerts = None
        alert_conf = config['alerting']
        if alert_conf['enabled']:
            config_file = alert_conf.get('config_file') or None
            alerting = (
                AlertingConfig.load(config_file) if config_file
                else AlertingConfig())
            self.alerts = AlertManager(
                self.tsdb, alerting, http=self.http,
                evaluation_interval=alert_conf['evaluation_interval'],
                config_file=config_file, clock=clock, stream=alert_stream)

        self._sinks = {
            'docstore': self._store_docstore,
            'tsdb': self._store_tsdb,
            'archive': self._store_archive,
        }
        self.metrics = CollectorRegistry()
        self.metrics.register(PipelineCollector(self))
        logger.info('Pipeline ready in {}'.format(self.root))

    # Sinks

    def _route(self, doc):
        reg = self.registry.get(doc.producer, doc.doc_type)
        return reg.route if reg is not None else Route()

    def _store_docstore(self, docs):
        return self.docstore.index_batch(
            [d for d in docs if self._route(d).to_docstore])

    def _store_tsdb(self, docs):
        written = 0
        for doc in docs:
            route = self._route(doc)
            if not route.to_tsdb:
                continue
            ok, rejected = self.tsdb.write_many(
                metric_points(doc, route), self.clock())
            written += ok
            for point, e in rejected:
                self.stats['tsdb_rejected'] += 1
                logger.debug('tsdb rejected {}: {}'.format(point.key, e))
        return written

    def _store_archive(self, docs):
        by_type = {}
        for doc in docs:
            if self._route(doc).to_archive:
                by_type.setdefault(doc.doc_type, []).append(doc)
        for doc_type, batch in by_type.items():
            self.archive.append(doc_type, batch)
        return sum(len(b) for b in by_type.values())

    def drain(self, group, topic, max_records=None):
        """Poll one batch for a sink, store it and commit; returns the count
        of records consumed. A failing store leaves the offset uncommitted
        so the batch is redelivered."""
        max_records = max_records or self.config['bus']['poll_batch']
        records = self.bus.poll(group, topic, max_records)
        if not records:
            return 0
        docs = []
        for record in records:
            try:
                docs.append(Document.decode(record.payload))
            except MalformedDocument as e:
                self.stats['undecodable'] += 1
                logger.warning('Skipping undecodable record {}@{}: {}'.format(
                    topic, record.offset, e))
        try:
            self._sinks[group](docs)
        except (MinimonError, OSError) as e:
            self.stats['{}_failures'.format(group)] += 1
            logger.error('Sink {} failed on {}: {}'.format(group, topic, e))
            return 0
        self.bus.commit(group, topic, records[-1].offset)
        return len(records)

    def drain_all(self, group):
        total = 0
        for topic in self.bus.topics(TOPIC_PREFIX):
            while True:
                count = self.drain(group, topic)
                total += count
                if not count:
                    break
        return total

    # Maintenance

    def maintenance(self, now=None):
        now = self.clock() if now is None else now
        report = {
            'bins_finalized': self.tsdb.downsample_tick(now),
            'ts_dropped': self.tsdb.apply_retention(now),
            'indexes_dropped': self.docstore.apply_retention(now),
            'bus_dropped': self.bus.apply_retention(now),
            'compactions': [],
        }
        for doc_type, day in self.archive.eligible(now):
            try:
                report['compactions'].append(
                    self.archive.compact(doc_type, day, now).to_dict())
            except (MinimonError, OSError) as e:
                logger.error('Compaction of {}/{} failed: {}'.format(
                    doc_type, day, e))
        if now - self._last_checkpoint >= self.checkpoint_interval:
            self.tsdb.checkpoint()
            self._last_checkpoint = now
        self.bus.flush()
        return report

    # Introspection

    def status(self):
        lag = {
            group: {t: self.bus.lag(group, t)
                    for t in self.bus.topics(TOPIC_PREFIX)}
            for group in SINKS}
        return {
            'version': minimon.__version__,
            'producers': [r.to_dict() for r in self.registry.list()],
            'bus': {
                'topics': {
                    t: self.bus.next_offset(t)
                    for t in self.bus.topics(TOPIC_PREFIX)},
                'lag': lag,
            },
            'ingest': dict(self.ingestor.stats),
            'sinks': dict(self.stats),
            'docstore': self.docstore.list_indexes(),
            'tsdb': self.tsdb.cardinality(self.clock()).to_dict(),
            'archive': self.archive.list_partitions(),
            'scrape_targets': [t.to_dict() for t in self.scraper.targets],
            'bridge': dict(self.bridge.stats),
            'alerts': len(self.alerts.alerts()) if self.alerts else 0,
        }

    def render_metrics(self):
        return generate_latest(self.metrics).decode('utf-8')

    def close(self):
        self.tsdb.checkpoint()
        self.tsdb.close()
        self.docstore.close()
        self.bus.flush()
        self.bus.close()
        logger.info('Pipeline closed')
