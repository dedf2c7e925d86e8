import datetime
import functools
import json
import logging

from prometheus_client import CONTENT_TYPE_LATEST

import tornado.web
from tornado.ioloop import IOLoop

from minimon import query
from minimon.alerting import Silence
from minimon.core import parse_duration, parse_ts
from minimon.docstore import DocQuery
from minimon.exceptions import (
    ConfigError, MalformedDocument, MinimonError,
    PartitionError, PermissionDenied, QueryError, RegistrationError)
from minimon.ingest import ProducerRegistration, Reason

logger = logging.getLogger(__name__)


def _status_for(error):
    if (isinstance(error, RegistrationError)
            and error.reason is Reason.DUPLICATE):
        return 409
    if isinstance(error, PermissionDenied):
        return 403
    if isinstance(error, PartitionError):
        return 404
    return 400


def api(method):
    """Run a handler method, mapping failures to JSON error bodies."""

    @functools.wraps(method)
    async def wrapper(self, *args, **kwargs):
        try:
            result = await method(self, *args, **kwargs)
        except QueryError as e:
            self.send_error_json(400, e.reason, position=e.position)
            return
        except (MinimonError, ValueError) as e:
            status = _status_for(e)
            self.send_error_json(status, str(e))
            return
        if result is not None:
            self.send_json(result)

    return wrapper


class ApiHandler(tornado.web.RequestHandler):

    def initialize(self, pipeline):
        self.pipeline = pipeline

    def send_json(self, data, status=200):
        self.set_status(status)
        self.set_header('Content-Type', 'application/json; charset=utf-8')
        self.finish(json.dumps(data, sort_keys=True))

    def send_error_json(self, status, message, **extra):
        body = {'error': message}
        body.update(extra)
        logger.debug('{} {} -> {} {}'.format(
            self.request.method, self.request.uri, status, message))
        self.send_json(body, status)

    def json_body(self):
        try:
            return json.loads(self.request.body or b'null')
        except ValueError as e:
            raise MalformedDocument('Request body is not JSON: {}'.format(e))

    def run(self, func, *args):
        # Storage calls block; keep them off the IOLoop thread
        return IOLoop.current().run_in_executor(None, func, *args)


class InjectHandler(ApiHandler):

    @api
    async def post(self):
        producer = self.get_query_argument('producer')
        doc_type = self.get_query_argument('type')
        batch = self.json_body()
        if not isinstance(batch, list):
            raise MalformedDocument('Body must be a JSON array of documents')
        results = await self.run(
            self.pipeline.ingestor.inject, producer, doc_type, batch,
            self.pipeline.clock())
        return [r.to_dict() for r in results]


class ProducersHandler(ApiHandler):

    @api
    async def get(self):
        return [r.to_dict() for r in self.pipeline.registry.list()]

    @api
    async def put(self):
        reg = ProducerRegistration.from_dict(self.json_body())
        replace = self.get_query_argument('replace', 'false') == 'true'
        self.pipeline.registry.register(reg, replace=replace)
        self.send_json(reg.to_dict(), 201)


class PushHandler(ApiHandler):

    @api
    async def get(self):
        return [g.to_dict() for g in self.pipeline.push_gateway.list()]

    @api
    async def post(self, job):
        body = self.request.body.decode('utf-8')
        written = await self.run(self.pipeline.push_gateway.push, job, body)
        return {'job': job, 'written': written}


class TargetsHandler(ApiHandler):

    @api
    async def get(self):
        return [t.to_dict() for t in self.pipeline.scraper.targets]


class DocSearchHandler(ApiHandler):

    @api
    async def get(self):
        try:
            data = json.loads(self.get_query_argument('q'))
        except ValueError as e:
            raise MalformedDocument('q is not JSON: {}'.format(e))
        docs = await self.run(
            self.pipeline.docstore.search, DocQuery.from_dict(data))
        return [d.to_dict() for d in docs]


class DocIndexesHandler(ApiHandler):

    @api
    async def get(self):
        return self.pipeline.docstore.list_indexes()


class DerivedHandler(ApiHandler):

    @api
    async def get(self, name):
        derived = self.pipeline.docstore.derived.get(name)
        if derived is None:
            raise PartitionError('No derived index {}'.format(name))
        key = self.get_query_argument('key', None)
        if key is None:
            return derived.to_dict()
        entry = derived.get(key)
        if entry is None:
            raise PartitionError('No entry {} in {}'.format(key, name))
        return entry.to_dict() if hasattr(entry, 'to_dict') else entry

    @api
    async def post(self, name):
        if name not in self.pipeline.docstore.derived:
            raise PartitionError('No derived index {}'.format(name))
        start = parse_ts(self.get_query_argument('from', '0'))
        end = self.get_query_argument('to', None)
        time_range = (start, parse_ts(end)) if end else None
        entries = await self.run(
            self.pipeline.docstore.rebuild_derived, name, time_range)
        return {'name': name, 'entries': entries}


class TsQueryHandler(ApiHandler):

    @api
    async def get(self):
        text = self.get_query_argument('q')
        now = self.pipeline.clock()
        end = parse_ts(self.get_query_argument('to', str(now)))
        start = parse_ts(self.get_query_argument('from', str(end)))
        step = parse_duration(self.get_query_argument('step', '1m'))
        ast = query.parse_query(text)
        matrix = await self.run(
            query.evaluate, self.pipeline.tsdb, ast, start, end, step)
        return {
            'query': ast.to_dict(), 'from': start, 'to': end, 'step': step,
            'result': query.matrix_to_json(matrix),
        }


class CardinalityHandler(ApiHandler):

    @api
    async def get(self):
        return self.pipeline.tsdb.cardinality().to_dict()


class PartitionsHandler(ApiHandler):

    @api
    async def get(self):
        return self.pipeline.archive.list_partitions()


class ArchiveReadHandler(ApiHandler):

    @api
    async def get(self, doc_type, day):
        try:
            parsed = datetime.date.fromisoformat(day)
        except ValueError:
            raise PartitionError('Invalid day {!r}'.format(day))
        docs = await self.run(
            lambda: list(self.pipeline.archive.read(doc_type, parsed)))
        return [d.to_dict() for d in docs]


class AlertsHandler(ApiHandler):

    @api
    async def get(self):
        alerts = self.pipeline.alerts
        return alerts.alerts() if alerts is not None else []


class SilencesHandler(ApiHandler):

    def _manager(self):
        if self.pipeline.alerts is None:
            raise ConfigError('Alerting is disabled')
        return self.pipeline.alerts

    @api
    async def get(self):
        return [s.to_dict() for s in self._manager().silences.list()]

    @api
    async def post(self):
        silence = Silence.from_dict(self.json_body() or {})
        self._manager().silences.add(silence)
        self.send_json(silence.to_dict(), 201)

    @api
    async def delete(self, silence_id):
        if not self._manager().silences.remove(silence_id):
            raise PartitionError('No silence {}'.format(silence_id))
        return {'deleted': silence_id}


class AlertingReloadHandler(SilencesHandler):

    @api
    async def post(self):
        config = self._manager().reload()
        return {'rules': len(config.rules)}


class StatusHandler(ApiHandler):

    @api
    async def get(self):
        return await self.run(self.pipeline.status)


class MetricsHandler(ApiHandler):

    def get(self):
        self.set_header('Content-Type', CONTENT_TYPE_LATEST)
        self.finish(self.pipeline.render_metrics())


def factory(pipeline):
    kwargs = {'pipeline': pipeline}
    return [
        (r'/api/v1/inject', InjectHandler, kwargs),
        (r'/api/v1/producers', ProducersHandler, kwargs),
        (r'/api/v1/targets', TargetsHandler, kwargs),
        (r'/metrics', MetricsHandler, kwargs),
        (r'/metrics/job', PushHandler, kwargs),
        (r'/metrics/job/([A-Za-z_][A-Za-z0-9_]*)', PushHandler, kwargs),
        (r'/api/v1/docs/search', DocSearchHandler, kwargs),
        (r'/api/v1/docs/indexes', DocIndexesHandler, kwargs),
        (r'/api/v1/docs/derived/([^/]+)', DerivedHandler, kwargs),
        (r'/api/v1/ts/query', TsQueryHandler, kwargs),
        (r'/api/v1/ts/cardinality', CardinalityHandler, kwargs),
        (r'/api/v1/archive/partitions', PartitionsHandler, kwargs),
        (r'/api/v1/archive/([A-Za-z_][A-Za-z0-9_]*)/(\d{4}-\d{2}-\d{2})',
         ArchiveReadHandler, kwargs),
        (r'/api/v1/alerts', AlertsHandler, kwargs),
        (r'/api/v1/silences', SilencesHandler, kwargs),
        (r'/api/v1/silences/([^/]+)', SilencesHandler, kwargs),
        (r'/api/v1/alerting/reload', AlertingReloadHandler, kwargs),
        (r'/api/v1/status', StatusHandler, kwargs),
    ]


def make_app(pipeline):
    return tornado.web.Application(factory(pipeline))
