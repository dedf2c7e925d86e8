import json
import logging
import threading
from collections import Counter

from minimon.core import MetricPoint, now_ms, parse_ts
from minimon.exceptions import MalformedDocument, MinimonError
from minimon.ps_client import SubscriberThread

logger = logging.getLogger(__name__)


def decode_metric(payload, arrival):
    """Decode ``{"name", "tags", "value", "ts"?}`` into a MetricPoint."""
    try:
        data = json.loads(payload)
    except (ValueError, UnicodeDecodeError) as e:
        raise MalformedDocument('Payload is not JSON: {}'.format(e))
    if not isinstance(data, dict):
        raise MalformedDocument('Payload is not a JSON object')

    value = data.get('value')
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise MalformedDocument('value must be a number')
    tags = data.get('tags') or {}
    if not isinstance(tags, dict):
        raise MalformedDocument('tags must be an object')
    ts = data.get('ts')
    try:
        ts = arrival if ts is None else parse_ts(ts)
        return MetricPoint.of(data.get('name'), value, ts, tags)
    except (MinimonError, TypeError, ValueError) as e:
        raise MalformedDocument(str(e))


class Bridge(object):
    """Feeds metric messages from the pub/sub proxy into the tsdb.

    Real-time data is never queued: undecodable payloads and rejected
    writes are counted and dropped.
    """

    def __init__(self, tsdb, clock=now_ms):
        self.tsdb = tsdb
        self.clock = clock
        self.stats = Counter()
        self._lock = threading.Lock()

    def handle(self, subject, payload):
        arrival = self.clock()
        try:
            point = decode_metric(payload, arrival)
        except MalformedDocument as e:
            self._count('dropped')
            logger.debug('Dropping payload on {}: {}'.format(subject, e))
            return False
        try:
            self.tsdb.write(point, arrival)
        except MinimonError as e:
            self._count('failed')
            logger.debug('tsdb refused bridged point from {}: {}'.format(
                subject, e))
            return False
        self._count('written')
        return True

    def _count(self, key):
        with self._lock:
            self.stats[key] += 1

    def subscriber(self, address, token, patterns):
        return SubscriberThread(address, token, patterns, self.handle)
