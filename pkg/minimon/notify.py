import enum
import logging
import sys
import threading
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

from minimon.core import SECOND, MINUTE, TagSet, canonical_json
from minimon.exceptions import ConfigError, MinimonError

logger = logging.getLogger(__name__)

BACKOFF_BASE = 10 * SECOND
BACKOFF_CAP = 10 * MINUTE


class ReceiverKind(enum.Enum):
    FILE = 'FILE'
    WEBHOOK = 'WEBHOOK'
    STDOUT = 'STDOUT'


@dataclass(frozen=True)
class Receiver:
    name: str
    kind: ReceiverKind
    destination: Optional[str] = None

    @classmethod
    def from_dict(cls, data):
        try:
            kind = ReceiverKind(str(data.get('kind', '')).upper())
        except ValueError:
            raise ConfigError('Unknown receiver kind {!r}'.format(
                data.get('kind')))
        receiver = cls(data.get('name') or '', kind, data.get('destination'))
        if not receiver.name:
            raise ConfigError('Receivers need a name')
        if kind is not ReceiverKind.STDOUT and not receiver.destination:
            raise ConfigError('Receiver {} needs a destination'.format(
                receiver.name))
        return receiver


@dataclass(frozen=True)
class Notification:
    receiver: str
    group_labels: TagSet
    status: str
    alerts: Tuple[dict, ...]
    ts: int

    def payload(self):
        # Webhook body
        return {
            'group_labels': dict(self.group_labels),
            'status': self.status,
            'alerts': list(self.alerts),
        }

    def encode(self):
        record = self.payload()
        record['receiver'] = self.receiver
        record['ts'] = self.ts
        return canonical_json(record)


def backoff(attempt):
    return min(BACKOFF_BASE * 2 ** attempt, BACKOFF_CAP)


@dataclass
class _Retry:
    notification: Notification
    attempt: int
    due: int


class Dispatcher(object):
    """Delivers notifications; failed deliveries are retried with back-off
    instead of blocking the caller."""

    def __init__(self, receivers, http=None, stream=None):
        self.receivers = {r.name: r for r in receivers}
        self.http = http
        self.stream = stream
        self.retries = []
        self.stats = Counter()
        self._lock = threading.Lock()

    def deliver(self, notification):
        receiver = self.receivers.get(notification.receiver)
        if receiver is None:
            raise ConfigError('Unknown receiver {}'.format(
                notification.receiver))
        if receiver.kind is ReceiverKind.FILE:
            path = Path(receiver.destination)
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'ab') as fh:
                fh.write(notification.encode() + b'\n')
        elif receiver.kind is ReceiverKind.WEBHOOK:
            self.http.post_json(receiver.destination, notification.payload())
        else:
            stream = self.stream or sys.stdout
            stream.write(notification.encode().decode('utf-8') + '\n')
            stream.flush()

    def _attempt(self, notification, attempt, now):
        try:
            self.deliver(notification)
        except (MinimonError, OSError) as e:
            self.stats['failed'] += 1
            due = now + backoff(attempt)
            logger.error(
                'Delivery to {} failed (attempt {}), retrying at {}: {}'
                .format(notification.receiver, attempt + 1, due, e))
            with self._lock:
                self.retries.append(_Retry(notification, attempt + 1, due))
            return False
        self.stats['delivered'] += 1
        return True

    def dispatch(self, notification, now):
        return self._attempt(notification, 0, now)

    def retry_due(self, now):
        with self._lock:
            due = [r for r in self.retries if r.due <= now]
            self.retries = [r for r in self.retries if r.due > now]
        for retry in due:
            self.stats['retried'] += 1
            self._attempt(retry.notification, retry.attempt, now)
        return len(due)
