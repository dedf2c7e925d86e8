"""Subject-based publish/subscribe proxy.

Nothing is stored: a publish is handed to the subscriptions registered at
that instant and forgotten. Subjects are dot-separated tokens; patterns may
use ``*`` for exactly one token and a final ``>`` for one or more trailing
tokens.
"""
import itertools
import json
import logging
import threading
from collections import Counter
from dataclasses import dataclass
from typing import Tuple

from tornado.iostream import StreamClosedError, UnsatisfiableReadError
from tornado.tcpserver import TCPServer

from minimon.exceptions import PermissionDenied, SubjectError

logger = logging.getLogger(__name__)

DEFAULT_MAX_PENDING = 8 * 1024 * 1024
MAX_PAYLOAD = 1024 * 1024
MAX_CONTROL_LINE = 4096

CRLF = b'\r\n'


def _tokens(subject, pattern):
    if not isinstance(subject, str) or not subject:
        raise SubjectError('Invalid Subject')
    tokens = subject.split('.')
    last = len(tokens) - 1
    for index, token in enumerate(tokens):
        if not token or any(c.isspace() for c in token):
            raise SubjectError('Invalid Subject {}'.format(subject))
        if '*' in token or '>' in token:
            if (not pattern or token not in ('*', '>')
                    or (token == '>' and index != last)):
                raise SubjectError('Invalid Subject {}'.format(subject))
    return tokens


def validate_subject(subject, pattern=False):
    _tokens(subject, pattern)
    return subject


def match_subject(pattern, subject):
    pattern_tokens = _tokens(pattern, True)
    subject_tokens = _tokens(subject, False)
    for index, token in enumerate(pattern_tokens):
        if token == '>':
            return len(subject_tokens) > index
        if index >= len(subject_tokens):
            return False
        if token != '*' and token != subject_tokens[index]:
            return False
    return len(pattern_tokens) == len(subject_tokens)


@dataclass(frozen=True)
class AuthToken:
    token: str
    allowed_publish: Tuple[str, ...] = ()
    allowed_subscribe: Tuple[str, ...] = ()

    @classmethod
    def from_line(cls, line):
        # <token> [pub:<pattern> ...] [sub:<pattern> ...]
        parts = line.split()
        if not parts:
            raise ValueError('empty token line')
        publish, subscribe = [], []
        for part in parts[1:]:
            kind, _, pattern = part.partition(':')
            if kind not in ('pub', 'sub') or not pattern:
                raise ValueError('bad permission {!r}'.format(part))
            validate_subject(pattern, pattern=True)
            (publish if kind == 'pub' else subscribe).append(pattern)
        return cls(parts[0], tuple(publish), tuple(subscribe))

    def can_publish(self, subject):
        return any(match_subject(p, subject) for p in self.allowed_publish)

    def can_subscribe(self, pattern):
        # A subscription pattern is allowed when every subject it can match
        # is also matched by some allowed pattern
        return any(_covers(p, pattern) for p in self.allowed_subscribe)


def _covers(allowed, pattern):
    allowed_tokens = allowed.split('.')
    tokens = pattern.split('.')
    for index, token in enumerate(allowed_tokens):
        if token == '>':
            return len(tokens) > index
        if index >= len(tokens):
            return False
        if tokens[index] == '>':
            return False
        if token != '*' and (tokens[index] == '*' or token != tokens[index]):
            return False
    return len(allowed_tokens) == len(tokens)


@dataclass(eq=False)
class Subscription:
    conn: 'Connection'
    pattern: str
    sid: str
    pending_bytes: int = 0
    delivered: int = 0


class Connection(object):
    """A client attached to the broker.

    Transports implement ``send(data, on_flushed)``: queue ``data`` and call
    ``on_flushed()`` once it has left the process.
    """

    _ids = itertools.count(1)

    def __init__(self):
        self.id = next(self._ids)
        self.token = None
        self.subscriptions = {}

    def send(self, data, on_flushed):
        raise NotImplementedError

    def close(self):
        pass


class Broker(object):

    def __init__(self, tokens, max_pending=DEFAULT_MAX_PENDING,
                 max_payload=MAX_PAYLOAD):
        self.tokens = {t.token: t for t in tokens}
        self.max_pending = max_pending
        self.max_payload = max_payload
        self._lock = threading.Lock()
        # Replaced, never mutated, so publishers iterate a stable snapshot
        self._subscriptions = ()
        self.connections = {}
        self.stats = Counter()

    def attach(self, conn):
        with self._lock:
            self.connections[conn.id] = conn

    def detach(self, conn):
        with self._lock:
            self.connections.pop(conn.id, None)
            self._subscriptions = tuple(
                s for s in self._subscriptions if s.conn is not conn)
            conn.subscriptions.clear()

    def authenticate(self, conn, token):
        auth = self.tokens.get(token) if token else None
        if auth is None:
            self.stats['auth_failures'] += 1
            raise PermissionDenied('Authorization Violation')
        conn.token = auth
        logger.debug('Connection {} authenticated'.format(conn.id))

    def _require_auth(self, conn):
        if conn.token is None:
            raise PermissionDenied('Authentication Required')
        return conn.token

    def subscribe(self, conn, pattern, sid):
        token = self._require_auth(conn)
        validate_subject(pattern, pattern=True)
        if not token.can_subscribe(pattern):
            self.stats['denied'] += 1
            raise PermissionDenied(
                'Permissions Violation for Subscription to {}'.format(pattern))
        with self._lock:
            if sid in conn.subscriptions:
                raise SubjectError('Duplicate sid {}'.format(sid))
            sub = Subscription(conn, pattern, sid)
            conn.subscriptions[sid] = sub
            self._subscriptions = self._subscriptions + (sub,)
        return sub

    def unsubscribe(self, conn, sid):
        self._require_auth(conn)
        with self._lock:
            sub = conn.subscriptions.pop(sid, None)
            if sub is None:
                raise SubjectError('Unknown sid {}'.format(sid))
            self._subscriptions = tuple(
                s for s in self._subscriptions if s is not sub)

    def publish(self, conn, subject, payload):
        """Fan ``payload`` out; returns the number of deliveries."""
        token = self._require_auth(conn)
        validate_subject(subject)
        if len(payload) > self.max_payload:
            raise SubjectError('Maximum Payload Exceeded')
        if not token.can_publish(subject):
            self.stats['denied'] += 1
            raise PermissionDenied(
                'Permissions Violation for Publish to {}'.format(subject))

        self.stats['published'] += 1
        delivered = 0
        for sub in self._subscriptions:
            if not match_subject(sub.pattern, subject):
                continue
            frame = b'MSG %s %s %d\r\n%s\r\n' % (
                subject.encode(), sub.sid.encode(), len(payload), payload)
            if self._deliver(sub, frame):
                delivered += 1
        self.stats['delivered'] += delivered
        return delivered

    def _deliver(self, sub, frame):
        size = len(frame)
        with self._lock:
            if sub.conn.subscriptions.get(sub.sid) is not sub:
                return False
            if sub.pending_bytes + size > self.max_pending:
                self._evict(sub)
                return False
            sub.pending_bytes += size

        def flushed():
            with self._lock:
                sub.pending_bytes -= size

        try:
            sub.conn.send(frame, flushed)
        except StreamClosedError:
            self.detach(sub.conn)
            return False
        sub.delivered += 1
        return True

    def _evict(self, sub):
        # Caller holds the lock
        sub.conn.subscriptions.pop(sub.sid, None)
        self._subscriptions = tuple(
            s for s in self._subscriptions if s is not sub)
        self.stats['evicted'] += 1
        logger.warning(
            'Evicting slow consumer {} on connection {} ({} bytes pending)'
            .format(sub.sid, sub.conn.id, sub.pending_bytes))
        try:
            sub.conn.send(
                b'-ERR Slow Consumer %s\r\n' % sub.sid.encode(), lambda: None)
        except StreamClosedError:
            pass

    def subscription_count(self):
        return len(self._subscriptions)


class StreamConnection(Connection):

    def __init__(self, stream, address):
        super(StreamConnection, self).__init__()
        self.stream = stream
        self.address = address

    def send(self, data, on_flushed):
        def done(future):
            if not future.cancelled():
                future.exception()
            on_flushed()

        self.stream.write(data).add_done_callback(done)

    def close(self):
        self.stream.close()


class PubSubServer(TCPServer):
    """Line protocol listener in front of a :class:`Broker`."""

    def __init__(self, broker, **kwargs):
        super(PubSubServer, self).__init__(**kwargs)
        self.broker = broker

    async def handle_stream(self, stream, address):
        conn = StreamConnection(stream, address)
        self.broker.attach(conn)
        logger.debug('Connection {} from {}'.format(conn.id, address))
        try:
            while True:
                line = await stream.read_until(
                    CRLF, max_bytes=MAX_CONTROL_LINE)
                keep_open = await self._handle(
                    conn, line[:-2].decode('utf-8', 'replace'))
                if not keep_open:
                    break
        except (StreamClosedError, UnsatisfiableReadError):
            pass
        finally:
            self.broker.detach(conn)
            conn.close()
            logger.debug('Connection {} closed'.format(conn.id))

    def _reply(self, conn, data):
        conn.send(data, lambda: None)

    def _error(self, conn, reason):
        self._reply(conn, '-ERR {}\r\n'.format(reason).encode())

    async def _handle(self, conn, line):
        op, _, rest = line.partition(' ')
        op = op.upper()
        args = rest.split()
        try:
            if op == 'PING':
                self._reply(conn, b'PONG\r\n')
            elif op == 'PONG':
                pass
            elif op == 'CONNECT':
                try:
                    options = json.loads(rest or '{}')
                except ValueError:
                    options = None
                if not isinstance(options, dict):
                    self._error(conn, 'Invalid CONNECT options')
                    return False
                self.broker.authenticate(conn, options.get('token'))
                self._reply(conn, b'+OK\r\n')
            elif op == 'SUB' and len(args) == 2:
                self.broker.subscribe(conn, args[0], args[1])
                self._reply(conn, b'+OK\r\n')
            elif op == 'UNSUB' and len(args) == 1:
                self.broker.unsubscribe(conn, args[0])
                self._reply(conn, b'+OK\r\n')
            elif op == 'PUB' and len(args) == 2:
                try:
                    size = int(args[1])
                except ValueError:
                    self._error(conn, 'Invalid PUB size')
                    return False
                if size < 0 or size > self.broker.max_payload:
                    self._error(conn, 'Maximum Payload Exceeded')
                    return False
                body = await conn.stream.read_bytes(size + 2)
                if not body.endswith(CRLF):
                    self._error(conn, 'Payload Size Mismatch')
                    return False
                self.broker.publish(conn, args[0], body[:-2])
                self._reply(conn, b'+OK\r\n')
            else:
                self._error(conn, 'Unknown Protocol Operation')
        except PermissionDenied as e:
            self._error(conn, e.message)
            # Failed authentication ends the connection
            return conn.token is not None
        except SubjectError as e:
            self._error(conn, e.message)
        return True
