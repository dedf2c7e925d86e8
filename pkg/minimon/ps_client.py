import collections
import json
import logging
import select
import socket
import threading

from minimon.exceptions import (
    PermissionDenied, ServiceUnreachable, SubjectError)

logger = logging.getLogger(__name__)


def parse_address(address, default_port=4222):
    host, _, port = address.rpartition(':')
    if not host:
        return address, default_port
    return host, int(port)


class PubSubClient(object):
    # Blocking line-protocol client; MSG frames that arrive while waiting
    # for an acknowledgment are queued for messages()

    def __init__(self, address, token, timeout=10):
        self.address = parse_address(address)
        self.token = token
        self.timeout = timeout
        self.sock = None
        self._buffer = b''
        self._queued = collections.deque()

    def connect(self):
        try:
            self.sock = socket.create_connection(
                self.address, timeout=self.timeout)
        except OSError as e:
            raise ServiceUnreachable(
                'Cannot reach pub/sub proxy at {}:{}: {}'.format(
                    self.address[0], self.address[1], e))
        self._send('CONNECT {}\r\n'.format(
            json.dumps({'token': self.token})).encode())
        self._expect_ok()
        return self

    def close(self):
        if self.sock is not None:
            try:
                self.sock.close()
            finally:
                self.sock = None

    def __enter__(self):
        return self.connect()

    def __exit__(self, *exc):
        self.close()

    def publish(self, subject, payload):
        if isinstance(payload, str):
            payload = payload.encode('utf-8')
        self._send(b'PUB %s %d\r\n%s\r\n' % (
            subject.encode(), len(payload), payload))
        self._expect_ok()

    def subscribe(self, pattern, sid):
        self._send('SUB {} {}\r\n'.format(pattern, sid).encode())
        self._expect_ok()

    def unsubscribe(self, sid):
        self._send('UNSUB {}\r\n'.format(sid).encode())
        self._expect_ok()

    def ping(self):
        self._send(b'PING\r\n')
        while True:
            frame = self._next_frame()
            if frame[0] == 'PONG':
                return
            self._queue_or_raise(frame)

    def messages(self, timeout=None):
        """Yield (subject, sid, payload) until the connection closes.

        With a timeout, a quiet period of that many seconds ends the stream.
        """
        while True:
            if self._queued:
                yield self._queued.popleft()
                continue
            if timeout is not None and not self._buffer:
                readable, _, _ = select.select([self.sock], [], [], timeout)
                if not readable:
                    return
            frame = self._next_frame()
            if frame[0] == 'EOF':
                return
            if frame[0] == 'PING':
                self._send(b'PONG\r\n')
                continue
            self._queue_or_raise(frame)

    # Wire

    def _send(self, data):
        if self.sock is None:
            raise ServiceUnreachable('The pub/sub client is not connected.')
        try:
            self.sock.sendall(data)
        except OSError as e:
            raise ServiceUnreachable(str(e))

    def _read_line(self):
        while b'\r\n' not in self._buffer:
            chunk = self.sock.recv(65536)
            if not chunk:
                return None
            self._buffer += chunk
        line, self._buffer = self._buffer.split(b'\r\n', 1)
        return line

    def _read_exact(self, size):
        while len(self._buffer) < size:
            chunk = self.sock.recv(65536)
            if not chunk:
                raise ServiceUnreachable('Connection closed mid-message')
            self._buffer += chunk
        data, self._buffer = self._buffer[:size], self._buffer[size:]
        return data

    def _next_frame(self):
        line = self._read_line()
        if line is None:
            return ('EOF',)
        text = line.decode('utf-8', 'replace')
        if text.startswith('MSG '):
            _, subject, sid, size = text.split(' ')
            payload = self._read_exact(int(size) + 2)[:-2]
            return ('MSG', subject, sid, payload)
        if text.startswith('-ERR'):
            return ('ERR', text[5:])
        return (text,)

    def _queue_or_raise(self, frame):
        if frame[0] == 'MSG':
            self._queued.append(frame[1:])
        elif frame[0] == 'ERR':
            reason = frame[1]
            if 'Violation' in reason or 'Authentication' in reason:
                raise PermissionDenied(reason)
            raise SubjectError(reason)
        elif frame[0] == 'EOF':
            raise ServiceUnreachable('Connection closed by proxy')

    def _expect_ok(self):
        while True:
            frame = self._next_frame()
            if frame[0] == '+OK':
                return
            self._queue_or_raise(frame)


class SubscriberThread(threading.Thread):
    """Keeps a subscription alive, reconnecting with a growing back-off.

    ``callback(subject, payload)`` runs on this thread for every message.
    """

    def __init__(self, address, token, patterns, callback):
        super(SubscriberThread, self).__init__(daemon=True)
        self.address = address
        self.token = token
        self.patterns = list(patterns)
        self.callback = callback
        self.client = None
        self.connected = threading.Event()
        self.stopped = threading.Event()

    def run(self):
        retry_count = 0
        while not self.stopped.wait(retry_count * 5):
            try:
                self._listen()
                retry_count = 0
            except PermissionDenied as e:
                logger.error('Bridge subscription refused: {}'.format(e))
            except (ServiceUnreachable, OSError) as e:
                logger.warning('Pub/sub connection lost: {}'.format(e))
            finally:
                self.connected.clear()

            # If connection fails, attempt to reconnect every 60 seconds
            # at max
            max_tries = 12
            if retry_count < max_tries:
                retry_count += 1

    def _listen(self):
        self.client = PubSubClient(self.address, self.token).connect()
        try:
            for index, pattern in enumerate(self.patterns):
                self.client.subscribe(pattern, str(index + 1))
            self.connected.set()
            logger.info('Subscribed to {} on {}'.format(
                ', '.join(self.patterns), self.address))
            while not self.stopped.is_set():
                for subject, _, payload in self.client.messages(timeout=1.0):
                    self.callback(subject, payload)
                    if self.stopped.is_set():
                        return
                # Quiet second or closed socket; a dead peer fails the ping
                self.client.ping()
        finally:
            self.client.close()

    def stop_client(self):
        self.stopped.set()
