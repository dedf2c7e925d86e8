"""Persistent topic logs with at-least-once delivery to consumer groups.

On-disk layout under the bus root::

    <topic>/<base offset, 20 digits>.log   >I length, payload, >I crc32
    <topic>/<base offset, 20 digits>.idx   >Q position, >Q enqueued_at
    cursors/<group>.cursor                 one ``topic=offset`` line per topic

A torn or corrupt tail of the newest segment is truncated on open.
"""
import bisect
import logging
import os
import struct
import threading
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

from minimon.core import (
    DAY, now_ms, require_name, validate_dotted_name)
from minimon.exceptions import BusError, InvalidNameError, OffsetError

logger = logging.getLogger(__name__)

_LEN = struct.Struct('>I')
_IDX = struct.Struct('>QQ')

DEFAULT_SEGMENT_BYTES = 64 * 1024 * 1024


@dataclass(frozen=True)
class TopicRecord:
    topic: str
    offset: int
    payload: bytes
    enqueued_at: int


def _frame(payload):
    return (_LEN.pack(len(payload)) + payload
            + _LEN.pack(zlib.crc32(payload) & 0xffffffff))


def _write_fully(fh, data):
    written = fh.write(data)
    if written != len(data):
        raise OSError('short write ({} of {} bytes)'.format(
            written, len(data)))


class Segment(object):

    def __init__(self, directory, base):
        self.base = base
        self.log_path = directory / '{:020d}.log'.format(base)
        self.idx_path = directory / '{:020d}.idx'.format(base)
        self.positions = []
        self.enqueued = []
        self.size = 0
        self._log = None
        self._idx = None

    def __len__(self):
        return len(self.positions)

    @property
    def last_offset(self):
        return self.base + len(self.positions) - 1

    def recover(self):
        data = self.log_path.read_bytes() if self.log_path.exists() else b''
        pos = 0
        while pos + _LEN.size <= len(data):
            (length,) = _LEN.unpack_from(data, pos)
            end = pos + _LEN.size + length + _LEN.size
            if end > len(data):
                break
            payload = data[pos + _LEN.size:end - _LEN.size]
            (crc,) = _LEN.unpack_from(data, end - _LEN.size)
            if zlib.crc32(payload) & 0xffffffff != crc:
                break
            self.positions.append(pos)
            pos = end

        if pos != len(data):
            logger.warning('Truncating torn tail of {} at byte {}'.format(
                self.log_path, pos))
            with open(self.log_path, 'r+b') as fh:
                fh.truncate(pos)
        self.size = pos

        idx = self.idx_path.read_bytes() if self.idx_path.exists() else b''
        count = min(len(idx) // _IDX.size, len(self.positions))
        self.enqueued = [
            _IDX.unpack_from(idx, i * _IDX.size)[1] for i in range(count)]
        if count < len(self.positions) or len(idx) != count * _IDX.size:
            # Records written before the index entry get the recovery time
            now = now_ms()
            self.enqueued.extend([now] * (len(self.positions) - count))
            with open(self.idx_path, 'wb') as fh:
                for position, enqueued in zip(self.positions, self.enqueued):
                    fh.write(_IDX.pack(position, enqueued))
        return self

    def open(self):
        self._log = open(self.log_path, 'ab', buffering=0)
        self._idx = open(self.idx_path, 'ab', buffering=0)

    def append(self, payload, enqueued_at):
        position = self.size
        try:
            _write_fully(self._log, _frame(payload))
            _write_fully(self._idx, _IDX.pack(position, enqueued_at))
        except OSError:
            self._rollback(position)
            raise
        self.positions.append(position)
        self.enqueued.append(enqueued_at)
        self.size = self._log.tell()

    def _rollback(self, position):
        try:
            self._log.truncate(position)
            self._idx.truncate(len(self.positions) * _IDX.size)
        except OSError as e:
            logger.error('Rollback of {} failed: {}'.format(
                self.log_path, e))

    def read(self, fh, index):
        fh.seek(self.positions[index])
        (length,) = _LEN.unpack(fh.read(_LEN.size))
        return fh.read(length)

    def sync(self):
        if self._log is not None:
            os.fsync(self._log.fileno())
            os.fsync(self._idx.fileno())

    def close(self):
        for fh in (self._log, self._idx):
            if fh is not None:
                fh.close()
        self._log = self._idx = None

    def delete(self):
        self.close()
        for path in (self.log_path, self.idx_path):
            if path.exists():
                path.unlink()


class Topic(object):

    def __init__(self, name, directory, segment_bytes, fsync_interval):
        self.name = name
        self.directory = directory
        self.segment_bytes = segment_bytes
        self.fsync_interval = fsync_interval
        self.lock = threading.Lock()
        self._last_sync = time.monotonic()
        self._dirty = False

        directory.mkdir(parents=True, exist_ok=True)
        bases = sorted(int(p.stem) for p in directory.glob('*.log'))
        self.segments = [Segment(directory, b).recover() for b in bases]
        if not self.segments:
            self.segments = [Segment(directory, 0).recover()]
        self.segments[-1].open()

    @property
    def start_offset(self):
        return self.segments[0].base

    @property
    def next_offset(self):
        active = self.segments[-1]
        return active.base + len(active)

    def publish(self, payload, enqueued_at):
        active = self.segments[-1]
        if len(active) and active.size >= self.segment_bytes:
            active.sync()
            active.close()
            active = Segment(self.directory, self.next_offset).recover()
            active.open()
            self.segments.append(active)

        offset = self.next_offset
        active.append(payload, enqueued_at)
        self._dirty = True
        elapsed_ms = (time.monotonic() - self._last_sync) * 1000
        if elapsed_ms >= self.fsync_interval:
            self.sync()
        return offset

    def sync(self):
        if self._dirty:
            self.segments[-1].sync()
            self._dirty = False
        self._last_sync = time.monotonic()

    def read(self, start, count):
        records = []
        end = min(start + count, self.next_offset)
        bases = [s.base for s in self.segments]
        offset = start
        while offset < end:
            segment = self.segments[bisect.bisect_right(bases, offset) - 1]
            stop = min(end, segment.base + len(segment))
            with open(segment.log_path, 'rb') as fh:
                for o in range(offset, stop):
                    i = o - segment.base
                    records.append(TopicRecord(
                        self.name, o, segment.read(fh, i),
                        segment.enqueued[i]))
            offset = stop
        return records

    def close(self):
        self.sync()
        for segment in self.segments:
            segment.close()


class Bus(object):
    """Single-partition topics with per-group committed cursors."""

    def __init__(self, root, fsync_interval=100,
                 segment_bytes=DEFAULT_SEGMENT_BYTES, retention=7 * DAY):
        self.root = Path(root)
        self.fsync_interval = fsync_interval
        self.segment_bytes = segment_bytes
        self.retention = retention
        self._lock = threading.Lock()
        self._topics = {}
        self._cursors = {}
        self._delivered = {}

        self.root.mkdir(parents=True, exist_ok=True)
        self._cursor_dir = self.root / 'cursors'
        self._cursor_dir.mkdir(exist_ok=True)
        for path in sorted(self._cursor_dir.glob('*.cursor')):
            self._cursors[path.stem] = self._read_cursor(path)
        for path in sorted(self.root.iterdir()):
            if (path.is_dir() and path != self._cursor_dir
                    and validate_dotted_name(path.name)):
                self._topic(path.name)

    def _read_cursor(self, path):
        cursor = {}
        for line in path.read_text().splitlines():
            topic, sep, offset = line.strip().partition('=')
            if sep:
                cursor[topic] = int(offset)
        return cursor

    def _write_cursor(self, group):
        path = self._cursor_dir / '{}.cursor'.format(group)
        tmp = path.with_suffix('.tmp')
        lines = ''.join(
            '{}={}\n'.format(t, o)
            for t, o in sorted(self._cursors[group].items()))
        with open(tmp, 'w') as fh:
            fh.write(lines)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    def _topic(self, name):
        with self._lock:
            topic = self._topics.get(name)
            if topic is None:
                topic = Topic(
                    name, self.root / name, self.segment_bytes,
                    self.fsync_interval)
                self._topics[name] = topic
            return topic

    def topics(self, prefix=''):
        return sorted(t for t in self._topics if t.startswith(prefix))

    def groups(self):
        return sorted(self._cursors)

    def register_group(self, group):
        require_name(group, 'group name')
        with self._lock:
            if group not in self._cursors:
                self._cursors[group] = {}
                self._write_cursor(group)

    def publish(self, topic, payload, now=None):
        if not validate_dotted_name(topic):
            raise InvalidNameError(topic, 'topic')
        now = now_ms() if now is None else now
        t = self._topic(topic)
        with t.lock:
            try:
                return t.publish(bytes(payload), now)
            except OSError as e:
                raise BusError('Publish to {} failed: {}'.format(topic, e))

    def committed(self, group, topic):
        return self._cursors.get(group, {}).get(topic, -1)

    def next_offset(self, topic):
        t = self._topics.get(topic)
        return t.next_offset if t else 0

    def lag(self, group, topic):
        return self.next_offset(topic) - 1 - self.committed(group, topic)

    def poll(self, group, topic, max_records):
        if max_records < 1:
            raise ValueError('max_records must be at least 1')
        self.register_group(group)
        t = self._topics.get(topic)
        if t is None:
            return []
        with t.lock:
            start = max(self.committed(group, topic) + 1, t.start_offset)
            records = t.read(start, max_records)
        if records:
            key = (group, topic)
            self._delivered[key] = max(
                self._delivered.get(key, -1), records[-1].offset)
        return records

    def commit(self, group, topic, offset):
        delivered = self._delivered.get((group, topic), -1)
        if offset > delivered:
            raise OffsetError(
                'Offset {} of {} was never delivered to {}'.format(
                    offset, topic, group))
        with self._lock:
            cursor = self._cursors.setdefault(group, {})
            if offset <= cursor.get(topic, -1):
                return cursor[topic]
            cursor[topic] = offset
            self._write_cursor(group)
            return offset

    def apply_retention(self, now=None):
        """Drop closed segments past retention that every group consumed."""
        now = now_ms() if now is None else now
        dropped = {}
        groups = list(self._cursors)
        if not groups:
            return dropped
        cutoff = now - self.retention
        for name in self.topics():
            t = self._topics[name]
            with t.lock:
                floor = min(self.committed(g, name) for g in groups)
                while len(t.segments) > 1:
                    segment = t.segments[0]
                    if (segment.enqueued and segment.enqueued[-1] >= cutoff
                            or segment.last_offset > floor):
                        break
                    segment.delete()
                    t.segments.pop(0)
                    dropped[name] = dropped.get(name, 0) + len(segment)
        for name, count in dropped.items():
            logger.info('Bus retention dropped {} records of {}'.format(
                count, name))
        return dropped

    def flush(self):
        for t in list(self._topics.values()):
            with t.lock:
                t.sync()

    def close(self):
        for t in list(self._topics.values()):
            with t.lock:
                t.close()
