"""Long-term day partitions with dedup-and-compress compaction.

Layout under the archive root::

    <doc_type>/<YYYY-MM-DD>/records.jsonl          OPEN partition
    <doc_type>/<YYYY-MM-DD>/compacted/header.bin   COMPACTED partition
    <doc_type>/<YYYY-MM-DD>/compacted/blocks.bin
    <doc_type>/<YYYY-MM-DD>.late/records.jsonl     arrivals after compaction

header.bin is ``>4sBBQQI`` (magic ``MMAR``, version, codec id, record count,
raw bytes, block count) followed by one ``>QIII`` entry per block (offset
into blocks.bin, compressed length, raw length, record count). Blocks hold
newline-terminated canonical JSON records compressed with zlib.

Compaction writes into ``compact.tmp`` and renames it to ``compacted``;
opening the archive discards a leftover ``compact.tmp`` and finishes a
compaction whose rename happened but whose records.jsonl is still present.
"""
import datetime
import enum
import logging
import os
import shutil
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path

from minimon.core import (
    DAY, HOUR, Document, day_start, now_ms, utc_day)
from minimon.exceptions import PartitionError

logger = logging.getLogger(__name__)

MAGIC = b'MMAR'
VERSION = 1
CODEC_ZLIB = 1
DEFAULT_BLOCK_SIZE = 4 * 1024 * 1024

_HEADER = struct.Struct('>4sBBQQI')
_BLOCK = struct.Struct('>QIII')


class State(enum.Enum):
    OPEN = 'OPEN'
    COMPACTED = 'COMPACTED'


@dataclass
class Partition:
    doc_type: str
    day: datetime.date
    state: State
    raw_bytes: int = 0
    compacted_bytes: int = 0
    record_count: int = 0
    late: bool = False

    def to_dict(self):
        return {
            'doc_type': self.doc_type,
            'day': self.day.isoformat(),
            'state': self.state.value,
            'late': self.late,
            'raw_bytes': self.raw_bytes,
            'compacted_bytes': self.compacted_bytes,
            'record_count': self.record_count,
        }


@dataclass(frozen=True)
class CompactionReport:
    doc_type: str
    day: datetime.date
    duplicates_removed: int
    bytes_before: int
    bytes_after: int

    @property
    def reduction_ratio(self):
        if not self.bytes_before:
            return 0.0
        return 1 - self.bytes_after / self.bytes_before

    def to_dict(self):
        return {
            'doc_type': self.doc_type,
            'day': self.day.isoformat(),
            'duplicates_removed': self.duplicates_removed,
            'bytes_before': self.bytes_before,
            'bytes_after': self.bytes_after,
            'reduction_ratio': self.reduction_ratio,
        }


def _fsync_dir(path):
    fd = os.open(str(path), os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def _count_lines(path):
    if not path.exists():
        return 0, 0
    count = good = 0
    with open(path, 'rb') as fh:
        for line in fh:
            if not line.endswith(b'\n'):
                break
            count += 1
            good += len(line)
    if good != path.stat().st_size:
        logger.warning('Truncating torn tail of {}'.format(path))
        with open(path, 'r+b') as fh:
            fh.truncate(good)
    return count, good


def read_header(path):
    data = path.read_bytes()
    magic, version, codec, count, raw_bytes, nblocks = _HEADER.unpack_from(
        data, 0)
    if magic != MAGIC or version != VERSION or codec != CODEC_ZLIB:
        raise PartitionError('Unsupported partition header in {}'.format(
            path))
    blocks = [
        _BLOCK.unpack_from(data, _HEADER.size + i * _BLOCK.size)
        for i in range(nblocks)]
    return count, raw_bytes, blocks


class Archive(object):

    def __init__(self, root, block_size=DEFAULT_BLOCK_SIZE,
                 compaction_delay=HOUR):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.block_size = block_size
        self.compaction_delay = compaction_delay
        self._lock = threading.Lock()
        self._locks = {}
        self.partitions = {}
        self._recover()

    # Paths

    def _dir(self, doc_type, day, late=False):
        return self.root / doc_type / (
            day.isoformat() + ('.late' if late else ''))

    def _partition_lock(self, doc_type, day):
        with self._lock:
            return self._locks.setdefault((doc_type, day), threading.Lock())

    def _checkpoint(self, step):
        # Fault-injection point for compaction
        pass

    # Recovery

    def _recover(self):
        for type_dir in sorted(p for p in self.root.iterdir() if p.is_dir()):
            for day_dir in sorted(p for p in type_dir.iterdir()
                                  if p.is_dir()):
                name, _, suffix = day_dir.name.partition('.')
                try:
                    day = datetime.date.fromisoformat(name)
                except ValueError:
                    continue
                late = suffix == 'late'
                self.partitions[(type_dir.name, day, late)] = self._scan(
                    type_dir.name, day, day_dir, late)

    def _scan(self, doc_type, day, directory, late):
        records = directory / 'records.jsonl'
        tmp = directory / 'compact.tmp'
        compacted = directory / 'compacted'
        if tmp.exists():
            logger.warning('Discarding unfinished compaction in {}'.format(
                directory))
            shutil.rmtree(tmp)
        if compacted.exists():
            if records.exists():
                logger.info('Finishing compaction of {}'.format(directory))
                records.unlink()
            count, raw_bytes, _ = read_header(compacted / 'header.bin')
            size = sum(p.stat().st_size for p in compacted.iterdir())
            return Partition(
                doc_type, day, State.COMPACTED, raw_bytes, size, count, late)
        count, size = _count_lines(records)
        return Partition(doc_type, day, State.OPEN, size, 0, count, late)

    # Append

    def append(self, doc_type, records):
        """Append documents in order; returns the (day, late) keys touched."""
        by_day = {}
        for doc in records:
            by_day.setdefault(utc_day(doc.timestamp), []).append(doc)
        touched = []
        for day, docs in by_day.items():
            with self._partition_lock(doc_type, day):
                main = self.partitions.get((doc_type, day, False))
                late = main is not None and main.state is State.COMPACTED
                if late:
                    logger.debug(
                        'Routing {} records for {}/{} to the late sidecar'
                        .format(len(docs), doc_type, day))
                key = (doc_type, day, late)
                partition = self.partitions.get(key)
                if partition is None:
                    partition = Partition(doc_type, day, State.OPEN, late=late)
                    self.partitions[key] = partition
                directory = self._dir(doc_type, day, late)
                directory.mkdir(parents=True, exist_ok=True)
                data = b''.join(d.encode() + b'\n' for d in docs)
                with open(directory / 'records.jsonl', 'ab') as fh:
                    fh.write(data)
                    fh.flush()
                    os.fsync(fh.fileno())
                partition.raw_bytes += len(data)
                partition.record_count += len(docs)
                touched.append((day, late))
        return touched

    # Compaction

    def eligible(self, now=None):
        now = now_ms() if now is None else now
        return sorted(
            (p.doc_type, p.day) for p in self.partitions.values()
            if not p.late and p.state is State.OPEN
            and day_start(p.day) + DAY <= now - self.compaction_delay)

    def compact(self, doc_type, day, now=None):
        now = now_ms() if now is None else now
        with self._partition_lock(doc_type, day):
            partition = self.partitions.get((doc_type, day, False))
            if partition is None:
                raise PartitionError('No partition {}/{}'.format(
                    doc_type, day))
            if partition.state is State.COMPACTED:
                return CompactionReport(
                    doc_type, day, 0, partition.compacted_bytes,
                    partition.compacted_bytes)
            if day_start(day) + DAY > now - self.compaction_delay:
                raise PartitionError(
                    'Partition {}/{} is not yet eligible for compaction'
                    .format(doc_type, day))
            report = self._compact(partition)
        logger.info(
            'Compacted {}/{}: {} duplicates removed, {} -> {} bytes'.format(
                doc_type, day, report.duplicates_removed,
                report.bytes_before, report.bytes_after))
        return report

    def _compact(self, partition):
        directory = self._dir(partition.doc_type, partition.day)
        records_path = directory / 'records.jsonl'
        tmp = directory / 'compact.tmp'
        final = directory / 'compacted'
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir()

        seen = set()
        survivors = duplicates = bytes_before = 0
        blocks = []
        pending, pending_count = [], 0
        offset = 0
        raw_bytes = 0
        with open(tmp / 'blocks.bin', 'wb') as out:

            def flush_block():
                nonlocal offset
                raw = b''.join(pending)
                compressed = zlib.compress(raw)
                out.write(compressed)
                blocks.append(
                    (offset, len(compressed), len(raw), pending_count))
                offset += len(compressed)

            if records_path.exists():
                with open(records_path, 'rb') as fh:
                    for line in fh:
                        bytes_before += len(line)
                        if line in seen:
                            duplicates += 1
                            continue
                        seen.add(line)
                        if pending and raw_bytes + len(line) > self.block_size:
                            flush_block()
                            pending, pending_count, raw_bytes = [], 0, 0
                        pending.append(line)
                        pending_count += 1
                        raw_bytes += len(line)
                        survivors += 1
            if pending:
                flush_block()
            out.flush()
            os.fsync(out.fileno())
        self._checkpoint('blocks_written')

        header = _HEADER.pack(
            MAGIC, VERSION, CODEC_ZLIB, survivors, bytes_before, len(blocks))
        header += b''.join(_BLOCK.pack(*b) for b in blocks)
        with open(tmp / 'header.bin', 'wb') as fh:
            fh.write(header)
            fh.flush()
            os.fsync(fh.fileno())
        _fsync_dir(tmp)
        self._checkpoint('header_written')

        os.rename(tmp, final)
        _fsync_dir(directory)
        self._checkpoint('renamed')

        records_path.unlink()
        self._checkpoint('raw_removed')

        bytes_after = offset + len(header)
        partition.state = State.COMPACTED
        partition.compacted_bytes = bytes_after
        partition.record_count = survivors
        return CompactionReport(
            partition.doc_type, partition.day, duplicates, bytes_before,
            bytes_after)

    # Reads

    def _open_partition(self, doc_type, day, late):
        """Open a partition's current source under its lock; returns the
        open file and either the block table or the end offset."""
        with self._partition_lock(doc_type, day):
            partition = self.partitions.get((doc_type, day, late))
            if partition is None:
                return None, None
            directory = self._dir(doc_type, day, late)
            if partition.state is State.COMPACTED:
                compacted = directory / 'compacted'
                _, _, blocks = read_header(compacted / 'header.bin')
                return open(compacted / 'blocks.bin', 'rb'), blocks
            path = directory / 'records.jsonl'
            if not path.exists():
                return None, None
            fh = open(path, 'rb')
            return fh, os.fstat(fh.fileno()).st_size

    def _read_partition(self, doc_type, day, late):
        fh, layout = self._open_partition(doc_type, day, late)
        if fh is None:
            return
        with fh:
            if isinstance(layout, list):
                for offset, length, _, _ in layout:
                    fh.seek(offset)
                    for line in zlib.decompress(fh.read(length)).splitlines():
                        yield line
                return
            while fh.tell() < layout:
                line = fh.readline()
                if not line.endswith(b'\n'):
                    break
                yield line[:-1]

    def read(self, doc_type, day, matchers=()):
        """Stream documents of a day, main partition first, then late ones."""
        for late in (False, True):
            for line in self._read_partition(doc_type, day, late):
                doc = Document.decode(line)
                if all(m.matches(doc) for m in matchers):
                    yield doc

    def list_partitions(self):
        return [
            self.partitions[key].to_dict()
            for key in sorted(self.partitions)]
