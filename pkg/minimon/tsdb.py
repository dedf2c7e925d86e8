"""Time-series store with a downsampling cascade and an inverted tag index.

Raw samples are kept per series in timestamp order. downsample_tick()
finalizes 12-minute bins from raw samples once a window has closed (plus a
one minute grace) and cascades them into 1h, 1d, 7d and 30d bins. A
per-resolution watermark marks everything before it as final; raw writes
into finalized windows are rejected.

Persistence, when a directory is given, is a journal of exposition lines
appended on every accepted write plus a JSON checkpoint. Opening the store
loads the checkpoint and replays the journal.
"""
import bisect
import enum
import json
import logging
import math
import os
import threading
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

from minimon import exposition
from minimon.core import (
    AGGREGATED, CASCADE_SOURCE, DAY, HOUR, MINUTE, Resolution, SeriesKey,
    TagSet, bin_start, now_ms, validate_name)
from minimon.exceptions import ExpositionError, WriteRejected
from minimon.utils import label_matches

logger = logging.getLogger(__name__)

GRACE = MINUTE
FUTURE_SKEW = HOUR


class RejectReason(enum.Enum):
    NON_FINITE = 'NON_FINITE'
    OUT_OF_WINDOW = 'OUT_OF_WINDOW'
    INVALID_NAME = 'INVALID_NAME'


@dataclass(frozen=True)
class RetentionPolicy:
    raw_days: int = 15
    m12_days: int = 7
    coarse_days: int = 1825

    def __post_init__(self):
        if min(self.raw_days, self.m12_days, self.coarse_days) <= 0:
            raise ValueError('Retention periods must be positive')

    def days(self, res):
        if res is Resolution.RAW:
            return self.raw_days
        if res is Resolution.M12:
            return self.m12_days
        return self.coarse_days


@dataclass(frozen=True)
class AggregateBin:
    key: SeriesKey
    resolution: Resolution
    window_start: int
    count: int
    sum: float
    min: float
    max: float

    @property
    def avg(self):
        return self.sum / self.count


@dataclass(frozen=True)
class CardinalityStats:
    active_series: int = 0
    total_points: int = 0
    inverted_index_entries: int = 0
    daily_churn: int = 0

    def to_dict(self):
        return {
            'active_series': self.active_series,
            'total_points': self.total_points,
            'inverted_index_entries': self.inverted_index_entries,
            'daily_churn': self.daily_churn,
        }


class Series(object):

    def __init__(self, sid, key):
        self.sid = sid
        self.key = key
        # Sorted (ts, value) pairs
        self.raw: List[Tuple[int, float]] = []
        # Resolution -> window_start -> (count, sum, min, max)
        self.bins: Dict[Resolution, Dict[int, tuple]] = {
            res: {} for res in AGGREGATED}

    def empty(self):
        return not self.raw and not any(self.bins.values())

    def raw_between(self, lo, hi):
        # lo < ts <= hi
        left = bisect.bisect_right(self.raw, (lo, math.inf))
        right = bisect.bisect_right(self.raw, (hi, math.inf))
        return self.raw[left:right]

    def bins_between(self, res, lo, hi):
        # lo < window_start <= hi, ordered by window_start
        return sorted(
            (start, b) for start, b in self.bins[res].items()
            if lo < start <= hi)

    def aggregate_bin(self, res, start):
        count, total, lo, hi = self.bins[res][start]
        return AggregateBin(self.key, res, start, count, total, lo, hi)


def _merge(children):
    counts, sums, mins, maxs = zip(*children)
    return (sum(counts), math.fsum(sums), min(mins), max(maxs))


class Tsdb(object):

    def __init__(self, path=None, retention=None, clock=now_ms):
        self.path = Path(path) if path else None
        self.retention = retention or RetentionPolicy()
        self.clock = clock
        self._lock = threading.RLock()
        self._next_sid = 0
        self._keys: Dict[SeriesKey, int] = {}
        self._series: Dict[int, Series] = {}
        self._names = defaultdict(set)
        self._postings = defaultdict(set)
        self._first_seen: Dict[str, int] = {}
        self._watermarks: Dict[Resolution, int] = {}
        self._total_points = 0
        self._journal = None
        self.stats = defaultdict(int)

        if self.path is not None:
            self.path.mkdir(parents=True, exist_ok=True)
            self._load()
            self._journal = open(self._journal_path, 'a', encoding='utf-8')

    @property
    def _journal_path(self):
        return self.path / 'journal.log'

    @property
    def _checkpoint_path(self):
        return self.path / 'checkpoint.json'

    # Series registry and inverted index

    def _series_for(self, key, ts):
        sid = self._keys.get(key)
        if sid is None:
            sid = self._next_sid
            self._next_sid += 1
            self._keys[key] = sid
            self._series[sid] = Series(sid, key)
            self._names[key.name].add(sid)
            for pair in key.tags.items():
                self._postings[pair].add(sid)
            self._first_seen.setdefault(key.canonical, ts)
        return self._series[sid]

    def _forget(self, series):
        del self._keys[series.key]
        del self._series[series.sid]
        self._names[series.key.name].discard(series.sid)
        if not self._names[series.key.name]:
            del self._names[series.key.name]
        for pair in series.key.tags.items():
            self._postings[pair].discard(series.sid)
            if not self._postings[pair]:
                del self._postings[pair]

    def postings(self):
        with self._lock:
            return {pair: set(sids) for pair, sids in self._postings.items()}

    # Writes

    def write(self, point, now=None):
        now = self.clock() if now is None else now
        if not validate_name(point.key.name):
            raise WriteRejected(
                RejectReason.INVALID_NAME, repr(point.key.name))
        if not math.isfinite(point.value):
            raise WriteRejected(
                RejectReason.NON_FINITE, '{!r}'.format(point.value))
        if not (now - self.retention.raw_days * DAY < point.ts
                < now + FUTURE_SKEW):
            raise WriteRejected(
                RejectReason.OUT_OF_WINDOW,
                'timestamp {} outside the write window'.format(point.ts))

        with self._lock:
            watermark = self._watermarks.get(Resolution.M12)
            if watermark is not None and point.ts < watermark:
                raise WriteRejected(
                    RejectReason.OUT_OF_WINDOW,
                    'window of timestamp {} already finalized'.format(
                        point.ts))
            if not self._insert(point):
                return False
            if self._journal is not None:
                self._journal.write(exposition.render_point(point) + '\n')
        return True

    def _insert(self, point):
        # An identical (ts, value) sample is a redelivery and stored once
        series = self._series_for(point.key, point.ts)
        sample = (point.ts, float(point.value))
        index = bisect.bisect_left(series.raw, sample)
        if index < len(series.raw) and series.raw[index] == sample:
            self.stats['points_duplicate'] += 1
            return False
        series.raw.insert(index, sample)
        self._total_points += 1
        self.stats['points_written'] += 1
        return True

    def write_many(self, points, now=None):
        written, rejected = 0, []
        for point in points:
            try:
                if self.write(point, now):
                    written += 1
            except WriteRejected as e:
                rejected.append((point, e))
        return written, rejected

    # Downsampling

    def downsample_tick(self, now=None):
        """Finalize every closed window; returns the number of new bins."""
        now = self.clock() if now is None else now
        finalized = 0
        with self._lock:
            previous = self._watermarks.get(Resolution.M12)
            limit = bin_start(now - GRACE, Resolution.M12)
            if previous is None or limit > previous:
                finalized += self._finalize_m12(previous, limit)
                self._watermarks[Resolution.M12] = limit

            for res in AGGREGATED[1:]:
                source = CASCADE_SOURCE[res]
                previous = self._watermarks.get(res)
                limit = bin_start(self._watermarks[source], res)
                if previous is None or limit > previous:
                    finalized += self._finalize_parent(
                        res, source, previous, limit)
                    self._watermarks[res] = limit
        if finalized:
            logger.debug('Finalized {} bins'.format(finalized))
        self.stats['bins_finalized'] += finalized
        return finalized

    def _finalize_m12(self, lo, hi):
        res = Resolution.M12
        count = 0
        for series in self._series.values():
            start = 0 if lo is None else bisect.bisect_left(
                series.raw, (lo, -math.inf))
            end = bisect.bisect_left(series.raw, (hi, -math.inf))
            windows = defaultdict(list)
            for ts, value in series.raw[start:end]:
                windows[bin_start(ts, res)].append(value)
            for window, values in windows.items():
                series.bins[res][window] = (
                    len(values), math.fsum(values), min(values), max(values))
                count += 1
        return count

    def _finalize_parent(self, res, source, lo, hi):
        count = 0
        for series in self._series.values():
            windows = defaultdict(list)
            for start, child in series.bins[source].items():
                if (lo is None or start >= lo) and start < hi:
                    windows[bin_start(start, res)].append(child)
            for window, children in windows.items():
                series.bins[res][window] = _merge(children)
                count += 1
        return count

    def watermark(self, res):
        return self._watermarks.get(res)

    # Retention

    def apply_retention(self, now=None):
        """Drop data older than the policy; returns counts per resolution."""
        now = self.clock() if now is None else now
        dropped = {res.label: 0 for res in Resolution}
        with self._lock:
            raw_cutoff = now - self.retention.raw_days * DAY
            for series in list(self._series.values()):
                keep = bisect.bisect_right(series.raw, (raw_cutoff, math.inf))
                if keep:
                    dropped['raw'] += keep
                    self._total_points -= keep
                    del series.raw[:keep]
                for res in AGGREGATED:
                    cutoff = now - self.retention.days(res) * DAY
                    stale = [s for s in series.bins[res] if s <= cutoff]
                    for start in stale:
                        del series.bins[res][start]
                    dropped[res.label] += len(stale)
                if series.empty():
                    self._forget(series)
        if any(dropped.values()):
            logger.info('Time-series retention dropped {}'.format(
                ', '.join('{}={}'.format(k, v)
                          for k, v in dropped.items() if v)))
        return dropped

    # Reads

    def cardinality(self, now=None):
        now = self.clock() if now is None else now
        with self._lock:
            return CardinalityStats(
                active_series=len(self._series),
                total_points=self._total_points,
                inverted_index_entries=sum(
                    len(sids) for sids in self._postings.values()),
                daily_churn=sum(
                    1 for ts in self._first_seen.values() if ts > now - DAY))

    def select(self, name, matchers=()):
        """Series matching a metric name and (tag, op, value) matchers."""
        with self._lock:
            candidates = set(self._names.get(name, ()))
            for tag, op, value in matchers:
                if op == '=' and value != '':
                    candidates &= self._postings.get((tag, value), set())
            series = [self._series[sid] for sid in candidates]
        return sorted(
            (s for s in series
             if all(label_matches(s.key.tags, tag, op, value)
                    for tag, op, value in matchers)),
            key=lambda s: s.key.canonical)

    def raw_between(self, series, lo, hi):
        with self._lock:
            return series.raw_between(lo, hi)

    def bins_between(self, series, res, lo, hi):
        with self._lock:
            return series.bins_between(res, lo, hi)

    def bins(self, key, res):
        with self._lock:
            sid = self._keys.get(key)
            if sid is None:
                return []
            series = self._series[sid]
            return [series.aggregate_bin(res, start)
                    for start in sorted(series.bins[res])]

    def series_keys(self):
        with self._lock:
            return sorted(self._keys, key=lambda k: k.canonical)

    # Persistence

    def _load(self):
        if self._checkpoint_path.exists():
            with open(self._checkpoint_path) as fh:
                self._restore(json.load(fh))
        replayed = good = 0
        if self._journal_path.exists():
            with open(self._journal_path, 'rb') as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.endswith(b'\n'):
                        break
                    try:
                        point = exposition.parse_line(
                            line[:-1].decode('utf-8'), 0, lineno)
                    except (ExpositionError, UnicodeDecodeError):
                        break
                    self._insert(point)
                    replayed += 1
                    good += len(line)
            if good != self._journal_path.stat().st_size:
                logger.warning('Truncating torn tail of {}'.format(
                    self._journal_path))
                with open(self._journal_path, 'r+b') as fh:
                    fh.truncate(good)
        logger.info('Opened time-series store with {} series ({} replayed)'
                    .format(len(self._series), replayed))

    def _restore(self, data):
        self._first_seen = dict(data['first_seen'])
        self._watermarks = {
            Resolution.from_label(k): v for k, v in data['watermarks'].items()}
        for entry in data['series']:
            key = SeriesKey(entry['name'], TagSet(entry['tags']))
            series = self._series_for(key, 0)
            series.raw = [tuple(p) for p in entry['raw']]
            self._total_points += len(series.raw)
            for label, bins in entry['bins'].items():
                series.bins[Resolution.from_label(label)] = {
                    int(start): tuple(b) for start, b in bins.items()}

    def checkpoint(self):
        """Snapshot the store and truncate the journal."""
        if self.path is None:
            return
        with self._lock:
            data = {
                'first_seen': self._first_seen,
                'watermarks': {
                    res.label: wm for res, wm in self._watermarks.items()},
                'series': [{
                    'name': s.key.name,
                    'tags': dict(s.key.tags),
                    'raw': s.raw,
                    'bins': {
                        res.label: {str(k): v for k, v in bins.items()}
                        for res, bins in s.bins.items() if bins},
                } for s in self._series.values()],
            }
            tmp = self._checkpoint_path.with_suffix('.tmp')
            with open(tmp, 'w') as fh:
                json.dump(data, fh)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self._checkpoint_path)
            self._journal.close()
            self._journal = open(self._journal_path, 'w', encoding='utf-8')
        logger.debug('Checkpointed {} series'.format(len(data['series'])))

    def flush(self):
        with self._lock:
            if self._journal is not None:
                self._journal.flush()

    def close(self):
        with self._lock:
            if self._journal is not None:
                self._journal.close()
                self._journal = None
