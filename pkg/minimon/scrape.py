"""Pull-mode scraping of exporters and the push gateway for short jobs."""
import enum
import logging
import threading
from dataclasses import dataclass, field
from typing import Optional

from minimon import exposition
from minimon.core import (
    SECOND, EMPTY_TAGS, MetricPoint, SeriesKey, TagSet, format_ts, now_ms,
    parse_duration, require_name)
from minimon.exceptions import ConfigError, MinimonError, WriteRejected

logger = logging.getLogger(__name__)


class TargetStatus(enum.Enum):
    NEVER = 'NEVER'
    OK = 'OK'
    FAIL = 'FAIL'


@dataclass
class ScrapeTarget:
    url: str
    interval: int
    static_tags: TagSet = EMPTY_TAGS
    last_status: TargetStatus = TargetStatus.NEVER
    last_error: Optional[str] = None
    last_scrape: Optional[int] = None
    last_points: int = 0
    _lock: threading.Lock = field(
        default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if self.interval < SECOND:
            raise ConfigError(
                'Scrape interval for {} must be at least 1s'.format(self.url))

    @classmethod
    def from_line(cls, line):
        """Parse ``<url> <interval> [tag=value ...]``."""
        parts = line.split()
        if len(parts) < 2:
            raise ConfigError('Invalid scrape target {!r}'.format(line))
        try:
            interval = parse_duration(parts[1])
        except ValueError as e:
            raise ConfigError(str(e))
        tags = {}
        for part in parts[2:]:
            name, sep, value = part.partition('=')
            if not sep:
                raise ConfigError(
                    'Invalid static tag {!r} for {}'.format(part, parts[0]))
            tags[name] = value
        try:
            return cls(parts[0], interval, TagSet(tags))
        except MinimonError as e:
            raise ConfigError(str(e))

    def due(self, now):
        return (self.last_scrape is None
                or now - self.last_scrape >= self.interval)

    def to_dict(self):
        return {
            'url': self.url,
            'interval': self.interval,
            'static_tags': dict(self.static_tags),
            'last_status': self.last_status.value,
            'last_error': self.last_error,
            'last_scrape': (
                format_ts(self.last_scrape) if self.last_scrape else None),
            'last_points': self.last_points,
        }


def _write_all(tsdb, points, now):
    written = 0
    for point in points:
        try:
            if tsdb.write(point, now):
                written += 1
        except WriteRejected as e:
            logger.debug('Dropped scraped point {}: {}'.format(
                point.key, e))
    return written


class Scraper(object):

    def __init__(self, tsdb, http, targets=()):
        self.tsdb = tsdb
        self.http = http
        self.targets = list(targets)

    def due(self, now):
        return [t for t in self.targets if t.due(now)]

    def scrape(self, target, now=None):
        """Fetch and store one target; returns the points written."""
        now = now_ms() if now is None else now
        if not target._lock.acquire(blocking=False):
            logger.debug('Scrape of {} still in flight'.format(target.url))
            return []
        try:
            target.last_scrape = now
            try:
                body = self.http.get_text(target.url)
                points = exposition.parse(body, now)
            except MinimonError as e:
                target.last_status = TargetStatus.FAIL
                target.last_error = str(e)
                target.last_points = 0
                logger.warning('Scrape of {} failed: {}'.format(
                    target.url, e))
                return []

            points = [
                MetricPoint(
                    SeriesKey(
                        p.key.name, p.key.tags.merge(target.static_tags)),
                    p.value, p.ts)
                for p in points]
            _write_all(self.tsdb, points, now)
            target.last_status = TargetStatus.OK
            target.last_error = None
            target.last_points = len(points)
            return points
        finally:
            target._lock.release()


@dataclass
class PushGroup:
    job: str
    points: list
    pushed_at: int

    def to_dict(self):
        return {
            'job': self.job,
            'pushed_at': format_ts(self.pushed_at),
            'series': [str(p.key) for p in self.points],
        }


class PushGateway(object):
    # Last write wins per job name

    def __init__(self, tsdb):
        self.tsdb = tsdb
        self._lock = threading.Lock()
        self.groups = {}

    def push(self, job, body, now=None):
        now = now_ms() if now is None else now
        require_name(job, 'job name')
        job_tag = TagSet({'job': job})
        points = [
            MetricPoint(
                SeriesKey(p.key.name, p.key.tags.merge(job_tag)),
                p.value, p.ts)
            for p in exposition.parse(body, now)]

        with self._lock:
            self.groups[job] = PushGroup(job, points, now)
        written = _write_all(self.tsdb, points, now)
        logger.debug('Push for job {} wrote {} points'.format(job, written))
        return written

    def list(self):
        with self._lock:
            return [self.groups[job] for job in sorted(self.groups)]
