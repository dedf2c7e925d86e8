"""Synthetic batch-job producer.

Every tick emits a fixed number of ``condor_job`` status documents. Slots go
to live jobs first (oldest first) and the rest start new jobs; jobs move
pending -> running -> completed | failed, and a failed attempt is retried as
a new pending attempt until ``retry_max`` is used up. Finished attempts also
publish an exit message on ``cms.jobs.<site>``.

Given the same spec, start time and tick count the emitted sequence is
identical.
"""
import collections
import json
import logging
import random
import time
from dataclasses import dataclass, field
from typing import Tuple

from minimon.core import MINUTE, SECOND, Document
from minimon.exceptions import ConfigError
from minimon.ingest import (
    FieldDef, FieldType, ProducerRegistration, Route, SchemaDef, TsdbMapping)

logger = logging.getLogger(__name__)

PRODUCER = 'spider'
DOC_TYPE = 'condor_job'
DEFAULT_SITES = ('T1_US_FNAL', 'T2_CH_CERN', 'T2_DE_DESY', 'T2_IT_Pisa')
DEFAULT_QUOTA = 1024 * 1024 * 1024
EXIT_CODES = (1, 8001, 50664, 137)


def registration(daily_quota_bytes=DEFAULT_QUOTA):
    fields = (
        FieldDef('job_id', FieldType.STRING),
        FieldDef('site', FieldType.STRING),
        FieldDef('status', FieldType.STRING),
        FieldDef('retry_index', FieldType.INT),
        FieldDef('cpu_hours', FieldType.FLOAT),
        FieldDef('wallclock_hours', FieldType.FLOAT),
        FieldDef('memory_mb', FieldType.FLOAT),
    )
    return ProducerRegistration(
        PRODUCER, DOC_TYPE, SchemaDef(PRODUCER, DOC_TYPE, fields),
        daily_quota_bytes,
        Route(to_docstore=True, to_tsdb=True, to_archive=True,
              tsdb=TsdbMapping(
                  ('site', 'status'),
                  ('cpu_hours', 'wallclock_hours', 'memory_mb'))))


@dataclass(frozen=True)
class JobSimSpec:
    sites: Tuple[str, ...] = DEFAULT_SITES
    job_count_per_tick: int = 10
    tick_interval: int = 12 * MINUTE
    time_scale: float = 1.0
    failure_rate: float = 0.1
    retry_max: int = 3
    seed: int = 42

    def __post_init__(self):
        if not self.sites:
            raise ConfigError('spider needs at least one site')
        if self.job_count_per_tick < 1:
            raise ConfigError('job_count_per_tick must be positive')
        if self.tick_interval <= 0 or self.time_scale <= 0:
            raise ConfigError('tick_interval and time_scale must be positive')
        if not 0.0 <= self.failure_rate <= 1.0:
            raise ConfigError('failure_rate must be within [0, 1]')
        if self.retry_max < 0:
            raise ConfigError('retry_max must not be negative')

    @property
    def wall_tick(self):
        """Milliseconds of wall time (and of document time) per tick."""
        return max(1, int(self.tick_interval / self.time_scale))


@dataclass
class _Job:
    job_id: str
    site: str
    status: str = 'pending'
    retry_index: int = 0
    cpu_hours: float = 0.0
    wallclock_hours: float = 0.0
    memory_mb: float = 0.0


@dataclass
class Tick:
    index: int
    documents: list = field(default_factory=list)
    messages: list = field(default_factory=list)


class JobSimulator(object):

    def __init__(self, spec, start):
        self.spec = spec
        self.start = start
        self.rng = random.Random(spec.seed)
        self.live = collections.deque()
        self.created = 0
        self.tick_index = 0

    def _new_job(self):
        self.created += 1
        job = _Job(
            'job-{}-{:06d}'.format(self.spec.seed, self.created),
            self.rng.choice(self.spec.sites))
        return job

    def _advance(self, job):
        if job.status == 'pending':
            job.status = 'running'
            job.memory_mb = float(self.rng.randrange(500, 4000, 50))
            return
        # running: finish this attempt
        job.wallclock_hours = round(self.rng.uniform(0.1, 24.0), 3)
        job.cpu_hours = round(
            job.wallclock_hours * self.rng.uniform(0.3, 1.0), 3)
        failed = self.rng.random() < self.spec.failure_rate
        job.status = 'failed' if failed else 'completed'

    def _document(self, job, ts):
        return Document(PRODUCER, DOC_TYPE, ts, {
            'job_id': job.job_id,
            'site': job.site,
            'status': job.status,
            'retry_index': job.retry_index,
            'cpu_hours': job.cpu_hours,
            'wallclock_hours': job.wallclock_hours,
            'memory_mb': job.memory_mb,
        })

    def _exit_message(self, job, ts):
        exit_code = 0
        if job.status == 'failed':
            exit_code = self.rng.choice(EXIT_CODES)
        subject = 'cms.jobs.{}'.format(job.site)
        payload = json.dumps({
            'name': 'exitCode',
            'tags': {'site': job.site, 'job_id': job.job_id},
            'value': exit_code,
            'ts': ts,
        }, sort_keys=True, separators=(',', ':'))
        return subject, payload

    def tick(self):
        spec = self.spec
        tick = Tick(self.tick_index)
        base = self.start + self.tick_index * spec.wall_tick
        slots = spec.job_count_per_tick
        advancing = min(len(self.live), slots)

        jobs = [self.live.popleft() for _ in range(advancing)]
        for job in jobs:
            if job.status == 'failed':
                # Retry: a fresh attempt of the same job
                job.status = 'pending'
                job.retry_index += 1
                job.cpu_hours = job.wallclock_hours = job.memory_mb = 0.0
            else:
                self._advance(job)
        jobs.extend(self._new_job() for _ in range(slots - advancing))

        for i, job in enumerate(jobs):
            ts = base + i
            tick.documents.append(self._document(job, ts))
            if job.status in ('completed', 'failed'):
                tick.messages.append(self._exit_message(job, ts))
            terminal = job.status == 'completed' or (
                job.status == 'failed' and job.retry_index >= spec.retry_max)
            if not terminal:
                self.live.append(job)

        self.tick_index += 1
        return tick

    def run(self, ticks):
        return [self.tick() for _ in range(ticks)]


class Spider(object):
    """Drives a simulator against an injector and a publisher.

    ``inject(documents)`` returns the per-document results of the ingest
    call; ``publish(subject, payload)`` sends one real-time message.
    """

    def __init__(self, simulator, inject, publish=None, sleep=time.sleep):
        self.simulator = simulator
        self.inject = inject
        self.publish = publish
        self.sleep = sleep
        self.injected = 0
        self.rejected = 0
        self.published = 0

    def run(self, ticks=None):
        interval = self.simulator.spec.wall_tick / SECOND
        count = 0
        while ticks is None or count < ticks:
            if count:
                self.sleep(interval)
            tick = self.simulator.tick()
            results = self.inject(tick.documents)
            rejected = [r for r in results if r.get('status') != 'ok']
            self.injected += len(results) - len(rejected)
            self.rejected += len(rejected)
            for r in rejected:
                logger.warning('Tick {} document {} rejected: {}'.format(
                    tick.index, r.get('index'), r.get('reason')))
            if self.publish is not None:
                for subject, payload in tick.messages:
                    self.publish(subject, payload)
                    self.published += 1
            logger.info('Tick {}: {} documents, {} exit messages'.format(
                tick.index, len(tick.documents), len(tick.messages)))
            count += 1
        return count
