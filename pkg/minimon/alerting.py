"""Rule evaluation, suppression and grouped notification routing.

Each evaluation runs the rules at one instant, then annotates the live
instances in a fixed order: silences, outage windows, inhibition. Inhibition
sources are taken from the instances still unsuppressed before inhibition is
applied, so a silenced or inhibited alert never inhibits anything.
"""
import enum
import hashlib
import json
import logging
import operator
import re
import threading
import uuid
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

from minimon import exposition, query
from minimon.core import (
    HOUR, MINUTE, SECOND, EMPTY_TAGS, TagSet, canonical_json, now_ms,
    parse_duration, parse_ts)
from minimon.exceptions import ConfigError, MinimonError
from minimon.notify import Dispatcher, Notification, Receiver, ReceiverKind
from minimon.utils import label_matches

logger = logging.getLogger(__name__)

COMPARATORS = {
    '>': operator.gt,
    '<': operator.lt,
    '>=': operator.ge,
    '<=': operator.le,
}

_TEMPLATE_RE = re.compile(r'\$labels\.([A-Za-z_][A-Za-z0-9_]*)|\$value')


class State(enum.Enum):
    PENDING = 'PENDING'
    FIRING = 'FIRING'
    RESOLVED = 'RESOLVED'


class SuppressionKind(enum.Enum):
    SILENCE = 'SILENCE'
    INHIBITION = 'INHIBITION'
    OUTAGE = 'OUTAGE'


def parse_matchers(items, ops=query.MATCH_OPS):
    """Matchers come as ``[tag, op, value]`` lists or ``{"tag", "op",
    "value"}`` objects."""
    matchers = []
    for item in items or ():
        if isinstance(item, dict):
            tag = item.get('tag')
            op = item.get('op', '=')
            value = item.get('value')
        else:
            tag, op, value = item
        if op not in ops:
            raise ConfigError('Matcher operator {!r} not allowed here'.format(
                op))
        if not isinstance(tag, str) or not isinstance(value, str):
            raise ConfigError('Matcher needs string tag and value')
        matchers.append(query.Matcher(tag, op, value))
    return tuple(matchers)


def matches_all(labels, matchers):
    return all(label_matches(labels, *m) for m in matchers)


def _matchers_to_list(matchers):
    return [[m.tag, m.op, m.value] for m in matchers]


def render_template(template, labels, value):
    def substitute(match):
        if match.group(1) is not None:
            return labels.get(match.group(1), '')
        return exposition.format_value(value)

    return _TEMPLATE_RE.sub(substitute, template)


def fingerprint(rule, labels):
    data = canonical_json({'rule': rule, 'labels': dict(labels)})
    return hashlib.sha1(data).hexdigest()


@dataclass(frozen=True)
class AlertRule:
    name: str
    query: str
    comparator: str
    threshold: float
    for_duration: int = 0
    labels: TagSet = EMPTY_TAGS
    annotations: Tuple[Tuple[str, str], ...] = ()
    ast: Optional[query.QueryAST] = field(default=None, compare=False)

    def __post_init__(self):
        if self.comparator not in COMPARATORS:
            raise ConfigError('Rule {}: unknown comparator {!r}'.format(
                self.name, self.comparator))
        if self.for_duration < 0:
            raise ConfigError('Rule {}: for_duration must not be negative'
                              .format(self.name))
        if self.ast is None:
            try:
                ast = query.parse_query(self.query)
            except MinimonError as e:
                raise ConfigError('Rule {}: {}'.format(self.name, e))
            object.__setattr__(self, 'ast', ast)

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                name=data['name'],
                query=data['query'],
                comparator=data.get('comparator', '>'),
                threshold=float(data['threshold']),
                for_duration=parse_duration(data.get('for', 0)),
                labels=TagSet(data.get('labels') or {}),
                annotations=tuple(sorted(
                    (data.get('annotations') or {}).items())),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError('Invalid alert rule {!r}: {}'.format(
                data.get('name'), e))

    def breaches(self, value):
        return COMPARATORS[self.comparator](value, self.threshold)


@dataclass
class AlertInstance:
    rule: str
    labels: TagSet
    state: State
    started_at: int
    value: float
    fired_at: Optional[int] = None
    resolved_at: Optional[int] = None
    annotations: Dict[str, str] = field(default_factory=dict)
    suppressed_by: Optional[Tuple[SuppressionKind, str]] = None

    @property
    def fingerprint(self):
        return fingerprint(self.rule, self.labels)

    @property
    def suppressed(self):
        return self.suppressed_by is not None

    def summary(self):
        # Entry of a notification
        return {
            'labels': dict(self.labels),
            'annotations': dict(self.annotations),
            'value': self.value,
            'state': self.state.value,
            'started_at': self.started_at,
        }

    def to_dict(self):
        data = self.summary()
        data.update({
            'rule': self.rule,
            'fingerprint': self.fingerprint,
            'fired_at': self.fired_at,
            'resolved_at': self.resolved_at,
            'suppressed_by': None if self.suppressed_by is None else {
                'kind': self.suppressed_by[0].value,
                'ref': self.suppressed_by[1],
            },
        })
        return data


@dataclass(frozen=True)
class StateChange:
    fingerprint: str
    rule: str
    labels: TagSet
    old: Optional[State]
    new: State
    at: int


@dataclass(frozen=True)
class Silence:
    id: str
    matchers: Tuple[query.Matcher, ...]
    starts_at: int
    ends_at: int
    creator: str = ''
    comment: str = ''

    def __post_init__(self):
        if not self.starts_at < self.ends_at:
            raise ConfigError('Silence {}: starts_at must precede ends_at'
                              .format(self.id))
        if not self.matchers:
            raise ConfigError('Silence {} has no matchers'.format(self.id))

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                id=str(data.get('id') or uuid.uuid4().hex),
                matchers=parse_matchers(data.get('matchers'), ('=', '=~')),
                starts_at=parse_ts(data['starts_at']),
                ends_at=parse_ts(data['ends_at']),
                creator=data.get('creator', ''),
                comment=data.get('comment', ''),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError('Invalid silence: {}'.format(e))

    def active(self, now):
        return self.starts_at <= now < self.ends_at

    def to_dict(self):
        return {
            'id': self.id,
            'matchers': _matchers_to_list(self.matchers),
            'starts_at': self.starts_at,
            'ends_at': self.ends_at,
            'creator': self.creator,
            'comment': self.comment,
        }


@dataclass(frozen=True)
class InhibitRule:
    source_matchers: Tuple[query.Matcher, ...]
    target_matchers: Tuple[query.Matcher, ...]
    equal_labels: Tuple[str, ...]

    def __post_init__(self):
        if not self.equal_labels:
            raise ConfigError('Inhibit rules need equal_labels')

    @classmethod
    def from_dict(cls, data):
        return cls(
            parse_matchers(data.get('source_matchers')),
            parse_matchers(data.get('target_matchers')),
            tuple(data.get('equal_labels') or ()))


@dataclass(frozen=True)
class OutageWindow:
    source: str
    matchers: Tuple[query.Matcher, ...]
    starts_at: int
    ends_at: int
    ticket_id: str

    def __post_init__(self):
        if not self.starts_at < self.ends_at:
            raise ConfigError('Outage {}: starts_at must precede ends_at'
                              .format(self.ticket_id))

    @classmethod
    def from_dict(cls, data, source=None):
        try:
            return cls(
                source=data.get('source') or source or '',
                matchers=parse_matchers(data['matchers']),
                starts_at=parse_ts(data['starts_at']),
                ends_at=parse_ts(data['ends_at']),
                ticket_id=str(data['ticket_id']),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError('Invalid outage window: {}'.format(e))

    def active(self, now):
        return self.starts_at <= now < self.ends_at


@dataclass(frozen=True)
class RouteConfig:
    receiver: str
    group_by: Tuple[str, ...] = ()
    group_wait: int = 30 * SECOND
    group_interval: int = 5 * MINUTE
    repeat_interval: int = 4 * HOUR
    annotate_only: bool = False

    def __post_init__(self):
        if not (self.group_wait <= self.group_interval
                <= self.repeat_interval):
            raise ConfigError(
                'Route timings must satisfy group_wait <= group_interval '
                '<= repeat_interval')

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                receiver=data['receiver'],
                group_by=tuple(data.get('group_by') or ()),
                group_wait=parse_duration(data.get('group_wait', '30s')),
                group_interval=parse_duration(
                    data.get('group_interval', '5m')),
                repeat_interval=parse_duration(
                    data.get('repeat_interval', '4h')),
                annotate_only=bool(data.get('annotate_only', False)),
            )
        except (KeyError, ValueError) as e:
            raise ConfigError('Invalid route: {}'.format(e))


@dataclass(frozen=True)
class OutageFeed:
    source: str
    location: str
    interval: int = 5 * MINUTE


@dataclass
class AlertingConfig:
    rules: Tuple[AlertRule, ...] = ()
    route: Optional[RouteConfig] = None
    receivers: Tuple[Receiver, ...] = ()
    inhibit_rules: Tuple[InhibitRule, ...] = ()
    silences: Tuple[Silence, ...] = ()
    outages: Tuple[OutageWindow, ...] = ()
    outage_feeds: Tuple[OutageFeed, ...] = ()

    @classmethod
    def from_dict(cls, data):
        rules = tuple(AlertRule.from_dict(r) for r in data.get('rules', ()))
        names = [r.name for r in rules]
        if len(set(names)) != len(names):
            raise ConfigError('Alert rule names must be unique')
        receivers = tuple(
            Receiver.from_dict(r) for r in data.get('receivers', ()))
        if len({r.name for r in receivers}) != len(receivers):
            raise ConfigError('Receiver names must be unique')
        route = None
        if data.get('route'):
            route = RouteConfig.from_dict(data['route'])
            if route.receiver not in {r.name for r in receivers}:
                raise ConfigError('Route receiver {} is not defined'.format(
                    route.receiver))
        return cls(
            rules=rules,
            route=route,
            receivers=receivers,
            inhibit_rules=tuple(
                InhibitRule.from_dict(r)
                for r in data.get('inhibit_rules', ())),
            silences=tuple(
                Silence.from_dict(s) for s in data.get('silences', ())),
            outages=tuple(
                OutageWindow.from_dict(o) for o in data.get('outages', ())),
            outage_feeds=tuple(
                OutageFeed(f['source'], f['location'],
                           parse_duration(f.get('interval', '5m')))
                for f in data.get('outage_feeds', ())),
        )

    @classmethod
    def load(cls, path):
        try:
            with open(path, 'r', encoding='utf-8') as fh:
                data = json.load(fh)
        except (OSError, ValueError) as e:
            raise ConfigError('Cannot read alerting config {}: {}'.format(
                path, e))
        return cls.from_dict(data)


# Suppression passes

def apply_silences(instances, silences, now):
    active = [s for s in silences if s.active(now)]
    for instance in instances:
        if instance.state is not State.FIRING or instance.suppressed:
            continue
        for silence in active:
            if matches_all(instance.labels, silence.matchers):
                instance.suppressed_by = (SuppressionKind.SILENCE, silence.id)
                break
    return instances


def correlate_outages(instances, outages, now, annotate_only=False):
    active = [o for o in outages if o.active(now)]
    for instance in instances:
        if instance.state is not State.FIRING:
            continue
        for outage in active:
            if matches_all(instance.labels, outage.matchers):
                instance.annotations['known_outage'] = outage.ticket_id
                if not annotate_only and not instance.suppressed:
                    instance.suppressed_by = (
                        SuppressionKind.OUTAGE, outage.ticket_id)
                break
    return instances


def apply_inhibition(instances, rules):
    """Suppress targets whose inhibitors stay unsuppressed themselves.

    Targets are decided in rounds against the outcome of earlier rounds:
    one live inhibitor suppresses a target, and a target whose inhibitors
    are all inhibited stays live. Alerts left undecided (inhibition
    cycles) stay live. The reference is the smallest live inhibitor
    fingerprint.
    """
    sources = [
        i for i in instances
        if i.state is State.FIRING and not i.suppressed]
    undecided = {}
    for target in instances:
        if target.suppressed:
            continue
        inhibitors = []
        for rule in rules:
            if not matches_all(target.labels, rule.target_matchers):
                continue
            inhibitors.extend(
                s for s in sources
                if s is not target
                and matches_all(s.labels, rule.source_matchers)
                and all(s.labels.get(t) == target.labels.get(t)
                        for t in rule.equal_labels))
        undecided[id(target)] = (target, inhibitors)

    live, inhibited = set(), {}
    while undecided:
        decided = {}
        for key, (target, inhibitors) in undecided.items():
            active = [s for s in inhibitors if id(s) in live]
            if active:
                decided[key] = min(active, key=lambda s: s.fingerprint)
            elif all(id(s) in inhibited for s in inhibitors):
                decided[key] = None
        if not decided:
            break
        for key, source in decided.items():
            target, _ = undecided.pop(key)
            if source is None:
                live.add(key)
            else:
                inhibited[key] = source
                target.suppressed_by = (
                    SuppressionKind.INHIBITION, source.fingerprint)
    return instances


class AlertEngine(object):
    """Owns the rule set and the alert instances it produces."""

    def __init__(self, tsdb, rules=()):
        self.tsdb = tsdb
        self.rules = tuple(rules)
        self.instances = {}
        # Instances resolved by the latest evaluation
        self.resolved = []
        self.stats = Counter()

    def evaluate_rules(self, now):
        changes = []
        resolved = []
        for rule in self.rules:
            try:
                vector = query.instant(self.tsdb, rule.ast, now)
            except Exception as e:
                self.stats['rule_errors'] += 1
                logger.warning('Skipping rule {}: {}'.format(rule.name, e))
                continue

            breaching = {}
            for key, value in vector:
                if rule.breaches(value):
                    labels = key.tags.merge(rule.labels)
                    breaching[fingerprint(rule.name, labels)] = (
                        labels, value)

            for fp, (labels, value) in sorted(breaching.items()):
                instance = self.instances.get(fp)
                if instance is None:
                    instance = AlertInstance(
                        rule.name, labels, State.PENDING, now, value)
                    self.instances[fp] = instance
                    changes.append(StateChange(
                        fp, rule.name, labels, None, State.PENDING, now))
                instance.value = value
                instance.annotations = {
                    k: render_template(v, labels, value)
                    for k, v in rule.annotations}
                if (instance.state is State.PENDING
                        and now - instance.started_at >= rule.for_duration):
                    instance.state = State.FIRING
                    instance.fired_at = now
                    changes.append(StateChange(
                        fp, rule.name, labels, State.PENDING, State.FIRING,
                        now))

            for fp, instance in sorted(self.instances.items()):
                if instance.rule != rule.name or fp in breaching:
                    continue
                changes.append(StateChange(
                    fp, rule.name, instance.labels, instance.state,
                    State.RESOLVED, now))
                instance.state = State.RESOLVED
                instance.resolved_at = now
                resolved.append(fp)

        self.resolved = [self.instances.pop(fp) for fp in resolved]
        for change in changes:
            logger.debug('Alert {} {} -> {}'.format(
                change.rule, change.old and change.old.value,
                change.new.value))
        return changes

    def active(self):
        return [self.instances[fp] for fp in sorted(self.instances)]


@dataclass
class _Group:
    labels: TagSet
    created_at: int
    firing: dict = field(default_factory=dict)
    resolved: dict = field(default_factory=dict)
    notified: frozenset = frozenset()
    last_sent: Optional[int] = None


class Router(object):
    """Buckets unsuppressed FIRING alerts by their group_by values and decides
    when each group is due for a notification."""

    def __init__(self, route):
        self.route = route
        self.groups = {}

    def _group_key(self, labels):
        return tuple((t, labels.get(t, '')) for t in self.route.group_by)

    def update(self, instances, now):
        current = {}
        for instance in instances:
            if instance.state is State.FIRING and not instance.suppressed:
                key = self._group_key(instance.labels)
                current.setdefault(key, {})[instance.fingerprint] = instance

        resolved = {
            i.fingerprint: i for i in instances
            if i.state is State.RESOLVED}

        for key, members in current.items():
            group = self.groups.get(key)
            if group is None:
                group = _Group(TagSet(dict(key)), now)
                self.groups[key] = group
            group.firing = members

        for key, group in list(self.groups.items()):
            if key not in current:
                group.firing = {}
            for fp in group.notified:
                if fp in resolved and fp not in group.firing:
                    group.resolved[fp] = resolved[fp]

    def _due(self, group, now):
        if group.last_sent is None:
            return bool(group.firing) and (
                now >= group.created_at + self.route.group_wait)
        changed = (
            bool(group.resolved)
            or frozenset(group.firing) != group.notified)
        if changed:
            return now >= group.last_sent + self.route.group_interval
        return bool(group.firing) and (
            now >= group.last_sent + self.route.repeat_interval)

    def flush(self, now):
        notifications = []
        for key in sorted(self.groups):
            group = self.groups[key]
            if self._due(group, now) and (group.firing or group.resolved):
                members = (
                    [group.firing[fp] for fp in sorted(group.firing)]
                    + [group.resolved[fp] for fp in sorted(group.resolved)])
                notifications.append(Notification(
                    receiver=self.route.receiver,
                    group_labels=group.labels,
                    status='firing' if group.firing else 'resolved',
                    alerts=tuple(i.summary() for i in members),
                    ts=now))
                group.notified = frozenset(group.firing)
                group.resolved = {}
                group.last_sent = now
            if not group.firing and not group.resolved:
                del self.groups[key]
        return notifications


def route_and_notify(router, dispatcher, instances, now):
    router.update(instances, now)
    notifications = router.flush(now)
    for notification in notifications:
        dispatcher.dispatch(notification, now)
    return notifications


class SilenceStore(object):

    def __init__(self):
        self._silences = {}
        self._lock = threading.Lock()

    def add(self, silence):
        with self._lock:
            self._silences[silence.id] = silence
        logger.info('Silence {} added until {}'.format(
            silence.id, silence.ends_at))
        return silence.id

    def remove(self, silence_id):
        with self._lock:
            return self._silences.pop(silence_id, None) is not None

    def list(self):
        with self._lock:
            return [self._silences[k] for k in sorted(self._silences)]


class AlertManager(object):
    """Evaluation cadence, suppression passes, routing and dispatch."""

    def __init__(self, tsdb, config, http=None,
                 evaluation_interval=60 * SECOND, config_file=None,
                 clock=now_ms, stream=None):
        self.tsdb = tsdb
        self.http = http
        self.clock = clock
        self.stream = stream
        self.config_file = config_file
        self.evaluation_interval = evaluation_interval
        self.silences = SilenceStore()
        self.feed_outages = {}
        self._feed_due = {}
        self._next_evaluation = None
        self._lock = threading.RLock()
        self.stats = Counter()
        self._apply(config)

    def _apply(self, config):
        self.config = config
        previous = getattr(self, 'engine', None)
        self.engine = AlertEngine(self.tsdb, config.rules)
        if previous is not None:
            names = {r.name for r in config.rules}
            self.engine.instances = {
                fp: i for fp, i in previous.instances.items()
                if i.rule in names}
            self.engine.stats = previous.stats
        route = config.route or RouteConfig('stdout')
        receivers = config.receivers or (
            Receiver('stdout', ReceiverKind.STDOUT),)
        self.router = Router(route)
        self.dispatcher = Dispatcher(receivers, self.http, self.stream)
        for silence in config.silences:
            self.silences.add(silence)

    def reload(self):
        if self.config_file is None:
            raise ConfigError('No alerting config file to reload')
        config = AlertingConfig.load(self.config_file)
        with self._lock:
            self._apply(config)
        logger.info('Reloaded {} alert rules from {}'.format(
            len(config.rules), self.config_file))
        return config

    def outages(self):
        windows = list(self.config.outages)
        for source in sorted(self.feed_outages):
            windows.extend(self.feed_outages[source])
        return windows

    def pull_feeds(self, now):
        for feed in self.config.outage_feeds:
            if self._feed_due.get(feed.source, 0) > now:
                continue
            self._feed_due[feed.source] = now + feed.interval
            try:
                if feed.location.startswith(('http://', 'https://')):
                    entries = self.http.get_json(feed.location)
                else:
                    entries = json.loads(
                        Path(feed.location).read_text(encoding='utf-8'))
            except (MinimonError, OSError, ValueError) as e:
                self.stats['feed_errors'] += 1
                logger.warning('Cannot pull outage feed {}: {}'.format(
                    feed.source, e))
                continue
            windows = []
            for entry in entries if isinstance(entries, list) else ():
                try:
                    windows.append(OutageWindow.from_dict(entry, feed.source))
                except (ConfigError, AttributeError):
                    self.stats['malformed_outages'] += 1
            self.feed_outages[feed.source] = windows

    def annotate(self, now):
        instances = self.engine.active() + list(self.engine.resolved)
        for instance in instances:
            instance.suppressed_by = None
            instance.annotations.pop('known_outage', None)
        apply_silences(instances, self.silences.list(), now)
        correlate_outages(
            instances, self.outages(), now, self.router.route.annotate_only)
        apply_inhibition(instances, self.config.inhibit_rules)
        return instances

    def evaluate(self, now):
        with self._lock:
            self.pull_feeds(now)
            changes = self.engine.evaluate_rules(now)
            instances = self.annotate(now)
            self.router.update(instances, now)
        return changes

    def tick(self, now=None):
        """Evaluate when due, then flush due groups and retries."""
        now = self.clock() if now is None else now
        with self._lock:
            if self._next_evaluation is None or now >= self._next_evaluation:
                self.evaluate(now)
                self._next_evaluation = now + self.evaluation_interval
            notifications = self.router.flush(now)
            for notification in notifications:
                self.dispatcher.dispatch(notification, now)
            self.dispatcher.retry_due(now)
        self.stats['notifications'] += len(notifications)
        return notifications

    def alerts(self):
        with self._lock:
            return [i.to_dict() for i in self.engine.active()]
