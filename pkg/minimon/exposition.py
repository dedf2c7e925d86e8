"""Line-oriented metric exposition text.

One sample per line::

    name{tag="value",...} <float> [<int ms timestamp>]

Lines starting with ``#`` and blank lines are skipped. Fields are separated
by exactly one space.
"""
import logging
import math

from minimon.core import (
    MAX_NAME_LENGTH, MetricPoint, SeriesKey, TagSet, render_series)
from minimon.exceptions import ExpositionError

logger = logging.getLogger(__name__)

_NAME_START = frozenset(
    'abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_')
_NAME_CHARS = _NAME_START | frozenset('0123456789')
_UNESCAPE = {'\\': '\\', '"': '"', 'n': '\n'}


class _LineParser(object):

    def __init__(self, text, lineno):
        self.text = text
        self.lineno = lineno
        self.pos = 0

    def fail(self, message):
        raise ExpositionError(message, self.lineno, self.pos + 1)

    def peek(self):
        return self.text[self.pos] if self.pos < len(self.text) else ''

    def expect(self, char):
        if self.peek() != char:
            self.fail('expected {!r}'.format(char))
        self.pos += 1

    def name(self, what):
        start = self.pos
        if self.peek() not in _NAME_START or not self.peek():
            self.fail('expected {}'.format(what))
        while self.peek() and self.peek() in _NAME_CHARS:
            self.pos += 1
        value = self.text[start:self.pos]
        if len(value) > MAX_NAME_LENGTH:
            self.pos = start
            self.fail('{} longer than {} characters'.format(
                what, MAX_NAME_LENGTH))
        return value

    def quoted(self):
        self.expect('"')
        chars = []
        while True:
            char = self.peek()
            if not char:
                self.fail('unterminated tag value')
            self.pos += 1
            if char == '"':
                return ''.join(chars)
            if char == '\\':
                escaped = self.peek()
                if escaped not in _UNESCAPE or not escaped:
                    self.fail('invalid escape sequence')
                chars.append(_UNESCAPE[escaped])
                self.pos += 1
            else:
                chars.append(char)

    def tags(self):
        tags = {}
        if self.peek() != '{':
            return tags
        self.pos += 1
        while self.peek() != '}':
            tag_pos = self.pos
            tag = self.name('tag name')
            if tag in tags:
                self.pos = tag_pos
                self.fail('duplicate tag {!r}'.format(tag))
            self.expect('=')
            tags[tag] = self.quoted()
            if self.peek() == ',':
                self.pos += 1
            elif self.peek() != '}':
                self.fail("expected ',' or '}'")
        self.pos += 1
        return tags

    def field(self):
        start = self.pos
        while self.peek() and self.peek() != ' ':
            self.pos += 1
        if start == self.pos:
            self.fail('expected a value')
        return start, self.text[start:self.pos]

    def parse(self, now):
        name = self.name('metric name')
        tags = self.tags()
        self.expect(' ')

        start, token = self.field()
        try:
            if '_' in token or not token.isascii():
                raise ValueError(token)
            value = float(token)
        except ValueError:
            self.pos = start
            self.fail('invalid sample value {!r}'.format(token))
        if not math.isfinite(value):
            self.pos = start
            self.fail('sample value must be finite')

        ts = now
        if self.peek() == ' ':
            self.pos += 1
            start, token = self.field()
            if not (token.isascii() and token.isdigit()):
                self.pos = start
                self.fail('invalid timestamp {!r}'.format(token))
            ts = int(token)
        if self.pos != len(self.text):
            self.fail('unexpected trailing characters')

        return MetricPoint(SeriesKey(name, TagSet(tags)), value, ts)


def parse_line(line, now, lineno=1):
    """Parse one line; returns None for comments and blank lines."""
    if not line or line.startswith('#'):
        return None
    return _LineParser(line, lineno).parse(now)


def parse(text, now):
    points = []
    for lineno, line in enumerate(text.split('\n'), 1):
        point = parse_line(line.rstrip('\r'), now, lineno)
        if point is not None:
            points.append(point)
    return points


def format_value(value):
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def render_point(point, with_timestamp=True):
    line = '{} {}'.format(
        render_series(point.key.name, point.key.tags),
        format_value(point.value))
    if with_timestamp:
        line += ' {}'.format(point.ts)
    return line


def render(points, with_timestamp=True):
    return ''.join(
        render_point(p, with_timestamp) + '\n' for p in points)
