"""Query language parser and evaluator.

Grammar::

    expr     := [agg] [func "("] selector ["[" window "]"] [")"]
    selector := name ["{" [matcher ("," matcher)*] "}"]
    matcher  := tag ("=" | "!=" | "=~") '"' value '"'
    agg      := ("sum" | "avg" | "max" | "min") "by" "(" tag ("," tag)* ")"

Error positions are 0-based character offsets into the query text.
"""
import logging
import math
import re
from dataclasses import dataclass
from typing import Optional, Tuple

from minimon.core import (
    AGGREGATED, MINUTE, SeriesKey, parse_duration)
from minimon.exceptions import QueryError
from minimon.utils import compile_pattern

logger = logging.getLogger(__name__)

FUNCTIONS = (
    'avg_over_time', 'max_over_time', 'min_over_time', 'sum_over_time',
    'count_over_time', 'rate')
AGGREGATIONS = ('sum', 'avg', 'max', 'min')
MATCH_OPS = ('=', '!=', '=~')

LOOKBACK = 5 * MINUTE
MAX_STEPS = 11000

_TOKEN_RE = re.compile(r'''
    (?P<ws>\s+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<duration>\d+(?:ms|s|m|h|d|w)(?![A-Za-z0-9_]))
  | (?P<op>!=|=~|[{}()\[\],=])
''', re.VERBOSE)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    pos: int


@dataclass(frozen=True)
class Matcher:
    tag: str
    op: str
    value: str

    def __iter__(self):
        return iter((self.tag, self.op, self.value))


@dataclass(frozen=True)
class Selector:
    name: str
    matchers: Tuple[Matcher, ...] = ()


@dataclass(frozen=True)
class QueryAST:
    selector: Selector
    func: Optional[str] = None
    window: Optional[int] = None
    agg: Optional[str] = None
    by: Tuple[str, ...] = ()

    def to_dict(self):
        return {
            'selector': {
                'name': self.selector.name,
                'matchers': [
                    [m.tag, m.op, m.value] for m in self.selector.matchers],
            },
            'func': self.func,
            'window': self.window,
            'agg': self.agg,
            'by': list(self.by),
        }


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos] == '"':
            tokens.append(_string(text, pos))
            pos = tokens[-1].pos + len(tokens[-1].text)
            continue
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            raise QueryError(
                'unexpected character {!r}'.format(text[pos]), pos)
        if match.lastgroup != 'ws':
            tokens.append(Token(match.lastgroup, match.group(), pos))
        pos = match.end()
    tokens.append(Token('eof', '', len(text)))
    return tokens


def _string(text, start):
    # The token text keeps the quotes; the decoded value is parsed later
    pos = start + 1
    while pos < len(text):
        char = text[pos]
        if char == '\\':
            if pos + 1 >= len(text) or text[pos + 1] not in '\\"n':
                raise QueryError('invalid escape sequence', pos)
            pos += 2
            continue
        if char == '"':
            return Token('string', text[start:pos + 1], start)
        pos += 1
    raise QueryError('unterminated string', start)


def _unquote(token):
    body = token.text[1:-1]
    return re.sub(
        r'\\(.)', lambda m: '\n' if m.group(1) == 'n' else m.group(1), body)


class _Parser(object):

    def __init__(self, text):
        self.tokens = _tokenize(text)
        self.index = 0

    def peek(self, ahead=0):
        return self.tokens[min(self.index + ahead, len(self.tokens) - 1)]

    def advance(self):
        token = self.peek()
        self.index += 1
        return token

    def accept(self, text):
        if self.peek().kind == 'op' and self.peek().text == text:
            return self.advance()
        return None

    def expect(self, text):
        token = self.peek()
        if token.kind != 'op' or token.text != text:
            raise QueryError(
                'expected {!r}, found {}'.format(text, _describe(token)),
                token.pos)
        return self.advance()

    def ident(self, what):
        token = self.peek()
        if token.kind != 'ident':
            raise QueryError(
                'expected {}, found {}'.format(what, _describe(token)),
                token.pos)
        return self.advance().text

    def expr(self):
        agg, by = None, ()
        head, after = self.peek(), self.peek(1)
        if (head.kind == 'ident' and head.text in AGGREGATIONS
                and after.kind == 'ident' and after.text == 'by'):
            agg = self.advance().text
            self.advance()
            self.expect('(')
            by = [self.ident('tag name')]
            while self.accept(','):
                by.append(self.ident('tag name'))
            self.expect(')')

        func = None
        head, after = self.peek(), self.peek(1)
        if (head.kind == 'ident' and head.text in FUNCTIONS
                and after.kind == 'op' and after.text == '('):
            func = self.advance().text
            self.advance()

        selector = self.selector()

        window = None
        bracket = self.accept('[')
        if bracket is not None:
            token = self.peek()
            if token.kind != 'duration':
                raise QueryError(
                    'expected a window duration, found {}'.format(
                        _describe(token)), token.pos)
            window = parse_duration(self.advance().text)
            if window <= 0:
                raise QueryError('window must be positive', token.pos)
            self.expect(']')
            if func is None:
                raise QueryError(
                    'a range window needs a range function', bracket.pos)

        if func is not None:
            if window is None:
                token = self.peek()
                raise QueryError(
                    '{} needs a range window'.format(func), token.pos)
            self.expect(')')

        token = self.peek()
        if token.kind != 'eof':
            raise QueryError(
                'unexpected {}'.format(_describe(token)), token.pos)
        return QueryAST(selector, func, window, agg, tuple(by))

    def selector(self):
        name = self.ident('metric name')
        matchers = []
        if self.accept('{'):
            if not self.accept('}'):
                matchers.append(self.matcher())
                while self.accept(','):
                    matchers.append(self.matcher())
                self.expect('}')
        return Selector(name, tuple(matchers))

    def matcher(self):
        tag = self.ident('tag name')
        token = self.peek()
        if token.kind != 'op' or token.text not in MATCH_OPS:
            raise QueryError(
                'expected a matcher operator, found {}'.format(
                    _describe(token)), token.pos)
        op = self.advance().text
        token = self.peek()
        if token.kind != 'string':
            raise QueryError(
                'expected a quoted matcher value, found {}'.format(
                    _describe(token)), token.pos)
        value = _unquote(self.advance())
        if op == '=~':
            try:
                compile_pattern(value)
            except re.error as e:
                raise QueryError(
                    'invalid regular expression: {}'.format(e), token.pos)
        return Matcher(tag, op, value)


def _describe(token):
    if token.kind == 'eof':
        return 'end of query'
    return repr(token.text)


def parse_query(text):
    return _Parser(text).expr()


# Evaluation

def _rate(samples):
    if len(samples) < 2:
        return None
    elapsed = samples[-1][0] - samples[0][0]
    if elapsed <= 0:
        return None
    increase = math.fsum(
        max(0.0, b[1] - a[1]) for a, b in zip(samples, samples[1:]))
    return increase / (elapsed / 1000.0)


def _over_samples(func, samples):
    values = [v for _, v in samples]
    if func == 'avg_over_time':
        return math.fsum(values) / len(values)
    if func == 'sum_over_time':
        return math.fsum(values)
    if func == 'min_over_time':
        return min(values)
    if func == 'max_over_time':
        return max(values)
    if func == 'count_over_time':
        return float(len(values))
    return _rate(samples)


def _over_bins(func, bins):
    # bins: (window_start, (count, sum, min, max)) in start order
    if func == 'avg_over_time':
        return math.fsum(b[1] / b[0] for _, b in bins) / len(bins)
    if func == 'sum_over_time':
        return math.fsum(b[1] for _, b in bins)
    if func == 'min_over_time':
        return min(b[2] for _, b in bins)
    if func == 'max_over_time':
        return max(b[3] for _, b in bins)
    if func == 'count_over_time':
        return float(sum(b[0] for _, b in bins))
    return _rate([(start, b[1] / b[0]) for start, b in bins])


def _series_value(tsdb, series, ast, t):
    if ast.func is None:
        raw = tsdb.raw_between(series, t - LOOKBACK, t)
        if raw:
            return raw[-1][1]
        for res in AGGREGATED:
            bins = tsdb.bins_between(series, res, t - res.duration, t)
            if bins:
                count, total, _, _ = bins[-1][1]
                return total / count
        return None

    lo = t - ast.window
    raw = tsdb.raw_between(series, lo, t)
    if raw:
        return _over_samples(ast.func, raw)
    for res in AGGREGATED:
        bins = tsdb.bins_between(series, res, lo, t)
        if bins:
            return _over_bins(ast.func, bins)
    return None


def _aggregate(op, values):
    if op == 'sum':
        return math.fsum(values)
    if op == 'avg':
        return math.fsum(values) / len(values)
    if op == 'max':
        return max(values)
    return min(values)


def instant(tsdb, ast, t):
    """Evaluate at one instant; returns [(SeriesKey, value)] sorted by key."""
    vector = []
    for series in tsdb.select(ast.selector.name, ast.selector.matchers):
        value = _series_value(tsdb, series, ast, t)
        if value is None:
            continue
        key = series.key if ast.func is None else SeriesKey(
            '', series.key.tags)
        vector.append((key, value))

    if ast.agg is not None:
        groups = {}
        for key, value in vector:
            group = SeriesKey('', key.tags.select(ast.by))
            groups.setdefault(group, []).append(value)
        vector = [
            (group, _aggregate(ast.agg, values))
            for group, values in groups.items()]

    return sorted(vector, key=lambda item: item[0].canonical)


def evaluate(tsdb, ast, start, end, step):
    """Range evaluation; returns [(SeriesKey, [(ts, value), ...])]."""
    if start > end:
        raise QueryError('range start must not be after its end')
    if step <= 0:
        raise QueryError('step must be positive')
    if (end - start) // step + 1 > MAX_STEPS:
        raise QueryError(
            'range of {} steps exceeds {}'.format(
                (end - start) // step + 1, MAX_STEPS))

    matrix = {}
    t = start
    while t <= end:
        for key, value in instant(tsdb, ast, t):
            matrix.setdefault(key, []).append((t, value))
        t += step
    return sorted(matrix.items(), key=lambda item: item[0].canonical)


def run(tsdb, text, start, end, step):
    return evaluate(tsdb, parse_query(text), start, end, step)


def matrix_to_json(matrix):
    return [
        {'series': key.canonical, 'name': key.name,
         'tags': dict(key.tags), 'points': [[ts, v] for ts, v in points]}
        for key, points in matrix]
