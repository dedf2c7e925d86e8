import logging
import re
import threading
import time


logger = logging.getLogger(__name__)


class cache(object):
    # Memoizes by positional args; entries expire after ttl seconds and
    # the table is cleared once it grows past maxsize.

    def __init__(self, ttl=3600, maxsize=1024):
        self.cache = {}
        self.ttl = ttl
        self.maxsize = maxsize
        self._lock = threading.Lock()

    def __call__(self, func):
        def _memoized(*args):
            now = time.monotonic()
            try:
                with self._lock:
                    value, last_update = self.cache[args]
                if now - last_update > self.ttl:
                    raise KeyError(args)
                return value

            except KeyError:
                value = func(*args)
                with self._lock:
                    if len(self.cache) >= self.maxsize:
                        self.cache.clear()
                    self.cache[args] = (value, now)
                return value

            except TypeError:
                # Unhashable arguments
                return func(*args)

        _memoized.cache = self
        return _memoized


@cache()
def compile_pattern(pattern):
    # Label regexes are anchored on both ends
    return re.compile('(?:{})\\Z'.format(pattern))


def label_matches(labels, tag, op, value):
    actual = labels.get(tag, '')
    if op == '=':
        return actual == value
    if op == '!=':
        return actual != value
    if op == '=~':
        return compile_pattern(value).match(actual) is not None
    raise ValueError('Unknown matcher operator {!r}'.format(op))
