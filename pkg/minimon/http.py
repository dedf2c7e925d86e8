import logging

from mopidy import httpclient
import requests

import minimon
from minimon.exceptions import ServiceError, ServiceUnreachable

logger = logging.getLogger(__name__)


class MinimonHttpClient(object):
    # Shared requests session for scrapes, webhooks, feeds and the CLI

    def __init__(self, headers=None, proxy=None, retries=5, timeout=10):
        http_proxy = httpclient.format_proxy(proxy or {})
        user_agent = httpclient.format_user_agent(
            '/'.join((minimon.Extension.dist_name, minimon.__version__)))

        self.retries = retries
        self.timeout = timeout
        self.session = requests.Session()
        if http_proxy:
            self.session.proxies.update(
                {'http': http_proxy, 'https': http_proxy})
        self.session.headers.update(headers or {})
        self.session.headers.update({'user-agent': user_agent})

    def _request(self, method, url, **kwargs):
        # Retries connection problems only; HTTP error statuses are final
        counter = 0
        while counter <= self.retries:
            try:
                r = self.session.request(
                    method, url, timeout=self.timeout, **kwargs)
            except (requests.ConnectionError, requests.Timeout) as e:
                logger.info(
                    'Connection to {} on try {} with problem: {}'.format(
                        url, counter, e))
                counter += 1
                continue

            logger.debug('{} {} -> {}'.format(method, url, r.status_code))
            if r.status_code >= 400:
                raise ServiceError(
                    '{} {} failed with status {}'.format(
                        method, url, r.status_code),
                    status=r.status_code, payload=_json_or_text(r))
            return r

        raise ServiceUnreachable('Cannot connect to {}'.format(url))

    def get_text(self, url, **params):
        return self._request('GET', url, params=params or None).text

    def get_json(self, url, **params):
        return _json_or_text(
            self._request('GET', url, params=params or None))

    def post_json(self, url, payload, **params):
        return _json_or_text(self._request(
            'POST', url, json=payload, params=params or None))

    def put_json(self, url, payload):
        return _json_or_text(self._request('PUT', url, json=payload))

    def post_text(self, url, body):
        r = self._request(
            'POST', url, data=body.encode('utf-8'),
            headers={'content-type': 'text/plain; charset=utf-8'})
        return _json_or_text(r)

    def delete(self, url):
        return _json_or_text(self._request('DELETE', url))


def _json_or_text(r):
    if not r.text:
        return {}
    try:
        return r.json()
    except ValueError:
        return {'message': r.text}
