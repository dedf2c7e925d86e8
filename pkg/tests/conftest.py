import json
import pathlib

import mock

import pytest

from minimon.core import DAY, HOUR, MINUTE, SECOND
from minimon.ingest import ProducerRegistration


DATA = pathlib.Path(__file__).parent / 'data'

# 2024-01-10T00:00:00Z
T0 = 1704844800000


def load_data(name):
    with open(DATA / name, encoding='utf-8') as fh:
        return json.load(fh)


class FakeClock(object):

    def __init__(self, now=T0):
        self.now = now

    def __call__(self):
        return self.now

    def advance(self, ms):
        self.now += ms
        return self.now


@pytest.fixture
def clock():
    return FakeClock()


def make_config(tmp_path):
    return {
        'core': {'data_dir': str(tmp_path / 'core')},
        'logging': {
            'verbosity': 0,
            'format': '%(levelname)-8s %(name)s %(message)s',
        },
        'proxy': {},
        'minimon': {
            'enabled': True,
            'data_dir': str(tmp_path / 'data'),
            'hostname': '127.0.0.1',
            'port': 6690,
            'maintenance_interval': MINUTE,
        },
        'ingest': {
            'timestamp_skew': 7 * DAY,
            'registry_file': None,
            'scrape_targets': [],
            'scrape_timeout': 10 * SECOND,
        },
        'bus': {
            'fsync_interval': 0,
            'segment_bytes': 1024 * 1024,
            'retention': 7 * DAY,
            'poll_batch': 500,
            'poll_interval': 200,
        },
        'docstore': {
            'retention_days': 30,
            'retention_overrides': [],
            'derived': [
                'latest_job_status condor_job job_id latest_by_timestamp',
            ],
        },
        'tsdb': {
            'raw_days': 15,
            'm12_days': 7,
            'coarse_days': 1825,
            'checkpoint_interval': 5 * MINUTE,
        },
        'archive': {
            'compaction_delay': HOUR,
            'block_size': 4096,
        },
        'pubsub': {
            'hostname': '127.0.0.1',
            'port': 4222,
            'max_pending': 8 * 1024 * 1024,
            'tokens': ['s3cr3t pub:> sub:>'],
            'bridge_enabled': False,
            'bridge_token': 's3cr3t',
            'bridge_subjects': ['cms.jobs.>'],
        },
        'alerting': {
            'enabled': True,
            'config_file': None,
            'evaluation_interval': 60 * SECOND,
        },
        'cli': {
            'url': 'http://127.0.0.1:6690',
            'pubsub': '127.0.0.1:4222',
            'token': 's3cr3t',
            'format': 'table',
        },
    }


@pytest.fixture
def config(tmp_path):
    return make_config(tmp_path)


@pytest.fixture
def registration_data():
    return load_data('registration_wma.json')


@pytest.fixture
def registration(registration_data):
    return ProducerRegistration.from_dict(registration_data)


@pytest.fixture
def http_mock():
    return mock.Mock(spec=[
        'get_text', 'get_json', 'post_json', 'put_json', 'post_text',
        'delete'])
