import logging
import os

from mopidy import config, ext
from mopidy.config import types, validators

from minimon.core import format_duration, parse_duration


__version__ = '0.4.0'

logger = logging.getLogger(__name__)


class Duration(config.ConfigValue):
    """Duration written as ``<int><unit>``, units ms s m h d w.

    Deserializes to integer milliseconds.
    """

    def __init__(self, optional=False, minimum=None):
        self._required = not optional
        self._minimum = minimum

    def deserialize(self, value):
        value = types.decode(value).strip()
        validators.validate_required(value, self._required)
        if not value:
            return None
        try:
            ms = parse_duration(value)
        except ValueError as e:
            raise ValueError(str(e))
        validators.validate_minimum(ms, self._minimum)
        return ms

    def serialize(self, value, display=False):
        if value is None:
            return ''
        return format_duration(value)


class Extension(ext.Extension):

    dist_name = 'Minimon'
    ext_name = 'minimon'
    version = __version__

    def get_default_config(self):
        conf_file = os.path.join(os.path.dirname(__file__), 'ext.conf')
        return config.read(conf_file)

    def get_config_schema(self):
        schema = super(Extension, self).get_config_schema()
        schema['data_dir'] = config.Path(optional=True)
        schema['hostname'] = config.Hostname()
        schema['port'] = config.Port()
        schema['maintenance_interval'] = Duration(minimum=1000)
        return schema

    def get_config_schemas(self):
        # [minimon] plus one schema per pipeline component
        schemas = [self.get_config_schema()]

        ingest = config.ConfigSchema('ingest')
        ingest['timestamp_skew'] = Duration(minimum=0)
        ingest['registry_file'] = config.String(optional=True)
        ingest['scrape_targets'] = config.List(optional=True)
        ingest['scrape_timeout'] = Duration(minimum=1)
        schemas.append(ingest)

        bus = config.ConfigSchema('bus')
        bus['fsync_interval'] = Duration(minimum=0)
        bus['segment_bytes'] = config.Integer(minimum=1024)
        bus['retention'] = Duration(minimum=1)
        bus['poll_batch'] = config.Integer(minimum=1)
        bus['poll_interval'] = Duration(minimum=1)
        schemas.append(bus)

        docstore = config.ConfigSchema('docstore')
        docstore['retention_days'] = config.Integer(minimum=30, maximum=40)
        docstore['retention_overrides'] = config.List(optional=True)
        docstore['derived'] = config.List(optional=True)
        schemas.append(docstore)

        tsdb = config.ConfigSchema('tsdb')
        tsdb['raw_days'] = config.Integer(minimum=1)
        tsdb['m12_days'] = config.Integer(minimum=1)
        tsdb['coarse_days'] = config.Integer(minimum=1)
        tsdb['checkpoint_interval'] = Duration(minimum=1000)
        schemas.append(tsdb)

        archive = config.ConfigSchema('archive')
        archive['compaction_delay'] = Duration(minimum=0)
        archive['block_size'] = config.Integer(minimum=4096)
        schemas.append(archive)

        pubsub = config.ConfigSchema('pubsub')
        pubsub['hostname'] = config.Hostname()
        pubsub['port'] = config.Port()
        pubsub['max_pending'] = config.Integer(minimum=1)
        pubsub['tokens'] = config.List(optional=True)
        pubsub['bridge_enabled'] = config.Boolean()
        pubsub['bridge_token'] = config.Secret(optional=True)
        pubsub['bridge_subjects'] = config.List(optional=True)
        schemas.append(pubsub)

        alerting = config.ConfigSchema('alerting')
        alerting['enabled'] = config.Boolean()
        alerting['config_file'] = config.String(optional=True)
        alerting['evaluation_interval'] = Duration(minimum=1000)
        schemas.append(alerting)

        cli = config.ConfigSchema('cli')
        cli['url'] = config.String()
        cli['pubsub'] = config.String()
        cli['token'] = config.Secret(optional=True)
        cli['format'] = config.String(choices=['json', 'table', 'sparkline'])
        schemas.append(cli)

        return schemas

