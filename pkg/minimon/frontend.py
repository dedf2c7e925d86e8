import logging
import threading

import pykka

from minimon.service import SINKS

logger = logging.getLogger(__name__)


class LoopFrontend(pykka.ThreadingActor):
    # Runs run_once() on a daemon thread; sleeps interval seconds whenever
    # a pass finds nothing to do

    interval = 1.0

    def __init__(self, pipeline):
        super(LoopFrontend, self).__init__()
        self.pipeline = pipeline
        self.stopped = threading.Event()
        self.worker = threading.Thread(
            target=self._loop, name=self.__class__.__name__)
        # Kill thread immediately on program exit
        self.worker.daemon = True

    def on_start(self):
        self.worker.start()

    def on_stop(self):
        self.stopped.set()
        self.worker.join(timeout=10)

    def run_once(self):
        raise NotImplementedError

    def _loop(self):
        while not self.stopped.is_set():
            try:
                busy = self.run_once()
            except Exception:
                logger.exception('{} pass failed'.format(
                    self.__class__.__name__))
                busy = False
            if not busy:
                self.stopped.wait(self.interval)


class SinkFrontend(LoopFrontend):
    # Moves one consumer group's backlog into its store

    def __init__(self, pipeline, group):
        super(SinkFrontend, self).__init__(pipeline)
        self.group = group
        self.interval = pipeline.config['bus']['poll_interval'] / 1000.0

    def run_once(self):
        consumed = 0
        for topic in self.pipeline.bus.topics('docs.'):
            consumed += self.pipeline.drain(self.group, topic)
        return consumed > 0


class MaintenanceFrontend(LoopFrontend):

    def __init__(self, pipeline):
        super(MaintenanceFrontend, self).__init__(pipeline)
        self.interval = (
            pipeline.config['minimon']['maintenance_interval'] / 1000.0)

    def run_once(self):
        report = self.pipeline.maintenance()
        logger.debug('Maintenance: {}'.format(report))
        return False


class ScrapeFrontend(LoopFrontend):

    def run_once(self):
        scraper = self.pipeline.scraper
        for target in scraper.due(self.pipeline.clock()):
            scraper.scrape(target)
        return False


class AlertingFrontend(LoopFrontend):

    def run_once(self):
        self.pipeline.alerts.tick()
        return False


class BridgeFrontend(pykka.ThreadingActor):
    # Subscribes to the pub/sub proxy and feeds metric messages to the tsdb

    def __init__(self, pipeline):
        super(BridgeFrontend, self).__init__()
        conf = pipeline.config['pubsub']
        address = '{}:{}'.format(conf['hostname'], conf['port'])
        self.subscriber = pipeline.bridge.subscriber(
            address, conf.get('bridge_token'),
            conf.get('bridge_subjects') or ())

    def on_start(self):
        self.subscriber.start()

    def on_stop(self):
        self.subscriber.stop_client()


def start(pipeline):
    """Start every service actor the configuration enables."""
    refs = [SinkFrontend.start(pipeline, group) for group in SINKS]
    refs.append(MaintenanceFrontend.start(pipeline))
    if pipeline.scraper.targets:
        refs.append(ScrapeFrontend.start(pipeline))
    if pipeline.alerts is not None:
        refs.append(AlertingFrontend.start(pipeline))
    if pipeline.config['pubsub']['bridge_enabled']:
        refs.append(BridgeFrontend.start(pipeline))
    logger.info('Started {} service actors'.format(len(refs)))
    return refs


def stop(refs):
    for ref in reversed(refs):
        ref.stop()
