import logging
import random
from pathlib import Path
from typing import Tuple, Union

import requests
from requests.adapters import HTTPAdapter
from urllib3.util.retry import Retry

from .util import is_https_url, log_http_error

RETRY_STATUS_CODES = (429, 500, 502, 503, 504)
DEFAULT_USER_AGENT = 'StructLearn-SSL dataset fetcher'
CHUNK_SIZE = 1 << 16

logger = logging.getLogger(__name__)


class RetryWithJitter(Retry):
    """ Retry whose exponential backoff gets a random jitter added to each sleep """

    def __init__(self, jitter: Tuple[float, float] = None, *args, **kwargs):
        self._jitter = jitter
        super().__init__(*args, **kwargs)

    def new(self, **kwargs):
        retry = super().new(**kwargs)
        retry._jitter = self._jitter
        return retry

    def get_backoff_time(self):
        value = super().get_backoff_time()
        if self._jitter is not None and value > 0:
            return value + random.uniform(*self._jitter)
        return value

    def increment(self, method=None, url=None, *args, **kwargs):
        next_retry = super().increment(method, url, *args, **kwargs)

        log_message = {
            "message": "Download interrupted, backing off.",
            "url": url,
            "attempt": len(next_retry.history),
            "retries_remaining": next_retry.total,
        }
        response = kwargs.get('response')
        if response is not None:
            log_message['status'] = getattr(response, 'status', None)
            log_message['reason'] = getattr(response, 'reason', None)

        logger.warning(log_message)
        return next_retry


def download_session(total: int = 5, backoff_factor: float = .5, jitter=(0, .25),
                     user_agent: str = DEFAULT_USER_AGENT) -> requests.Session:
    """ A session whose GETs retry connection errors and 429/5XX responses with jittered backoff """
    retry_config = RetryWithJitter(
        total=total,
        connect=total,
        read=total,
        backoff_factor=backoff_factor,
        jitter=jitter,
        status_forcelist=RETRY_STATUS_CODES,
        allowed_methods=frozenset(['GET', 'HEAD']),
        raise_on_status=False,
    )

    session = requests.Session()
    session.headers['User-Agent'] = user_agent
    adapter = HTTPAdapter(max_retries=retry_config)
    session.mount('http://', adapter)
    session.mount('https://', adapter)
    return session


def download_file(url: str, destination: Union[str, Path], session: requests.Session = None,
                  timeout: float = 60) -> Path:
    """Stream ``url`` into ``destination``; the file only appears once the body is complete."""
    if not is_https_url(url):
        logger.warning("Downloading over an unencrypted connection: %s", url)
    session = session or download_session()
    destination = Path(destination)
    partial = destination.with_name(destination.name + '.part')

    try:
        with session.get(url, stream=True, timeout=timeout) as r:
            log_http_error(r)
            with open(partial, 'wb') as f:
                for chunk in r.iter_content(chunk_size=CHUNK_SIZE):
                    f.write(chunk)
    except Exception:
        partial.unlink(missing_ok=True)
        raise
    partial.replace(destination)

    logger.info({"message": "Downloaded file.", "url": url, "path": str(destination),
                 "bytes": destination.stat().st_size})
    return destination
