import logging
from pathlib import Path
from typing import Union
from urllib.parse import urlparse

import pendulum
from requests import Response, RequestException

logger = logging.getLogger(__name__)


def log_http_error(r: Response):
    """ Log any 4XX/5XX error responses and re-raise """
    try:
        r.raise_for_status()
    except RequestException as e:
        log_level = logging.INFO if r.status_code < 500 else logging.ERROR
        logger.log(log_level, {
            "message": "Download failed.",
            "url": r.url,
            "status": r.status_code,
            "reason": r.reason,
        })
        raise e


def is_https_url(url: str) -> bool:
    return urlparse(url).scheme.lower() == 'https'


def utc_timestamp() -> str:
    """Current time as an ISO-8601 UTC string."""
    return pendulum.now('UTC').to_iso8601_string()


def format_duration(seconds: float) -> str:
    """Human-readable duration, e.g. ``'1 minute 12 seconds'``."""
    if seconds < 1:
        return f"{seconds * 1000:.1f} ms"
    return pendulum.duration(seconds=round(seconds)).in_words()


def ensure_dir(path: Union[str, Path]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path
