"""
Text, hashing and JSON helpers shared by the search modules.
"""

import hashlib
import json
import math
from typing import Any, Optional


TRUNCATION_MARKER = '[...truncated...]\n'


def truncate_tail(text: str, limit_bytes: int) -> str:
    """
    Keep the last `limit_bytes` bytes of `text` (UTF-8).
    Errors usually appear at the end of compiler and runtime logs, so the
    head is dropped. The marker counts against the limit.
    """
    if not text:
        return ''
    encoded = text.encode('utf-8')
    if len(encoded) <= limit_bytes:
        return text
    marker = TRUNCATION_MARKER.encode('utf-8')
    if limit_bytes <= len(marker):
        return encoded[len(encoded) - limit_bytes:].decode('utf-8', 'ignore')
    tail = encoded[len(encoded) - (limit_bytes - len(marker)):]
    return marker.decode('utf-8') + tail.decode('utf-8', 'ignore')


def truncate_head(text: str, limit_bytes: int) -> str:
    """Keep the first `limit_bytes` bytes of `text` (UTF-8)."""
    if not text:
        return ''
    encoded = text.encode('utf-8')
    if len(encoded) <= limit_bytes:
        return text
    return encoded[:limit_bytes].decode('utf-8', 'ignore')


def byte_length(text: str) -> int:
    return len(text.encode('utf-8'))


def canonical_json(value: Any) -> str:
    """Serialize with sorted keys and compact separators (stable bytes)."""
    return json.dumps(value, sort_keys=True, separators=(',', ':'), ensure_ascii=False, allow_nan=False)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def finite_or_none(value: Optional[float]) -> Optional[float]:
    """Map -inf/inf/NaN to None for JSON documents."""
    if value is None or not math.isfinite(value):
        return None
    return value


def redact(text: str, secret: Optional[str]) -> str:
    """Replace every occurrence of `secret` in `text`."""
    if not secret or not text:
        return text
    return text.replace(secret, '[REDACTED]')


def format_score(value: Optional[float]) -> str:
    if value is None or not math.isfinite(value):
        return '-'
    return f'{value:.2f}'
