"""Small shared helpers: canonical serialization and config digests."""

import dataclasses
import enum
import hashlib
import json

import numpy as np


def as_plain_data(obj):
    """Recursively convert dataclasses, enums, and arrays to JSON-friendly values."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: as_plain_data(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, dict):
        return {str(k): as_plain_data(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [as_plain_data(v) for v in obj]
    return obj


def config_hash(obj) -> str:
    """Stable 12-hex-digit digest of a configuration object."""
    blob = json.dumps(as_plain_data(obj), sort_keys=True).encode("utf-8")
    return hashlib.sha1(blob).hexdigest()[:12]
