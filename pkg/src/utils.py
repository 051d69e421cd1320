"""
Utility functions shared by the storage network modules
"""
import hashlib
import json
import threading
import time
from pathlib import Path
from typing import Any, Dict, List

import numpy as np

DIGEST_SIZE = 32
HEX_DIGITS = frozenset("0123456789abcdef")


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def is_object_id(value: Any) -> bool:
    """True for a 64-char lowercase hex digest"""
    return (
        isinstance(value, str)
        and len(value) == 2 * DIGEST_SIZE
        and all(c in HEX_DIGITS for c in value)
    )


def canonical_json(value: Any) -> bytes:
    """Sorted keys, no insignificant whitespace, UTF-8"""
    return json.dumps(
        value, sort_keys=True, separators=(',', ':'), ensure_ascii=False
    ).encode('utf-8')


class PerformanceMonitor:
    """Sliding window of handling latencies"""

    def __init__(self, window_size: int = 256):
        self.samples: List[float] = []
        self.window_size = window_size
        self.count = 0
        self.lock = threading.Lock()

    def record(self, elapsed_ms: float) -> None:
        with self.lock:
            self.count += 1
            self.samples.append(elapsed_ms)
            if len(self.samples) > self.window_size:
                self.samples.pop(0)

    def get_metrics(self) -> Dict[str, float]:
        with self.lock:
            if not self.samples:
                return {'count': self.count, 'avg_ms': 0.0, 'p95_ms': 0.0, 'max_ms': 0.0}
            window = np.asarray(self.samples)
            return {
                'count': self.count,
                'avg_ms': float(np.mean(window)),
                'p95_ms': float(np.percentile(window, 95)),
                'max_ms': float(np.max(window)),
            }


class TimeCounter:
    """Measure elapsed time"""

    def __init__(self):
        self.start_time = None

    def start(self) -> None:
        self.start_time = time.perf_counter()

    def elapsed_ms(self) -> float:
        if self.start_time is None:
            return 0.0
        return (time.perf_counter() - self.start_time) * 1000


def ensure_dir_exists(path: Path) -> None:
    Path(path).mkdir(parents=True, exist_ok=True)
