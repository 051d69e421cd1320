"""
Event logging for the storage network: operational log plus a structured
JSON-lines event stream for protocol milestones
"""
import json
import logging
import threading
from collections import deque
from datetime import datetime
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Deque, Dict

from pythonjsonlogger import jsonlogger

from config.settings import (
    EVENT_BUFFER_SIZE, EVENT_LOG_FILE, LOG_BACKUP_COUNT, LOG_DIR,
    LOG_ENABLE_CONSOLE, LOG_ENABLE_FILE, LOG_FILE, LOG_LEVEL, LOG_MAX_FILE_SIZE
)


class EventLogger:
    """Logs protocol events with timestamps and keeps a bounded in-memory copy"""

    def __init__(self, name: str = "mtfs"):
        self.logger = logging.getLogger(name)
        self.logger.setLevel(LOG_LEVEL)
        self.logger.propagate = False
        self.events_log: Deque[Dict[str, Any]] = deque(maxlen=EVENT_BUFFER_SIZE)
        self.lock = threading.Lock()

        # Structured events go to their own logger so the JSON formatter
        # never sees plain operational messages
        self.event_stream = logging.getLogger(f"{name}.events")
        self.event_stream.setLevel(logging.INFO)
        self.event_stream.propagate = False

        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )

        if LOG_ENABLE_CONSOLE and not self.logger.handlers:
            console_handler = logging.StreamHandler()
            console_handler.setFormatter(formatter)
            self.logger.addHandler(console_handler)

        if LOG_ENABLE_FILE:
            LOG_DIR.mkdir(parents=True, exist_ok=True)
            file_handler = RotatingFileHandler(
                LOG_FILE, maxBytes=LOG_MAX_FILE_SIZE, backupCount=LOG_BACKUP_COUNT
            )
            file_handler.setFormatter(formatter)
            self.logger.addHandler(file_handler)

            event_handler = RotatingFileHandler(
                EVENT_LOG_FILE, maxBytes=LOG_MAX_FILE_SIZE, backupCount=LOG_BACKUP_COUNT
            )
            event_handler.setFormatter(
                jsonlogger.JsonFormatter('%(asctime)s %(name)s %(message)s')
            )
            self.event_stream.addHandler(event_handler)
        else:
            self.event_stream.addHandler(logging.NullHandler())

    def set_level(self, level: str) -> None:
        self.logger.setLevel(level)

    def log_event(self, event_type: str, data: Dict[str, Any]) -> None:
        """
        Record a protocol event

        Args:
            event_type: Event name (node_joined, object_stored, contract_committed, ...)
            data: JSON-serializable event details
        """
        event = {
            'timestamp': datetime.now().isoformat(),
            'event_type': event_type,
            'data': data
        }
        with self.lock:
            self.events_log.append(event)

        self.event_stream.info(event_type, extra={'event_type': event_type, 'data': data})

        if event_type.endswith('failed') or event_type.startswith('audit_failure'):
            self.logger.warning(f"{event_type}: {data}")
        else:
            self.logger.debug(f"{event_type}: {data}")

    def get_event_summary(self) -> Dict[str, int]:
        """Count buffered events per type"""
        summary: Dict[str, int] = {}
        with self.lock:
            for event in self.events_log:
                summary[event['event_type']] = summary.get(event['event_type'], 0) + 1
        return summary

    def export_events(self, export_path: Path) -> Path:
        """Export buffered events as a JSON array"""
        export_path = Path(export_path)
        export_path.parent.mkdir(parents=True, exist_ok=True)
        with self.lock:
            snapshot = list(self.events_log)
        with open(export_path, 'w') as f:
            json.dump(snapshot, f, indent=2)
        self.logger.info(f"Events exported to {export_path}")
        return export_path

    def clear(self) -> None:
        with self.lock:
            self.events_log.clear()


# Global logger instance
logger = EventLogger()
