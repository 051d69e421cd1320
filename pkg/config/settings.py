"""
Configuration settings for the MTFS private storage network
"""
import os
from pathlib import Path

# Project root
PROJECT_ROOT = Path(__file__).parent.parent

# Object Storage
CONVENTION_OBJECT_SIZE = 1024 * 1024  # 1 MiB, the base storage unit
HASH_ALGORITHM = "sha256"
MANIFEST_SUFFIX = "_mt"
CAPSULE_SUFFIX = "_capsule"
MANIFEST_VERSION = 1

# Overlay Settings
NEIGHBOR_K = 2  # Hops remembered by every node (must be >= 2)
DEDUP_CACHE_CAPACITY = 4096  # Broadcast msg_id LRU size
JOIN_MAX_ATTEMPTS = 8
CLUSTER_MAX_SIZE = 3
DEFAULT_LINK_RADIUS = 2

# Replication Settings
REPLICATION_FACTOR = 3
CHALLENGE_SIZE = 32  # Nonce bytes
AUDIT_PERIOD_S = 60

# Ledger Settings
BLOCK_INTERVAL_S = 1.0
BLOCK_MAX_TXS = 16
LEDGER_PORT = 7718
LEDGER_FILE_NAME = "chain.dat"

# Transport Settings
DEFAULT_PORT = 7717
DEFAULT_HOST = "127.0.0.1"
BACKOFF_BASE_MS = 200
BACKOFF_CAP_S = 10
BACKOFF_ATTEMPTS = 6
REQUEST_TIMEOUT_S = 30
MAX_FRAME_SIZE = 8 * 1024 * 1024

# Simulation Settings
SIM_DEFAULT_SEED = 7
SIM_DEFAULT_LATENCY_MS = 10.0
SIM_MAX_EVENTS = 50_000_000

# Logging Settings
LOG_DIR = Path(os.environ.get("MTFS_LOG_DIR", PROJECT_ROOT / "logs"))
LOG_FILE = LOG_DIR / "mtfs.log"
EVENT_LOG_FILE = LOG_DIR / "mtfs_events.jsonl"
LOG_LEVEL = os.environ.get("MTFS_LOG_LEVEL", "WARNING")
LOG_ENABLE_FILE = os.environ.get("MTFS_LOG_TO_FILE", "0") == "1"
LOG_ENABLE_CONSOLE = True
LOG_MAX_FILE_SIZE = 10485760  # 10MB
LOG_BACKUP_COUNT = 5
EVENT_BUFFER_SIZE = 10000  # Events kept in memory for summaries

# Directory Paths
DATA_DIR = Path(os.environ.get("MTFS_DATA_DIR", PROJECT_ROOT / "data"))
IDENTITY_FILE = Path(os.environ.get("MTFS_IDENTITY", DATA_DIR / "identity.json"))
CONFIG_FILE_NAME = "mtfs.toml"

# Environment variable names read by the CLI layer
ENV_DATA_DIR = "MTFS_DATA_DIR"
ENV_ENTRY = "MTFS_ENTRY"
ENV_IDENTITY = "MTFS_IDENTITY"
ENV_LEDGER = "MTFS_LEDGER"
