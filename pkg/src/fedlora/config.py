import os
import platform
from pathlib import Path

from packaging import version

from .utils.logging import get_logger


logger = get_logger(__name__)


PY_VERSION = version.parse(platform.python_version())

if PY_VERSION < version.parse("3.8"):
    logger.warning(f"fedlora is tested on Python 3.8 and later, running on {PY_VERSION}")

# Seed override applied on top of any loaded experiment configuration
FEDLORA_SEED = os.environ.get("FEDLORA_SEED", None)

# Default configuration shipped with the repository
DEFAULT_CONFIG_PATH = Path(__file__).resolve().parents[2] / "configs" / "default.toml"

# Protocol
AGGREGATOR_ID = -1
DEFAULT_CLIENT_TIMEOUT = 60.0
DEFAULT_REGISTRATION_TIMEOUT = 60.0
DEFAULT_LISTEN_ADDRESS = "127.0.0.1:8099"
MAX_FRAME_SIZE = 256 * 1024 * 1024

# Identity
DEFAULT_REWARD_PER_UPDATE = 10
PRIVATE_KEY_SUFFIX = "key"
PUBLIC_KEY_SUFFIX = "pub"

# File names
REGISTRY_FILENAME = "registry.json"
LEDGER_FILENAME = "ledger.jsonl"
MANIFEST_FILENAME = "manifest.json"
CONFIG_FILENAME = "config.toml"
COMPARISON_CSV_FILENAME = "comparison.csv"
COMPARISON_TEXT_FILENAME = "comparison.txt"
ROUND_LOG_FILENAME = "round_log.jsonl"
ROUND_SUMMARY_FILENAME = "round_summary.jsonl"
PCA_POINTS_FILENAME = "pca_points.csv"
PCA_VARIANCE_FILENAME = "pca_variance.csv"
REPORTS_DIRNAME = "reports"
ADAPTERS_DIRNAME = "adapters"
UPDATES_DIRNAME = "updates"
SHARDS_DIRNAME = "shards"


def seed_override():
    """Return the integer seed from `FEDLORA_SEED`, read at call time, or `None`."""
    value = os.environ.get("FEDLORA_SEED", FEDLORA_SEED)
    if value is None or value == "":
        return None
    try:
        return int(value)
    except ValueError:
        logger.warning(f"Ignoring FEDLORA_SEED={value}, it has to be an integer.")
        return None
