# layeranat/cache.py
import logging
import threading
from typing import Optional

logger = logging.getLogger(__name__)

MAX_ENTRIES = 4096


class EvalCache:
    """
    In-process cache of evaluation results keyed by "model_fingerprint:eval_hash".

    A key names the exact weights and eval set, so entries never go stale;
    clear() drops entries by key prefix (e.g. one model fingerprint).
    """

    def __init__(self, max_entries: int = MAX_ENTRIES):
        self._entries: dict[str, float] = {}
        self._lock = threading.Lock()
        self.max_entries = max_entries

    def get(self, key: str) -> Optional[float]:
        """Gets a value from the cache by key."""
        with self._lock:
            value = self._entries.get(key)
        if value is not None:
            logger.debug(f"Cache hit for key: {key[:24]}")
        else:
            logger.debug(f"Cache miss for key: {key[:24]}")
        return value

    def set(self, key: str, value: float):
        with self._lock:
            if len(self._entries) >= self.max_entries:
                # Oldest insertion goes first
                self._entries.pop(next(iter(self._entries)))
            self._entries[key] = value

    def clear(self, prefix: str = ""):
        """Clears entries whose key starts with prefix (everything by default)."""
        with self._lock:
            keys = [key for key in self._entries if key.startswith(prefix)]
            for key in keys:
                del self._entries[key]
        if keys:
            logger.debug(f"Cleared {len(keys)} cache entries")

    def __len__(self) -> int:
        return len(self._entries)


ppl_cache = EvalCache()


def cache_key(fingerprint: str, eval_hash: str) -> str:
    return f"{fingerprint}:{eval_hash}"
