import hashlib
from pathlib import Path

from decouple import config

TOOL_VERSION = "0.3.0"

PACKAGE_DIR = Path(__file__).resolve().parent

# Bundled corpus, eval sentences and prompts live here unless overridden
DATA_DIR = Path(config("LAYERANAT_DATA_DIR", default=str(PACKAGE_DIR / "data")))

THREADS = config("LAYERANAT_THREADS", default=1, cast=int)
LOG_LEVEL = config("LAYERANAT_LOG_LEVEL", default="INFO")
SLOW_TESTS = config("LAYERANAT_SLOW_TESTS", default=False, cast=bool)

DEFAULT_CORPUS = DATA_DIR / "facts.txt"
DEFAULT_EVAL = DATA_DIR / "eval.txt"
DEFAULT_PROMPTS = DATA_DIR / "prompts.txt"


def stream_seed(root_seed: int, name: str) -> int:
    """
    Derives an independent seed for a named random stream.

    Each diagnostic draws from its own stream ("init", "data", "ablation",
    "ridge-sample", ...), so adding a new consumer never shifts the draws of
    an existing one.

    Args:
        root_seed (int): The run's root seed.
        name (str): Stream name.

    Returns:
        int: A 63-bit seed suitable for numpy.random.default_rng.
    """
    digest = hashlib.sha256(f"{root_seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def worker_count(requested: int | None = None) -> int:
    """Number of threads diagnostics may fan out to, capped by LAYERANAT_THREADS."""
    cap = max(1, THREADS)
    if requested is None:
        return cap
    return max(1, min(requested, cap))
