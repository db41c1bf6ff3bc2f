"""Layer anatomy lab: a numpy transformer with layer diagnostics and growth training."""

from .settings import TOOL_VERSION

__version__ = TOOL_VERSION
