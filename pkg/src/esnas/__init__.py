"""Joint weight and architecture search for small RL policies with evolution strategies."""

from __future__ import annotations

__version__ = "0.1.0"
