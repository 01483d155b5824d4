"""Cross-market peer-momentum factor research engine.

Whitened disclosure-embedding similarity graphs, lagged peer-momentum factors,
neutralized quintile backtests and event-conditioned spillover studies.
"""

from __future__ import annotations

__version__ = "0.1.0"
